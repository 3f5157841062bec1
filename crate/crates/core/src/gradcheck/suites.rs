//! Fixed small instances: batch 6, 3 classes, embedding 8, fusion hidden
//! channels 5 over 4 common frames.

use crate::error::Result;
use crate::graph::Tape;
use crate::net::{forward, init_params, BranchConfig, InputGeom, NetConfig, Stage, BRANCHES};
use crate::params::{ParamStore, ParamVars};
use crate::protoref::{ambiguous_centers, partition_batch, proto_loss_on_tape, PrototypeBank};
use crate::rng::{normal_tensor, stream};
use crate::tensor::Tensor;
use crate::xfuse::{self, FusionConfig, FusionDims};

use super::{check, Coverage, GradCheckReport};

pub const BATCH: usize = 6;
pub const CLASSES: usize = 3;
pub const EMBED: usize = 8;
pub const HIDDEN: usize = 5;
pub const FRAMES: usize = 4;

const TAU: f64 = 0.1;
const ALPHA: f64 = 0.5;

fn randn(seed: u64, tag: &str, shape: &[usize]) -> Tensor {
    normal_tensor(&mut stream(seed, tag), shape, 1.0)
}

fn labels() -> Vec<usize> {
    (0..BATCH).map(|i| i % CLASSES).collect()
}

fn bank(seed: u64, tag: &str) -> Result<PrototypeBank> {
    PrototypeBank::random(CLASSES, EMBED, 0.9, &mut stream(seed, tag))
}

/// Cross-entropy through a linear classifier over pooled embeddings.
pub fn cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let inputs = [
        randn(seed, "ce/embed", &[BATCH, EMBED]),
        randn(seed, "ce/weight", &[CLASSES, EMBED]),
        randn(seed, "ce/bias", &[CLASSES]),
    ];
    let labels = labels();
    check("cross-entropy", &inputs, Coverage::All, |tape, v| {
        let logits = tape.linear(v[0], v[1], v[2])?;
        tape.cross_entropy(logits, &labels)
    })
}

/// Prototype refinement loss over embeddings and logits.
pub fn prototype_refinement(seed: u64) -> Result<GradCheckReport> {
    let feats = randn(seed, "pr/embed", &[BATCH, EMBED]);
    let mut logits = randn(seed, "pr/logits", &[BATCH, CLASSES]);
    // two confident mistakes among otherwise correct rows guarantee anchors
    let labels = labels();
    for (i, &y) in labels.iter().enumerate() {
        let target = if i == 0 || i == 4 { (y + 1) % CLASSES } else { y };
        logits.data_mut()[i * CLASSES + target] += 4.0;
    }
    let bank = bank(seed, "pr/bank")?;
    let part = ambiguous_centers(partition_batch(&logits, &labels)?, &feats)?;
    check("prototype refinement", &[feats, logits], Coverage::All, |tape, v| {
        let probs = tape.softmax_last(v[1]);
        Ok(proto_loss_on_tape(tape, v[0], probs, &bank, &part, TAU)?.0)
    })
}

/// Cross-modal exchange with every fusion parameter randomized so the gate
/// and lateral paths carry gradient. The scalar is a fixed random projection
/// of both outputs.
pub fn fusion(seed: u64) -> Result<GradCheckReport> {
    let cfg = FusionConfig {
        hidden: HIDDEN,
        lateral_channels: 2,
        ..FusionConfig::default()
    };
    let dims = FusionDims {
        c_rgb: 4,
        c_pose: 3,
        t_common: FRAMES,
        stride_ratio: 2,
    };
    let mut store = ParamStore::new();
    xfuse::init_params(&mut store, &cfg, &dims, &mut stream(seed, "fx/init"));
    // key biases shift every score of a query row equally, so softmax
    // cancels them and their exact gradient is zero; they stay fixed
    let (names, fixed): (Vec<String>, Vec<String>) = store
        .iter()
        .map(|(n, _)| n.clone())
        .partition(|n| !is_key_bias(n));
    let draw = |n: &String| normal_tensor(&mut stream(seed, n), store.get(n).unwrap().shape(), 0.5);
    let mut inputs: Vec<Tensor> = names.iter().map(draw).collect();
    let fixed: Vec<(String, Tensor)> = fixed.iter().map(|n| (n.clone(), draw(n))).collect();
    let (hw, n) = (3, BATCH);
    let x_rgb = randn(seed, "fx/rgb", &[n, dims.c_rgb, FRAMES, hw, hw]);
    let x_pose = randn(seed, "fx/pose", &[n, dims.c_pose, 2 * FRAMES, hw, hw]);
    let probe_rgb = randn(seed, "fx/probe_rgb", &[n, dims.c_rgb + 2, FRAMES, hw, hw]);
    let probe_pose = randn(seed, "fx/probe_pose", &[n, dims.c_pose + 2, 2 * FRAMES, hw, hw]);
    inputs.push(x_rgb);
    inputs.push(x_pose);
    let np = names.len();
    check("fusion", &inputs, Coverage::Strided(12), |tape, v| {
        let mut vars: ParamVars = names.iter().cloned().zip(v[..np].iter().copied()).collect();
        for (n, t) in &fixed {
            let c = tape.constant(t.clone());
            vars.set(n.clone(), c);
        }
        let fv = xfuse::exchange(tape, &vars, &cfg, &dims, v[np], v[np + 1])?;
        let a = tape.dot(fv.out_rgb, probe_rgb.clone())?;
        let b = tape.dot(fv.out_pose, probe_pose.clone())?;
        tape.add(a, b)
    })
}

fn is_key_bias(name: &str) -> bool {
    name.starts_with("xfuse.k_") && name.ends_with(".bias")
}

/// Network whose fusion point matches the suite dimensions.
pub fn composite_net() -> NetConfig {
    let branch = |c| BranchConfig {
        in_channels: c,
        stage_channels: vec![4, 6],
        temporal_strides: vec![2, 1],
        spatial_strides: vec![2, 1],
        embed_dim: EMBED,
    };
    NetConfig {
        input: InputGeom {
            t_rgb: 2 * FRAMES,
            t_pose: 4 * FRAMES,
            height: 4,
            width: 4,
        },
        num_classes: CLASSES,
        rgb: branch(3),
        pose: branch(2),
        fusion: FusionConfig {
            hidden: HIDDEN,
            lateral_channels: 2,
            ..FusionConfig::default()
        },
    }
}

/// `Σ_b CE_b + α Σ_b L_PR,b` through the whole joint network, with the
/// batch partition and centers frozen at the unperturbed point.
pub fn composite(seed: u64) -> Result<GradCheckReport> {
    let cfg = composite_net();
    let mut params = init_params(&cfg, seed)?;
    // the zero-initialized fusion outputs would hide their own gradients
    for (name, t) in params.iter_mut() {
        if name.starts_with("xfuse.") {
            *t = normal_tensor(&mut stream(seed, name), t.shape(), 0.3);
        }
    }
    let i = cfg.input;
    let rgb = randn(seed, "cx/rgb", &[BATCH, 3, i.t_rgb, i.height, i.width]);
    let pose = randn(seed, "cx/pose", &[BATCH, 2, i.t_pose, i.height, i.width]);
    let labels = labels();

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let out = forward(&mut tape, &vars, &cfg, Some(&rgb), Some(&pose), Stage::Joint)?;
    let mut refine = Vec::new();
    for b in BRANCHES {
        let bv = out.branch(b).expect("joint stage runs both branches");
        let part = partition_batch(tape.value(bv.probs), &labels)?;
        let part = ambiguous_centers(part, tape.value(bv.embed))?;
        refine.push((b, bank(seed, &format!("cx/bank/{b}"))?, part));
    }

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check("composite", &values, Coverage::Strided(4), |tape, vs| {
        let vars: ParamVars = names.iter().cloned().zip(vs.iter().copied()).collect();
        let out = forward(tape, &vars, &cfg, Some(&rgb), Some(&pose), Stage::Joint)?;
        let mut total = None;
        for (b, bank, part) in &refine {
            let bv = out.branch(b).expect("joint stage runs both branches");
            let ce = tape.cross_entropy(bv.logits, &labels)?;
            let (pr, _) = proto_loss_on_tape(tape, bv.embed, bv.probs, bank, part, TAU)?;
            let pr = tape.scale(pr, ALPHA);
            let term = tape.add(ce, pr)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("two branches"))
    })
}

/// Every suite in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        cross_entropy(seed)?,
        prototype_refinement(seed)?,
        fusion(seed)?,
        composite(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_net_fuses_at_suite_dims() {
        let d = composite_net().fusion_dims().unwrap();
        assert_eq!((d.t_common, d.stride_ratio), (FRAMES, 2));
    }

    #[test]
    fn key_bias_does_not_move_attention() {
        let cfg = FusionConfig {
            hidden: HIDDEN,
            ..FusionConfig::default()
        };
        let dims = FusionDims {
            c_rgb: 4,
            c_pose: 3,
            t_common: FRAMES,
            stride_ratio: 2,
        };
        let mut store = ParamStore::new();
        xfuse::init_params(&mut store, &cfg, &dims, &mut stream(3, "init"));
        let x_rgb = randn(3, "rgb", &[2, 4, FRAMES, 2, 2]);
        let x_pose = randn(3, "pose", &[2, 3, 2 * FRAMES, 2, 2]);
        let before = xfuse::fuse_features(&store, &cfg, &dims, &x_rgb, &x_pose).unwrap();
        for m in ["rgb", "pose"] {
            *store.get_mut(&format!("xfuse.k_{m}.bias")).unwrap() = randn(3, m, &[FRAMES]);
        }
        let after = xfuse::fuse_features(&store, &cfg, &dims, &x_rgb, &x_pose).unwrap();
        assert!(before.weights_rgb.max_abs_diff(&after.weights_rgb) < 1e-12);
        assert!(before.weights_pose.max_abs_diff(&after.weights_pose) < 1e-12);
    }

    #[test]
    fn all_suites_pass() {
        for r in run_all(0).unwrap() {
            assert!(r.checked > 0, "{}", r.name);
            assert!(r.passed(), "{}: {:e} at {:?}", r.name, r.max_rel_err, r.worst);
        }
    }
}
