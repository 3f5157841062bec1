//! The two-pathway encoder, its classification heads and late fusion.
//!
//! Each branch runs `conv3d(3×3×3, pad 1) → layer norm → SiLU` per stage.
//! After stage 1 the fusion module exchanges information between the
//! branches; every later stage sees `[lateral; own]` channels. When the
//! exchange does not run (single-branch stages, or fusion disabled) the
//! lateral slots are zero, so parameter shapes never depend on the stage.
//!
//! Heads: global max pooling of the last feature map to `(N, C)`, then two
//! parallel affine maps give the embedding `(N, D)` and the logits `(N, K)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Tape, Var};
use crate::params::{he_normal, lecun_normal, ParamStore, ParamVars};
use crate::rng::stream;
use crate::synthgen::GenConfig;
use crate::tensor::Tensor;
use crate::xfuse::{self, FusionConfig, FusionDims, FusionVars};

const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-5;

/// Which branches a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    RgbOnly,
    PoseOnly,
    Joint,
}

impl Stage {
    pub fn has_rgb(self) -> bool {
        self != Stage::PoseOnly
    }

    pub fn has_pose(self) -> bool {
        self != Stage::RgbOnly
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::RgbOnly => "rgb",
            Stage::PoseOnly => "pose",
            Stage::Joint => "joint",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" | "rgb_only" => Ok(Self::RgbOnly),
            "pose" | "pose_only" => Ok(Self::PoseOnly),
            "joint" => Ok(Self::Joint),
            _ => Err(Error::validation(format!(
                "stage {s:?} (expected rgb, pose or joint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub temporal_strides: Vec<usize>,
    pub spatial_strides: Vec<usize>,
    /// Embedding width `D`.
    pub embed_dim: usize,
}

impl BranchConfig {
    pub fn with_inputs(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_channels: vec![16, 32],
            temporal_strides: vec![2, 2],
            spatial_strides: vec![2, 2],
            embed_dim: 64,
        }
    }

    /// Channel count `C` of the last feature map.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.in_channels)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(Error::validation(format!("{name}: at least one stage")));
        }
        if self.temporal_strides.len() != n || self.spatial_strides.len() != n {
            return Err(Error::validation(format!(
                "{name}: {n} stages but {} temporal and {} spatial strides",
                self.temporal_strides.len(),
                self.spatial_strides.len()
            )));
        }
        let all = [self.in_channels, self.embed_dim]
            .into_iter()
            .chain(self.stage_channels.iter().copied())
            .chain(self.temporal_strides.iter().copied())
            .chain(self.spatial_strides.iter().copied());
        for v in all {
            if v == 0 {
                return Err(Error::validation(format!(
                    "{name}: channels, strides and embed_dim must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Clip geometry fed to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputGeom {
    pub t_rgb: usize,
    pub t_pose: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input: InputGeom,
    pub num_classes: usize,
    pub rgb: BranchConfig,
    pub pose: BranchConfig,
    pub fusion: FusionConfig,
}

/// Feature-map shape `(C, T, H, W)` after each stage of one branch.
pub type StageShapes = Vec<[usize; 4]>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    pub rgb: StageShapes,
    pub pose: StageShapes,
    /// `T_pose / T_rgb`, identical after every stage.
    pub stride_ratio: usize,
}

fn conv_out(len: usize, stride: usize) -> Result<usize> {
    ConvGeom::new([stride; 3], [KERNEL / 2; 3])
        .out_len(0, len, KERNEL)
        .ok_or_else(|| Error::validation(format!("length {len} too short for the stage kernel")))
}

impl NetConfig {
    /// Default toy network for clips produced with `gen`.
    pub fn for_dataset(gen: &GenConfig) -> Self {
        Self {
            input: InputGeom {
                t_rgb: gen.t_rgb,
                t_pose: gen.t_pose,
                height: gen.height,
                width: gen.width,
            },
            num_classes: gen.num_classes,
            rgb: BranchConfig::with_inputs(3),
            pose: BranchConfig::with_inputs(gen.n_joints),
            fusion: FusionConfig::default(),
        }
    }

    /// Default toy network for clips of the given `(C, T, H, W)` shapes.
    pub fn for_clips(rgb: [usize; 4], pose: [usize; 4], num_classes: usize) -> Result<Self> {
        if rgb[2..] != pose[2..] {
            return Err(Error::shape(format!(
                "rgb frames {:?} and pose frames {:?} differ in size",
                &rgb[2..],
                &pose[2..]
            )));
        }
        Ok(Self {
            input: InputGeom {
                t_rgb: rgb[1],
                t_pose: pose[1],
                height: rgb[2],
                width: rgb[3],
            },
            num_classes,
            rgb: BranchConfig::with_inputs(rgb[0]),
            pose: BranchConfig::with_inputs(pose[0]),
            fusion: FusionConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    /// Shape inference through both branches, enforcing the temporal contract.
    pub fn plan(&self) -> Result<ShapePlan> {
        self.rgb.validate("rgb branch")?;
        self.pose.validate("pose branch")?;
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be at least 2"));
        }
        if self.rgb.stage_channels.len() != self.pose.stage_channels.len() {
            return Err(Error::validation("both branches need the same number of stages"));
        }
        if self.fusion.hidden == 0 || self.fusion.lateral_channels == 0 {
            return Err(Error::validation("fusion hidden and lateral channels must be positive"));
        }
        let g = self.input;
        if g.t_rgb == 0 || g.t_pose == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::validation("input dimensions must be positive"));
        }
        let walk = |b: &BranchConfig, t: usize| -> Result<StageShapes> {
            let (mut t, mut h, mut w) = (t, g.height, g.width);
            let mut out = Vec::new();
            for ((&c, &ts), &ss) in b
                .stage_channels
                .iter()
                .zip(&b.temporal_strides)
                .zip(&b.spatial_strides)
            {
                t = conv_out(t, ts)?;
                h = conv_out(h, ss)?;
                w = conv_out(w, ss)?;
                out.push([c, t, h, w]);
            }
            Ok(out)
        };
        let rgb = walk(&self.rgb, g.t_rgb)?;
        let pose = walk(&self.pose, g.t_pose)?;
        let ratio = pose[0][1] / rgb[0][1];
        for (i, (r, p)) in rgb.iter().zip(&pose).enumerate() {
            if p[1] != ratio * r[1] || ratio == 0 {
                return Err(Error::validation(format!(
                    "temporal contract violated after stage {}: rgb T={}, pose T={}",
                    i + 1,
                    r[1],
                    p[1]
                )));
            }
            if p[2..] != r[2..] {
                return Err(Error::validation(format!(
                    "spatial sizes differ after stage {}: rgb {:?}, pose {:?}",
                    i + 1,
                    &r[2..],
                    &p[2..]
                )));
            }
        }
        Ok(ShapePlan {
            rgb,
            pose,
            stride_ratio: ratio,
        })
    }

    pub fn fusion_dims(&self) -> Result<FusionDims> {
        let plan = self.plan()?;
        Ok(FusionDims {
            c_rgb: plan.rgb[0][0],
            c_pose: plan.pose[0][0],
            t_common: plan.rgb[0][1],
            stride_ratio: plan.stride_ratio,
        })
    }

    fn branch(&self, name: &str) -> &BranchConfig {
        if name == "rgb" {
            &self.rgb
        } else {
            &self.pose
        }
    }

    fn stage_in_channels(&self, name: &str, i: usize) -> usize {
        let b = self.branch(name);
        match i {
            0 => b.in_channels,
            1 => b.stage_channels[0] + self.fusion.lateral_channels,
            _ => b.stage_channels[i - 1],
        }
    }
}

pub const BRANCHES: [&str; 2] = ["rgb", "pose"];

/// Fresh parameters for both branches, the heads and the fusion module.
/// Every tensor draws from its own stream, so adding one never shifts another.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    let dims = cfg.fusion_dims()?;
    let mut store = ParamStore::new();
    for b in BRANCHES {
        let bc = cfg.branch(b);
        for (i, &co) in bc.stage_channels.iter().enumerate() {
            let ci = cfg.stage_in_channels(b, i);
            let p = format!("{b}.stage{}", i + 1);
            let shape = [co, ci, KERNEL, KERNEL, KERNEL];
            let w = he_normal(&mut stream(seed, &format!("{p}.conv")), &shape, ci * KERNEL.pow(3));
            store.insert(format!("{p}.conv.weight"), w);
            store.insert(format!("{p}.conv.bias"), Tensor::zeros(&[co]));
            store.insert(format!("{p}.norm.gamma"), Tensor::full(&[co], 1.0));
            store.insert(format!("{p}.norm.beta"), Tensor::zeros(&[co]));
        }
        let c = bc.feature_dim();
        let mut rng = stream(seed, &format!("{b}.embed"));
        store.insert(format!("{b}.embed.weight"), lecun_normal(&mut rng, &[bc.embed_dim, c], c));
        store.insert(format!("{b}.embed.bias"), Tensor::zeros(&[bc.embed_dim]));
        let mut rng = stream(seed, &format!("{b}.cls"));
        store.insert(format!("{b}.cls.weight"), lecun_normal(&mut rng, &[cfg.num_classes, c], c));
        store.insert(format!("{b}.cls.bias"), Tensor::zeros(&[cfg.num_classes]));
    }
    xfuse::init_params(&mut store, &cfg.fusion, &dims, &mut stream(seed, "xfuse"));
    Ok(store)
}

/// Resets the fusion module to a fresh draw, leaving everything else alone.
pub fn reinit_fusion(store: &mut ParamStore, cfg: &NetConfig, seed: u64) -> Result<()> {
    let fresh = init_params(cfg, seed)?;
    store.copy_prefix(&fresh, "xfuse.")?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// Last feature map `(N, C, T′, H′, W′)`.
    pub feat: Var,
    /// `(N, D)`.
    pub embed: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub rgb: Option<BranchVars>,
    pub pose: Option<BranchVars>,
    pub fusion: Option<FusionVars>,
}

impl NetVars {
    pub fn branch(&self, name: &str) -> Option<BranchVars> {
        if name == "rgb" {
            self.rgb
        } else {
            self.pose
        }
    }
}

fn conv_block(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var, ts: usize, ss: usize) -> Result<Var> {
    let g = |n: &str| vars.get(&format!("{prefix}.{n}"));
    let geom = ConvGeom::new([ts, ss, ss], [KERNEL / 2; 3]);
    let y = tape.conv3d(x, g("conv.weight")?, g("conv.bias")?, geom)?;
    let y = tape.layer_norm(y, g("norm.gamma")?, g("norm.beta")?, NORM_EPS)?;
    let y = tape.silu(y);
    tape.check_finite(y, prefix)?;
    Ok(y)
}

fn check_input(x: &Tensor, name: &str, c: usize, t: usize, g: &InputGeom) -> Result<()> {
    let s = x.shape();
    if s.len() != 5 || s[0] == 0 || s[1..] != [c, t, g.height, g.width] {
        return Err(Error::shape(format!(
            "{name} input {s:?}, expected (N, {c}, {t}, {}, {})",
            g.height, g.width
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            name: format!("{name} input"),
        });
    }
    Ok(())
}

fn zeros_like_lateral(tape: &mut Tape, x: Var, lateral: usize) -> Var {
    let s = tape.value(x).shape();
    let shape = [s[0], lateral, s[2], s[3], s[4]];
    tape.constant(Tensor::zeros(&shape))
}

/// Forward pass on `tape`. Inputs are `(N, C, T, H, W)`; the branch not in
/// `stage` may be `None`.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &NetConfig,
    rgb: Option<&Tensor>,
    pose: Option<&Tensor>,
    stage: Stage,
) -> Result<NetVars> {
    let plan = cfg.plan()?;
    let mut inputs: [Option<Var>; 2] = [None, None];
    for (slot, (name, x, bc, t)) in inputs.iter_mut().zip([
        ("rgb", rgb, &cfg.rgb, cfg.input.t_rgb),
        ("pose", pose, &cfg.pose, cfg.input.t_pose),
    ]) {
        let wanted = if name == "rgb" { stage.has_rgb() } else { stage.has_pose() };
        if !wanted {
            continue;
        }
        let x = x.ok_or_else(|| Error::validation(format!("stage {stage} needs {name} clips")))?;
        check_input(x, name, bc.in_channels, t, &cfg.input)?;
        *slot = Some(tape.constant(x.clone()));
    }
    if let (Some(r), Some(p)) = (inputs[0], inputs[1]) {
        if tape.value(r).shape()[0] != tape.value(p).shape()[0] {
            return Err(Error::shape("rgb and pose batch sizes differ"));
        }
    }

    let mut h: [Option<Var>; 2] = [None, None];
    for (i, b) in BRANCHES.iter().enumerate() {
        if let Some(x) = inputs[i] {
            let bc = cfg.branch(b);
            h[i] = Some(conv_block(
                tape,
                vars,
                &format!("{b}.stage1"),
                x,
                bc.temporal_strides[0],
                bc.spatial_strides[0],
            )?);
        }
    }

    let mut fusion = None;
    let lateral = cfg.fusion.lateral_channels;
    match (h[0], h[1]) {
        (Some(r), Some(p)) if cfg.fusion.enabled => {
            let fv = xfuse::exchange(tape, vars, &cfg.fusion, &cfg.fusion_dims()?, r, p)?;
            h = [Some(fv.out_rgb), Some(fv.out_pose)];
            fusion = Some(fv);
        }
        _ => {
            for x in h.iter_mut().flatten() {
                let z = zeros_like_lateral(tape, *x, lateral);
                *x = tape.concat_channels(&[z, *x])?;
            }
        }
    }

    let mut out: [Option<BranchVars>; 2] = [None, None];
    for (i, b) in BRANCHES.iter().enumerate() {
        let Some(mut x) = h[i] else { continue };
        let bc = cfg.branch(b);
        for s in 1..bc.stage_channels.len() {
            x = conv_block(
                tape,
                vars,
                &format!("{b}.stage{}", s + 1),
                x,
                bc.temporal_strides[s],
                bc.spatial_strides[s],
            )?;
        }
        let expected = if i == 0 { &plan.rgb } else { &plan.pose };
        let last = expected.last().expect("validated");
        debug_assert_eq!(&tape.value(x).shape()[1..], last);
        let pooled = tape.max_pool_trailing(x, 2)?;
        let g = |n: &str| vars.get(&format!("{b}.{n}"));
        let embed = tape.linear(pooled, g("embed.weight")?, g("embed.bias")?)?;
        let logits = tape.linear(pooled, g("cls.weight")?, g("cls.bias")?)?;
        tape.check_finite(logits, &format!("{b}.logits"))?;
        let probs = tape.softmax_last(logits);
        out[i] = Some(BranchVars {
            feat: x,
            embed,
            logits,
            probs,
        });
    }
    Ok(NetVars {
        rgb: out[0],
        pose: out[1],
        fusion,
    })
}

/// Values of one branch after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub feat_map: Tensor,
    pub embed: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl BranchOutput {
    fn read(tape: &Tape, v: BranchVars) -> Self {
        Self {
            feat_map: tape.value(v.feat).clone(),
            embed: tape.value(v.embed).clone(),
            logits: tape.value(v.logits).clone(),
            probs: tape.value(v.probs).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    pub rgb: Option<BranchOutput>,
    pub pose: Option<BranchOutput>,
}

impl EncodeOutput {
    /// Late-fused probabilities, or the single branch's when only one ran.
    pub fn fused_probs(&self) -> Result<Tensor> {
        match (&self.rgb, &self.pose) {
            (Some(r), Some(p)) => fuse_probs(&r.probs, &p.probs),
            (Some(b), None) | (None, Some(b)) => Ok(b.probs.clone()),
            (None, None) => Err(Error::validation("no branch ran")),
        }
    }
}

/// Value-only forward pass.
pub fn encode(
    params: &ParamStore,
    cfg: &NetConfig,
    rgb: Option<&Tensor>,
    pose: Option<&Tensor>,
    stage: Stage,
) -> Result<EncodeOutput> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let nv = forward(&mut tape, &vars, cfg, rgb, pose, stage)?;
    Ok(EncodeOutput {
        rgb: nv.rgb.map(|v| BranchOutput::read(&tape, v)),
        pose: nv.pose.map(|v| BranchOutput::read(&tape, v)),
    })
}

/// Elementwise mean of two probability matrices.
pub fn fuse_probs(p_rgb: &Tensor, p_pose: &Tensor) -> Result<Tensor> {
    if p_rgb.shape() != p_pose.shape() || p_rgb.ndim() != 2 {
        return Err(Error::shape(format!(
            "fuse_probs: {:?} vs {:?}",
            p_rgb.shape(),
            p_pose.shape()
        )));
    }
    let data = p_rgb
        .data()
        .iter()
        .zip(p_pose.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Tensor::new(p_rgb.shape().to_vec(), data)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[t.ndim() - 1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn top1_accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("top1_accuracy on an empty batch"));
    }
    if probs.ndim() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "top1_accuracy: probs {:?} for {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let k = probs.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
    }
    let hits = argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
