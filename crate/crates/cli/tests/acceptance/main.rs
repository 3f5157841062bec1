//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any gated criterion fails. Criteria 6 and 7 train real toy
//! models through the `mgproto` binary and take a few minutes.

mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use mgproto::graph::Tape;
use mgproto::net::fuse_probs;
use mgproto::params::ParamStore;
use mgproto::protoref::{
    ambiguous_centers, partition_batch, partition_from_preds, proto_loss, update_prototypes, PrototypeBank,
};
use mgproto::rng::{normal_tensor, stream};
use mgproto::tensorio::{decode_tensor, encode_tensor, read_predictions, read_tensor, write_predictions, write_tensor, PredictionFile, Split};
use mgproto::trainer::{ensemble, lr_at, TrainConfig};
use mgproto::xfuse::{self, channel_cross_attention, AttentionSource, AttnVars, FusionConfig, FusionDims};
use mgproto::{Tensor, TensorBlob};
use mgproto_cli::commands::eval_split;
use rand::Rng as _;

use oracles::Mat;

const GRAD_REL_ERR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GRAD_DIMS: [usize; 5] = [6, 3, 8, 5, 4];
const ATTN_TOL: f64 = 1e-6;
const PR_TOL: f64 = 1e-10;
const INSTANCES: u64 = 100;
const TOY_SEED: u64 = 7;
const TOY_EPOCHS: usize = 30;
const TOY_TRAIN_MIN: f64 = 0.95;
const TOY_TEST_MIN: f64 = 0.90;
const TOY_BUDGET: Duration = Duration::from_secs(600);
const DELTA_SEEDS: &str = "1,2,3";
const ROW_TOL: f64 = 1e-5;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/golden_2x3.mgt");
const GOLDEN_BITS: [u32; 6] = [0x3f80_0000, 0xc020_0000, 0x3dcc_cccd, 0x0080_0000, 0x8000_0000, 0x477f_e000];
const BASELINE_RECORD: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/separable_record.tsv");

enum Status {
    Pass,
    Fail,
    /// Informational only; never fails the suite.
    Reported,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn gate(ok: bool, detail: String) -> Outcome {
    let status = if ok { Status::Pass } else { Status::Fail };
    Outcome { status, detail }
}

struct Ctx {
    dir: PathBuf,
    /// Prediction files produced by the toy run, re-checked by criterion 9.
    predictions: Vec<PathBuf>,
}

fn mgproto(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mgproto"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn mgproto: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "mgproto {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn rows(t: &Tensor) -> Mat {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

fn randn(seed: u64, tag: &str, shape: &[usize]) -> Tensor {
    normal_tensor(&mut stream(seed, tag), shape, 1.0)
}

fn c1_gradients(_: &mut Ctx) -> Result<Outcome, String> {
    use mgproto::gradcheck::suites::{BATCH, CLASSES, EMBED, FRAMES, HIDDEN};
    let dims = [BATCH, CLASSES, EMBED, HIDDEN, FRAMES];
    let t0 = Instant::now();
    let out = mgproto(&["gradcheck", "--seed", "0"])?;
    let took = t0.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let mut worst = 0.0f64;
    let mut suites = 0;
    for line in text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")) {
        let err: f64 = line
            .split_whitespace()
            .skip_while(|w| *w != "max_rel_err")
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("unparsable gradcheck line {line:?}"))?;
        worst = worst.max(err);
        suites += 1;
    }
    Ok(gate(
        suites == 4 && worst < GRAD_REL_ERR && took < GRAD_BUDGET && dims == GRAD_DIMS,
        format!(
            "{suites} suites (CE, L_PR, fusion, composite) at N,K,D,C',T' = {dims:?}, worst rel err {worst:.2e} < {GRAD_REL_ERR:e}, {:.1}s < {}s",
            took.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

fn attention_error(seed: u64, source: AttentionSource) -> Result<f64, String> {
    let dims = FusionDims {
        c_rgb: 3,
        c_pose: 4,
        t_common: 4,
        stride_ratio: 4,
    };
    let cfg = FusionConfig {
        hidden: 5,
        lateral_channels: 2,
        attention_source: source,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::new();
    xfuse::init_params(&mut store, &cfg, &dims, &mut stream(seed, "init"));
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n.clone(), normal_tensor(&mut stream(seed, &n), &shape, 0.5));
    }
    let (n, c, t) = (2, cfg.hidden, dims.t_common);
    let xr = randn(seed, "rgb", &[n, c, t]);
    let xp = randn(seed, "pose", &[n, c, t]);
    let mut tape = Tape::new();
    let vars = store.register(&mut tape, false);
    let (r, q) = (tape.constant(xr.clone()), tape.constant(xp.clone()));
    let attn = |m| AttnVars::for_modality(&vars, m).map_err(|e| e.to_string());
    let ((_, ar), (_, ap)) = channel_cross_attention(&mut tape, r, q, &attn("rgb")?, &attn("pose")?, source)
        .map_err(|e| e.to_string())?;
    let w = |name: &str| store.get(&format!("xfuse.{name}")).unwrap().data();
    let sample = |x: &Tensor, i: usize| -> Mat { (0..c).map(|ch| x.data()[(i * c + ch) * t..][..t].to_vec()).collect() };
    let mut worst = 0.0f64;
    for i in 0..n {
        let (own_r, own_p) = (sample(&xr, i), sample(&xp, i));
        let (kv_r, kv_p, src_r, src_p) = match source {
            AttentionSource::Cross => (&own_p, &own_r, "pose", "rgb"),
            AttentionSource::SelfAttention => (&own_r, &own_p, "rgb", "pose"),
        };
        let pair = |p: &str, m: &str| (w(&format!("{p}_{m}.weight")), w(&format!("{p}_{m}.bias")));
        let want_r = oracles::channel_attention(&own_r, kv_r, pair("q", "rgb"), pair("k", src_r), pair("v", src_r));
        let want_p = oracles::channel_attention(&own_p, kv_p, pair("q", "pose"), pair("k", src_p), pair("v", src_p));
        for (got, want) in [(tape.value(ar), want_r), (tape.value(ap), want_p)] {
            for (a, b) in sample(got, i).concat().iter().zip(want.concat()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

fn c2_oracles(_: &mut Ctx) -> Result<Outcome, String> {
    let mut attn = 0.0f64;
    for seed in 0..INSTANCES {
        for source in [AttentionSource::Cross, AttentionSource::SelfAttention] {
            attn = attn.max(attention_error(seed, source)?);
        }
    }
    let (n, k, d, tau) = (6, 3, 8, 0.1);
    let mut pr = 0.0f64;
    let mut anchored = 0;
    for seed in 0..INSTANCES {
        let bank = PrototypeBank::random(k, d, 0.9, &mut stream(seed, "bank")).map_err(|e| e.to_string())?;
        let feats = randn(seed, "feats", &[n, d]);
        let probs = tensor(&oracles::softmax_rows(&rows(&randn(seed, "logits", &[n, k]))));
        let mut rng = stream(seed, "labels");
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let part = partition_batch(&probs, &labels).and_then(|p| ambiguous_centers(p, &feats));
        let part = part.map_err(|e| e.to_string())?;
        anchored += usize::from(part.anchors().count() > 0);
        let got = proto_loss(&bank, &part, &feats, &probs, tau).map_err(|e| e.to_string())?.value;
        let want = oracles::refinement_loss(&rows(bank.protos()), &rows(&feats), &rows(&probs), &labels, tau);
        pr = pr.max((got - want).abs());
    }
    Ok(gate(
        attn <= ATTN_TOL && pr <= PR_TOL && anchored >= 80,
        format!(
            "attention max |diff| {attn:.1e} <= {ATTN_TOL:e} over {INSTANCES} instances x 2 sources; \
             L_PR max |diff| {pr:.1e} <= {PR_TOL:e} over {INSTANCES} instances ({anchored} with anchors)"
        ),
    ))
}

fn c3_partitions(_: &mut Ctx) -> Result<Outcome, String> {
    let (mut cases, mut bad) = (0, 0);
    for (n, k) in [(4, 2), (3, 3)] {
        for labels in oracles::assignments(n, k) {
            for preds in oracles::assignments(n, k) {
                let part = partition_from_preds(&preds, &labels, k).map_err(|e| e.to_string())?;
                bad += oracles::partition_violations(&labels, &preds, &part.tp, &part.fn_, &part.fp);
                cases += 1;
            }
        }
    }
    Ok(gate(
        bad == 0 && cases == 16 * 16 + 27 * 27,
        format!("{cases} assignments (N=4,K=2 and N=3,K=3), {bad} violations of disjointness, coverage or FN/FP consistency"),
    ))
}

fn c4_ema(_: &mut Ctx) -> Result<Outcome, String> {
    let err = |e: mgproto::Error| e.to_string();
    let protos = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.6, -0.8]).unwrap();
    // sample 0: TP of class 0 along [0, 1]; sample 1: label 1 predicted 0, so class 1 has no TP
    let part = partition_from_preds(&[0, 0], &[0, 1], 2).map_err(err)?;
    let feats = Tensor::new(vec![2, 2], vec![0.0, 2.0, 5.0, 5.0]).unwrap();
    let bank = PrototypeBank::new(protos.clone(), 0.9).map_err(err)?;
    let next = update_prototypes(&bank, &part, &feats).map_err(err)?;
    let norm = (0.9f64 * 0.9 + 0.1 * 0.1).sqrt();
    let pre = [next.row(0)[0] * norm, next.row(0)[1] * norm];
    let pre_ok = (pre[0] - 0.9).abs() <= 1e-12 && (pre[1] - 0.1).abs() <= 1e-12;

    let bank0 = PrototypeBank::new(protos, 0.0).map_err(err)?;
    let frozen = update_prototypes(&bank0, &part, &feats).map_err(err)?;
    let zero_ok = frozen.row(0) == [0.0, 1.0];

    let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let untouched = bits(next.row(1)) == bits(bank.row(1)) && bits(frozen.row(1)) == bits(bank0.row(1));
    Ok(gate(
        pre_ok && zero_ok && untouched,
        format!(
            "rho=0.9 pre-normalization [{:.12}, {:.12}], rho=0 gives {:?}, no-TP row bitwise unchanged: {untouched}",
            pre[0],
            pre[1],
            frozen.row(0)
        ),
    ))
}

fn c5_schedule(_: &mut Ctx) -> Result<Outcome, String> {
    let cfg = TrainConfig::default();
    let got = [0, 8, 22].map(|e| lr_at(e, &cfg));
    Ok(gate(
        got == [0.0075, 0.00075, 0.000075],
        format!("lr_at(0, 8, 22) = {got:?}, exact"),
    ))
}

fn c6_toy_run(ctx: &mut Ctx) -> Result<Outcome, String> {
    let data = ctx.dir.join("separable");
    let seed = TOY_SEED.to_string();
    mgproto(&["gen", "--out", p(&data), "--preset", "separable", "--seed", &seed])?;
    let mut runs = Vec::new();
    for name in ["run_a", "run_b"] {
        let out = ctx.dir.join(name);
        let t0 = Instant::now();
        mgproto(&[
            "train", "--data", p(&data), "--out", p(&out), "--stage", "joint", "--alpha", "0", "--seed", &seed,
            "--epochs", &TOY_EPOCHS.to_string(),
        ])?;
        runs.push((out, t0.elapsed()));
    }
    let record = |dir: &Path| fs::read_to_string(dir.join("record.tsv")).map_err(|e| e.to_string());
    let first = record(&runs[0].0)?;
    let identical = first == record(&runs[1].0)?;
    let best = runs[0].0.join("best");
    let mut acc = Vec::new();
    for split in [Split::Train, Split::Test] {
        let rep = eval_split(&data, &best, split).map_err(|e| e.to_string())?;
        let path = ctx.dir.join(format!("pred_{split}.tsv"));
        write_predictions(&path, &rep.predictions).map_err(|e| e.to_string())?;
        ctx.predictions.push(path);
        acc.push(rep.metrics.fused);
    }
    let slowest = runs.iter().map(|r| r.1).max().unwrap();
    let baseline = match fs::read_to_string(BASELINE_RECORD) {
        Ok(b) if b == first => "matches the committed baseline record",
        Ok(_) => "differs from the committed baseline record",
        Err(_) => "no committed baseline record",
    };
    Ok(gate(
        acc[0] >= TOY_TRAIN_MIN && acc[1] >= TOY_TEST_MIN && identical && slowest < TOY_BUDGET,
        format!(
            "K=6, 60/30/30 clips, 16x16, seed {TOY_SEED}, joint, alpha=0, {TOY_EPOCHS} epochs: \
             train top-1 {:.4} >= {TOY_TRAIN_MIN}, test top-1 {:.4} >= {TOY_TEST_MIN}, \
             slowest run {:.1}s < {}s, rerun losses bit-identical: {identical}; {baseline}",
            acc[0],
            acc[1],
            slowest.as_secs_f64(),
            TOY_BUDGET.as_secs()
        ),
    ))
}

fn c7_mechanism_delta(ctx: &mut Ctx) -> Result<Outcome, String> {
    let out = ctx.dir.join("delta");
    mgproto(&["ablate", "--out", p(&out), "--seeds", DELTA_SEEDS, "--dataset-seed", &TOY_SEED.to_string()])?;
    let tsv = fs::read_to_string(out.join("delta.tsv")).map_err(|e| e.to_string())?;
    let md = fs::read_to_string(out.join("delta.md")).map_err(|e| e.to_string())?;
    let runs = tsv.lines().skip(1).count();
    let table: String = md
        .lines()
        .filter(|l| l.starts_with('|'))
        .map(|l| format!("\n      {l}"))
        .collect();
    let status = if runs == 9 { Status::Reported } else { Status::Fail };
    Ok(Outcome {
        status,
        detail: format!("{runs} runs (3 variants x seeds {DELTA_SEEDS}), ambiguous-pairs dataset, fused test top-1:{table}"),
    })
}

fn c8_codec(ctx: &mut Ctx) -> Result<Outcome, String> {
    let mut rng = stream(8, "codec");
    let mut trips = 0;
    let mut mismatches = 0;
    for i in 0..200 {
        let ndim = rng.random_range(1..=5);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..=4)).collect();
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = TensorBlob::new(shape, data).map_err(|e| e.to_string())?;
        let back = if i % 2 == 0 {
            let bytes = encode_tensor(&t).map_err(|e| e.to_string())?;
            decode_tensor(&bytes, Path::new("memory")).map_err(|e| e.to_string())?
        } else {
            let path = ctx.dir.join("trip.mgt");
            write_tensor(&path, &t).map_err(|e| e.to_string())?;
            read_tensor(&path).map_err(|e| e.to_string())?
        };
        let bits = |b: &TensorBlob| b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        mismatches += usize::from(back.shape() != t.shape() || bits(&back) != bits(&t));
        trips += 1;
    }
    let golden = read_tensor(GOLDEN).map_err(|e| e.to_string())?;
    let golden_bits: Vec<u32> = golden.data().iter().map(|v| v.to_bits()).collect();
    let golden_ok = golden.shape() == [2, 3] && golden_bits == GOLDEN_BITS;
    let reencoded = encode_tensor(&golden).map_err(|e| e.to_string())? == fs::read(GOLDEN).map_err(|e| e.to_string())?;
    Ok(gate(
        mismatches == 0 && golden_ok && reencoded,
        format!(
            "{trips} random round trips (1-5 dims, arbitrary finite bit patterns), {mismatches} mismatches; \
             golden fixture decodes to expected bits: {golden_ok}, re-encodes byte-identically: {reencoded}"
        ),
    ))
}

fn max_row_error(rows: impl Iterator<Item = f64>) -> f64 {
    rows.map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

fn c9_fusion_sanity(ctx: &mut Ctx) -> Result<Outcome, String> {
    let err = |e: mgproto::Error| e.to_string();
    let (n, k) = (20, 6);
    let probs = |tag: &str| tensor(&oracles::softmax_rows(&rows(&randn(9, tag, &[n, k]))));
    let (a, b) = (probs("a"), probs("b"));
    let same = fuse_probs(&a, &a).map_err(err)?;
    let fuse_identity = same.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let mixed = fuse_probs(&a, &b).map_err(err)?;
    let mut worst = max_row_error((0..n).map(|i| mixed.row(i).iter().sum::<f64>()));

    let ids: Vec<String> = (0..n).map(|i| format!("clip{i:03}")).collect();
    let file = |t: &Tensor| PredictionFile::new(ids.clone(), t.to_blob()).map_err(err);
    let (fa, fb) = (file(&a)?, file(&b)?);
    let bits = |f: &PredictionFile| f.probs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut single_identity = true;
    for w in [1.0, 2.5] {
        single_identity &= bits(&ensemble(std::slice::from_ref(&fa), &[w]).map_err(err)?) == bits(&fa);
    }
    let src = ctx.dir.join("single.tsv");
    let dst = ctx.dir.join("single_ens.tsv");
    write_predictions(&src, &fa).map_err(err)?;
    mgproto(&["ensemble", p(&src), "--out", p(&dst)])?;
    let cli_identity = fs::read(&src).map_err(|e| e.to_string())? == fs::read(&dst).map_err(|e| e.to_string())?;

    let mix = ensemble(&[fa, fb], &[0.3, 1.7]).map_err(err)?;
    let row_sums = |f: &PredictionFile| -> Vec<f64> {
        (0..f.len()).map(|i| f.row(i).iter().map(|&v| f64::from(v)).sum()).collect()
    };
    worst = worst.max(max_row_error(row_sums(&mix).into_iter()));
    for path in &ctx.predictions {
        let f = read_predictions(path).map_err(err)?;
        worst = worst.max(max_row_error(row_sums(&f).into_iter()));
    }
    Ok(gate(
        fuse_identity && single_identity && cli_identity && worst <= ROW_TOL,
        format!(
            "fuse_probs(p, p) == p bitwise: {fuse_identity}; one-file ensemble is identity (library {single_identity}, CLI {cli_identity}); \
             max |row sum - 1| {worst:.1e} <= {ROW_TOL:e} over fused, ensembled and {} evaluated files",
            ctx.predictions.len()
        ),
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut ctx = Ctx {
        dir: tmp.path().to_path_buf(),
        predictions: Vec::new(),
    };
    type Criterion = fn(&mut Ctx) -> Result<Outcome, String>;
    let criteria: [(&str, Criterion); 9] = [
        ("gradient integrity", c1_gradients),
        ("oracle equivalence", c2_oracles),
        ("partition algebra", c3_partitions),
        ("EMA exactness", c4_ema),
        ("schedule exactness", c5_schedule),
        ("end-to-end toy run", c6_toy_run),
        ("mechanism-delta report", c7_mechanism_delta),
        ("codec", c8_codec),
        ("fusion sanity", c9_fusion_sanity),
    ];
    // `ACCEPTANCE_ONLY=2,8` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = run(&mut ctx).unwrap_or_else(|e| Outcome {
            status: Status::Fail,
            detail: e,
        });
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Reported => "PASS (reported, not gated)",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {} {tag}: {name} ({:.1}s): {}",
            i + 1,
            t0.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
