//! One function per subcommand. Each returns the library error type so the
//! binary can map it onto an exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mgproto::checkpoint::Checkpoint;
use mgproto::config::{read_kv, to_kv_text, KvLine, Settings};
use mgproto::data::Dataset;
use mgproto::gradcheck::{suites, GradCheckReport, MAX_REL_ERR};
use mgproto::net::{NetConfig, Stage};
use mgproto::synthgen::{generate, GenConfig};
use mgproto::tensorio::{load_manifest, read_predictions, write_predictions, DatasetManifest, Split};
use mgproto::trainer::{
    ambiguous_dataset, ensemble, evaluate, mechanism_delta, splits, train, EvalReport, Init,
    Metrics, TrainConfig, TrainOutcome,
};
use mgproto::{Error, Result};

use crate::args::{
    AblateArgs, AttentionArg, BranchArg, EnsembleArgs, EvalArgs, GenArgs, GradcheckArgs, Preset,
    SplitArg, StageArg, TrainArgs,
};
use crate::manifest::{self, absolute, RunManifest};
use crate::report;
use crate::settings::Layered;

pub const GEN_SNAPSHOT: &str = "gen.txt";
pub const NONFINITE_DUMP: &str = "nonfinite.txt";

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn prefixed(lines: &[KvLine], prefix: &str) -> Vec<(String, String)> {
    lines
        .iter()
        .filter(|l| l.key.starts_with(prefix))
        .map(|l| (l.key.clone(), l.value.clone()))
        .collect()
}

pub fn gen_config(args: &GenArgs) -> Result<GenConfig> {
    let mut layers = Layered::from_file(args.config.as_deref())?;
    layers.flag("gen.seed", args.seed);
    layers.flag("gen.num_classes", args.num_classes);
    layers.flag("gen.clips_train", args.clips_train);
    layers.flag("gen.clips_val", args.clips_val);
    layers.flag("gen.clips_test", args.clips_test);
    layers.flag("gen.intra_noise", args.intra_noise);
    layers.flag("gen.ambiguous_pairs", args.ambiguous_pairs.as_ref());
    let mut cfg = match args.preset {
        Preset::Separable => GenConfig::default(),
        Preset::Ambiguous => ambiguous_dataset(GenConfig::default().seed),
    };
    cfg.apply(&layers.lines, "gen.")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen(args: &GenArgs) -> Result<DatasetManifest> {
    let cfg = gen_config(args)?;
    let m = generate(&cfg, &args.out)?;
    write_text(&args.out.join(GEN_SNAPSHOT), &to_kv_text(&cfg.prefixed_entries("gen.")))?;
    println!(
        "wrote {} clips ({} classes) to {}",
        m.entries.len(),
        m.num_classes,
        args.out.display()
    );
    Ok(m)
}

/// Everything `train` resolves before it starts.
#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub data: PathBuf,
    pub out: PathBuf,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub init_rgb: Option<PathBuf>,
    pub init_pose: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// `gen.*` settings of the dataset, when it recorded them.
    pub gen: Vec<(String, String)>,
}

fn train_layers(args: &TrainArgs) -> Result<Layered> {
    let mut l = Layered::from_file(args.config.as_deref())?;
    l.flag(
        "train.stage",
        args.stage.map(|s| match s {
            StageArg::Rgb => "rgb",
            StageArg::Pose => "pose",
            StageArg::Joint => "joint",
        }),
    );
    l.flag("train.alpha", args.alpha);
    l.flag("train.tau", args.tau);
    l.flag("train.rho", args.rho);
    l.flag(
        "train.prm_branch",
        args.prm_branch.map(|b| match b {
            BranchArg::Rgb => "rgb",
            BranchArg::Pose => "pose",
            BranchArg::Both => "both",
        }),
    );
    l.flag(
        "net.fusion.attention_source",
        args.attention_source.map(|a| match a {
            AttentionArg::Cross => "cross",
            AttentionArg::SelfAttention => "self",
        }),
    );
    l.flag("train.seed", args.seed);
    l.flag("train.epochs", args.epochs);
    l.flag("train.batch_size", args.batch_size);
    l.flag("train.lr", args.lr);
    l.flag("train.prm", args.no_prm.then_some(false));
    l.flag("net.fusion", args.no_fusion.then_some(false));
    Ok(l)
}

fn load_split(m: &DatasetManifest, split: Split) -> Result<Dataset> {
    Dataset::load(m, split)
}

pub fn plan_train(args: &TrainArgs) -> Result<TrainPlan> {
    let (layers, data, init_rgb, init_pose, resume) = match &args.replay {
        Some(path) => {
            let m = RunManifest::read(path)?;
            if m.command != "train" {
                return Err(Error::validation(format!(
                    "{} records a {:?} run, not train",
                    path.display(),
                    m.command
                )));
            }
            let data = m
                .path("data")
                .ok_or_else(|| Error::validation("manifest has no path.data"))?
                .to_path_buf();
            let p = |n: &str| m.path(n).map(Path::to_path_buf);
            let layers = Layered {
                lines: m.config_lines(),
            };
            (layers, data, p("init_rgb"), p("init_pose"), p("resume"))
        }
        None => (
            train_layers(args)?,
            args.data.clone().expect("clap requires --data without --replay"),
            args.init_rgb.clone(),
            args.init_pose.clone(),
            args.resume.clone(),
        ),
    };
    let manifest = load_manifest(data.join("manifest.txt"))?;
    let probe = load_split(&manifest, Split::Train)?;
    let (r, p) = probe.clip_shapes();
    let mut net = NetConfig::for_clips(r, p, manifest.num_classes)?;
    net.apply(&layers.lines, "net.")?;
    let mut train = TrainConfig::default();
    train.apply(&layers.lines, "train.")?;
    net.validate()?;
    train.validate()?;
    if init_rgb.is_some() && train.stage != Stage::Joint {
        return Err(Error::validation("--init-rgb/--init-pose need --stage joint"));
    }
    let snapshot = data.join(GEN_SNAPSHOT);
    let gen = if snapshot.exists() {
        prefixed(&read_kv(&snapshot)?, "gen.")
    } else {
        prefixed(&layers.lines, "gen.")
    };
    Ok(TrainPlan {
        data,
        out: args.out.clone(),
        net,
        train,
        init_rgb,
        init_pose,
        resume,
        gen,
    })
}

impl TrainPlan {
    pub fn manifest(&self) -> RunManifest {
        let mut m = RunManifest::start("train", self.train.seed);
        m.paths.push(("data".into(), absolute(&self.data)));
        for (n, p) in [
            ("init_rgb", &self.init_rgb),
            ("init_pose", &self.init_pose),
            ("resume", &self.resume),
        ] {
            if let Some(p) = p {
                m.paths.push((n.into(), absolute(p)));
            }
        }
        let out = absolute(&self.out);
        for (n, rel) in [
            ("out", ""),
            ("record", "record.tsv"),
            ("drift", "proto_drift.tsv"),
            ("summary", "summary.txt"),
            ("best", "best"),
            ("last", "last"),
        ] {
            m.paths.push((n.into(), if rel.is_empty() { out.clone() } else { out.join(rel) }));
        }
        m.config.extend(self.gen.iter().cloned());
        m.config.extend(self.train.prefixed_entries("train."));
        m.config.extend(self.net.prefixed_entries("net."));
        m
    }
}

fn metrics_line(m: &Metrics) -> String {
    let o = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    format!("rgb {} pose {} fused {:.4}", o(m.rgb), o(m.pose), m.fused)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let plan = plan_train(args)?;
    let mut run = plan.manifest();
    run.write(&plan.out)?;

    let manifest = load_manifest(plan.data.join("manifest.txt"))?;
    let train_set = load_split(&manifest, Split::Train)?;
    let val_set = load_split(&manifest, Split::Val)?;
    let loaded = |p: &Option<PathBuf>| p.as_ref().map(Checkpoint::load).transpose();
    let (rgb, pose, resume) = (
        loaded(&plan.init_rgb)?,
        loaded(&plan.init_pose)?,
        loaded(&plan.resume)?,
    );
    let init = match (&rgb, &pose, &resume) {
        (Some(rgb), Some(pose), _) => Init::FromBranches { rgb, pose },
        (_, _, Some(ck)) => Init::Resume(ck),
        _ => Init::Fresh,
    };
    let t0 = Instant::now();
    let outcome = match train(&train_set, &val_set, &plan.net, &plan.train, init) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let dump = plan.out.join(NONFINITE_DUMP);
            write_text(&dump, &format!("error = {e}\n{}", run.to_text()))?;
            eprintln!("diagnostic dump written to {}", dump.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    outcome.record.write(&plan.out)?;
    outcome.best.save(plan.out.join("best"))?;
    outcome.last.save(plan.out.join("last"))?;
    run.finished = Some(manifest::now());
    run.write(&plan.out)?;

    for r in &outcome.record.rows {
        println!(
            "epoch {:>3} lr {:<8} L_CE {:.6} L_PR {:.6} L {:.6} | train {} | val {}",
            r.epoch,
            r.lr,
            r.ce,
            r.pr,
            r.total,
            metrics_line(&r.train),
            metrics_line(&r.val)
        );
    }
    println!(
        "best epoch {} (val fused {:.4}); {:.1}s; run written to {}",
        outcome.record.best_epoch,
        outcome.record.best_val_fused,
        t0.elapsed().as_secs_f64(),
        plan.out.display()
    );
    Ok(outcome)
}

pub fn confusion_tsv(confusion: &[Vec<usize>]) -> String {
    let k = confusion.len();
    let mut s = String::from("label");
    for j in 0..k {
        s += &format!("\tpred_{j}");
    }
    s.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        s += &i.to_string();
        for v in row {
            s += &format!("\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn eval_split(data: &Path, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = load_manifest(data.join("manifest.txt"))?;
    let ds = load_split(&manifest, split)?;
    evaluate(&ck, &ds)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let rep = eval_split(&args.data, &args.checkpoint, args.split.into())?;
    write_predictions(&args.out, &rep.predictions)?;
    if let Some(p) = &args.confusion {
        write_text(p, &confusion_tsv(&rep.confusion))?;
    }
    println!("{}: {}", Split::from(args.split), metrics_line(&rep.metrics));
    print!("{}", confusion_tsv(&rep.confusion));
    Ok(rep)
}

pub fn cmd_ensemble(args: &EnsembleArgs) -> Result<()> {
    let files = args
        .inputs
        .iter()
        .map(read_predictions)
        .collect::<Result<Vec<_>>>()?;
    let weights = args.weights.clone().unwrap_or_else(|| vec![1.0; files.len()]);
    let out = ensemble(&files, &weights)?;
    write_predictions(&args.out, &out)?;
    println!("wrote {} rows to {}", out.len(), args.out.display());
    Ok(())
}

pub fn gradcheck_line(r: &GradCheckReport) -> String {
    format!(
        "{} {:<22} max_rel_err {:.3e} max_abs_err {:.3e} checked {}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.name,
        r.max_rel_err,
        r.max_abs_err,
        r.checked
    )
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradCheckReport>> {
    let t0 = Instant::now();
    let reports = suites::run_all(args.seed)?;
    for r in &reports {
        println!("{}", gradcheck_line(r));
    }
    println!(
        "threshold {MAX_REL_ERR:e}; {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        return Err(Error::NonFinite {
            name: format!(
                "gradient check {} (max relative error {:e})",
                bad.name, bad.max_rel_err
            ),
        });
    }
    Ok(reports)
}

pub fn cmd_report(args: &crate::args::ReportArgs) -> Result<PathBuf> {
    report::write_report(args)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<mgproto::trainer::DeltaTable> {
    let layers = Layered::from_file(args.config.as_deref())?;
    let mut gen = ambiguous_dataset(args.dataset_seed);
    gen.apply(&layers.lines, "gen.")?;
    gen.validate()?;
    let data = splits(&gen)?;
    let (r, p) = data[0].clip_shapes();
    let mut net = NetConfig::for_clips(r, p, gen.num_classes)?;
    net.apply(&layers.lines, "net.")?;
    let mut base = TrainConfig::default();
    base.apply(&layers.lines, "train.")?;
    if let Some(e) = args.epochs {
        base.epochs = e;
    }

    let mut run = RunManifest::start("ablate", args.dataset_seed);
    run.paths.push(("out".into(), absolute(&args.out)));
    run.config.extend(gen.prefixed_entries("gen."));
    run.config.extend(base.prefixed_entries("train."));
    run.config.extend(net.prefixed_entries("net."));
    run.config.push((
        "ablate.seeds".into(),
        args.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    ));
    run.write(&args.out)?;

    let t0 = Instant::now();
    let table = mechanism_delta(&data, &net, &base, &args.seeds, |row| {
        println!(
            "{:<14} seed {} best epoch {:>2} val {:.4} test {:.4} ({:.0}s)",
            row.variant.to_string(),
            row.seed,
            row.best_epoch,
            row.val_fused,
            row.test_fused,
            t0.elapsed().as_secs_f64()
        );
    })?;
    create_dir(&args.out)?;
    write_text(&args.out.join("delta.tsv"), &table.to_tsv())?;
    let md = format!(
        "# Mechanism delta\n\nFused test top-1 on the ambiguous-pairs dataset (seed {}), \
         {} epochs per run, best-val checkpoint.\n\n{}",
        args.dataset_seed,
        base.epochs,
        table.to_markdown()
    );
    write_text(&args.out.join("delta.md"), &md)?;
    run.finished = Some(manifest::now());
    run.write(&args.out)?;
    print!("{}", table.to_markdown());
    Ok(table)
}
