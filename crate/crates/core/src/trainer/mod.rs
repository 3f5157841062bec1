//! Training loop, evaluation and prediction ensembling.
//!
//! A run trains one [`Stage`]: a single branch (pretraining) or the joint
//! model. Each step minimizes `Σ_branches CE + α·Σ_branches L_PR` with SGD,
//! then moves each branch's prototype bank towards that batch's TP
//! embeddings. The refinement loss is always evaluated when enabled so its
//! value is logged, but it only enters the graph when `α > 0`; an `α = 0` run
//! therefore follows exactly the same parameter trajectory as a run without it.

mod delta;
mod record;

pub use delta::{ambiguous_dataset, mechanism_delta, splits, DeltaRow, DeltaTable, Variant};
pub use record::{DriftRow, EpochRow, Metrics, RunRecord};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_list, parse_value, show_list, unknown_key, Settings};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::net::{self, argmax_rows, fuse_probs, init_params, top1_accuracy, NetConfig, Stage, BRANCHES};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::protoref::{
    ambiguous_centers, cosine_sim, partition_batch, proto_loss_on_tape, total_loss, update_prototypes,
    PrmBranch, PrototypeBank, DEFAULT_ALPHA, DEFAULT_RHO, DEFAULT_TAU,
};
use crate::rng::stream;
use crate::tensor::{Tensor, TensorBlob};
use crate::tensorio::PredictionFile;

/// Clips per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub alpha: f64,
    pub tau: f64,
    pub rho: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Evaluate the refinement loss and keep prototype banks at all.
    pub prm: bool,
    pub prm_branch: PrmBranch,
    /// Also refine during single-branch stages.
    pub prm_in_pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 10,
            lr: 0.0075,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![8, 22],
            lr_drop_factor: 0.1,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            rho: DEFAULT_RHO,
            seed: 7,
            stage: Stage::Joint,
            prm: true,
            prm_branch: PrmBranch::Both,
            prm_in_pretrain: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::validation(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.lr_drop_factor > 0.0) {
            return err("weight_decay must be >= 0 and lr_drop_factor > 0".into());
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return err(format!(
                "lr_drop_epochs {:?} must be strictly increasing",
                self.lr_drop_epochs
            ));
        }
        if !(self.alpha >= 0.0 && self.tau > 0.0 && (0.0..=1.0).contains(&self.rho)) {
            return err(format!(
                "need alpha >= 0, tau > 0, rho in [0, 1]; got {}, {}, {}",
                self.alpha, self.tau, self.rho
            ));
        }
        Ok(())
    }

    /// Branches that carry a refinement loss in this run.
    pub fn prm_branches(&self) -> Vec<&'static str> {
        if !self.prm || (self.stage != Stage::Joint && !self.prm_in_pretrain) {
            return Vec::new();
        }
        BRANCHES
            .into_iter()
            .filter(|b| self.prm_branch.includes(b) && stage_has(self.stage, b))
            .collect()
    }
}

fn stage_has(stage: Stage, branch: &str) -> bool {
    if branch == "rgb" {
        stage.has_rgb()
    } else {
        stage.has_pose()
    }
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "lr_drop_epochs" => self.lr_drop_epochs = parse_list(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "rho" => self.rho = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "stage" => self.stage = value.parse()?,
            "prm" => self.prm = parse_value(key, value)?,
            "prm_branch" => self.prm_branch = value.parse()?,
            "prm_in_pretrain" => self.prm_in_pretrain = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_drop_epochs", show_list(&self.lr_drop_epochs)),
            ("lr_drop_factor", self.lr_drop_factor.to_string()),
            ("alpha", self.alpha.to_string()),
            ("tau", self.tau.to_string()),
            ("rho", self.rho.to_string()),
            ("seed", self.seed.to_string()),
            ("stage", self.stage.to_string()),
            ("prm", self.prm.to_string()),
            ("prm_branch", self.prm_branch.to_string()),
            ("prm_in_pretrain", self.prm_in_pretrain.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Learning rate for a 0-based epoch: one factor per drop epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
    // dividing by the integer-valued inverse keeps 0.0075 / 100 exact
    cfg.lr / cfg.lr_drop_factor.recip().powi(drops)
}

/// Where a run's parameters come from.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Fresh,
    /// Branch weights from two single-branch runs, fusion parts fresh.
    FromBranches {
        rgb: &'a Checkpoint,
        pose: &'a Checkpoint,
    },
    /// Every parameter from one checkpoint.
    Resume(&'a Checkpoint),
}

fn initial_params(net: &NetConfig, seed: u64, init: Init<'_>) -> Result<ParamStore> {
    let mut params = init_params(net, seed)?;
    match init {
        Init::Fresh => {}
        Init::FromBranches { rgb, pose } => {
            params.copy_prefix(&rgb.params, "rgb.")?;
            params.copy_prefix(&pose.params, "pose.")?;
        }
        Init::Resume(ck) => {
            let copied = params.copy_prefix(&ck.params, "")?;
            if copied != params.len() {
                return Err(Error::validation(format!(
                    "checkpoint has {copied} of {} parameters",
                    params.len()
                )));
            }
        }
    }
    Ok(params)
}

/// Per-branch and fused probabilities for a whole dataset.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub rgb: Option<Tensor>,
    pub pose: Option<Tensor>,
    pub fused: Tensor,
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let k = parts[0].shape()[1];
    let n = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(vec![n, k], parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

pub fn predict(params: &ParamStore, net: &NetConfig, stage: Stage, ds: &Dataset) -> Result<Predictions> {
    if ds.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    let outs: Vec<net::EncodeOutput> = ds
        .sequential(EVAL_BATCH)
        .par_iter()
        .map(|idx| {
            let b = ds.batch(idx)?;
            net::encode(params, net, Some(&b.rgb), Some(&b.pose), stage)
        })
        .collect::<Result<_>>()?;
    let gather = |f: &dyn Fn(&net::EncodeOutput) -> Option<Tensor>| -> Result<Option<Tensor>> {
        let parts: Option<Vec<Tensor>> = outs.iter().map(f).collect();
        parts.map(|p| concat_rows(&p)).transpose()
    };
    let rgb = gather(&|o| o.rgb.as_ref().map(|b| b.probs.clone()))?;
    let pose = gather(&|o| o.pose.as_ref().map(|b| b.probs.clone()))?;
    let fused = match (&rgb, &pose) {
        (Some(r), Some(p)) => fuse_probs(r, p)?,
        (Some(x), None) | (None, Some(x)) => x.clone(),
        (None, None) => return Err(Error::validation("no branch ran")),
    };
    Ok(Predictions { rgb, pose, fused })
}

pub fn metrics(pred: &Predictions, labels: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        rgb: pred.rgb.as_ref().map(|p| top1_accuracy(p, labels)).transpose()?,
        pose: pred.pose.as_ref().map(|p| top1_accuracy(p, labels)).transpose()?,
        fused: top1_accuracy(&pred.fused, labels)?,
    })
}

/// Result of [`train`]: the record plus best and final states.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

struct StepLosses {
    ce: f64,
    pr: f64,
    total: f64,
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    init: Init<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::validation("train and val splits must be non-empty"));
    }
    if train_set.num_classes != net.num_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes, network {}",
            train_set.num_classes, net.num_classes
        )));
    }
    let stage = cfg.stage;
    let mut params = initial_params(net, cfg.seed, init)?;
    let mut banks: BTreeMap<String, PrototypeBank> = BTreeMap::new();
    for b in cfg.prm_branches() {
        let d = if b == "rgb" { net.rgb.embed_dim } else { net.pose.embed_dim };
        let mut rng = stream(cfg.seed, &format!("bank/{b}"));
        banks.insert(b.to_string(), PrototypeBank::random(net.num_classes, d, cfg.rho, &mut rng)?);
    }
    let initial_banks = banks.clone();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);

    let snapshot = |params: &ParamStore, banks: &BTreeMap<String, PrototypeBank>, epoch| Checkpoint {
        net: net.clone(),
        stage,
        epoch,
        params: params.clone(),
        banks: banks.clone(),
    };

    let initial_val = metrics(&predict(&params, net, stage, val_set)?, &val_set.labels)?;
    let mut record = RunRecord::new(stage, initial_val);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut sums = StepLosses {
            ce: 0.0,
            pr: 0.0,
            total: 0.0,
        };
        for idx in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = train_set.batch(&idx)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let in_batch = |e: Error| match e {
                Error::NonFinite { name } => Error::NonFinite {
                    name: format!("{name} at epoch {epoch}, batch [{}]", batch.clip_ids.join(", ")),
                },
                other => other,
            };
            let out = net::forward(&mut tape, &vars, net, Some(&batch.rgb), Some(&batch.pose), stage)
                .map_err(in_batch)?;

            let mut loss: Option<Var> = None;
            let mut ce = 0.0;
            for b in BRANCHES {
                let Some(bv) = out.branch(b) else { continue };
                let l = tape.cross_entropy(bv.logits, &batch.labels)?;
                ce += tape.value(l).item();
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let mut loss = loss.ok_or_else(|| Error::validation("no branch ran"))?;

            let mut pr = 0.0;
            let mut bank_updates = Vec::new();
            for (b, bank) in &banks {
                let bv = out.branch(b).expect("prm branches are active");
                let part = partition_batch(tape.value(bv.probs), &batch.labels)?;
                let part = ambiguous_centers(part, tape.value(bv.embed)).map_err(in_batch)?;
                let (v, pl) = proto_loss_on_tape(&mut tape, bv.embed, bv.probs, bank, &part, cfg.tau)
                    .map_err(in_batch)?;
                pr += pl.value;
                if cfg.alpha > 0.0 {
                    let scaled = tape.scale(v, cfg.alpha);
                    loss = tape.add(loss, scaled)?;
                }
                bank_updates.push((b.clone(), part, tape.value(bv.embed).clone()));
            }

            let report = total_loss(ce, pr, cfg.alpha, cfg.tau).map_err(|_| {
                in_batch(Error::NonFinite {
                    name: format!("loss (L_CE={ce}, L_PR={pr})"),
                })
            })?;
            let grads = tape.backward(loss);
            let named: Vec<(&str, &Tensor)> = vars
                .iter()
                .filter_map(|(name, v)| grads.get(*v).map(|g| (name.as_str(), g)))
                .collect();
            sgd.step(&mut params, named, lr).map_err(in_batch)?;
            for (b, part, embed) in bank_updates {
                let next = update_prototypes(&banks[&b], &part, &embed)?;
                banks.insert(b, next);
            }

            let n = idx.len() as f64;
            sums.ce += report.ce * n;
            sums.pr += report.pr * n;
            sums.total += report.total * n;
        }

        let n = train_set.len() as f64;
        let after_epoch = |e: Error| match e {
            Error::NonFinite { name } => Error::NonFinite {
                name: format!("{name} while evaluating after epoch {epoch}"),
            },
            other => other,
        };
        let train_m = metrics(&predict(&params, net, stage, train_set).map_err(after_epoch)?, &train_set.labels)?;
        let val_m = metrics(&predict(&params, net, stage, val_set).map_err(after_epoch)?, &val_set.labels)?;
        record.rows.push(EpochRow {
            epoch,
            lr,
            ce: sums.ce / n,
            pr: sums.pr / n,
            total: sums.total / n,
            train: train_m,
            val: val_m,
        });
        for (b, bank) in &banks {
            let init = &initial_banks[b];
            let cos = (0..bank.num_classes())
                .map(|k| cosine_sim(bank.row(k), init.row(k)))
                .collect::<Result<_>>()?;
            record.drift.push(DriftRow {
                epoch,
                branch: b.clone(),
                cos,
            });
        }
        if best.as_ref().is_none_or(|(v, _)| val_m.fused > *v) {
            best = Some((val_m.fused, snapshot(&params, &banks, epoch)));
        }
    }

    let (best_val, best) = best.expect("at least one epoch");
    record.best_epoch = best.epoch;
    record.best_val_fused = best_val;
    Ok(TrainOutcome {
        record,
        best,
        last: snapshot(&params, &banks, cfg.epochs - 1),
    })
}

/// Metrics, confusion matrix (rows = label, columns = fused prediction) and
/// the fused probabilities of one split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: PredictionFile,
}

pub fn evaluate(ck: &Checkpoint, ds: &Dataset) -> Result<EvalReport> {
    if ds.num_classes != ck.net.num_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes, checkpoint {}",
            ds.num_classes, ck.net.num_classes
        )));
    }
    let pred = predict(&ck.params, &ck.net, ck.stage, ds)?;
    let m = metrics(&pred, &ds.labels)?;
    let k = ck.net.num_classes;
    let mut confusion = vec![vec![0; k]; k];
    for (&l, p) in ds.labels.iter().zip(argmax_rows(&pred.fused)) {
        confusion[l][p] += 1;
    }
    let predictions = PredictionFile::new(ds.clip_ids.clone(), pred.fused.to_blob())?;
    Ok(EvalReport {
        metrics: m,
        confusion,
        predictions,
    })
}

/// Weighted average of probability rows, divided by the weight sum so rows
/// stay normalized. Arithmetic is f64, rounded to f32 once at the end.
pub fn ensemble(files: &[PredictionFile], weights: &[f64]) -> Result<PredictionFile> {
    let first = files.first().ok_or_else(|| Error::validation("ensemble of no files"))?;
    if weights.len() != files.len() {
        return Err(Error::validation(format!(
            "{} weights for {} files",
            weights.len(),
            files.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::validation(format!(
            "weights must be non-negative with a positive sum, got {weights:?}"
        )));
    }
    for (i, f) in files.iter().enumerate().skip(1) {
        if f.clip_ids != first.clip_ids {
            return Err(Error::validation(format!("file {i} has different clip ids")));
        }
        if f.num_classes() != first.num_classes() {
            return Err(Error::validation(format!("file {i} has a different class count")));
        }
    }
    let k = first.num_classes();
    let wsum: f64 = weights.iter().sum();
    let mut data = Vec::with_capacity(first.len() * k);
    for i in 0..first.len() {
        let mut row = vec![0.0f64; k];
        for (f, w) in files.iter().zip(weights) {
            for (r, &p) in row.iter_mut().zip(f.row(i)) {
                *r += w * f64::from(p);
            }
        }
        data.extend(row.iter().map(|v| (v / wsum) as f32));
    }
    PredictionFile::new(first.clip_ids.clone(), TensorBlob::new(vec![first.len(), k], data)?)
}

#[cfg(test)]
mod tests;
