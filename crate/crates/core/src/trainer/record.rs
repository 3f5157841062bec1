//! Per-epoch run records and their text forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::Stage;

/// Top-1 accuracies; a branch that did not run is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub rgb: Option<f64>,
    pub pose: Option<f64>,
    pub fused: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub ce: f64,
    pub pr: f64,
    pub total: f64,
    pub train: Metrics,
    pub val: Metrics,
}

/// Cosine similarity of each prototype to its value before training.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub epoch: usize,
    pub branch: String,
    pub cos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub stage: Stage,
    /// Validation accuracy before the first step.
    pub initial_val: Metrics,
    pub rows: Vec<EpochRow>,
    pub drift: Vec<DriftRow>,
    pub best_epoch: usize,
    pub best_val_fused: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Option<Option<f64>> {
    if s == "-" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

pub const TSV_HEADER: &str =
    "epoch\tlr\tL_CE\tL_PR\tL_total\ttrain_rgb\ttrain_pose\ttrain_fused\tval_rgb\tval_pose\tval_fused";

impl RunRecord {
    pub fn new(stage: Stage, initial_val: Metrics) -> Self {
        Self {
            stage,
            initial_val,
            rows: Vec::new(),
            drift: Vec::new(),
            best_epoch: 0,
            best_val_fused: 0.0,
        }
    }

    /// One tab-separated row per epoch; floats in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.lr,
                r.ce,
                r.pr,
                r.total,
                opt(r.train.rgb),
                opt(r.train.pose),
                r.train.fused,
                opt(r.val.rgb),
                opt(r.val.pose),
                r.val.fused
            )
            .unwrap();
        }
        s
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<EpochRow>> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse(path, n + 1, "malformed run record row");
            if f.len() != 11 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let o = |i: usize| parse_opt(f[i]).ok_or_else(bad);
            rows.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                ce: num(2)?,
                pr: num(3)?,
                total: num(4)?,
                train: Metrics {
                    rgb: o(5)?,
                    pose: o(6)?,
                    fused: num(7)?,
                },
                val: Metrics {
                    rgb: o(8)?,
                    pose: o(9)?,
                    fused: num(10)?,
                },
            });
        }
        Ok(rows)
    }

    /// `epoch branch class cos` rows.
    pub fn drift_tsv(&self) -> String {
        let mut s = String::from("epoch\tbranch\tclass\tcos\n");
        for d in &self.drift {
            for (k, c) in d.cos.iter().enumerate() {
                writeln!(s, "{}\t{}\t{k}\t{c}", d.epoch, d.branch).unwrap();
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let last = self.rows.last();
        writeln!(s, "stage {}", self.stage).unwrap();
        writeln!(s, "epochs {}", self.rows.len()).unwrap();
        writeln!(s, "best_epoch {}", self.best_epoch).unwrap();
        writeln!(s, "best_val_fused {}", self.best_val_fused).unwrap();
        writeln!(s, "initial_val_rgb {}", opt(self.initial_val.rgb)).unwrap();
        writeln!(s, "initial_val_pose {}", opt(self.initial_val.pose)).unwrap();
        writeln!(s, "initial_val_fused {}", self.initial_val.fused).unwrap();
        if let Some(r) = last {
            writeln!(s, "final_L_total {}", r.total).unwrap();
            writeln!(s, "final_train_fused {}", r.train.fused).unwrap();
            writeln!(s, "final_val_fused {}", r.val.fused).unwrap();
        }
        s
    }

    /// Writes `record.tsv`, `proto_drift.tsv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("record.tsv", self.to_tsv()),
            ("proto_drift.tsv", self.drift_tsv()),
            ("summary.txt", self.summary()),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
