//! Prediction files (`.pred`): one probability row per clip, as text.
//!
//! ```text
//! # mgproto predictions
//! shape 2 3
//! c0000 0.7 0.2 0.1
//! c0001 0.05 0.05 0.9
//! ```
//!
//! Values are f32 written in shortest round-trip form, so a read/write cycle
//! is bit-exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorBlob;

/// Row sums must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub clip_ids: Vec<String>,
    /// Shape `(N, K)`.
    pub probs: TensorBlob,
}

impl PredictionFile {
    pub fn new(clip_ids: Vec<String>, probs: TensorBlob) -> Result<Self> {
        let p = PredictionFile { clip_ids, probs };
        p.validate()?;
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.num_classes();
        &self.probs.data()[i * k..(i + 1) * k]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.probs.shape();
        if shape.len() != 2 || shape[0] != self.clip_ids.len() {
            return Err(Error::shape(format!(
                "probs shape {shape:?} does not match {} clip ids",
                self.clip_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.clip_ids {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!("bad clip id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate clip id {id:?}")));
            }
        }
        for (i, id) in self.clip_ids.iter().enumerate() {
            let row = self.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::validation(format!(
                    "clip {id}: probability outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().map(|&p| f64::from(p)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!(
                    "clip {id}: row sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# mgproto predictions\n");
        writeln!(s, "shape {} {}", self.len(), self.num_classes()).unwrap();
        for (i, id) in self.clip_ids.iter().enumerate() {
            s.push_str(id);
            for p in self.row(i) {
                write!(s, " {p}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut shape: Option<(usize, usize)> = None;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::parse(path, i + 1, msg);
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match (shape, toks.as_slice()) {
                (None, ["shape", n, k]) => {
                    let n = n.parse().map_err(|_| err(format!("bad row count {n:?}")))?;
                    let k = k.parse().map_err(|_| err(format!("bad class count {k:?}")))?;
                    shape = Some((n, k));
                }
                (None, _) => return Err(err("expected `shape <N> <K>` first".into())),
                (Some((_, k)), [id, probs @ ..]) => {
                    if probs.len() != k {
                        return Err(err(format!("expected {k} values, got {}", probs.len())));
                    }
                    ids.push((*id).to_string());
                    for p in probs {
                        data.push(
                            p.parse::<f32>()
                                .map_err(|_| err(format!("bad probability {p:?}")))?,
                        );
                    }
                }
                (Some(_), []) => unreachable!(),
            }
        }
        let (n, k) = shape.ok_or_else(|| Error::parse(path, 0, "missing shape line"))?;
        if ids.len() != n {
            return Err(Error::parse(
                path,
                0,
                format!("header declares {n} rows, file has {}", ids.len()),
            ));
        }
        PredictionFile::new(ids, TensorBlob::new(vec![n, k], data)?)
    }
}

pub fn write_predictions(path: impl AsRef<Path>, p: &PredictionFile) -> Result<()> {
    let path = path.as_ref();
    p.validate()?;
    fs::write(path, p.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PredictionFile::parse(&text, path)
}
