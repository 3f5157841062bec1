//! Prototype-based refinement of ambiguous samples.
//!
//! Per batch and class `k`, samples split into true positives (predicted `k`,
//! labelled `k`), false negatives (labelled `k`, predicted otherwise) and
//! false positives (predicted `k`, labelled otherwise). The means of the FN
//! and FP embeddings calibrate a contrastive loss that pulls each TP anchor
//! towards its class prototype. Prototypes follow the TP embeddings by EMA.
//!
//! For anchor `i` of class `k`, with `d_l = cos(F′_i, P_l)`:
//!
//! ```text
//! phi    = 1 − cos(F′_i, μ_FN^k)   (0 without FN samples)
//! varphi = 1 + cos(F′_i, μ_FP^k)   (0 without FP samples)
//! s(c)   = d_k/τ − (1 − p_ik)·c
//! term(c) = −log( e^{s(c)} / (e^{s(c)} + Σ_{l≠k} e^{d_l/τ}) )
//! L_PR   = mean over anchors of term(varphi) + term(phi)
//! ```
//!
//! Centers and prototypes are constants for back-propagation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::net::argmax_rows;
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 0.9;
/// Allowed deviation of a prototype row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Which branches carry a refinement loss and a prototype bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrmBranch {
    Rgb,
    Pose,
    Both,
}

impl PrmBranch {
    pub fn includes(self, branch: &str) -> bool {
        matches!(
            (self, branch),
            (PrmBranch::Both, _) | (PrmBranch::Rgb, "rgb") | (PrmBranch::Pose, "pose")
        )
    }
}

impl fmt::Display for PrmBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrmBranch::Rgb => "rgb",
            PrmBranch::Pose => "pose",
            PrmBranch::Both => "both",
        })
    }
}

impl FromStr for PrmBranch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "pose" => Ok(Self::Pose),
            "both" => Ok(Self::Both),
            _ => Err(Error::validation(format!(
                "prm branch {s:?} (expected rgb, pose or both)"
            ))),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::validation(format!("cannot normalize {what} (norm {n})")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine_sim: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation("cosine_sim of a zero vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `∂cos(x, m)/∂x = m/(|x||m|) − cos·x/|x|²`.
fn cosine_grad(x: &[f64], m: &[f64], cos: f64) -> Vec<f64> {
    let (nx, nm) = (norm(x), norm(m));
    x.iter()
        .zip(m)
        .map(|(xi, mi)| mi / (nx * nm) - cos * xi / (nx * nx))
        .collect()
}

/// Unit-norm class prototypes `(K, D)` updated by EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    protos: Tensor,
    rho: f64,
}

impl PrototypeBank {
    pub fn random(k: usize, d: usize, rho: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut t = normal_tensor(rng, &[k, d], 1.0);
        for row in t.data_mut().chunks_mut(d) {
            let u = unit(row, "initial prototype")?;
            row.copy_from_slice(&u);
        }
        Self::new(t, rho)
    }

    pub fn new(protos: Tensor, rho: f64) -> Result<Self> {
        if protos.ndim() != 2 {
            return Err(Error::shape(format!("prototype bank {:?}", protos.shape())));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::validation(format!("rho {rho} outside [0, 1]")));
        }
        let d = protos.shape()[1];
        for (k, row) in protos.data().chunks(d).enumerate() {
            if (norm(row) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::validation(format!(
                    "prototype {k} has norm {}",
                    norm(row)
                )));
            }
        }
        Ok(Self { protos, rho })
    }

    pub fn protos(&self) -> &Tensor {
        &self.protos
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn num_classes(&self) -> usize {
        self.protos.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.protos.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.protos.row(k)
    }
}

/// TP/FN/FP index sets per class, plus the ambiguous-sample centers once
/// [`ambiguous_centers`] has run.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPartition {
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    pub tp: Vec<Vec<usize>>,
    pub fn_: Vec<Vec<usize>>,
    pub fp: Vec<Vec<usize>>,
    pub mu_fn: Vec<Option<Vec<f64>>>,
    pub mu_fp: Vec<Option<Vec<f64>>>,
}

impl BatchPartition {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// TP anchors `(i, k)` in batch order.
    pub fn anchors(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .zip(&self.preds)
            .enumerate()
            .filter(|(_, (l, p))| l == p)
            .map(|(i, (l, _))| (i, *l))
    }
}

/// Partition from the row-wise argmax of `scores` (logits or probabilities).
pub fn partition_batch(scores: &Tensor, labels: &[usize]) -> Result<BatchPartition> {
    if labels.is_empty() {
        return Err(Error::validation("partition of an empty batch"));
    }
    if scores.ndim() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "partition: scores {:?} for {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    partition_from_preds(&argmax_rows(scores), labels, scores.shape()[1])
}

pub fn partition_from_preds(preds: &[usize], labels: &[usize], k: usize) -> Result<BatchPartition> {
    if preds.len() != labels.len() {
        return Err(Error::shape("partition: one prediction per label"));
    }
    if let Some(&bad) = labels.iter().chain(preds).find(|&&c| c >= k) {
        return Err(Error::validation(format!("class {bad} out of range for {k} classes")));
    }
    let mut tp = vec![Vec::new(); k];
    let mut fn_ = vec![Vec::new(); k];
    let mut fp = vec![Vec::new(); k];
    for (i, (&l, &p)) in labels.iter().zip(preds).enumerate() {
        if l == p {
            tp[l].push(i);
        } else {
            fn_[l].push(i);
            fp[p].push(i);
        }
    }
    Ok(BatchPartition {
        labels: labels.to_vec(),
        preds: preds.to_vec(),
        tp,
        fn_,
        fp,
        mu_fn: vec![None; k],
        mu_fp: vec![None; k],
    })
}

fn check_feats(part: &BatchPartition, feats: &Tensor) -> Result<usize> {
    if feats.ndim() != 2 || feats.shape()[0] != part.len() {
        return Err(Error::shape(format!(
            "features {:?} for a batch of {}",
            feats.shape(),
            part.len()
        )));
    }
    if !feats.is_finite() {
        return Err(Error::NonFinite {
            name: "prototype features".into(),
        });
    }
    Ok(feats.shape()[1])
}

fn mean_rows(feats: &Tensor, idx: &[usize]) -> Option<Vec<f64>> {
    if idx.is_empty() {
        return None;
    }
    let d = feats.shape()[1];
    let mut m = vec![0.0; d];
    for &i in idx {
        for (a, b) in m.iter_mut().zip(feats.row(i)) {
            *a += b;
        }
    }
    let n = idx.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Some(m)
}

/// Fills `mu_fn` / `mu_fp` with the mean embedding of each non-empty set.
pub fn ambiguous_centers(mut part: BatchPartition, feats: &Tensor) -> Result<BatchPartition> {
    check_feats(&part, feats)?;
    part.mu_fn = part.fn_.iter().map(|s| mean_rows(feats, s)).collect();
    part.mu_fp = part.fp.iter().map(|s| mean_rows(feats, s)).collect();
    Ok(part)
}

/// EMA towards the mean of the L2-normalized TP embeddings, then
/// renormalization. Classes without TP samples keep their row bit for bit.
pub fn update_prototypes(
    bank: &PrototypeBank,
    part: &BatchPartition,
    feats: &Tensor,
) -> Result<PrototypeBank> {
    let d = check_feats(part, feats)?;
    if d != bank.dim() || part.num_classes() != bank.num_classes() {
        return Err(Error::shape(format!(
            "bank ({}, {}) vs batch with {} classes and D={d}",
            bank.num_classes(),
            bank.dim(),
            part.num_classes()
        )));
    }
    let mut next = bank.protos.clone();
    for (k, idx) in part.tp.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for &i in idx {
            for (a, b) in mean.iter_mut().zip(unit(feats.row(i), "TP embedding")?) {
                *a += b;
            }
        }
        let n = idx.len() as f64;
        let moved: Vec<f64> = mean
            .iter()
            .zip(bank.row(k))
            .map(|(m, p)| (1.0 - bank.rho) * (m / n) + bank.rho * p)
            .collect();
        let moved = unit(&moved, "updated prototype")?;
        next.data_mut()[k * d..(k + 1) * d].copy_from_slice(&moved);
    }
    Ok(PrototypeBank {
        protos: next,
        rho: bank.rho,
    })
}

fn require_anchor(part: &BatchPartition, i: usize, k: usize) -> Result<()> {
    if i >= part.len() || k >= part.num_classes() || !part.tp[k].contains(&i) {
        return Err(Error::validation(format!(
            "sample {i} is not a true positive of class {k}"
        )));
    }
    Ok(())
}

/// `(phi_i, varphi_i)` for anchor `i` of class `k`.
pub fn calibration_terms(part: &BatchPartition, feats: &Tensor, i: usize, k: usize) -> Result<(f64, f64)> {
    require_anchor(part, i, k)?;
    check_feats(part, feats)?;
    let x = feats.row(i);
    let phi = match &part.mu_fn[k] {
        Some(mu) => 1.0 - cosine_sim(x, mu)?,
        None => 0.0,
    };
    let varphi = match &part.mu_fp[k] {
        Some(mu) => 1.0 + cosine_sim(x, mu)?,
        None => 0.0,
    };
    Ok((phi, varphi))
}

/// Diagnostics for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTerms {
    pub index: usize,
    pub class: usize,
    pub phi: f64,
    pub varphi: f64,
    pub term_a: f64,
    pub term_b: f64,
}

/// Loss value with its gradients w.r.t. the embeddings and the probabilities.
#[derive(Clone, Debug)]
pub struct ProtoLoss {
    pub value: f64,
    pub anchors: Vec<AnchorTerms>,
    pub d_feats: Tensor,
    pub d_probs: Tensor,
}

/// `−log softmax(v)[0]` and the softmax itself, stabilized.
fn neg_log_first(v: &[f64]) -> (f64, Vec<f64>) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    let lse = m + z.ln();
    (lse - v[0], v.iter().map(|x| (x - lse).exp()).collect())
}

pub fn proto_loss(
    bank: &PrototypeBank,
    part: &BatchPartition,
    feats: &Tensor,
    probs: &Tensor,
    tau: f64,
) -> Result<ProtoLoss> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::validation(format!("tau must be positive, got {tau}")));
    }
    let d = check_feats(part, feats)?;
    let k_all = bank.num_classes();
    if d != bank.dim() || part.num_classes() != k_all || probs.shape() != [part.len(), k_all] {
        return Err(Error::shape(format!(
            "bank ({k_all}, {}), features {:?}, probs {:?}",
            bank.dim(),
            feats.shape(),
            probs.shape()
        )));
    }
    let mut d_feats = Tensor::zeros(feats.shape());
    let mut d_probs = Tensor::zeros(probs.shape());
    let mut anchors = Vec::new();
    let mut total = 0.0;
    for (i, k) in part.anchors() {
        let x = feats.row(i);
        let p = probs.data()[i * k_all + k];
        let sims: Vec<f64> = (0..k_all)
            .map(|l| cosine_sim(x, bank.row(l)))
            .collect::<Result<_>>()?;
        let (phi, varphi) = calibration_terms(part, feats, i, k)?;

        // gradients of phi and varphi w.r.t. the anchor; centers are constants
        let zero = vec![0.0; d];
        let d_phi = match &part.mu_fn[k] {
            Some(mu) => cosine_grad(x, mu, 1.0 - phi).iter().map(|g| -g).collect(),
            None => zero.clone(),
        };
        let d_varphi = match &part.mu_fp[k] {
            Some(mu) => cosine_grad(x, mu, varphi - 1.0),
            None => zero,
        };
        let d_sims: Vec<Vec<f64>> = (0..k_all)
            .map(|l| cosine_grad(x, bank.row(l), sims[l]))
            .collect();

        let mut terms = [0.0; 2];
        let mut gx = vec![0.0; d];
        let mut gp = 0.0;
        for (slot, (c, dc)) in [(varphi, &d_varphi), (phi, &d_phi)].into_iter().enumerate() {
            let mut v = vec![sims[k] / tau - (1.0 - p) * c];
            v.extend((0..k_all).filter(|&l| l != k).map(|l| sims[l] / tau));
            let (term, q) = neg_log_first(&v);
            terms[slot] = term;
            // ∂term/∂s = q[0] − 1, ∂term/∂z_l = q_l
            let ds = q[0] - 1.0;
            for (j, g) in gx.iter_mut().enumerate() {
                *g += ds * (d_sims[k][j] / tau - (1.0 - p) * dc[j]);
            }
            for (qi, l) in q[1..].iter().zip((0..k_all).filter(|&l| l != k)) {
                for (j, g) in gx.iter_mut().enumerate() {
                    *g += qi * d_sims[l][j] / tau;
                }
            }
            gp += ds * c;
        }
        total += terms[0] + terms[1];
        for (a, g) in d_feats.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&gx) {
            *a += g;
        }
        d_probs.data_mut()[i * k_all + k] += gp;
        anchors.push(AnchorTerms {
            index: i,
            class: k,
            phi,
            varphi,
            term_a: terms[0],
            term_b: terms[1],
        });
    }
    let n = anchors.len();
    if n == 0 {
        return Ok(ProtoLoss {
            value: 0.0,
            anchors,
            d_feats,
            d_probs,
        });
    }
    let inv = 1.0 / n as f64;
    d_feats.data_mut().iter_mut().for_each(|g| *g *= inv);
    d_probs.data_mut().iter_mut().for_each(|g| *g *= inv);
    let value = total * inv;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            name: "prototypical refinement loss".into(),
        });
    }
    Ok(ProtoLoss {
        value,
        anchors,
        d_feats,
        d_probs,
    })
}

/// Puts the refinement loss on `tape` as a scalar node over `embed` `(N, D)`
/// and `probs` `(N, K)`. `part` must already carry its centers.
pub fn proto_loss_on_tape(
    tape: &mut Tape,
    embed: Var,
    probs: Var,
    bank: &PrototypeBank,
    part: &BatchPartition,
    tau: f64,
) -> Result<(Var, ProtoLoss)> {
    let loss = proto_loss(bank, part, tape.value(embed), tape.value(probs), tau)?;
    let v = tape.custom_scalar(
        loss.value,
        &[embed, probs],
        vec![loss.d_feats.clone(), loss.d_probs.clone()],
    )?;
    Ok((v, loss))
}

/// Losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub pr: f64,
    pub total: f64,
    pub alpha: f64,
    pub tau: f64,
    pub anchors: Vec<AnchorTerms>,
}

/// `total = ce + alpha·pr`.
pub fn total_loss(ce: f64, pr: f64, alpha: f64, tau: f64) -> Result<LossReport> {
    if !(alpha >= 0.0) {
        return Err(Error::validation(format!("alpha must be non-negative, got {alpha}")));
    }
    let total = ce + alpha * pr;
    for (name, v) in [("L_CE", ce), ("L_PR", pr), ("L_total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { name: name.into() });
        }
    }
    Ok(LossReport {
        ce,
        pr,
        total,
        alpha,
        tau,
        anchors: Vec::new(),
    })
}
