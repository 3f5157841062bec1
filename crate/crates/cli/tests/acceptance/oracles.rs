//! Reference implementations written from the definitions with plain loops
//! over `Vec<f64>`, sharing no code with the library.

pub type Mat = Vec<Vec<f64>>;

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect()
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
        .collect()
}

/// Channel attention for one sample: queries from `q_in`, keys and values
/// from `kv_in`, each `(channels, frames)`; weights are row-major
/// `(frames, frames)`.
pub fn channel_attention(q_in: &Mat, kv_in: &Mat, q: (&[f64], &[f64]), k: (&[f64], &[f64]), v: (&[f64], &[f64])) -> Mat {
    let c = q_in.len();
    let t = q_in[0].len();
    let qs: Mat = q_in.iter().map(|x| affine(q.0, q.1, x)).collect();
    let ks: Mat = kv_in.iter().map(|x| affine(k.0, k.1, x)).collect();
    let vs: Mat = kv_in.iter().map(|x| affine(v.0, v.1, x)).collect();
    let mut out = vec![vec![0.0; t]; c];
    for i in 0..c {
        let mut scores = vec![0.0; c];
        for j in 0..c {
            for d in 0..t {
                scores[j] += qs[i][d] * ks[j][d];
            }
            scores[j] /= (t as f64).sqrt();
        }
        let w = softmax_rows(&vec![scores]).remove(0);
        for j in 0..c {
            for d in 0..t {
                out[i][d] += w[j] * vs[j][d];
            }
        }
    }
    out
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for j in 0..a.len() {
        ab += a[j] * b[j];
        aa += a[j] * a[j];
        bb += b[j] * b[j];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for l in 1..r.len() {
        if r[l] > r[best] {
            best = l;
        }
    }
    best
}

fn center(feats: &Mat, members: &[usize]) -> Option<Vec<f64>> {
    if members.is_empty() {
        return None;
    }
    let mut m = vec![0.0; feats[0].len()];
    for &i in members {
        for j in 0..m.len() {
            m[j] += feats[i][j] / members.len() as f64;
        }
    }
    Some(m)
}

/// Refinement loss averaged over true-positive anchors, with unstabilized
/// exponentials; zero when the batch has no anchor.
pub fn refinement_loss(protos: &Mat, feats: &Mat, probs: &Mat, labels: &[usize], tau: f64) -> f64 {
    let n = feats.len();
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let k = labels[i];
        if preds[i] != k {
            continue;
        }
        anchors += 1;
        let missed: Vec<usize> = (0..n).filter(|&j| labels[j] == k && preds[j] != k).collect();
        let intruders: Vec<usize> = (0..n).filter(|&j| preds[j] == k && labels[j] != k).collect();
        let phi = center(feats, &missed).map_or(0.0, |m| 1.0 - cos(&feats[i], &m));
        let varphi = center(feats, &intruders).map_or(0.0, |m| 1.0 + cos(&feats[i], &m));
        let others: f64 = (0..protos.len())
            .filter(|&l| l != k)
            .map(|l| (cos(&feats[i], &protos[l]) / tau).exp())
            .sum();
        for c in [varphi, phi] {
            let own = (cos(&feats[i], &protos[k]) / tau - (1.0 - probs[i][k]) * c).exp();
            total -= (own / (own + others)).ln();
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// Every `n`-long assignment of values below `k`.
pub fn assignments(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..k.pow(n as u32)).map(move |mut code| {
        (0..n)
            .map(|_| {
                let d = code % k;
                code /= k;
                d
            })
            .collect()
    })
}

/// Counts broken partition laws given per-class TP, FN and FP index sets.
pub fn partition_violations(
    labels: &[usize],
    preds: &[usize],
    tp: &[Vec<usize>],
    fn_: &[Vec<usize>],
    fp: &[Vec<usize>],
) -> usize {
    let k = tp.len();
    let mut bad = 0;
    for i in 0..labels.len() {
        let (l, p) = (labels[i], preds[i]);
        // coverage: exactly one of TP/FN under the true label
        bad += usize::from(tp[l].contains(&i) == fn_[l].contains(&i));
        // cross-consistency: a miss of l predicted as p is an FP of p
        bad += usize::from(fn_[l].contains(&i) != fp[p].contains(&i));
        // disjointness across classes and set kinds
        let homes = (0..k)
            .map(|c| {
                usize::from(tp[c].contains(&i)) + usize::from(fn_[c].contains(&i)) + usize::from(fp[c].contains(&i))
            })
            .sum::<usize>();
        bad += usize::from(homes != if l == p { 1 } else { 2 });
        bad += usize::from(tp[l].contains(&i) != (l == p));
    }
    let sizes = |s: &[Vec<usize>]| s.iter().map(Vec::len).sum::<usize>();
    bad += usize::from(sizes(tp) + sizes(fn_) != labels.len());
    bad += usize::from(sizes(fn_) != sizes(fp));
    bad
}
