use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!("layer_norm: input {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm: {c} channels, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = x.numel() / n;
    let inner = m / c;
    let mut out = Tensor::zeros(shape);
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; n];
    for ni in 0..n {
        let xs = &x.data()[ni * m..][..m];
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[ni] = r;
        let hs = &mut xhat[ni * m..][..m];
        let os = &mut out.data_mut()[ni * m..][..m];
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for j in ch * inner..(ch + 1) * inner {
                let h = (xs[j] - mean) * r;
                hs[j] = h;
                os[j] = g * h + b;
            }
        }
    }
    Ok((out, xhat, rstd))
}

pub(crate) fn layer_norm_backward(
    shape: &[usize],
    gamma: &Tensor,
    xhat: &[f64],
    rstd: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c) = (shape[0], shape[1]);
    let m = xhat.len() / n;
    let inner = m / c;
    let mut dx = Tensor::zeros(shape);
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    let mut dxhat = vec![0.0; m];
    for ni in 0..n {
        let hs = &xhat[ni * m..][..m];
        let dys = &dy.data()[ni * m..][..m];
        for ch in 0..c {
            let g = gamma.data()[ch];
            for j in ch * inner..(ch + 1) * inner {
                dxhat[j] = dys[j] * g;
                dg.data_mut()[ch] += dys[j] * hs[j];
                db.data_mut()[ch] += dys[j];
            }
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dh: f64 = dxhat.iter().zip(hs).map(|(a, b)| a * b).sum();
        let mf = m as f64;
        let dxs = &mut dx.data_mut()[ni * m..][..m];
        for j in 0..m {
            dxs[j] = rstd[ni] * (dxhat[j] - sum_d / mf - hs[j] * sum_dh / mf);
        }
    }
    (dx, dg, db)
}

fn gate_dims(x: &Tensor, g: &Tensor) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() < 2 || g.shape() != &xs[..2] {
        return Err(Error::shape(format!(
            "channel_gate: x {xs:?}, g {:?}",
            g.shape()
        )));
    }
    Ok((xs[0], xs[1], x.numel() / (xs[0] * xs[1])))
}

pub(crate) fn channel_gate_forward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, _, inner) = gate_dims(x, g)?;
    let mut out = x.clone();
    for (chunk, &gv) in out.data_mut().chunks_mut(inner).zip(g.data()) {
        chunk.iter_mut().for_each(|v| *v *= 1.0 + gv);
    }
    Ok(out)
}

pub(crate) fn channel_gate_backward(x: &Tensor, g: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (_, _, inner) = gate_dims(x, g).unwrap();
    let mut dx = dy.clone();
    let mut dg = Tensor::zeros(g.shape());
    for (((dxc, xc), &gv), dgv) in dx
        .data_mut()
        .chunks_mut(inner)
        .zip(x.data().chunks(inner))
        .zip(g.data())
        .zip(dg.data_mut())
    {
        *dgv = dxc.iter().zip(xc).map(|(d, xv)| d * xv).sum();
        dxc.iter_mut().for_each(|v| *v *= 1.0 + gv);
    }
    (dx, dg)
}

pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat: no inputs"))?;
    let fs = first.shape();
    if fs.len() < 2 {
        return Err(Error::shape(format!("concat: input {fs:?}")));
    }
    let n = fs[0];
    let inner: usize = fs[2..].iter().product();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != fs.len() || s[0] != n || s[2..] != fs[2..] {
            return Err(Error::shape(format!("concat: {s:?} vs {fs:?}")));
        }
        c_total += s[1];
    }
    let mut data = Vec::with_capacity(n * c_total * inner);
    for ni in 0..n {
        for p in parts {
            let w = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[ni * w..][..w]);
        }
    }
    let mut shape = fs.to_vec();
    shape[1] = c_total;
    Tensor::new(shape, data)
}

pub(crate) fn split_channels(dy: &Tensor, shapes: &[&[usize]]) -> Vec<Tensor> {
    let n = dy.shape()[0];
    let inner: usize = dy.shape()[2..].iter().product();
    let c_total = dy.shape()[1];
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let w = s[1] * inner;
            let mut data = Vec::with_capacity(n * w);
            for ni in 0..n {
                data.extend_from_slice(&dy.data()[ni * c_total * inner + offset..][..w]);
            }
            offset += w;
            Tensor::new(s.to_vec(), data).unwrap()
        })
        .collect()
}

/// Ties resolve to the first (lowest flat index) maximum.
pub(crate) fn max_pool_trailing(x: &Tensor, keep: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if keep == 0 || keep >= s.len() {
        return Err(Error::shape(format!("max_pool: keep {keep} of {s:?}")));
    }
    let window: usize = s[keep..].iter().product();
    let mut out = Vec::with_capacity(x.numel() / window);
    let mut argmax = Vec::with_capacity(x.numel() / window);
    for (i, chunk) in x.data().chunks(window).enumerate() {
        let mut best = 0;
        for (j, &v) in chunk.iter().enumerate() {
            if v > chunk[best] {
                best = j;
            }
        }
        out.push(chunk[best]);
        argmax.push(i * window + best);
    }
    Ok((Tensor::new(s[..keep].to_vec(), out)?, argmax))
}

pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [out_f, in_f]: [usize; 2] = w
        .shape()
        .try_into()
        .map_err(|_| Error::shape(format!("linear: weight {:?}", w.shape())))?;
    if x.shape().last() != Some(&in_f) || b.shape() != [out_f] {
        return Err(Error::shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.numel() / in_f;
    let mut data = Vec::with_capacity(rows * out_f);
    for xr in x.data().chunks(in_f) {
        for (o, wr) in w.data().chunks(in_f).enumerate() {
            data.push(b.data()[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, data)
}

pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[out_f]);
    for ((xr, dxr), dyr) in x
        .data()
        .chunks(in_f)
        .zip(dx.data_mut().chunks_mut(in_f))
        .zip(dy.data().chunks(out_f))
    {
        for (o, &d) in dyr.iter().enumerate() {
            let wr = &w.data()[o * in_f..][..in_f];
            for i in 0..in_f {
                dxr[i] += d * wr[i];
            }
            let dwr = &mut dw.data_mut()[o * in_f..][..in_f];
            for i in 0..in_f {
                dwr[i] += d * xr[i];
            }
            db.data_mut()[o] += d;
        }
    }
    (dx, dw, db)
}

pub(crate) fn mean_last(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("mean_last: input {s:?}")));
    }
    let l = s[s.len() - 1];
    let data = x
        .data()
        .chunks(l)
        .map(|c| c.iter().sum::<f64>() / l as f64)
        .collect();
    Tensor::new(s[..s.len() - 1].to_vec(), data)
}

/// Batched matmul with optional transposes: `op(a) · op(b)` per batch item.
pub(crate) fn bmm(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
        return Err(Error::shape(format!("bmm: {as_:?} x {bs:?}")));
    }
    let n = as_[0];
    let (p, q) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
    let (q2, r) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
    if q != q2 {
        return Err(Error::shape(format!(
            "bmm: inner dims {q} vs {q2} ({as_:?} x {bs:?})"
        )));
    }
    let a_at = |m: &[f64], i: usize, j: usize| if trans_a { m[j * as_[2] + i] } else { m[i * as_[2] + j] };
    let b_at = |m: &[f64], i: usize, j: usize| if trans_b { m[j * bs[2] + i] } else { m[i * bs[2] + j] };
    let mut out = Tensor::zeros(&[n, p, r]);
    for ni in 0..n {
        let am = &a.data()[ni * as_[1] * as_[2]..][..as_[1] * as_[2]];
        let bm = &b.data()[ni * bs[1] * bs[2]..][..bs[1] * bs[2]];
        let om = &mut out.data_mut()[ni * p * r..][..p * r];
        for i in 0..p {
            for j in 0..r {
                om[i * r + j] = (0..q).map(|t| a_at(am, i, t) * b_at(bm, t, j)).sum();
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row.iter().copied()) - row[l])
        .sum();
    total / labels.len() as f64
}
