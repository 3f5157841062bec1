//! 3-D convolution kernels over `(N, C, T, H, W)` tensors.
//!
//! Work is split per sample and partial weight gradients are summed in sample
//! order, so results are bit-identical regardless of the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub const fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, axis: usize, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad[axis];
        if padded < k || self.stride[axis] == 0 {
            return None;
        }
        Some((padded - k) / self.stride[axis] + 1)
    }
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(format!("{what}: expected 5-D, got {:?}", t.shape())))
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < len`.
fn valid_range(len: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride <= len - 1 + pad - k
    let top = len + pad;
    let hi = if top > k {
        ((top - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) struct ConvShapes {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub inp: [usize; 3],
    pub k: [usize; 3],
    pub out: [usize; 3],
}

pub(crate) fn conv3d_shapes(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Result<ConvShapes> {
    let [n, ci, t, h, wd] = dims5(x, "conv3d input")?;
    let [co, wci, kt, kh, kw] = dims5(w, "conv3d weight")?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv3d: input has {ci} channels, weight expects {wci}"
        )));
    }
    if b.shape() != [co] {
        return Err(Error::shape(format!(
            "conv3d: bias shape {:?}, expected [{co}]",
            b.shape()
        )));
    }
    let out = [(0, t, kt), (1, h, kh), (2, wd, kw)]
        .map(|(a, len, k)| g.out_len(a, len, k));
    let [Some(to), Some(ho), Some(wo)] = out else {
        return Err(Error::shape(format!(
            "conv3d: kernel {:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        )));
    };
    Ok(ConvShapes {
        n,
        ci,
        co,
        inp: [t, h, wd],
        k: [kt, kh, kw],
        out: [to, ho, wo],
    })
}

/// Unfolds one sample `(C, T, H, W)` into a `(C*kt*kh*kw, To*Ho*Wo)` column matrix.
fn im2col(xs: &[f64], s: &ConvShapes, g: &ConvGeom, col: &mut [f64]) {
    let [t, h, wd] = s.inp;
    let [kt, kh, kw] = s.k;
    let [to, ho, wo] = s.out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = to * ho * wo;
    col.fill(0.0);
    for cin in 0..s.ci {
        let xc = &xs[cin * t * h * wd..][..t * h * wd];
        for a in 0..kt {
            let (tlo, thi) = valid_range(t, to, st, a, pt);
            for bb in 0..kh {
                let (hlo, hhi) = valid_range(h, ho, sh, bb, ph);
                for cc in 0..kw {
                    let (wlo, whi) = valid_range(wd, wo, sw, cc, pw);
                    let row = ((cin * kt + a) * kh + bb) * kw + cc;
                    let crow = &mut col[row * p..][..p];
                    for ot in tlo..thi {
                        let it = ot * st + a - pt;
                        for oh in hlo..hhi {
                            let ih = oh * sh + bb - ph;
                            let xrow = &xc[(it * h + ih) * wd..][..wd];
                            let dst = &mut crow[(ot * ho + oh) * wo..][..wo];
                            for ow in wlo..whi {
                                dst[ow] = xrow[ow * sw + cc - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto one sample.
fn col2im(col: &[f64], s: &ConvShapes, g: &ConvGeom, dxs: &mut [f64]) {
    let [t, h, wd] = s.inp;
    let [kt, kh, kw] = s.k;
    let [to, ho, wo] = s.out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let p = to * ho * wo;
    for cin in 0..s.ci {
        let dxc = &mut dxs[cin * t * h * wd..][..t * h * wd];
        for a in 0..kt {
            let (tlo, thi) = valid_range(t, to, st, a, pt);
            for bb in 0..kh {
                let (hlo, hhi) = valid_range(h, ho, sh, bb, ph);
                for cc in 0..kw {
                    let (wlo, whi) = valid_range(wd, wo, sw, cc, pw);
                    let row = ((cin * kt + a) * kh + bb) * kw + cc;
                    let crow = &col[row * p..][..p];
                    for ot in tlo..thi {
                        let it = ot * st + a - pt;
                        for oh in hlo..hhi {
                            let ih = oh * sh + bb - ph;
                            let dxrow = &mut dxc[(it * h + ih) * wd..][..wd];
                            let src = &crow[(ot * ho + oh) * wo..][..wo];
                            for ow in wlo..whi {
                                dxrow[ow * sw + cc - pw] += src[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta*c + a * b` for row-major `a: (m, k)` and `b: (k, n)` given by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer to cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let s = conv3d_shapes(x, w, b, g)?;
    let [to, ho, wo] = s.out;
    let in_slab = s.inp.iter().product::<usize>() * s.ci;
    let p = to * ho * wo;
    let kc = s.ci * s.k.iter().product::<usize>();
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = Tensor::zeros(&[s.n, s.co, to, ho, wo]);
    out.data_mut()
        .par_chunks_mut(s.co * p)
        .enumerate()
        .for_each(|(ni, o)| {
            let mut col = vec![0.0; kc * p];
            im2col(&xd[ni * in_slab..][..in_slab], &s, g, &mut col);
            for (c, orow) in o.chunks_mut(p).enumerate() {
                orow.fill(bd[c]);
            }
            gemm(s.co, kc, p, wdat, (kc as isize, 1), &col, (p as isize, 1), 1.0, o);
        });
    Ok(out)
}

/// Gradients `(dx, dw, db)` of a 3-D convolution. `dx` is skipped when not needed.
pub(crate) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    g: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let s = conv3d_shapes(x, w, b, g).expect("shapes validated in forward");
    let in_slab = s.inp.iter().product::<usize>() * s.ci;
    let p = s.out.iter().product::<usize>();
    let kc = s.ci * s.k.iter().product::<usize>();
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let per_sample = |ni: usize, dxs: Option<&mut [f64]>| {
        let dys = &dyd[ni * s.co * p..][..s.co * p];
        let mut col = vec![0.0; kc * p];
        im2col(&xd[ni * in_slab..][..in_slab], &s, g, &mut col);
        let mut dw_n = vec![0.0; s.co * kc];
        gemm(s.co, p, kc, dys, (p as isize, 1), &col, (1, p as isize), 0.0, &mut dw_n);
        if let Some(dxs) = dxs {
            gemm(kc, s.co, p, wdat, (1, kc as isize), dys, (p as isize, 1), 0.0, &mut col);
            col2im(&col, &s, g, dxs);
        }
        dw_n
    };
    let partial: Vec<Vec<f64>> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(in_slab)
            .enumerate()
            .map(|(ni, dxs)| per_sample(ni, Some(dxs)))
            .collect(),
        None => (0..s.n).into_par_iter().map(|ni| per_sample(ni, None)).collect(),
    };
    let mut dw = Tensor::zeros(w.shape());
    for part in &partial {
        for (acc, v) in dw.data_mut().iter_mut().zip(part) {
            *acc += v;
        }
    }

    let db = channel_sums(dyd, s.n, s.co, p);
    (dx, dw, db)
}

fn channel_sums(d: &[f64], n: usize, c: usize, slab: usize) -> Tensor {
    let mut db = Tensor::zeros(&[c]);
    for (ch, acc) in db.data_mut().iter_mut().enumerate() {
        for ni in 0..n {
            *acc += d[(ni * c + ch) * slab..][..slab].iter().sum::<f64>();
        }
    }
    db
}

pub(crate) fn conv_transpose3d_shapes(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: [usize; 3],
) -> Result<ConvShapes> {
    let [n, ci, t, h, wd] = dims5(x, "conv_transpose3d input")?;
    let [wci, co, kt, kh, kw] = dims5(w, "conv_transpose3d weight")?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv_transpose3d: input has {ci} channels, weight expects {wci}"
        )));
    }
    if b.shape() != [co] {
        return Err(Error::shape(format!(
            "conv_transpose3d: bias shape {:?}, expected [{co}]",
            b.shape()
        )));
    }
    if stride.contains(&0) {
        return Err(Error::shape("conv_transpose3d: zero stride"));
    }
    let out = [
        (t - 1) * stride[0] + kt,
        (h - 1) * stride[1] + kh,
        (wd - 1) * stride[2] + kw,
    ];
    Ok(ConvShapes {
        n,
        ci,
        co,
        inp: [t, h, wd],
        k: [kt, kh, kw],
        out,
    })
}

/// Transposed convolution without padding; weight is `(C_in, C_out, kt, kh, kw)`.
pub(crate) fn conv_transpose3d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: [usize; 3],
) -> Result<Tensor> {
    let s = conv_transpose3d_shapes(x, w, b, stride)?;
    let [t, h, wd] = s.inp;
    let [kt, kh, kw] = s.k;
    let [to, ho, wo] = s.out;
    let [st, sh, sw] = stride;
    let in_slab = t * h * wd;
    let out_slab = to * ho * wo;
    let k_slab = kt * kh * kw;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = Tensor::zeros(&[s.n, s.co, to, ho, wo]);
    out.data_mut()
        .par_chunks_mut(out_slab)
        .enumerate()
        .for_each(|(slab, o)| {
            let (ni, c) = (slab / s.co, slab % s.co);
            o.fill(bd[c]);
            for cin in 0..s.ci {
                let xs = &xd[(ni * s.ci + cin) * in_slab..][..in_slab];
                let ws = &wdat[(cin * s.co + c) * k_slab..][..k_slab];
                for a in 0..kt {
                    for bb in 0..kh {
                        for cc in 0..kw {
                            let wv = ws[(a * kh + bb) * kw + cc];
                            for it in 0..t {
                                let ot = it * st + a;
                                for ih in 0..h {
                                    let oh = ih * sh + bb;
                                    let xrow = &xs[(it * h + ih) * wd..][..wd];
                                    let orow = &mut o[(ot * ho + oh) * wo..][..wo];
                                    for (iw, xv) in xrow.iter().enumerate() {
                                        orow[iw * sw + cc] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: [usize; 3],
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let s = conv_transpose3d_shapes(x, w, b, stride).expect("shapes validated in forward");
    let [t, h, wd] = s.inp;
    let [kt, kh, kw] = s.k;
    let [to, ho, wo] = s.out;
    let [st, sh, sw] = stride;
    let in_slab = t * h * wd;
    let out_slab = to * ho * wo;
    let k_slab = kt * kh * kw;
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        dx.data_mut()
            .par_chunks_mut(in_slab)
            .enumerate()
            .for_each(|(slab, dxs)| {
                let (ni, cin) = (slab / s.ci, slab % s.ci);
                for c in 0..s.co {
                    let dys = &dyd[(ni * s.co + c) * out_slab..][..out_slab];
                    let ws = &wdat[(cin * s.co + c) * k_slab..][..k_slab];
                    for a in 0..kt {
                        for bb in 0..kh {
                            for cc in 0..kw {
                                let wv = ws[(a * kh + bb) * kw + cc];
                                for it in 0..t {
                                    let ot = it * st + a;
                                    for ih in 0..h {
                                        let oh = ih * sh + bb;
                                        let dyrow = &dys[(ot * ho + oh) * wo..][..wo];
                                        let dxrow = &mut dxs[(it * h + ih) * wd..][..wd];
                                        for (iw, dxv) in dxrow.iter_mut().enumerate() {
                                            *dxv += wv * dyrow[iw * sw + cc];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        dx
    });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut()
        .par_chunks_mut(k_slab)
        .enumerate()
        .for_each(|(pair, dws)| {
            let (cin, c) = (pair / s.co, pair % s.co);
            for a in 0..kt {
                for bb in 0..kh {
                    for cc in 0..kw {
                        let mut acc = 0.0;
                        for ni in 0..s.n {
                            let xs = &xd[(ni * s.ci + cin) * in_slab..][..in_slab];
                            let dys = &dyd[(ni * s.co + c) * out_slab..][..out_slab];
                            for it in 0..t {
                                let ot = it * st + a;
                                for ih in 0..h {
                                    let oh = ih * sh + bb;
                                    let dyrow = &dys[(ot * ho + oh) * wo..][..wo];
                                    let xrow = &xs[(it * h + ih) * wd..][..wd];
                                    for (iw, xv) in xrow.iter().enumerate() {
                                        acc += xv * dyrow[iw * sw + cc];
                                    }
                                }
                            }
                        }
                        dws[(a * kh + bb) * kw + cc] = acc;
                    }
                }
            }
        });

    let db = channel_sums(dyd, s.n, s.co, out_slab);
    (dx, dw, db)
}
