//! A small reverse-mode autodiff tape over f64 tensors.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse. Only the operations the encoder, the fusion module and the losses
//! need are provided. Scalar losses with hand-derived gradients can be spliced
//! in with [`Tape::custom_scalar`].

mod conv;
mod ops;

pub use conv::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Sigmoid(Var),
    ChannelGate {
        x: Var,
        g: Var,
    },
    ConcatChannels(Vec<Var>),
    /// Max over all axes after the first `keep`; `argmax` holds flat source indices.
    MaxPoolTrailing {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanLast(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxLast(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
    CustomScalar {
        parents: Vec<Var>,
        local_grads: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Errors with `name` in the message if `v` holds NaN or infinities.
    pub fn check_finite(&self, v: Var, name: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                name: name.to_string(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    /// `x: (N, Ci, T, H, W)`, `w: (Co, Ci, kt, kh, kw)`, `b: (Co)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), self.value(b), &geom)?;
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, &[x, w, b]))
    }

    /// `x: (N, Ci, T, H, W)`, `w: (Ci, Co, kt, kh, kw)`, `b: (Co)`; no padding.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3]) -> Result<Var> {
        let out =
            conv::conv_transpose3d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(out, Op::ConvTranspose3d { x, w, b, stride }, &[x, w, b]))
    }

    /// Normalizes each sample over all non-batch axes, then applies a
    /// per-channel affine map (`gamma`, `beta` of shape `(C)`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v *= ops::sigmoid(*v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = ops::sigmoid(*v));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `x * (1 + g)` with `g: (N, C)` broadcast over the trailing axes of `x`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = ops::channel_gate_forward(self.value(x), self.value(g))?;
        Ok(self.push(out, Op::ChannelGate { x, g }, &[x, g]))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), parts))
    }

    /// Max over every axis from `keep` on: `(N, C, T, H, W)` with `keep = 3`
    /// gives `(N, C, T)`.
    pub fn max_pool_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool_trailing(self.value(x), keep)?;
        Ok(self.push(out, Op::MaxPoolTrailing { x, argmax }, &[x]))
    }

    /// Affine map over the last axis: `x: (.., in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean over the last axis, which is dropped.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_last(self.value(x))?;
        Ok(self.push(out, Op::MeanLast(x), &[x]))
    }

    /// Batched matmul `(N, p, q) x (N, q, r)`, or `a · bᵀ` with `b: (N, r, q)`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), false, trans_b)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = ops::softmax_last(self.value(x));
        self.push(out, Op::SoftmaxLast(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k]: [usize; 2] = lv
            .shape()
            .try_into()
            .map_err(|_| Error::shape(format!("cross_entropy: logits {:?}", lv.shape())))?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {n} rows, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
        }
        let probs = ops::softmax_last(lv);
        let loss = ops::cross_entropy_value(lv, labels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: probs.into_data(),
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// `sum(x * weights)` for a constant `weights`.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x]))
    }

    /// A scalar node whose value and local gradients were computed outside
    /// the tape. `local_grads[i]` is `∂value/∂parents[i]`.
    pub fn custom_scalar(
        &mut self,
        value: f64,
        parents: &[Var],
        local_grads: Vec<Tensor>,
    ) -> Result<Var> {
        if parents.len() != local_grads.len() {
            return Err(Error::shape("custom_scalar: one gradient per parent"));
        }
        for (p, g) in parents.iter().zip(&local_grads) {
            if self.value(*p).shape() != g.shape() {
                return Err(Error::shape(format!(
                    "custom_scalar: gradient {:?} for parent {:?}",
                    g.shape(),
                    self.value(*p).shape()
                )));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::CustomScalar {
                parents: parents.to_vec(),
                local_grads,
            },
            parents,
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(dy);
                continue;
            }
            for (parent, g) in self.local_backward(node, &dy) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Grads(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, node: &Node, dy: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Scale(x, k) => {
                let mut g = dy.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                vec![(*x, g)]
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    geom,
                    dy,
                    self.needs(*x),
                );
                let mut out = vec![(*w, dw), (*b, db)];
                out.extend(dx.map(|d| (*x, d)));
                out
            }
            Op::ConvTranspose3d { x, w, b, stride } => {
                let (dx, dw, db) = conv::conv_transpose3d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    *stride,
                    dy,
                    self.needs(*x),
                );
                let mut out = vec![(*w, dw), (*b, db)];
                out.extend(dx.map(|d| (*x, d)));
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(
                    self.value(*x).shape(),
                    self.value(*gamma),
                    xhat,
                    rstd,
                    dy,
                );
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Silu(x) => {
                let mut g = dy.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let s = ops::sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                }
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let mut g = dy.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                vec![(*x, g)]
            }
            Op::ChannelGate { x, g } => {
                let (dx, dg) = ops::channel_gate_backward(self.value(*x), self.value(*g), dy);
                vec![(*x, dx), (*g, dg)]
            }
            Op::ConcatChannels(parts) => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.value(*p).shape()).collect();
                parts
                    .iter()
                    .copied()
                    .zip(ops::split_channels(dy, &shapes))
                    .collect()
            }
            Op::MaxPoolTrailing { x, argmax } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    g.data_mut()[src] += d;
                }
                vec![(*x, g)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), dy);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MeanLast(x) => {
                let xv = self.value(*x);
                let l = *xv.shape().last().unwrap();
                let mut g = Tensor::zeros(xv.shape());
                for (chunk, &d) in g.data_mut().chunks_mut(l).zip(dy.data()) {
                    chunk.fill(d / l as f64);
                }
                vec![(*x, g)]
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if *trans_b {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = ops::bmm(dy, bv, false, false).unwrap();
                    let db = ops::bmm(dy, av, true, false).unwrap();
                    vec![(*a, da), (*b, db)]
                } else {
                    // y = a b: da = dy bᵀ, db = aᵀ dy
                    let da = ops::bmm(dy, bv, false, true).unwrap();
                    let db = ops::bmm(av, dy, true, false).unwrap();
                    vec![(*a, da), (*b, db)]
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let k = *y.shape().last().unwrap();
                let mut g = dy.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - s);
                    }
                }
                vec![(*x, g)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = self.value(*logits).shape();
                let (n, k) = (shape[0], shape[1]);
                let scale = dy.item() / n as f64;
                let mut g = Tensor::new(shape.to_vec(), probs.clone()).unwrap();
                for (row, &l) in g.data_mut().chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, g)]
            }
            Op::Dot { x, weights } => {
                let mut g = weights.clone();
                let d = dy.item();
                g.data_mut().iter_mut().for_each(|v| *v *= d);
                vec![(*x, g)]
            }
            Op::CustomScalar {
                parents,
                local_grads,
            } => {
                let d = dy.item();
                parents
                    .iter()
                    .zip(local_grads)
                    .map(|(p, g)| {
                        let mut g = g.clone();
                        g.data_mut().iter_mut().for_each(|v| *v *= d);
                        (*p, g)
                    })
                    .collect()
            }
        }
    }
}
