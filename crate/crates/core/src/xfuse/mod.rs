//! Cross-modal fusion between the stage-1 RGB and pose feature maps.
//!
//! Data flow for one exchange, per sample (`m` is a modality, `m̄` the other):
//!
//! 1. `pool_project`: a 3-D conv maps `X̂_m` to `C′` channels at the shared
//!    temporal length `T′` (pose is strided by the frame-rate ratio), then
//!    spatial max-pooling leaves a `(C′, T′)` descriptor `X̂′_m`.
//! 2. `channel_cross_attention`: tokens are the `C′` channels, each a
//!    `T′`-vector. `Q = W_q X̂′_m`, `K = W_k X̂′_m̄`, `V = W_v X̂′_m̄` and
//!    `Attn_m = softmax(Q Kᵀ / √T′) V`. With [`AttentionSource::SelfAttention`]
//!    `K` and `V` come from `m` as well.
//! 3. `gate_modulate`: `g_m = act(W_g · mean_t(Attn_m) + b_g)` gives one scale
//!    per channel of `X̂_m`, and `X̂″_m = g_m ⊙ X̂_m + X̂_m`.
//! 4. `lateral_concat`: `X̄_rgb = [down(X̂_pose); X̂″_rgb]` and
//!    `X̄_pose = [up(X̂_rgb); X̂″_pose]`, where `down` is a strided conv and
//!    `up` a transposed conv along time.
//!
//! The lateral and gate weights start at zero, so a freshly attached module
//! passes each branch through unchanged up to a uniform channel scale.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Tape, Var};
use crate::params::{he_normal, lecun_normal, ParamStore, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSource {
    /// Queries from the own modality, keys and values from the other one.
    Cross,
    /// Queries, keys and values all from the own modality.
    SelfAttention,
}

impl fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionSource::Cross => "cross",
            AttentionSource::SelfAttention => "self",
        })
    }
}

impl FromStr for AttentionSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "self" => Ok(Self::SelfAttention),
            _ => Err(Error::validation(format!(
                "attention source {s:?} (expected cross or self)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateAct {
    Identity,
    Sigmoid,
}

impl fmt::Display for GateAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateAct::Identity => "identity",
            GateAct::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for GateAct {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::validation(format!(
                "gate activation {s:?} (expected identity or sigmoid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// When false the branches run independently and the lateral slots are zero.
    pub enabled: bool,
    /// Hidden channel count `C′`.
    pub hidden: usize,
    pub lateral_channels: usize,
    pub attention_source: AttentionSource,
    pub gate_act: GateAct,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: 16,
            lateral_channels: 8,
            attention_source: AttentionSource::Cross,
            gate_act: GateAct::Sigmoid,
        }
    }
}

/// Shapes the fusion module is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    pub c_rgb: usize,
    pub c_pose: usize,
    /// Common temporal length `T′` (the RGB stage-1 length).
    pub t_common: usize,
    /// Pose frames per RGB frame at the fusion point.
    pub stride_ratio: usize,
}

const P: &str = "xfuse";

fn name(s: &str) -> String {
    format!("{P}.{s}")
}

/// Adds the `xfuse.*` parameters to `store`.
pub fn init_params(store: &mut ParamStore, cfg: &FusionConfig, d: &FusionDims, rng: &mut impl Rng) {
    let (h, t, r, l) = (cfg.hidden, d.t_common, d.stride_ratio, cfg.lateral_channels);
    store.insert(name("proj_rgb.weight"), he_normal(rng, &[h, d.c_rgb, 1, 1, 1], d.c_rgb));
    store.insert(name("proj_rgb.bias"), Tensor::zeros(&[h]));
    store.insert(
        name("proj_pose.weight"),
        he_normal(rng, &[h, d.c_pose, r, 1, 1], d.c_pose * r),
    );
    store.insert(name("proj_pose.bias"), Tensor::zeros(&[h]));
    for m in ["rgb", "pose"] {
        for p in ["q", "k", "v"] {
            store.insert(name(&format!("{p}_{m}.weight")), lecun_normal(rng, &[t, t], t));
            store.insert(name(&format!("{p}_{m}.bias")), Tensor::zeros(&[t]));
        }
    }
    store.insert(name("gate_rgb.weight"), Tensor::zeros(&[d.c_rgb, h]));
    store.insert(name("gate_rgb.bias"), Tensor::zeros(&[d.c_rgb]));
    store.insert(name("gate_pose.weight"), Tensor::zeros(&[d.c_pose, h]));
    store.insert(name("gate_pose.bias"), Tensor::zeros(&[d.c_pose]));
    store.insert(name("lateral_down.weight"), Tensor::zeros(&[l, d.c_pose, r, 1, 1]));
    store.insert(name("lateral_down.bias"), Tensor::zeros(&[l]));
    store.insert(name("lateral_up.weight"), Tensor::zeros(&[d.c_rgb, l, r, 1, 1]));
    store.insert(name("lateral_up.bias"), Tensor::zeros(&[l]));
}

/// Tape handles for every intermediate of one exchange.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub pooled_rgb: Var,
    pub pooled_pose: Var,
    /// Softmax weights `(N, C′, C′)`; rows index query channels.
    pub weights_rgb: Var,
    pub weights_pose: Var,
    pub attn_rgb: Var,
    pub attn_pose: Var,
    pub mod_rgb: Var,
    pub mod_pose: Var,
    pub out_rgb: Var,
    pub out_pose: Var,
}

/// Intermediate values of one exchange.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub pooled_rgb: Tensor,
    pub pooled_pose: Tensor,
    pub weights_rgb: Tensor,
    pub weights_pose: Tensor,
    pub attn_rgb: Tensor,
    pub attn_pose: Tensor,
    pub mod_rgb: Tensor,
    pub mod_pose: Tensor,
    pub out_rgb: Tensor,
    pub out_pose: Tensor,
}

impl FusionVars {
    pub fn values(&self, tape: &Tape) -> FusionState {
        let v = |x: Var| tape.value(x).clone();
        FusionState {
            pooled_rgb: v(self.pooled_rgb),
            pooled_pose: v(self.pooled_pose),
            weights_rgb: v(self.weights_rgb),
            weights_pose: v(self.weights_pose),
            attn_rgb: v(self.attn_rgb),
            attn_pose: v(self.attn_pose),
            mod_rgb: v(self.mod_rgb),
            mod_pose: v(self.mod_pose),
            out_rgb: v(self.out_rgb),
            out_pose: v(self.out_pose),
        }
    }
}

/// `(N, C, T, H, W)` → `(N, C′, T′)`: conv with kernel and stride
/// `(temporal_stride, 1, 1)`, then max over `H × W`.
pub fn pool_project(tape: &mut Tape, x: Var, w: Var, b: Var, temporal_stride: usize) -> Result<Var> {
    let geom = ConvGeom::new([temporal_stride, 1, 1], [0; 3]);
    let y = tape.conv3d(x, w, b, geom)?;
    tape.max_pool_trailing(y, 3)
}

pub struct AttnVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
}

impl AttnVars {
    pub fn for_modality(vars: &ParamVars, m: &str) -> Result<Self> {
        let pair = |p: &str| -> Result<(Var, Var)> {
            Ok((
                vars.get(&name(&format!("{p}_{m}.weight")))?,
                vars.get(&name(&format!("{p}_{m}.bias")))?,
            ))
        };
        Ok(Self {
            q: pair("q")?,
            k: pair("k")?,
            v: pair("v")?,
        })
    }
}

/// Returns `(weights, attended)` for each modality:
/// `((w_rgb, attn_rgb), (w_pose, attn_pose))`.
pub fn channel_cross_attention(
    tape: &mut Tape,
    pooled_rgb: Var,
    pooled_pose: Var,
    rgb: &AttnVars,
    pose: &AttnVars,
    source: AttentionSource,
) -> Result<((Var, Var), (Var, Var))> {
    let (sr, sp) = (tape.value(pooled_rgb).shape(), tape.value(pooled_pose).shape());
    if sr.len() != 3 || sr != sp {
        return Err(Error::shape(format!(
            "channel attention descriptors {sr:?} vs {sp:?}"
        )));
    }
    let d = sr[2] as f64;
    let proj = |tape: &mut Tape, x: Var, wb: (Var, Var)| tape.linear(x, wb.0, wb.1);
    let q_r = proj(tape, pooled_rgb, rgb.q)?;
    let k_r = proj(tape, pooled_rgb, rgb.k)?;
    let v_r = proj(tape, pooled_rgb, rgb.v)?;
    let q_p = proj(tape, pooled_pose, pose.q)?;
    let k_p = proj(tape, pooled_pose, pose.k)?;
    let v_p = proj(tape, pooled_pose, pose.v)?;
    let (kv_for_rgb, kv_for_pose) = match source {
        AttentionSource::Cross => ((k_p, v_p), (k_r, v_r)),
        AttentionSource::SelfAttention => ((k_r, v_r), (k_p, v_p)),
    };
    let mut attend = |q: Var, (k, v): (Var, Var)| -> Result<(Var, Var)> {
        let s = tape.bmm(q, k, true)?;
        let s = tape.scale(s, 1.0 / d.sqrt());
        let w = tape.softmax_last(s);
        let a = tape.bmm(w, v, false)?;
        Ok((w, a))
    };
    let r = attend(q_r, kv_for_rgb)?;
    let p = attend(q_p, kv_for_pose)?;
    Ok((r, p))
}

/// `X̂″ = act(W_g · mean_t(attn) + b_g) ⊙ X̂ + X̂`.
pub fn gate_modulate(
    tape: &mut Tape,
    attn: Var,
    x: Var,
    w: Var,
    b: Var,
    act: GateAct,
) -> Result<Var> {
    let m = tape.mean_last(attn)?;
    let g = tape.linear(m, w, b)?;
    let g = match act {
        GateAct::Identity => g,
        GateAct::Sigmoid => tape.sigmoid(g),
    };
    tape.channel_gate(x, g)
}

/// `(X̄_rgb, X̄_pose)`; requires `T_pose = stride_ratio · T_rgb`.
#[allow(clippy::too_many_arguments)]
pub fn lateral_concat(
    tape: &mut Tape,
    x_rgb: Var,
    x_pose: Var,
    mod_rgb: Var,
    mod_pose: Var,
    down: (Var, Var),
    up: (Var, Var),
    stride_ratio: usize,
) -> Result<(Var, Var)> {
    let (tr, tp) = (tape.value(x_rgb).shape()[2], tape.value(x_pose).shape()[2]);
    if tp != stride_ratio * tr {
        return Err(Error::shape(format!(
            "temporal contract violated: pose T={tp}, rgb T={tr}, ratio {stride_ratio}"
        )));
    }
    let to_rgb = tape.conv3d(
        x_pose,
        down.0,
        down.1,
        ConvGeom::new([stride_ratio, 1, 1], [0; 3]),
    )?;
    let to_pose = tape.conv_transpose3d(x_rgb, up.0, up.1, [stride_ratio, 1, 1])?;
    let out_rgb = tape.concat_channels(&[to_rgb, mod_rgb])?;
    let out_pose = tape.concat_channels(&[to_pose, mod_pose])?;
    Ok((out_rgb, out_pose))
}

/// Runs the whole exchange on stage-1 features.
pub fn exchange(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &FusionConfig,
    dims: &FusionDims,
    x_rgb: Var,
    x_pose: Var,
) -> Result<FusionVars> {
    let g = |n: &str| vars.get(&name(n));
    let pooled_rgb = pool_project(tape, x_rgb, g("proj_rgb.weight")?, g("proj_rgb.bias")?, 1)?;
    let pooled_pose = pool_project(
        tape,
        x_pose,
        g("proj_pose.weight")?,
        g("proj_pose.bias")?,
        dims.stride_ratio,
    )?;
    let ((weights_rgb, attn_rgb), (weights_pose, attn_pose)) = channel_cross_attention(
        tape,
        pooled_rgb,
        pooled_pose,
        &AttnVars::for_modality(vars, "rgb")?,
        &AttnVars::for_modality(vars, "pose")?,
        cfg.attention_source,
    )?;
    tape.check_finite(attn_rgb, "xfuse.attn_rgb")?;
    tape.check_finite(attn_pose, "xfuse.attn_pose")?;
    let mod_rgb = gate_modulate(
        tape,
        attn_rgb,
        x_rgb,
        g("gate_rgb.weight")?,
        g("gate_rgb.bias")?,
        cfg.gate_act,
    )?;
    let mod_pose = gate_modulate(
        tape,
        attn_pose,
        x_pose,
        g("gate_pose.weight")?,
        g("gate_pose.bias")?,
        cfg.gate_act,
    )?;
    let (out_rgb, out_pose) = lateral_concat(
        tape,
        x_rgb,
        x_pose,
        mod_rgb,
        mod_pose,
        (g("lateral_down.weight")?, g("lateral_down.bias")?),
        (g("lateral_up.weight")?, g("lateral_up.bias")?),
        dims.stride_ratio,
    )?;
    tape.check_finite(out_rgb, "xfuse.out_rgb")?;
    tape.check_finite(out_pose, "xfuse.out_pose")?;
    Ok(FusionVars {
        pooled_rgb,
        pooled_pose,
        weights_rgb,
        weights_pose,
        attn_rgb,
        attn_pose,
        mod_rgb,
        mod_pose,
        out_rgb,
        out_pose,
    })
}

/// Value-only exchange for inspection and tests.
pub fn fuse_features(
    params: &ParamStore,
    cfg: &FusionConfig,
    dims: &FusionDims,
    x_rgb: &Tensor,
    x_pose: &Tensor,
) -> Result<FusionState> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xr = tape.constant(x_rgb.clone());
    let xp = tape.constant(x_pose.clone());
    let fv = exchange(&mut tape, &vars, cfg, dims, xr, xp)?;
    Ok(fv.values(&tape))
}
