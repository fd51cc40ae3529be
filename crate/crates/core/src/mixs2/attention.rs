//! Spectral-wise multi-head self-attention (S-MSA).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::{Init, ParamId, ParamStore};

const NORM_EPS: f64 = 1e-12;

/// Transposed attention for one head.
///
/// `q`, `k`, `v` are `[c, H, W]` feature maps read as `Q: HW×c`,
/// `K: c×HW`, `V: HW×c`; `alpha` has one element. Returns the attended
/// features `V·softmax_rows(K·Q / α)` back in `[c, H, W]` layout, and the
/// `c×c` attention map.
pub fn spectral_attention_core(g: &mut Graph, q: Var, k: Var, v: Var, alpha: Var) -> Result<(Var, Var)> {
    for (name, t) in [("q", q), ("k", k), ("v", v), ("alpha", alpha)] {
        if !g.value(t).all_finite() {
            return Err(Error::Numeric(format!("non-finite {name} entering spectral attention")));
        }
    }
    let (c, h, w) = g.value(q).chw();
    if g.value(k).chw() != (c, h, w) || g.value(v).chw() != (c, h, w) {
        return Err(Error::Shape("q, k, v shapes differ".into()));
    }
    let qm = g.reshape(q, &[c, h * w]);
    let km = g.reshape(k, &[c, h * w]);
    let vm = g.reshape(v, &[c, h * w]);
    // (K·Q)[i, j] = k_i · q_j
    let logits = g.matmul(km, qm, false, true);
    let inv_alpha = g.recip(alpha);
    let inv_alpha = g.reshape(inv_alpha, &[1, 1]);
    let scaled = g.mul(logits, inv_alpha);
    let attn = g.softmax_rows(scaled);
    // (V·A) in channel-major layout: out[j, p] = Σ_i A[i, j] v[i, p]
    let out = g.matmul(attn, vm, true, false);
    let out = g.reshape(out, &[c, h, w]);
    Ok((out, attn))
}

/// Q/K/V embedding (1×1 conv then 3×3 depth-wise conv), per-head spectral
/// attention and an output projection.
#[derive(Debug, Clone)]
pub struct SmsaBranch {
    pub qkv: Conv,
    pub qkv_dw: Conv,
    pub alpha: ParamId,
    pub proj: Conv,
    pub heads: usize,
    pub channels: usize,
}

impl SmsaBranch {
    pub fn new(b: &mut Builder, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: b.conv("qkv", ConvSpec::pointwise(channels, 3 * channels))?,
            qkv_dw: b.conv("qkv_dw", ConvSpec::depthwise(3 * channels, 3))?,
            alpha: b.param("alpha", &[heads, 1, 1], Init::Ones)?,
            proj: b.conv("proj", ConvSpec::pointwise(channels, channels))?,
            heads,
            channels,
        })
    }

    /// `spatial_map`, when given, is a `[1, H, W]` gate applied to Q, K and V.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, spatial_map: Option<Var>) -> Result<Var> {
        let c = self.channels;
        let (_, h, w) = g.value(x).chw();
        let qkv = self.qkv.forward(g, ps, x);
        let qkv = self.qkv_dw.forward(g, ps, qkv);
        let mut q = g.slice_channels(qkv, 0, c);
        let mut k = g.slice_channels(qkv, c, c);
        let mut v = g.slice_channels(qkv, 2 * c, c);
        if let Some(m) = spatial_map {
            q = g.mul(q, m);
            k = g.mul(k, m);
            v = g.mul(v, m);
        }
        let alpha = g.param(ps, self.alpha);
        let ch = c / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = self.normalized(g, q, head * ch, ch, h, w);
            let kh = self.normalized(g, k, head * ch, ch, h, w);
            let vh = g.slice_channels(v, head * ch, ch);
            let ah = g.slice_channels(alpha, head, 1);
            let (o, _) = spectral_attention_core(g, qh, kh, vh, ah)?;
            outs.push(o);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
        Ok(self.proj.forward(g, ps, joined))
    }

    /// Channels `start..start+len` with each channel L2-normalized over positions.
    fn normalized(&self, g: &mut Graph, x: Var, start: usize, len: usize, h: usize, w: usize) -> Var {
        let s = g.slice_channels(x, start, len);
        let m = g.reshape(s, &[len, h * w]);
        let n = g.l2_normalize_rows(m, NORM_EPS);
        g.reshape(n, &[len, h, w])
    }
}
