//! Learned residual correction of the sensing operator.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::ParamStore;

/// Degradation learning conv block: `h + GELU(DConv3×3(Conv1×1(h)))`.
#[derive(Debug, Clone)]
pub struct Dlcb {
    pub mix: Conv,
    pub dw: Conv,
}

impl Dlcb {
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, h: Var) -> Var {
        let t = self.mix.forward(g, ps, h);
        let t = self.dw.forward(g, ps, t);
        let t = g.gelu(t);
        g.add(h, t)
    }
}

/// `R(y, Φ)`: the lifted measurement and Φ are concatenated, mapped to a
/// hidden width, passed through cascaded blocks and projected back to one
/// channel per band. The projection starts at zero so `Φ̂ = Φ` initially.
#[derive(Debug, Clone)]
pub struct ResidualDegradation {
    pub bands: usize,
    pub step: usize,
    pub head: Conv,
    pub blocks: Vec<Dlcb>,
    pub project: Conv,
}

impl ResidualDegradation {
    pub fn new(b: &mut Builder, bands: usize, step: usize, width: usize, blocks: usize) -> Result<Self> {
        let head = b.conv("head", ConvSpec::pointwise(2 * bands, width).with_bias())?;
        let blocks = (0..blocks)
            .map(|i| {
                let mut s = b.sub(&format!("dlcb{i}"));
                Ok(Dlcb { mix: s.conv("mix", ConvSpec::pointwise(width, width).with_bias())?, dw: s.conv("dw", ConvSpec::depthwise(width, 3).with_bias())? })
            })
            .collect::<Result<_>>()?;
        let project = b.conv("project", ConvSpec::pointwise(width, bands).with_bias().zeroed())?;
        Ok(Self { bands, step, head, blocks, project })
    }

    /// `y` is `[1, H, Ŵ]`, `phi` the shifted mask `[C, H, Ŵ]`; returns `Φ̂`.
    pub fn corrected(&self, g: &mut Graph, ps: &ParamStore, y: Var, phi: Var) -> Result<Var> {
        let r = self.residual(g, ps, y, phi)?;
        Ok(g.add(phi, r))
    }

    pub fn residual(&self, g: &mut Graph, ps: &ParamStore, y: Var, phi: Var) -> Result<Var> {
        let (c, h, wide) = g.value(phi).chw();
        if c != self.bands || g.value(y).shape() != [1, h, wide] {
            return Err(Error::Argument(format!("measurement {:?} does not fit operator {c}x{h}x{wide}", g.value(y).shape())));
        }
        let support = g.constant(band_support(c, h, wide, self.step)?);
        let lifted = g.mul(support, y);
        let cat = g.concat(&[lifted, phi]);
        let mut x = self.head.forward(g, ps, cat);
        for blk in &self.blocks {
            x = blk.forward(g, ps, x);
        }
        let r = self.project.forward(g, ps, x);
        Ok(g.mul(r, support))
    }
}

/// Indicator of the columns each band occupies on the sensor.
pub fn band_support(bands: usize, h: usize, wide: usize, step: usize) -> Result<Tensor> {
    let span = step * (bands - 1);
    if wide <= span {
        return Err(Error::Shape(format!("sensor width {wide} too small for {bands} bands at step {step}")));
    }
    let w = wide - span;
    let mut t = Tensor::zeros(&[bands, h, wide]);
    let d = t.data_mut();
    for c in 0..bands {
        for i in 0..h {
            d[(c * h + i) * wide + step * c..][..w].fill(1.0);
        }
    }
    Ok(t)
}
