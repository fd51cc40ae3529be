//! Four-path inception branch for local spatial features.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::ParamStore;

/// Paths of `c/4` channels each: a 1×1 conv; 1×1 then a 3×3 depth-wise
/// conv; 1×1 then two 3×3 depth-wise convs (5×5 receptive field); 3×3
/// average pooling then 1×1. Outputs are concatenated back to `c` channels.
#[derive(Debug, Clone)]
pub struct InceptionBranch {
    pub p1: Conv,
    pub p2: [Conv; 2],
    pub p3: [Conv; 3],
    pub p4: Conv,
}

impl InceptionBranch {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let q = channels / 4;
        let pw = || ConvSpec::pointwise(channels, q).with_bias();
        let dw = || ConvSpec::depthwise(q, 3).with_bias();
        Ok(Self {
            p1: b.conv("p1", pw())?,
            p2: [b.conv("p2_pw", pw())?, b.conv("p2_dw", dw())?],
            p3: [b.conv("p3_pw", pw())?, b.conv("p3_dw1", dw())?, b.conv("p3_dw2", dw())?],
            p4: b.conv("p4", pw())?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let a = self.p1.forward(g, ps, x);
        let mut b = x;
        for conv in &self.p2 {
            b = conv.forward(g, ps, b);
        }
        let mut c = x;
        for conv in &self.p3 {
            c = conv.forward(g, ps, c);
        }
        let pooled = g.avg_pool3(x);
        let d = self.p4.forward(g, ps, pooled);
        g.concat(&[a, b, c, d])
    }
}
