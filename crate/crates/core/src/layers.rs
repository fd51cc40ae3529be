//! Parameter registration helpers and the convolution layer shared by the networks.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let t = init.tensor(shape, self.rng);
        self.store.add(&full, t)
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        let ConvSpec { cin, cout, k, depthwise, bias, zero } = spec;
        let per_group = if depthwise { 1 } else { cin };
        let fan_in = per_group * k * k;
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        let mut b = self.sub(name);
        let weight = b.param("weight", &[cout, per_group, k, k], init)?;
        let bias = if bias { Some(b.param("bias", &[cout], init)?) } else { None };
        Ok(Conv { weight, bias, groups: if depthwise { cin } else { 1 } })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub depthwise: bool,
    pub bias: bool,
    pub zero: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self { cin, cout, k: 1, depthwise: false, bias: false, zero: false }
    }

    pub fn full(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, depthwise: false, bias: false, zero: false }
    }

    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self { cin: channels, cout: channels, k, depthwise: true, bias: false, zero: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn zeroed(mut self) -> Self {
        self.zero = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub groups: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.groups)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.weight).chain(self.bias)
    }
}
