//! Stage interaction: previous-stage block features modulate the current
//! stage's block features through spatially adaptive scale and shift maps.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct SpanUnit {
    pub from_same: Conv,
    pub from_mirror: Conv,
    pub scale: Conv,
    pub shift: Conv,
}

/// One modulator per denoiser block. Block `n` reads previous-stage
/// features of blocks `n` and `N−1−n` (its mirror across the U-shape):
///
/// `h = GELU(Conv(F_n) + Conv(F_mirror))`, `ψ = 1 + DConv(h)`, `γ = DConv(h)`,
/// `F = ψ ⊙ F̂ + γ`. Both depth-wise convs start at zero.
#[derive(Debug, Clone)]
pub struct StageInteraction {
    pub units: Vec<SpanUnit>,
}

impl StageInteraction {
    pub fn new(b: &mut Builder, block_channels: &[usize]) -> Result<Self> {
        let n = block_channels.len();
        for (i, &c) in block_channels.iter().enumerate() {
            if block_channels[n - 1 - i] != c {
                return Err(Error::Shape(format!("block {i} and its mirror differ in width")));
            }
        }
        let units = block_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut u = b.sub(&format!("span{i}"));
                Ok(SpanUnit {
                    from_same: u.conv("from_same", ConvSpec::pointwise(c, c).with_bias())?,
                    from_mirror: u.conv("from_mirror", ConvSpec::pointwise(c, c))?,
                    scale: u.conv("scale", ConvSpec::depthwise(c, 3).with_bias().zeroed())?,
                    shift: u.conv("shift", ConvSpec::depthwise(c, 3).with_bias().zeroed())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Modulate `current`, the output of block `n`, by `prev`, the previous
    /// stage's block outputs.
    pub fn apply(&self, g: &mut Graph, ps: &ParamStore, n: usize, current: Var, prev: &[Var]) -> Result<Var> {
        let count = self.units.len();
        if prev.len() != count || n >= count {
            return Err(Error::Shape(format!("block {n} of {count} with {} previous features", prev.len())));
        }
        let (same, mirror) = (prev[n], prev[count - 1 - n]);
        if g.value(same).shape() != g.value(current).shape() || g.value(mirror).shape() != g.value(current).shape() {
            return Err(Error::Shape(format!("previous-stage feature shape mismatch at block {n}")));
        }
        let u = &self.units[n];
        let a = u.from_same.forward(g, ps, same);
        let b = u.from_mirror.forward(g, ps, mirror);
        let h = g.add(a, b);
        let h = g.gelu(h);
        let psi = u.scale.forward(g, ps, h);
        let psi = g.add_scalar(psi, 1.0);
        let gamma = u.shift.forward(g, ps, h);
        let scaled = g.mul(psi, current);
        Ok(g.add(scaled, gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn setup() -> (ParamStore, StageInteraction, Graph, Vec<Var>, Var) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let span = StageInteraction::new(&mut Builder::new(&mut store, &mut rng, "s"), &[4, 8, 4]).unwrap();
        let mut g = Graph::new();
        let prev = vec![g.constant(rand_t(&[4, 6, 6], &mut rng)), g.constant(rand_t(&[8, 3, 3], &mut rng)), g.constant(rand_t(&[4, 6, 6], &mut rng))];
        let cur = g.constant(rand_t(&[4, 6, 6], &mut rng));
        (store, span, g, prev, cur)
    }

    #[test]
    fn zero_init_is_identity() {
        let (store, span, mut g, prev, cur) = setup();
        for n in [0, 2] {
            let out = span.apply(&mut g, &store, n, cur, &prev).unwrap();
            assert_eq!(g.value(out), g.value(cur));
        }
    }

    #[test]
    fn modulator_weights_receive_gradient() {
        let (store, span, mut g, prev, cur) = setup();
        let out = span.apply(&mut g, &store, 0, cur, &prev).unwrap();
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        let u = &span.units[0];
        for id in [u.scale.weight, u.shift.weight] {
            assert!(grads.get(id).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn rejects_asymmetric_widths_and_bad_prev() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(StageInteraction::new(&mut Builder::new(&mut store, &mut rng, "x"), &[4, 8]).is_err());
        let (store, span, mut g, prev, cur) = setup();
        assert!(span.apply(&mut g, &store, 1, cur, &prev).is_err());
        assert!(span.apply(&mut g, &store, 0, cur, &prev[..2]).is_err());
    }
}
