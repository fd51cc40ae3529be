//! The MixS² transformer block and its feed-forward and gating parts.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::{Init, ParamId, ParamStore};

use super::attention::SmsaBranch;
use super::inception::InceptionBranch;

pub const LN_EPS: f64 = 1e-5;

/// Gated depth-wise-conv feed-forward network.
#[derive(Debug, Clone)]
pub struct Gdfn {
    pub expand: Conv,
    pub dw: Conv,
    pub project: Conv,
    pub hidden: usize,
}

impl Gdfn {
    pub fn new(b: &mut Builder, channels: usize, expansion: f64) -> Result<Self> {
        let hidden = ((channels as f64 * expansion).round() as usize).max(1);
        Ok(Self {
            expand: b.conv("expand", ConvSpec::pointwise(channels, 2 * hidden))?,
            dw: b.conv("dw", ConvSpec::depthwise(2 * hidden, 3))?,
            project: b.conv("project", ConvSpec::pointwise(hidden, channels))?,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let (p1, p2) = self.paths(g, ps, x);
        let gate = g.gelu(p2);
        let h = g.mul(p1, gate);
        self.project.forward(g, ps, h)
    }

    /// Value path and pre-activation gate path.
    pub fn paths(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> (Var, Var) {
        let e = self.expand.forward(g, ps, x);
        let e = self.dw.forward(g, ps, e);
        (g.slice_channels(e, 0, self.hidden), g.slice_channels(e, self.hidden, self.hidden))
    }
}

/// Spatial context from the inception branch: a `[1, H, W]` map in (0, 1).
#[derive(Debug, Clone)]
pub struct SpatialGate {
    pub conv: Conv,
}

impl SpatialGate {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self { conv: b.conv("conv", ConvSpec::pointwise(channels, 1).with_bias())? })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, incep: Var) -> Var {
        let logits = self.conv.forward(g, ps, incep);
        g.sigmoid(logits)
    }
}

/// Spectral context from the attention branch: squeeze-excitation weights
/// `[C, 1, 1]` in (0, 1).
#[derive(Debug, Clone)]
pub struct SpectralGate {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl SpectralGate {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let mid = (channels / 4).max(1);
        Ok(Self {
            squeeze: b.conv("squeeze", ConvSpec::pointwise(channels, mid).with_bias())?,
            excite: b.conv("excite", ConvSpec::pointwise(mid, channels).with_bias())?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, attn: Var) -> Var {
        let s = g.global_avg_pool(attn);
        let s = self.squeeze.forward(g, ps, s);
        let s = g.gelu(s);
        let s = self.excite.forward(g, ps, s);
        g.sigmoid(s)
    }
}

/// Which parts of the block exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSwitches {
    pub spatial_branch: bool,
    pub bidirectional: bool,
}

/// Parallel spectral-attention and inception branches with optional
/// bi-directional interaction, followed by a GDFN; both halves residual.
#[derive(Debug, Clone)]
pub struct MixS2Block {
    pub norm1: ParamId,
    pub smsa: SmsaBranch,
    pub inception: Option<InceptionBranch>,
    pub spatial_gate: Option<SpatialGate>,
    pub spectral_gate: Option<SpectralGate>,
    pub fuse: Option<Conv>,
    pub norm2: ParamId,
    pub gdfn: Gdfn,
}

impl MixS2Block {
    pub fn new(b: &mut Builder, channels: usize, heads: usize, expansion: f64, sw: BlockSwitches) -> Result<Self> {
        let bidir = sw.spatial_branch && sw.bidirectional;
        Ok(Self {
            norm1: b.param("norm1", &[channels], Init::Ones)?,
            smsa: SmsaBranch::new(&mut b.sub("smsa"), channels, heads)?,
            inception: if sw.spatial_branch { Some(InceptionBranch::new(&mut b.sub("inception"), channels)?) } else { None },
            spatial_gate: if bidir { Some(SpatialGate::new(&mut b.sub("spatial_gate"), channels)?) } else { None },
            spectral_gate: if bidir { Some(SpectralGate::new(&mut b.sub("spectral_gate"), channels)?) } else { None },
            fuse: if sw.spatial_branch { Some(b.conv("fuse", ConvSpec::pointwise(2 * channels, channels))?) } else { None },
            norm2: b.param("norm2", &[channels], Init::Ones)?,
            gdfn: Gdfn::new(&mut b.sub("gdfn"), channels, expansion)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        self.forward_impl(g, ps, x, false)
    }

    /// Forward with both interaction maps replaced by ones.
    pub fn forward_unit_gates(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        self.forward_impl(g, ps, x, true)
    }

    fn forward_impl(&self, g: &mut Graph, ps: &ParamStore, x: Var, unit_gates: bool) -> Result<Var> {
        let w1 = g.param(ps, self.norm1);
        let n1 = g.layer_norm_channels(x, w1, LN_EPS);
        let mixed = match (&self.inception, &self.fuse) {
            (Some(inc), Some(fuse)) => {
                let incep = inc.forward(g, ps, n1);
                let spatial = match (&self.spatial_gate, unit_gates) {
                    (Some(sg), false) => Some(sg.forward(g, ps, incep)),
                    _ => None,
                };
                let attn = self.smsa.forward(g, ps, n1, spatial)?;
                let incep = match (&self.spectral_gate, unit_gates) {
                    (Some(se), false) => {
                        let wts = se.forward(g, ps, attn);
                        g.mul(incep, wts)
                    }
                    _ => incep,
                };
                let cat = g.concat(&[attn, incep]);
                fuse.forward(g, ps, cat)
            }
            _ => self.smsa.forward(g, ps, n1, None)?,
        };
        let x1 = g.add(x, mixed);
        let w2 = g.param(ps, self.norm2);
        let n2 = g.layer_norm_channels(x1, w2, LN_EPS);
        let f = self.gdfn.forward(g, ps, n2);
        Ok(g.add(x1, f))
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

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    fn block(sw: BlockSwitches, seed: u64) -> (ParamStore, MixS2Block) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = MixS2Block::new(&mut Builder::new(&mut store, &mut rng, "b"), 8, 2, 2.0, sw).unwrap();
        (store, blk)
    }

    const FULL: BlockSwitches = BlockSwitches { spatial_branch: true, bidirectional: true };

    #[test]
    fn gdfn_with_unit_gate_is_two_conv_mlp() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gd = Gdfn::new(&mut Builder::new(&mut store, &mut rng, "g"), 4, 2.0).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(rand_t(&[4, 5, 5], &mut rng));
        let (p1, _) = gd.paths(&mut g, &store, x);
        let mlp = gd.project.forward(&mut g, &store, p1);

        let (p1b, _) = gd.paths(&mut g, &store, x);
        let one = g.constant(Tensor::full(&[8, 5, 5], 1.0));
        let gated = g.mul(p1b, one);
        let out = gd.project.forward(&mut g, &store, gated);
        assert_eq!(g.value(out), g.value(mlp));

        let z = g.constant(Tensor::zeros(&[4, 5, 5]));
        let zo = gd.forward(&mut g, &store, z);
        assert!(g.value(zo).data().iter().all(|&v| v == 0.0));
        let y = gd.forward(&mut g, &store, x);
        assert_eq!(g.value(y).shape(), &[4, 5, 5]);
    }

    #[test]
    fn gates_range_and_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sg = SpatialGate::new(&mut Builder::new(&mut store, &mut rng, "s"), 8).unwrap();
        let se = SpectralGate::new(&mut Builder::new(&mut store, &mut rng, "e"), 8).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(rand_t(&[8, 4, 6], &mut rng));
        let m = sg.forward(&mut g, &store, x);
        assert_eq!(g.value(m).shape(), &[1, 4, 6]);
        assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let w = se.forward(&mut g, &store, x);
        assert_eq!(g.value(w).shape(), &[8, 1, 1]);
        assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));

        for id in sg.conv.params().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::inference();
        let x = g.constant(rand_t(&[8, 4, 6], &mut rng));
        let m = sg.forward(&mut g, &store, x);
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unit_gates_match_block_without_interaction() {
        let (mut full, fb) = block(FULL, 2);
        randomize(&mut full, 3);
        let (mut plain, pb) = block(BlockSwitches { spatial_branch: true, bidirectional: false }, 4);
        assert_eq!(plain.copy_matching(&full), plain.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = rand_t(&[8, 6, 6], &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(xt.clone());
        let a = fb.forward_unit_gates(&mut g, &full, x).unwrap();
        let c = fb.forward(&mut g, &full, x).unwrap();
        let mut g2 = Graph::inference();
        let x2 = g2.constant(xt);
        let b = pb.forward(&mut g2, &plain, x2).unwrap();
        assert_eq!(g.value(a), g2.value(b));
        assert!(g.value(c).max_abs_diff(g.value(a)) > 1e-6);
    }

    #[test]
    fn zeroed_branch_outputs_make_identity() {
        for sw in [FULL, BlockSwitches { spatial_branch: false, bidirectional: false }] {
            let (mut store, blk) = block(sw, 6);
            randomize(&mut store, 7);
            let mut zero = vec![blk.smsa.proj.weight, blk.gdfn.project.weight];
            zero.extend(blk.fuse.iter().map(|c| c.weight));
            for id in zero {
                store.value_mut(id).data_mut().fill(0.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut g = Graph::inference();
            let xt = rand_t(&[8, 4, 4], &mut rng);
            let x = g.constant(xt.clone());
            let y = blk.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.value(y), &xt);
        }
    }

    #[test]
    fn every_weight_gets_gradient() {
        let (mut store, blk) = block(FULL, 9);
        randomize(&mut store, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&[8, 6, 6], &mut rng));
        let y = blk.forward(&mut g, &store, x).unwrap();
        let t = g.constant(rand_t(&[8, 6, 6], &mut rng));
        let loss = g.charbonnier(y, t, 1e-3);
        let grads = g.backward(loss);
        for id in store.ids() {
            let gr = grads.get(id).unwrap_or_else(|| panic!("no grad for {}", store.name(id)));
            assert!(gr.data().iter().any(|&v| v != 0.0), "zero grad for {}", store.name(id));
        }
    }

    #[test]
    fn spatial_branch_off_has_fewer_params() {
        let (a, _) = block(FULL, 0);
        let (b, _) = block(BlockSwitches { spatial_branch: true, bidirectional: false }, 0);
        let (c, _) = block(BlockSwitches { spatial_branch: false, bidirectional: false }, 0);
        assert!(a.num_scalars() > b.num_scalars());
        assert!(b.num_scalars() > c.num_scalars());
    }
}
