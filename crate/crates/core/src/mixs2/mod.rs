//! The MixS² transformer: a U-shaped denoiser built from blocks that mix
//! spectral self-attention with a convolutional inception branch.
//!
//! The network runs on the dispersed (shifted) cube, so its width is
//! `W + step·(C−1)`; the input is shifted on entry and unshifted on exit.

pub mod attention;
pub mod block;
pub mod inception;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Builder, Conv, ConvSpec};
use crate::params::ParamStore;
use crate::unfolding::StageInteraction;

pub use attention::{spectral_attention_core, SmsaBranch};
pub use block::{BlockSwitches, Gdfn, MixS2Block, SpatialGate, SpectralGate};
pub use inception::InceptionBranch;

/// Previous-stage block features and the modulators that consume them.
pub struct Modulation<'a> {
    pub span: &'a StageInteraction,
    pub prev: &'a [Var],
}

pub struct DenoiserOutput {
    /// Denoised cube `[C, H, W]`.
    pub image: Var,
    /// Output of every transformer block in listing order: encoder levels,
    /// bottleneck, then decoder levels from coarse to fine.
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MixS2Denoiser {
    pub bands: usize,
    pub step: usize,
    pub levels: usize,
    pub embed: Conv,
    pub encoder: Vec<Vec<MixS2Block>>,
    pub down: Vec<Conv>,
    pub bottleneck: Vec<MixS2Block>,
    /// Indexed by level; applied from level `levels-2` down to 0.
    pub up: Vec<Conv>,
    pub block_fuse: Vec<Option<Conv>>,
    pub skip_fuse: Vec<Conv>,
    pub decoder: Vec<Vec<MixS2Block>>,
    pub out: Conv,
}

impl MixS2Denoiser {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let sw = BlockSwitches { spatial_branch: cfg.use_spatial_branch, bidirectional: cfg.use_bidirectional };
        let l = cfg.levels;
        let blocks = |b: &mut Builder, name: &str, level: usize| -> Result<Vec<MixS2Block>> {
            (0..cfg.blocks[level])
                .map(|j| MixS2Block::new(&mut b.sub(&format!("{name}.block{j}")), cfg.level_channels(level), cfg.heads[level], cfg.gdfn_expansion, sw))
                .collect()
        };
        let embed = b.conv("embed", ConvSpec::full(cfg.bands, cfg.channels, 3).with_bias())?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for lv in 0..l - 1 {
            encoder.push(blocks(b, &format!("enc{lv}"), lv)?);
            down.push(b.conv(&format!("down{lv}"), ConvSpec::full(cfg.level_channels(lv), cfg.level_channels(lv + 1), 3))?);
        }
        let bottleneck = blocks(b, "bottleneck", l - 1)?;
        let enc_total: usize = (0..l - 1).map(|lv| cfg.level_channels(lv)).sum();
        let (mut up, mut block_fuse, mut skip_fuse, mut decoder) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for lv in 0..l - 1 {
            let c = cfg.level_channels(lv);
            up.push(b.conv(&format!("up{lv}"), ConvSpec::full(2 * c, c, 3))?);
            block_fuse.push(if cfg.use_block_interaction { Some(b.conv(&format!("bi{lv}"), ConvSpec::pointwise(enc_total, c))?) } else { None });
            skip_fuse.push(b.conv(&format!("fuse{lv}"), ConvSpec::pointwise(2 * c, c))?);
            decoder.push(blocks(b, &format!("dec{lv}"), lv)?);
        }
        let out = b.conv("out", ConvSpec::full(cfg.channels, cfg.bands, 3).with_bias().zeroed())?;
        Ok(Self { bands: cfg.bands, step: cfg.step, levels: l, embed, encoder, down, bottleneck, up, block_fuse, skip_fuse, decoder, out })
    }

    /// Stand-alone construction with its own parameter store.
    pub fn build(cfg: &ModelConfig, prefix: &str) -> Result<(ParamStore, Self)> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = Self::new(&mut Builder::new(&mut store, &mut rng, prefix), cfg)?;
        Ok((store, d))
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.encoder.iter().map(Vec::len).sum::<usize>() + self.bottleneck.len()
    }

    /// Channel width of each block in listing order.
    pub fn block_channels(&self, cfg: &ModelConfig) -> Vec<usize> {
        let mut out = Vec::new();
        for lv in 0..self.levels - 1 {
            out.extend(std::iter::repeat_n(cfg.level_channels(lv), self.encoder[lv].len()));
        }
        out.extend(std::iter::repeat_n(cfg.level_channels(self.levels - 1), self.bottleneck.len()));
        for lv in (0..self.levels - 1).rev() {
            out.extend(std::iter::repeat_n(cfg.level_channels(lv), self.decoder[lv].len()));
        }
        out
    }

    /// Denoise `v` (`[C, H, W]`).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, v: Var, modulation: Option<Modulation>) -> Result<DenoiserOutput> {
        let (c, h, _) = g.value(v).chw();
        if c != self.bands {
            return Err(Error::Shape(format!("denoiser expects {} bands, got {c}", self.bands)));
        }
        if let Some(m) = &modulation {
            if m.prev.len() != self.num_blocks() {
                return Err(Error::Shape(format!("{} previous-stage features for {} blocks", m.prev.len(), self.num_blocks())));
            }
        }
        let shifted = g.shift_bands(v, self.step);
        let wide = g.value(shifted).shape()[2];
        let m = 1usize << (self.levels - 1);
        let (ph, pw) = ((m - h % m) % m, (m - wide % m) % m);
        let padded = g.pad_reflect(shifted, ph, pw);

        let mut features = Vec::with_capacity(self.num_blocks());
        let mut run = |g: &mut Graph, blocks: &[MixS2Block], mut x: Var| -> Result<Var> {
            for blk in blocks {
                x = blk.forward(g, ps, x)?;
                if let Some(m) = &modulation {
                    let n = features.len();
                    x = m.span.apply(g, ps, n, x, m.prev)?;
                }
                features.push(x);
            }
            Ok(x)
        };

        let mut x = self.embed.forward(g, ps, padded);
        let mut skips = Vec::with_capacity(self.levels - 1);
        for lv in 0..self.levels - 1 {
            x = run(g, &self.encoder[lv], x)?;
            skips.push(x);
            let (_, hh, ww) = g.value(x).chw();
            let half = g.resize_bilinear(x, hh / 2, ww / 2);
            x = self.down[lv].forward(g, ps, half);
        }
        x = run(g, &self.bottleneck, x)?;
        for lv in (0..self.levels - 1).rev() {
            let (_, hh, ww) = g.value(skips[lv]).chw();
            let upsampled = g.resize_bilinear(x, hh, ww);
            let upsampled = self.up[lv].forward(g, ps, upsampled);
            let skip = match &self.block_fuse[lv] {
                Some(conv) => {
                    let resampled: Vec<Var> = skips.iter().map(|&s| g.resize_bilinear(s, hh, ww)).collect();
                    let cat = g.concat(&resampled);
                    conv.forward(g, ps, cat)
                }
                None => skips[lv],
            };
            let cat = g.concat(&[upsampled, skip]);
            x = self.skip_fuse[lv].forward(g, ps, cat);
            x = run(g, &self.decoder[lv], x)?;
        }
        let out = self.out.forward(g, ps, x);
        let out = g.crop(out, h, wide);
        let out = g.add(out, shifted);
        let image = g.unshift_bands(out, self.step);
        Ok(DenoiserOutput { image, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use rand::{Rng, SeedableRng};

    fn tiny(bands: usize) -> ModelConfig {
        ModelConfig { bands, channels: 4, ..ModelConfig::micro() }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn zero_output_conv_is_identity() {
        let cfg = tiny(5);
        let (store, d) = MixS2Denoiser::build(&cfg, "den").unwrap();
        let mut g = Graph::inference();
        let vt = rand_t(&[5, 7, 9], 0);
        let v = g.constant(vt.clone());
        let out = d.forward(&mut g, &store, v, None).unwrap();
        assert_eq!(g.value(out.image), &vt);
        assert_eq!(out.features.len(), 5);
    }

    #[test]
    fn bottleneck_is_quarter_scale_and_shapes_hold() {
        let cfg = ModelConfig { channels: 4, ..ModelConfig::default() };
        let (store, d) = MixS2Denoiser::build(&cfg, "den").unwrap();
        let mut g = Graph::inference();
        let v = g.constant(rand_t(&[28, 16, 16], 1));
        let out = d.forward(&mut g, &store, v, None).unwrap();
        assert_eq!(g.value(out.image).shape(), &[28, 16, 16]);
        // shifted width 16 + 54 = 70, padded to 72
        assert_eq!(g.value(out.features[0]).shape(), &[4, 16, 72]);
        assert_eq!(g.value(out.features[2]).shape(), &[16, 4, 18]);
        assert_eq!(d.block_channels(&cfg), vec![4, 8, 16, 8, 4]);
        for (f, c) in out.features.iter().zip(d.block_channels(&cfg)) {
            assert_eq!(g.value(*f).shape()[0], c);
        }
    }

    #[test]
    fn block_interaction_toggle_changes_params_only_in_fusion() {
        let cfg = tiny(4);
        let (a, _) = MixS2Denoiser::build(&cfg, "d").unwrap();
        let (b, _) = MixS2Denoiser::build(&ModelConfig { use_block_interaction: false, ..cfg.clone() }, "d").unwrap();
        let only_a: Vec<&str> = a.iter().map(|(_, n, _)| n).filter(|n| b.id(n).is_none()).collect();
        assert!(!only_a.is_empty());
        assert!(only_a.iter().all(|n| n.starts_with("d.bi")));
        assert_eq!(b.iter().filter(|(_, n, _)| a.id(n).is_none()).count(), 0);
    }

    #[test]
    fn rejects_wrong_band_count() {
        let (store, d) = MixS2Denoiser::build(&tiny(4), "d").unwrap();
        let mut g = Graph::inference();
        let v = g.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(d.forward(&mut g, &store, v, None).is_err());
    }
}
