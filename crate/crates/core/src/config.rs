//! Model configuration, read from and written to TOML.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{DEFAULT_BANDS, DEFAULT_STEP};

/// Architecture and ablation switches for the unfolding network.
///
/// The TOML keys match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectral bands of the scene.
    pub bands: usize,
    /// Dispersion shift per band index, in pixels.
    pub step: usize,
    /// Base feature width of the denoiser.
    pub channels: usize,
    /// U-shape depth, including the bottleneck.
    pub levels: usize,
    /// Transformer blocks per level.
    pub blocks: Vec<usize>,
    /// Attention heads per level.
    pub heads: Vec<usize>,
    pub gdfn_expansion: f64,
    pub use_spatial_branch: bool,
    pub use_bidirectional: bool,
    pub use_block_interaction: bool,
    pub use_stage_interaction: bool,
    pub use_residual_degradation: bool,
    /// Number of unfolded iterations K.
    pub stages: usize,
    /// Share one parameter set across stages 2..K-1.
    pub share_stages: bool,
    /// Degradation-learning conv blocks in the residual branch.
    pub dlcb_blocks: usize,
    /// Hidden width of the residual branch; 0 means `bands`.
    pub dlcb_channels: usize,
    /// Recompute the corrected operator in every stage rather than once.
    pub recompute_degradation: bool,
    /// Initial step size of every stage; 0 means `1 / bands`.
    pub rho_init: f64,
    /// Start from `Φᵀ(y ⊘ diag(ΦΦᵀ))` instead of `Φᵀy`.
    pub normalize_init: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BANDS,
            step: DEFAULT_STEP,
            channels: 32,
            levels: 3,
            blocks: vec![1, 1, 1],
            heads: vec![1, 2, 4],
            gdfn_expansion: 2.0,
            use_spatial_branch: true,
            use_bidirectional: true,
            use_block_interaction: true,
            use_stage_interaction: true,
            use_residual_degradation: true,
            stages: 3,
            share_stages: true,
            dlcb_blocks: 3,
            dlcb_channels: 0,
            recompute_degradation: true,
            rho_init: 0.0,
            normalize_init: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network for desk-scale smoke training.
    pub fn micro() -> Self {
        Self { channels: 8, dlcb_blocks: 2, ..Self::default() }
    }

    /// Baseline row of the break-down ablation: spectral branch only, plain
    /// gradient step, no interactions.
    pub fn baseline(&self) -> Self {
        Self {
            use_spatial_branch: false,
            use_bidirectional: false,
            use_block_interaction: false,
            use_stage_interaction: false,
            use_residual_degradation: false,
            ..self.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    pub fn dlcb_width(&self) -> usize {
        if self.dlcb_channels == 0 {
            self.bands
        } else {
            self.dlcb_channels
        }
    }

    pub fn initial_rho(&self) -> f64 {
        if self.rho_init > 0.0 {
            self.rho_init
        } else {
            1.0 / self.bands as f64
        }
    }

    /// Spatial dims must be multiples of this inside the denoiser.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Spectral attention only makes sense with a spatial branch to interact with.
    pub fn bidirectional_active(&self) -> bool {
        self.use_bidirectional && self.use_spatial_branch
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bands == 0 {
            return bad("bands must be positive".into());
        }
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        if self.levels == 0 || self.levels > 6 {
            return bad(format!("levels must be in 1..=6, got {}", self.levels));
        }
        if self.blocks.len() != self.levels || self.heads.len() != self.levels {
            return bad(format!("blocks ({}) and heads ({}) need one entry per level ({})", self.blocks.len(), self.heads.len(), self.levels));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return bad(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        for l in 0..self.levels {
            let c = self.level_channels(l);
            if self.heads[l] == 0 || !c.is_multiple_of(self.heads[l]) {
                return bad(format!("level {l}: {c} channels not divisible by {} heads", self.heads[l]));
            }
            if self.blocks[l] == 0 {
                return bad(format!("level {l} needs at least one block"));
            }
        }
        if !(self.gdfn_expansion > 0.0) {
            return bad("gdfn_expansion must be positive".into());
        }
        if !(self.rho_init >= 0.0 && self.rho_init.is_finite()) {
            return bad("rho_init must be finite and nonnegative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_keys() {
        let cfg = ModelConfig::default();
        let text = cfg.to_toml();
        for key in [
            "channels",
            "levels",
            "blocks",
            "heads",
            "gdfn_expansion",
            "use_spatial_branch",
            "use_bidirectional",
            "use_block_interaction",
            "use_stage_interaction",
            "use_residual_degradation",
            "stages",
            "share_stages",
        ] {
            assert!(text.contains(&format!("{key} =")), "missing key {key}");
        }
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ModelConfig::from_toml("channels = 16\nstages = 9\nshare_stages = false\n").unwrap();
        assert_eq!(cfg.channels, 16);
        assert_eq!(cfg.stages, 9);
        assert!(!cfg.share_stages);
        assert_eq!(cfg.levels, 3);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::from_toml("channels = 6").is_err());
        assert!(ModelConfig::from_toml("heads = [1, 3, 4]").is_err());
        assert!(ModelConfig::from_toml("levels = 2").is_err());
        assert!(ModelConfig::from_toml("stages = 0").is_err());
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
        assert!(ModelConfig::from_toml("levels = 2\nblocks = [1, 2]\nheads = [1, 1]").is_ok());
    }
}
