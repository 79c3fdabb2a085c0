use serde::{Deserialize, Serialize};

use super::ModelError;

/// How the raw stream combines the per-branch experts and heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Learnable global vector `w`, softmax-normalised.
    #[default]
    WaveletAttention,
    /// Fixed equal weights.
    Average,
    /// Per-sample weights from a one-hidden-layer perceptron.
    GateNetwork,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Traditional,
    MultiBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    /// One character per block: `T` traditional, `M` multi-branch.
    pub block_pattern: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_branches: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub channels: usize,
    pub window_len: usize,
    pub ensemble_mode: EnsembleMode,
    /// Train-time auxiliary head over the concatenated stream representations.
    pub concat_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            block_pattern: "TMTM".into(),
            patch_size: 64,
            embed_dim: 128,
            num_heads: 4,
            ffn_hidden: 512,
            num_branches: 6,
            num_classes: 4,
            dropout: 0.1,
            channels: 20,
            window_len: 512,
            ensemble_mode: EnsembleMode::WaveletAttention,
            concat_head: false,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for gradient verification.
    pub fn micro() -> Self {
        Self {
            num_blocks: 2,
            block_pattern: "TM".into(),
            patch_size: 16,
            embed_dim: 8,
            num_heads: 2,
            ffn_hidden: 32,
            num_branches: 2,
            num_classes: 2,
            dropout: 0.0,
            channels: 1,
            window_len: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.block_pattern.chars().count() != self.num_blocks {
            return bad(format!(
                "block pattern {:?} has length {}, expected {}",
                self.block_pattern,
                self.block_pattern.chars().count(),
                self.num_blocks
            ));
        }
        if let Some(c) = self.block_pattern.chars().find(|c| !matches!(c, 'T' | 'M')) {
            return bad(format!("block pattern character {c:?} is not T or M"));
        }
        if self.num_blocks == 0 {
            return bad("at least one encoder block is required".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.patch_size == 0 || !self.window_len.is_multiple_of(self.patch_size) {
            return bad(format!("window_len {} not divisible by patch_size {}", self.window_len, self.patch_size));
        }
        if self.channels == 0 || self.ffn_hidden == 0 {
            return bad("channels and ffn_hidden must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !self.is_vanilla() && self.num_branches == 0 {
            return bad("multi-branch blocks need at least one branch".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ensemble_mode == EnsembleMode::GateNetwork && self.embed_dim < 2 {
            return bad("gate network needs embed_dim >= 2".into());
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockKind> {
        self.block_pattern.chars().map(|c| if c == 'M' { BlockKind::MultiBranch } else { BlockKind::Traditional }).collect()
    }

    /// A pattern without multi-branch blocks is a plain ViT: one head, raw
    /// stream only.
    pub fn is_vanilla(&self) -> bool {
        !self.block_pattern.contains('M')
    }

    /// Number of classification heads and wavelet streams actually built.
    pub fn branches(&self) -> usize {
        if self.is_vanilla() {
            0
        } else {
            self.num_branches
        }
    }

    pub fn tokens(&self) -> usize {
        self.channels * self.window_len / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn gate_hidden(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 160);
        assert_eq!(cfg.head_dim(), 32);
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn pattern_variants() {
        for (p, vanilla) in [("TMTM", false), ("TTTM", false), ("TTMM", false), ("TTTT", true)] {
            let cfg = ModelConfig { block_pattern: p.into(), ..ModelConfig::default() };
            cfg.validate().unwrap();
            assert_eq!(cfg.is_vanilla(), vanilla);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::default();
        let cases = [
            ModelConfig { block_pattern: "TMT".into(), ..base.clone() },
            ModelConfig { block_pattern: "TXTM".into(), ..base.clone() },
            ModelConfig { num_heads: 3, ..base.clone() },
            ModelConfig { window_len: 500, ..base.clone() },
            ModelConfig { num_classes: 1, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
