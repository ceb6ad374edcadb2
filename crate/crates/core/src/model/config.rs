use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How freshly added experts are initialized during upcycling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertInit {
    /// Copy of the layer's original expert plus seeded Gaussian noise.
    CopyWithNoise { std: f64 },
    /// Independent Gaussian initialization with the dense-model scales.
    Random,
}

impl Default for ExpertInit {
    fn default() -> Self {
        ExpertInit::CopyWithNoise { std: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of decoder blocks.
    pub layers: usize,
    /// Width of the residual stream.
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Inner width of every expert.
    pub ffn: usize,
    /// Maximum sequence length.
    pub context: usize,
    /// Experts mixed per token in each MoE layer.
    pub top_k: usize,
    pub seed: u64,
    #[serde(default)]
    pub expert_init: ExpertInit,
}

impl ModelConfig {
    /// The toy configuration used by the end-to-end experiments.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            vocab: 256,
            ffn: 128,
            context: 32,
            top_k: 2,
            seed: 7,
            expert_init: ExpertInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Configuration(msg.to_string()));
        if self.layers == 0 {
            return bad("layer count must be at least 1");
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden width must be a positive multiple of the head count");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.vocab == 0 || self.ffn == 0 || self.context == 0 {
            return bad("vocab, ffn and context must be positive");
        }
        if let ExpertInit::CopyWithNoise { std } = self.expert_init {
            if !(std.is_finite() && std >= 0.0) {
                return bad("expert init noise must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        let mut c = ModelConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.top_k = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.layers = 0;
        assert!(c.validate().is_err());
    }
}
