use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Normalization strategy of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStrategy {
    /// Batch normalization with one running-statistics bank per site.
    Bn,
    /// Mixture-BN: two banks (and two affine pairs) per site, selected by routing.
    Mbn,
    /// Instance normalization, no running statistics.
    In,
    /// Normalizer-free: no normalization layers, every weight goes through
    /// scaled weight standardization.
    Nf,
    /// Plain network without normalization or weight standardization.
    None,
}

impl NormStrategy {
    pub fn has_running_stats(self) -> bool {
        matches!(self, NormStrategy::Bn | NormStrategy::Mbn)
    }

    pub fn has_norm_layers(self) -> bool {
        matches!(self, NormStrategy::Bn | NormStrategy::Mbn | NormStrategy::In)
    }

    pub fn name(self) -> &'static str {
        match self {
            NormStrategy::Bn => "bn",
            NormStrategy::Mbn => "mbn",
            NormStrategy::In => "in",
            NormStrategy::Nf => "nf",
            NormStrategy::None => "none",
        }
    }
}

impl std::fmt::Display for NormStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NormStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormStrategy::Bn),
            "mbn" => Ok(NormStrategy::Mbn),
            "in" => Ok(NormStrategy::In),
            "nf" => Ok(NormStrategy::Nf),
            "none" => Ok(NormStrategy::None),
            other => Err(arg_err(format!("unknown norm strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Pre-activation residual network, `depth = 6n + 2`, three stages.
    Resnet,
    /// Stack of `depth` dense layers (`depth - 1` hidden layers of `width` units).
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub depth: usize,
    /// Channels of the first stage (doubled at each later stage) or hidden units.
    pub width: usize,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    pub norm: NormStrategy,
    /// Fixed gain of scaled weight standardization.
    pub sws_gain: f64,
    pub sws_eps: f64,
    /// Residual-branch scale of normalizer-free blocks.
    pub nf_alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Fixed per-channel `(mean, std)` applied to the input before the first
    /// layer. Inputs (and attacks) stay in pixel space.
    pub input_norm: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Resnet,
            depth: 8,
            width: 8,
            num_classes: 10,
            input_shape: [3, 32, 32],
            norm: NormStrategy::Bn,
            sws_gain: std::f64::consts::SQRT_2,
            sws_eps: 1e-5,
            nf_alpha: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            input_norm: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(arg_err("num_classes must be at least 2"));
        }
        if self.width == 0 || self.input_shape.contains(&0) {
            return Err(arg_err("width and input dimensions must be positive"));
        }
        if !(self.sws_gain > 0.0) || !(self.sws_eps > 0.0) {
            return Err(arg_err(format!(
                "sws_gain and sws_eps must be positive, got {} and {}",
                self.sws_gain, self.sws_eps
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(arg_err(format!("bn_momentum must be in (0, 1), got {}", self.bn_momentum)));
        }
        if !(self.bn_eps > 0.0) || !(self.nf_alpha > 0.0) {
            return Err(arg_err("bn_eps and nf_alpha must be positive"));
        }
        if let Some((mean, std)) = &self.input_norm {
            let c = self.input_shape[0];
            if mean.len() != c || std.len() != c {
                return Err(arg_err(format!("input_norm needs {c} means and stds")));
            }
            if !mean.iter().all(|m| m.is_finite()) || !std.iter().all(|s| *s > 0.0 && s.is_finite()) {
                return Err(arg_err("input_norm needs finite means and positive stds"));
            }
        }
        match self.arch {
            Arch::Resnet => {
                if self.depth < 8 || (self.depth - 2) % 6 != 0 {
                    return Err(arg_err(format!(
                        "resnet depth must be 6n + 2 with n >= 1, got {}",
                        self.depth
                    )));
                }
                let [_, h, w] = self.input_shape;
                if h < 4 || w < 4 {
                    return Err(arg_err("resnet inputs must be at least 4x4"));
                }
            }
            Arch::Mlp => {
                if self.depth == 0 {
                    return Err(arg_err("mlp depth must be at least 1"));
                }
                if self.norm == NormStrategy::In {
                    return Err(arg_err("instance norm needs spatial feature maps; use the resnet arch"));
                }
            }
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    /// Number of normalization sites in forward order (also defined for NF/none
    /// models, which simply have no layer there).
    pub fn num_norm_sites(&self) -> usize {
        match self.arch {
            Arch::Resnet => 2 * 3 * self.blocks_per_stage() + 1,
            Arch::Mlp => self.depth - 1,
        }
    }

    /// Default layer for statistics probes: the middle normalization site.
    pub fn probe_layer(&self) -> usize {
        self.num_norm_sites() / 2
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.depth = 9;
        assert!(c.validate().is_err());
        c.depth = 14;
        assert_eq!(c.num_norm_sites(), 13);
        c.sws_gain = 0.0;
        assert!(c.validate().is_err());
        let m = ModelConfig {
            arch: Arch::Mlp,
            norm: NormStrategy::In,
            depth: 2,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn norm_round_trip() {
        for n in [NormStrategy::Bn, NormStrategy::Mbn, NormStrategy::In, NormStrategy::Nf, NormStrategy::None] {
            assert_eq!(n.name().parse::<NormStrategy>().unwrap(), n);
        }
        assert!("layer".parse::<NormStrategy>().is_err());
    }
}
