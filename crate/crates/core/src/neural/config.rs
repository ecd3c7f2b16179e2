use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which denoiser reads the other's fresh output during a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseOrder {
    /// Sample types first; the time denoiser reads the sampled types.
    #[default]
    TypeFirst,
    /// Sample times first; the type denoiser reads the sampled times.
    TimeFirst,
    /// Neither denoiser reads the other modality.
    Independent,
}

impl DenoiseOrder {
    pub const ALL: [DenoiseOrder; 3] = [Self::TypeFirst, Self::TimeFirst, Self::Independent];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TypeFirst => "type_first",
            Self::TimeFirst => "time_first",
            Self::Independent => "independent",
        }
    }
}

impl fmt::Display for DenoiseOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DenoiseOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == norm)
            .ok_or_else(|| Error::UnknownStrategy {
                name: s.to_string(),
                available: "type_first, time_first, independent".into(),
            })
    }
}

/// Architecture of the encoder and both denoisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base embedding size `M`; tokens are `4 * M` wide.
    pub embed: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward hidden width.
    pub ff: usize,
    pub num_types: usize,
    /// Forecast length `N`.
    pub horizon: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub order: DenoiseOrder,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 16,
            heads: 2,
            layers: 1,
            ff: 32,
            num_types: 5,
            horizon: 20,
            steps: 100,
            order: DenoiseOrder::TypeFirst,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        4 * self.embed
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embed < 2 || !self.embed.is_multiple_of(2) {
            return bad(format!("embed size {} must be even and >= 2", self.embed));
        }
        if self.heads == 0 || !self.width().is_multiple_of(self.heads) {
            return bad(format!(
                "4*M = {} not divisible by {} heads",
                self.width(),
                self.heads
            ));
        }
        if self.layers == 0 || self.ff == 0 {
            return bad("layers and ff must be positive".into());
        }
        if self.num_types == 0 || self.horizon == 0 {
            return bad("K and N must be positive".into());
        }
        if self.steps < 2 {
            return bad(format!("diffusion steps {} must be >= 2", self.steps));
        }
        Ok(())
    }
}
