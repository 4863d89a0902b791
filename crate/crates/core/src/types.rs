//! Experiment-wide enumerations shared by several modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// How multiple anatomical structures are presented to the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One binary model per structure.
    Individual,
    /// All structures merged into a single foreground class.
    Global,
    /// One model with a channel per structure plus background.
    Multi,
}

/// Regularization terms added to the Dice objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularization {
    Base,
    Shape,
    Adv,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Individual, Strategy::Global, Strategy::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Individual => "individual",
            Strategy::Global => "global",
            Strategy::Multi => "multi",
        }
    }
}

impl Regularization {
    pub const ALL: [Regularization; 4] = [
        Regularization::Base,
        Regularization::Shape,
        Regularization::Adv,
        Regularization::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regularization::Base => "base",
            Regularization::Shape => "shape",
            Regularization::Adv => "adv",
            Regularization::Combined => "combined",
        }
    }

    pub fn uses_shape_prior(self) -> bool {
        matches!(self, Regularization::Shape | Regularization::Combined)
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Regularization::Adv | Regularization::Combined)
    }

    /// Display name used in leaderboards.
    pub fn method_prefix(self) -> &'static str {
        match self {
            Regularization::Base => "BaseUNet",
            Regularization::Shape => "ShapeReg",
            Regularization::Adv => "AdvReg",
            Regularization::Combined => "CombReg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Regularization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "individual" | "i" => Ok(Strategy::Individual),
            "global" | "g" => Ok(Strategy::Global),
            "multi" | "m" => Ok(Strategy::Multi),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl FromStr for Regularization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "baseline" => Ok(Regularization::Base),
            "shape" => Ok(Regularization::Shape),
            "adv" | "adversarial" => Ok(Regularization::Adv),
            "combined" | "comb" => Ok(Regularization::Combined),
            other => Err(Error::Config(format!("unknown regularization '{other}'"))),
        }
    }
}

/// Method identifier, e.g. `CombReg_multi`.
pub fn method_name(reg: Regularization, strategy: Strategy) -> String {
    format!("{}_{}", reg.method_prefix(), strategy.as_str())
}

/// Mixes a base seed with a stream tag and indices into an independent
/// 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    let mut mix = |v: u64| {
        h = h.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    };
    for b in tag.bytes() {
        mix(b as u64);
    }
    mix(0xFF);
    for &i in indices {
        mix(i);
    }
    h
}
