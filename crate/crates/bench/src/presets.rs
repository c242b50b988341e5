//! The four parameter rules used throughout the experiments.

use std::fmt;
use std::str::FromStr;

use hodlr_core::peel::{PeelConfig, Validation, Variant};
use hodlr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    GN1,
    GN2,
    RSVD1,
    RSVD2,
}

pub const ALL: [Preset; 4] = [Preset::GN1, Preset::GN2, Preset::RSVD1, Preset::RSVD2];

/// `ceil(x)` that ignores roundoff just above an integer, so `1 / (1/8)`
/// gives 8 rather than 9.
pub fn ceil_param(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl Preset {
    pub fn variant(self) -> Variant {
        match self {
            Preset::GN1 | Preset::GN2 => Variant::GeneralizedNystrom,
            Preset::RSVD1 | Preset::RSVD2 => Variant::Rsvd,
        }
    }

    /// `(s_R, t_R, s_L, t_L)`. RSVD rows report `s_L = s_R`, the width the
    /// left pass actually uses.
    pub fn params(self, k: usize, beta: f64) -> Result<(usize, usize, usize, usize)> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidParameter(format!("beta={beta} outside (0, 1]")));
        }
        let kf = k as f64;
        let s_r = ceil_param(kf / beta);
        let s_l = ceil_param(kf / (beta * beta));
        let t = ceil_param(1.0 / beta);
        Ok(match self {
            Preset::GN1 => (s_r, 1, s_l, 1),
            Preset::GN2 => (s_r, t, s_l, 1),
            Preset::RSVD1 => (s_r, 1, s_r, 1),
            Preset::RSVD2 => (s_r, t, s_r, t),
        })
    }

    /// Peeling configuration for this row. Validation is advisory: the
    /// presets deliberately sit outside the accuracy conditions.
    pub fn config(self, k: usize, beta: f64) -> Result<PeelConfig> {
        let (s_r, t_r, s_l, t_l) = self.params(k, beta)?;
        Ok(PeelConfig::new(self.variant(), k, s_r, t_r, s_l, t_l)
            .with_beta(beta)
            .with_validation(Validation::Advisory))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::GN1 => "GN1",
            Preset::GN2 => "GN2",
            Preset::RSVD1 => "RSVD1",
            Preset::RSVD2 => "RSVD2",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GN1" => Ok(Preset::GN1),
            "GN2" => Ok(Preset::GN2),
            "RSVD1" => Ok(Preset::RSVD1),
            "RSVD2" => Ok(Preset::RSVD2),
            _ => Err(Error::InvalidParameter(format!("unknown preset {s:?}"))),
        }
    }
}
