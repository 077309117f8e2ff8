// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators with magnitude below this drop the sample.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    /// `(Logit_cl(r) - Logit_pt(r)) / Logit_cl(r)`.
    #[default]
    #[serde(rename = "a")]
    A,
    /// `Logit_pt(r') - Logit_cl(r')`, unnormalized.
    #[serde(rename = "b")]
    B,
    /// `(LD_cl - LD_pt) / (LD_cl - LD_*)` with `LD = Logit(r) - Logit(r')`.
    #[serde(rename = "c")]
    C,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::A => "a",
            Metric::B => "b",
            Metric::C => "c",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Metric::A),
            "b" => Ok(Metric::B),
            "c" => Ok(Metric::C),
            _ => Err(Error::Config(format!("unknown metric `{s}` (a, b, c)"))),
        }
    }
}

/// Answer-position logits of the clean, patched and corrupted runs,
/// read at the clean answer `r` and the corrupted answer `r'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunLogits {
    pub cl_r: f64,
    pub pt_r: f64,
    pub cl_rp: f64,
    pub pt_rp: f64,
    pub star_r: f64,
    pub star_rp: f64,
}

/// Patching effect, or `None` when the normalizer is degenerate.
pub fn patch_effect(l: &RunLogits, metric: Metric) -> Option<f64> {
    let v = match metric {
        Metric::A => {
            if l.cl_r.abs() < DEGENERATE_EPS {
                return None;
            }
            (l.cl_r - l.pt_r) / l.cl_r
        }
        Metric::B => l.pt_rp - l.cl_rp,
        Metric::C => {
            let (ld_cl, ld_pt, ld_star) = (l.cl_r - l.cl_rp, l.pt_r - l.pt_rp, l.star_r - l.star_rp);
            let den = ld_cl - ld_star;
            if den.abs() < DEGENERATE_EPS {
                return None;
            }
            (ld_cl - ld_pt) / den
        }
    };
    v.is_finite().then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(cl: (f64, f64), pt: (f64, f64), star: (f64, f64)) -> RunLogits {
        RunLogits { cl_r: cl.0, cl_rp: cl.1, pt_r: pt.0, pt_rp: pt.1, star_r: star.0, star_rp: star.1 }
    }

    #[test]
    fn anchors() {
        let same = logits((5.0, 1.0), (5.0, 1.0), (0.5, 4.0));
        assert_eq!(patch_effect(&same, Metric::A), Some(0.0));
        assert_eq!(patch_effect(&same, Metric::B), Some(0.0));
        assert_eq!(patch_effect(&same, Metric::C), Some(0.0));
        let full = logits((5.0, 1.0), (0.5, 4.0), (0.5, 4.0));
        assert_eq!(patch_effect(&full, Metric::C), Some(1.0));
        assert_eq!(patch_effect(&full, Metric::B), Some(3.0));
        let zero = logits((3.0, 1.0), (0.0, 2.0), (0.0, 2.0));
        assert_eq!(patch_effect(&zero, Metric::A), Some(1.0));
    }

    #[test]
    fn degenerate_denominators_drop() {
        assert_eq!(patch_effect(&logits((1e-9, 0.0), (0.0, 0.0), (0.0, 0.0)), Metric::A), None);
        assert_eq!(patch_effect(&logits((2.0, 1.0), (0.0, 0.0), (2.0, 1.0)), Metric::C), None);
    }
}
