//! Turn an effective sampling fraction into survey planning numbers: the
//! effective sample size it implies, and actual sample sizes after design
//! effects.

use crate::error::{Error, Result};
use crate::population::Population;

/// Variance inflation of a complex design relative to simple random sampling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DesignEffect {
    pub deff: f64,
    pub source_label: String,
}

impl DesignEffect {
    /// Values below 1 are accepted (possible under stratification) but
    /// unusual enough to flag.
    pub fn new(
        deff: f64,
        source_label: impl Into<String>,
    ) -> Result<(DesignEffect, Option<String>)> {
        if !deff.is_finite() || deff <= 0.0 {
            return Err(Error::Validation(format!(
                "design effect must be positive, got {deff}"
            )));
        }
        let label = source_label.into();
        let warning = (deff < 1.0)
            .then(|| format!("design effect {deff} < 1 ({label}); accepted with warning"));
        Ok((
            DesignEffect {
                deff,
                source_label: label,
            },
            warning,
        ))
    }
}

/// Effective sample size implied by a sampling fraction: round(f * N).
pub fn fraction_to_ess(fraction: f64, pop: &Population) -> Result<u64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok((fraction * pop.grand_total() as f64).round() as u64)
}

/// Actual sample size needed to deliver `ess` under a design effect:
/// ceil(ess * deff), rounding up so planning stays conservative.
pub fn ess_to_actual(ess: u64, deff: &DesignEffect) -> Result<u64> {
    if ess == 0 {
        return Err(Error::Validation(
            "effective sample size must be positive".into(),
        ));
    }
    Ok((ess as f64 * deff.deff).ceil() as u64)
}
