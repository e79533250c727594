//! Intensity-level scar simulation: paint the scar shape with a blood-pool value.

use serde::{Deserialize, Serialize};

use crate::dataset::nearest_rank;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileRule {
    /// Value at rank `ceil(p * n)` of the sorted sample.
    #[default]
    NearestRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicParams {
    pub percentile: f64,
    #[serde(default)]
    pub percentile_rule: PercentileRule,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self { percentile: 0.10, percentile_rule: PercentileRule::NearestRank }
    }
}

impl HeuristicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::Config(format!("percentile {} must lie in (0, 1)", self.percentile)));
        }
        Ok(())
    }
}

/// Intensity every scar pixel receives: the configured percentile of the LV endo pixels.
pub fn reference_intensity(image: &[u16], lv_endo: &[bool], params: &HeuristicParams) -> Option<u16> {
    let pool: Vec<u16> = image.iter().zip(lv_endo).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    match params.percentile_rule {
        PercentileRule::NearestRank => nearest_rank(&pool, params.percentile),
    }
}

/// Copies `image`, overwriting scar pixels with [`reference_intensity`].
pub fn paint_scar(image: &[u16], scar: &[bool], lv_endo: &[bool], params: &HeuristicParams) -> Result<Vec<u16>> {
    params.validate()?;
    if scar.len() != image.len() || lv_endo.len() != image.len() {
        return Err(Error::Contract(format!(
            "image has {} pixels but masks have {} and {}",
            image.len(),
            scar.len(),
            lv_endo.len()
        )));
    }
    let mut out = image.to_vec();
    if !scar.contains(&true) {
        return Ok(out);
    }
    let v = reference_intensity(image, lv_endo, params)
        .ok_or_else(|| Error::Contract("LV endo is empty, no reference intensity for the scar".into()))?;
    for (o, _) in out.iter_mut().zip(scar).filter(|(_, &s)| s) {
        *o = v;
    }
    Ok(out)
}
