//! Ground truth by FWHM, overlap metrics, the reader-study binomial test and
//! report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::Regime;
use crate::dataset::{Class, ScanSlice};
use crate::error::{Error, Result};

/// Myocardial pixels at or above half the ROI maximum. An all-false ROI means
/// no visible scar and yields an empty mask.
pub fn fwhm_scar_mask(image: &[u16], myo: &[bool], roi: &[bool]) -> Result<Vec<bool>> {
    if myo.len() != image.len() || roi.len() != image.len() {
        return Err(Error::Contract("image, myocardium and ROI sizes differ".into()));
    }
    if roi.iter().zip(myo).any(|(&r, &m)| r && !m) {
        return Err(Error::Contract("ROI extends outside the myocardium".into()));
    }
    let Some(max) = image.iter().zip(roi).filter(|(_, &r)| r).map(|(&v, _)| v).max() else {
        return Ok(vec![false; image.len()]);
    };
    // v >= max / 2 without rounding.
    Ok(image.iter().zip(myo).map(|(&v, &m)| m && 2 * v as u32 >= max as u32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarInclusionResult {
    pub pct_scar_in_myo: f64,
    pub pct_scar_in_endo: f64,
    pub n_scar_pixels: usize,
}

pub fn scar_inclusion(gt_scar: &[bool], pred_endo: &[bool], pred_myo: &[bool]) -> Result<ScarInclusionResult> {
    if pred_endo.len() != gt_scar.len() || pred_myo.len() != gt_scar.len() {
        return Err(Error::Contract("mask sizes differ".into()));
    }
    let n = gt_scar.iter().filter(|&&g| g).count();
    if n == 0 {
        return Err(Error::Contract("scar inclusion is undefined for a scar-free slice".into()));
    }
    let hits = |pred: &[bool]| gt_scar.iter().zip(pred).filter(|(&g, &p)| g && p).count();
    Ok(ScarInclusionResult {
        pct_scar_in_myo: 100.0 * hits(pred_myo) as f64 / n as f64,
        pct_scar_in_endo: 100.0 * hits(pred_endo) as f64 / n as f64,
        n_scar_pixels: n,
    })
}

/// `2|A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "dice: mask sizes differ");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// JSON writes NaN as null; read it back as NaN.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Ground-truth scar of an annotated real slice: FWHM over myo and scar with
/// the annotated scar as ROI. Empty for scar-free slices.
pub fn gt_scar(slice: &ScanSlice) -> Result<Vec<bool>> {
    let scar = slice.mask.indicator(Class::Scar);
    if !slice.has_scar {
        return Ok(vec![false; scar.len()]);
    }
    fwhm_scar_mask(&slice.image, &slice.mask.union(&[Class::LvMyo, Class::Scar]), &scar)
}

/// Dice averaged over slices; scar inclusion pooled over all ground-truth scar pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvaluation {
    pub slices: usize,
    pub scar_pixels: usize,
    pub dice_endo: f64,
    pub dice_epi: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pct_scar_in_myo: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pct_scar_in_endo: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SegScore {
    slices: usize,
    dice_endo: f64,
    dice_epi: f64,
    in_myo: usize,
    in_endo: usize,
    scar_pixels: usize,
}

impl SegScore {
    /// Scores one prediction; `pred_epi` is the filled epicardial region.
    pub fn add(&mut self, gt: &ScanSlice, pred_endo: &[bool], pred_epi: &[bool]) -> Result<()> {
        let n = gt.mask.labels().len();
        if pred_endo.len() != n || pred_epi.len() != n {
            return Err(Error::Contract(format!("prediction for {} has the wrong size", gt.slice_id)));
        }
        let gt_endo = gt.mask.indicator(Class::LvEndo);
        let gt_epi = gt.mask.union(&[Class::LvEndo, Class::LvMyo, Class::Scar]);
        self.slices += 1;
        self.dice_endo += dice(pred_endo, &gt_endo);
        self.dice_epi += dice(pred_epi, &gt_epi);
        if gt.has_scar {
            let pred_myo: Vec<bool> = pred_epi.iter().zip(pred_endo).map(|(&e, &d)| e && !d).collect();
            let scar = gt_scar(gt)?;
            if scar.iter().any(|&s| s) {
                let r = scar_inclusion(&scar, pred_endo, &pred_myo)?;
                self.scar_pixels += r.n_scar_pixels;
                self.in_myo += scar.iter().zip(&pred_myo).filter(|(&g, &p)| g && p).count();
                self.in_endo += scar.iter().zip(pred_endo).filter(|(&g, &p)| g && p).count();
            }
        }
        Ok(())
    }

    /// Scar percentages are NaN when no ground-truth scar pixel was seen.
    pub fn finish(&self) -> SegEvaluation {
        let n = self.slices.max(1) as f64;
        let pct = |k: usize| if self.scar_pixels == 0 { f64::NAN } else { 100.0 * k as f64 / self.scar_pixels as f64 };
        SegEvaluation {
            slices: self.slices,
            scar_pixels: self.scar_pixels,
            dice_endo: self.dice_endo / n,
            dice_epi: self.dice_epi / n,
            pct_scar_in_myo: pct(self.in_myo),
            pct_scar_in_endo: pct(self.in_endo),
        }
    }
}

/// Exact two-sided test of `k` successes in `n` fair trials:
/// `P(|X - n/2| >= |k - n/2|)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_p(k: u64, n: u64) -> f64 {
    assert!(k <= n, "binomial_p: {k} successes out of {n}");
    let dev = (2 * k as i64 - n as i64).abs();
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0f64;
    let mut p = 0.0;
    for x in 0..=n {
        if x > 0 {
            ln_choose += ((n - x + 1) as f64).ln() - (x as f64).ln();
        }
        if (2 * x as i64 - n as i64).abs() >= dev {
            p += (ln_choose + ln_half).exp();
        }
    }
    p.min(1.0)
}

/// Per-fold segmentation metrics as written by the fine-tuning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    pub dice_endo: f64,
    pub dice_epi: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pct_scar_in_myo: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub pct_scar_in_endo: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    #[serde(deserialize_with = "nan_if_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub sem: f64,
}

impl MeanSem {
    /// Mean and `sample_std / sqrt(n)`; one value has sem 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(Self { mean, sem })
    }

    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*} ({:.*})", decimals, self.mean, decimals, self.sem)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub n: usize,
    pub pct_scar_in_myo: MeanSem,
    pub pct_scar_in_endo: MeanSem,
    pub dice_endo: MeanSem,
    pub dice_epi: MeanSem,
}

/// Summaries in the fixed order 0x, 0x+, 1x, 3x, 5x; regimes without results are skipped.
pub fn report_table(results: &[FoldMetrics]) -> Vec<RegimeReport> {
    Regime::ALL
        .iter()
        .filter_map(|&regime| {
            let rows: Vec<&FoldMetrics> = results.iter().filter(|r| r.regime == regime).collect();
            let col = |f: fn(&FoldMetrics) -> f64| MeanSem::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some(RegimeReport {
                regime,
                n: rows.len(),
                pct_scar_in_myo: col(|r| r.pct_scar_in_myo)?,
                pct_scar_in_endo: col(|r| r.pct_scar_in_endo)?,
                dice_endo: col(|r| r.dice_endo)?,
                dice_epi: col(|r| r.dice_epi)?,
            })
        })
        .collect()
}

/// Aligned plain-text rendering of [`report_table`] output.
pub fn render_report(reports: &[RegimeReport]) -> String {
    let header = ["Regime", "n", "% scar in LV myo", "% scar in LV endo", "Dice LV endo", "Dice LV epi"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                format!("ScarGAN {}", r.regime),
                r.n.to_string(),
                r.pct_scar_in_myo.format(1),
                r.pct_scar_in_endo.format(1),
                r.dice_endo.format(3),
                r.dice_epi.format(3),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).expect("write to String");
    };
    line(&mut out, &header);
    line(&mut out, &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
