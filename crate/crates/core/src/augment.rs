//! Full simulation chain (shape, heuristic paint, refinement, blend) and the
//! regime-specific training sets built from it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Class, ManifestEntry, Provenance, ScanSlice, SegMask};
use crate::error::{Error, Result};
use crate::heuristic::{paint_scar, HeuristicParams};
use crate::maskgan::ShapeSimulator;
use crate::nets::WeightSnapshot;
use crate::refinegan::Refiner;

/// How many simulated copies accompany each scar-free slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "0x")]
    X0,
    #[serde(rename = "0x+")]
    X0Plus,
    #[serde(rename = "1x")]
    X1,
    #[serde(rename = "3x")]
    X3,
    #[serde(rename = "5x")]
    X5,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::X0, Regime::X0Plus, Regime::X1, Regime::X3, Regime::X5];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::X0 => "0x",
            Regime::X0Plus => "0x+",
            Regime::X1 => "1x",
            Regime::X3 => "3x",
            Regime::X5 => "5x",
        }
    }

    /// Mask snapshots used, one per simulated pass over the scar-free pool.
    pub fn copies(self) -> usize {
        match self {
            Regime::X0 | Regime::X0Plus => 0,
            Regime::X1 => 1,
            Regime::X3 => 3,
            Regime::X5 => 5,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime '{s}' (expected 0x, 0x+, 1x, 3x or 5x)")))
    }
}

// ---------------------------------------------------------------- snapshot selection

/// `|A n B| / |A u B|`; two empty shapes are identical and score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug)]
pub struct SnapshotSelection {
    pub chosen: Vec<WeightSnapshot>,
    /// Snapshot ids in canonical (tag, step) order; rows/columns of `mean_iou`.
    pub ids: Vec<String>,
    pub mean_iou: Vec<Vec<f64>>,
    /// Fraction of probes on which each snapshot produces any scar.
    pub coverage: Vec<f64>,
    /// Scar shapes per snapshot (canonical order) and probe, for the contact sheet.
    pub shapes: Vec<Vec<SegMask>>,
}

impl SnapshotSelection {
    pub fn chosen_ids(&self) -> Vec<String> {
        self.chosen.iter().map(WeightSnapshot::id).collect()
    }

    /// Grey-level grid: one row per snapshot, one column per probe (at most
    /// `max_probes`), one pixel gap. Scar is white, other myo mid grey.
    pub fn contact_sheet(&self, max_probes: usize) -> (usize, usize, Vec<u8>) {
        let Some(first) = self.shapes.first().and_then(|r| r.first()) else {
            return (0, 0, Vec::new());
        };
        let s = first.size();
        let cols = self.shapes[0].len().min(max_probes);
        let (w, h) = (cols * (s + 1), self.shapes.len() * (s + 1));
        let mut px = vec![0u8; w * h];
        for (r, row) in self.shapes.iter().enumerate() {
            for (c, m) in row.iter().take(cols).enumerate() {
                for y in 0..s {
                    for x in 0..s {
                        let v = match m.get(x, y) {
                            Class::Scar => 255,
                            Class::LvMyo => 128,
                            Class::LvEndo | Class::RvEndo => 48,
                            Class::Background => 0,
                        };
                        px[(r * (s + 1) + y) * w + c * (s + 1) + x] = v;
                    }
                }
            }
        }
        (w, h, px)
    }

    /// Writes the contact sheet as an 8-bit binary PGM.
    pub fn write_contact_sheet(&self, path: &Path, max_probes: usize) -> Result<()> {
        let (w, h, px) = self.contact_sheet(max_probes);
        let mut bytes = format!("P5\n# {}\n{w} {h}\n255\n", self.ids.join(" ")).into_bytes();
        bytes.extend_from_slice(&px);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Snapshots producing scar on fewer probes than this are only picked when
/// too few others remain; an empty shape would otherwise look maximally diverse.
pub const MIN_COVERAGE: f64 = 0.5;

/// Picks `k` mask snapshots whose shapes on `probe_masks` overlap least:
/// start from the pair with the lowest mean IoU, then repeatedly add the
/// snapshot with the lowest summed mean IoU to those already chosen. Only
/// snapshots reaching [`MIN_COVERAGE`] compete, topped up by the best-covering
/// rest when fewer than `k` do. Ties go to the earlier snapshot in (tag, step) order.
pub fn select_snapshots(snapshots: &[WeightSnapshot], k: usize, probe_masks: &[SegMask]) -> Result<SnapshotSelection> {
    if k == 0 || snapshots.len() < k {
        return Err(Error::Config(format!("need {k} snapshots, {} available", snapshots.len())));
    }
    if probe_masks.is_empty() || probe_masks.iter().any(|m| m.has(Class::Scar)) {
        return Err(Error::Contract("probe masks must be nonempty and scar-free".into()));
    }
    let mut sorted: Vec<&WeightSnapshot> = snapshots.iter().collect();
    sorted.sort_by(|a, b| (&a.tag, a.step).cmp(&(&b.tag, b.step)));
    let shapes = sorted
        .iter()
        .map(|s| {
            let mut sim = ShapeSimulator::new(s, false, 0)?;
            probe_masks.iter().map(|m| sim.simulate(m)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let scar: Vec<Vec<Vec<bool>>> = shapes.iter().map(|row| row.iter().map(|m| m.indicator(Class::Scar)).collect()).collect();
    let n = sorted.len();
    let coverage: Vec<f64> =
        scar.iter().map(|row| row.iter().filter(|m| m.contains(&true)).count() as f64 / probe_masks.len() as f64).collect();
    let mut pool: Vec<usize> = (0..n).filter(|&i| coverage[i] >= MIN_COVERAGE).collect();
    if pool.len() < k {
        let mut rest: Vec<usize> = (0..n).filter(|&i| coverage[i] < MIN_COVERAGE).collect();
        rest.sort_by(|&a, &b| coverage[b].total_cmp(&coverage[a]).then(a.cmp(&b)));
        pool.extend(rest.into_iter().take(k - pool.len()));
        pool.sort_unstable();
    }
    let mut mean_iou = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = scar[i].iter().zip(&scar[j]).map(|(a, b)| iou(a, b)).sum::<f64>() / probe_masks.len() as f64;
            mean_iou[i][j] = v;
            mean_iou[j][i] = v;
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    if k == 1 {
        let total = |i: usize| pool.iter().filter(|&&j| j != i).map(|&j| mean_iou[i][j]).sum::<f64>();
        chosen.push(*pool.iter().min_by(|&&a, &&b| total(a).total_cmp(&total(b))).expect("at least one snapshot"));
    } else {
        let mut best = (pool[0], pool[1]);
        for (a, &i) in pool.iter().enumerate() {
            for &j in &pool[a + 1..] {
                if mean_iou[i][j] < mean_iou[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        chosen.extend([best.0, best.1]);
        while chosen.len() < k {
            let cost = |c: usize| chosen.iter().map(|&s| mean_iou[c][s]).sum::<f64>();
            let next = pool
                .iter()
                .copied()
                .filter(|c| !chosen.contains(c))
                .min_by(|&a, &b| cost(a).total_cmp(&cost(b)))
                .expect("k <= n");
            chosen.push(next);
        }
    }
    chosen.sort_unstable();
    Ok(SnapshotSelection {
        chosen: chosen.iter().map(|&i| sorted[i].clone()).collect(),
        ids: sorted.iter().map(|s| s.id()).collect(),
        mean_iou,
        coverage,
        shapes,
    })
}

/// Manual override: the snapshots with the given ids, in the given order.
pub fn select_by_ids(snapshots: &[WeightSnapshot], ids: &[String]) -> Result<Vec<WeightSnapshot>> {
    ids.iter()
        .map(|id| {
            snapshots
                .iter()
                .find(|s| &s.id() == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no snapshot with id '{id}'")))
        })
        .collect()
}

// ---------------------------------------------------------------- blending

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendParams {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self { kernel_size: 5, sigma: 1.0 }
    }
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("blend kernel size {} must be odd", self.kernel_size)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("blend sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Normalized 2-D Gaussian, row-major `kernel_size x kernel_size`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as i64;
        let g: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let total: f64 = g.iter().sum::<f64>().powi(2);
        g.iter().flat_map(|a| g.iter().map(move |b| a * b / total)).collect()
    }
}

/// Gaussian-blurred myocardium indicator, zero-padded at the borders.
pub fn make_blend_weights(myo_mask: &[bool], size: usize, params: &BlendParams) -> Result<Vec<f64>> {
    params.validate()?;
    if myo_mask.len() != size * size {
        return Err(Error::Contract(format!("mask has {} pixels, expected {size}x{size}", myo_mask.len())));
    }
    let kernel = params.kernel();
    let ks = params.kernel_size;
    let r = (ks / 2) as isize;
    let n = size as isize;
    let mut out = vec![0.0; size * size];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < n && sy < n && myo_mask[(sy * n + sx) as usize] {
                        acc += kernel[((dy + r) as usize) * ks + (dx + r) as usize];
                    }
                }
            }
            out[(y * n + x) as usize] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// `w * refined + (1 - w) * original`, rounded half up to 16 bits.
pub fn blend(original: &[u16], refined: &[u16], weights: &[f64]) -> Result<Vec<u16>> {
    if refined.len() != original.len() || weights.len() != original.len() {
        return Err(Error::Contract("blend inputs differ in size".into()));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Contract("blend weights must lie in [0, 1]".into()));
    }
    Ok(original
        .iter()
        .zip(refined)
        .zip(weights)
        .map(|((&o, &r), &w)| (w * r as f64 + (1.0 - w) * o as f64 + 0.5).floor().clamp(0.0, 65535.0) as u16)
        .collect())
}

// ---------------------------------------------------------------- simulation chain

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationParams {
    pub heuristic: HeuristicParams,
    pub blend: BlendParams,
    /// Keeps the mask generator's dropout active at inference.
    pub mask_dropout: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SimulatedSlice {
    pub slice: ScanSlice,
    pub mask_snapshot_tag: String,
    pub refiner_snapshot_tag: String,
    /// The generated shape was empty; `slice` is the unchanged input.
    pub degenerate: bool,
}

/// Shape generator and refiner loaded once for many slices.
pub struct Simulator {
    shape: ShapeSimulator,
    refiner: Refiner,
    params: SimulationParams,
}

impl Simulator {
    pub fn new(mask_snapshot: &WeightSnapshot, refiner_snapshot: &WeightSnapshot, params: SimulationParams) -> Result<Self> {
        params.heuristic.validate()?;
        params.blend.validate()?;
        Ok(Self {
            shape: ShapeSimulator::new(mask_snapshot, params.mask_dropout, params.seed)?,
            refiner: Refiner::new(refiner_snapshot)?,
            params,
        })
    }

    pub fn simulate(&mut self, slice: &ScanSlice) -> Result<SimulatedSlice> {
        if slice.has_scar || slice.mask.has(Class::Scar) {
            return Err(Error::Contract(format!("slice {} already has scar", slice.slice_id)));
        }
        let mask = self.shape.simulate(&slice.mask)?;
        let tags = (self.shape.tag().to_string(), self.refiner.tag().to_string());
        let scar = mask.indicator(Class::Scar);
        if !scar.contains(&true) {
            log::warn!("degenerate shape: {} produced no scar on {}", tags.0, slice.slice_id);
            return Ok(SimulatedSlice { slice: slice.clone(), mask_snapshot_tag: tags.0, refiner_snapshot_tag: tags.1, degenerate: true });
        }
        let painted = paint_scar(&slice.image, &scar, &mask.indicator(Class::LvEndo), &self.params.heuristic)?;
        let refined = self.refiner.refine_u16(&painted)?;
        let weights = make_blend_weights(&mask.union(&[Class::LvMyo, Class::Scar]), mask.size(), &self.params.blend)?;
        let image = blend(&slice.image, &refined, &weights)?;
        let out = ScanSlice { image, mask, has_scar: true, ..slice.clone() };
        Ok(SimulatedSlice { slice: out, mask_snapshot_tag: tags.0, refiner_snapshot_tag: tags.1, degenerate: false })
    }
}

/// One-off form of [`Simulator::simulate`].
pub fn simulate_slice(
    slice_no_scar: &ScanSlice,
    mask_snapshot: &WeightSnapshot,
    refiner_snapshot: &WeightSnapshot,
    params: &SimulationParams,
) -> Result<SimulatedSlice> {
    Simulator::new(mask_snapshot, refiner_snapshot, *params)?.simulate(slice_no_scar)
}

// ---------------------------------------------------------------- training sets

#[derive(Clone, Debug)]
pub struct AugmentPlan {
    pub regime: Regime,
    /// Exactly `regime.copies()` mask snapshots; pass `i` uses snapshot `i`.
    pub mask_snapshots: Vec<WeightSnapshot>,
    pub refiner: Option<WeightSnapshot>,
    pub params: SimulationParams,
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        let k = self.regime.copies();
        if self.mask_snapshots.len() != k {
            return Err(Error::Config(format!(
                "need {k} snapshots for regime {}, got {}",
                self.regime,
                self.mask_snapshots.len()
            )));
        }
        if k > 0 && self.refiner.is_none() {
            return Err(Error::Config(format!("regime {} needs a refiner snapshot", self.regime)));
        }
        let ids: BTreeSet<String> = self.mask_snapshots.iter().map(WeightSnapshot::id).collect();
        if ids.len() != k {
            return Err(Error::Config("mask snapshots must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub slices: Vec<ScanSlice>,
    pub entries: Vec<ManifestEntry>,
    pub degenerate: usize,
}

impl TrainingSet {
    pub fn count(&self, p: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == Some(p)).count()
    }
}

fn entry(slice: &ScanSlice, provenance: Provenance) -> ManifestEntry {
    ManifestEntry { provenance: Some(provenance), ..ManifestEntry::of(slice) }
}

/// Real-scar slices, plus the scar-free pool unmodified (0x+) or simulated
/// once per mask snapshot (kx). Simulated slices keep the source patient id
/// and are named `<source>_sim<pass>`.
pub fn build_training_set(real_scar: &[ScanSlice], no_scar: &[ScanSlice], plan: &AugmentPlan) -> Result<TrainingSet> {
    plan.validate()?;
    if let Some(s) = real_scar.iter().find(|s| !s.has_scar) {
        return Err(Error::Contract(format!("slice {} in the real-scar pool has no scar", s.slice_id)));
    }
    if let Some(s) = no_scar.iter().find(|s| s.has_scar) {
        return Err(Error::Contract(format!("slice {} in the scar-free pool has scar", s.slice_id)));
    }
    if real_scar.is_empty() {
        return Err(Error::Infeasible("the real-scar pool is empty".into()));
    }
    if plan.regime != Regime::X0 && no_scar.is_empty() {
        return Err(Error::Infeasible(format!("regime {} needs scar-free slices, none available", plan.regime)));
    }
    let mut set = TrainingSet::default();
    for s in real_scar {
        set.entries.push(entry(s, Provenance::Real));
        set.slices.push(s.clone());
    }
    if plan.regime == Regime::X0Plus {
        for s in no_scar {
            set.entries.push(entry(s, Provenance::NoScar));
            set.slices.push(s.clone());
        }
    }
    for (pass, snapshot) in plan.mask_snapshots.iter().enumerate() {
        let refiner = plan.refiner.as_ref().expect("validated");
        let mut sim = Simulator::new(snapshot, refiner, SimulationParams { seed: plan.params.seed.wrapping_add(pass as u64), ..plan.params })?;
        for s in no_scar {
            let out = sim.simulate(s)?;
            set.degenerate += out.degenerate as usize;
            let mut slice = out.slice;
            slice.slice_id = format!("{}_sim{pass}", s.slice_id);
            set.entries.push(ManifestEntry {
                mask_snapshot_tag: Some(out.mask_snapshot_tag),
                refiner_snapshot_tag: Some(out.refiner_snapshot_tag),
                source_slice_id: Some(s.slice_id.clone()),
                ..entry(&slice, Provenance::Simulated)
            });
            set.slices.push(slice);
        }
    }
    Ok(set)
}
