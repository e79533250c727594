//! Segmentation network: phantom pretraining with scar rendered invisible,
//! scar-weighted fine-tuning with an auxiliary scar head, prediction with
//! derived LV myo, and patient-level cross-validation over a regime.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_training_set, AugmentPlan, Regime};
use crate::dataset::{split_folds, Class, FoldAssignment, ManifestEntry, Provenance, ScanSlice, SegMask};
use crate::error::{Error, Result};
use crate::evalkit::{gt_scar, FoldMetrics, SegScore};
use crate::maskgan::PROB_FLOOR;
use crate::nets::{build_segnet, Network, NetworkSpec, WeightSnapshot};
use crate::nn::{Adam, AdamConfig, Mode};
use crate::refinegan::normalize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SEG_CLASSES: usize = 4;
pub const SEG_TAG: &str = "segnet";

/// Output classes; LV epi is the myocardial annulus and LV myo is derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SegClass {
    Background = 0,
    RvEndo = 1,
    LvEndo = 2,
    LvEpi = 3,
}

/// Per-pixel segnet class index for an annotation mask; scar counts as LV epi.
pub fn seg_target(mask: &SegMask) -> Vec<u8> {
    mask.labels()
        .iter()
        .map(|c| match c {
            Class::Background => SegClass::Background as u8,
            Class::RvEndo => SegClass::RvEndo as u8,
            Class::LvEndo => SegClass::LvEndo as u8,
            Class::LvMyo | Class::Scar => SegClass::LvEpi as u8,
        })
        .collect()
}

// ---------------------------------------------------------------- loss

#[derive(Clone, Debug)]
pub struct SegLoss<T> {
    pub total: f64,
    pub weighted_xent: f64,
    pub aux_bce: f64,
    pub grad_main: Tensor<T>,
    pub grad_aux: Tensor<T>,
}

/// Mean over pixels of `w(p) * xent(p)` plus `aux_weight` times the mean
/// binary cross-entropy of the scar head. `w(p)` is `scar_weight` on target
/// scar pixels and 1 elsewhere. `targets` and `scar` hold one entry per pixel
/// of the whole batch.
pub fn weighted_seg_loss_batch<T: Scalar>(
    main: &Tensor<T>,
    aux: &Tensor<T>,
    targets: &[u8],
    scar: &[bool],
    scar_weight: f64,
    aux_weight: f64,
) -> Result<SegLoss<T>> {
    let [n, c, h, w] = main.shape();
    let plane = h * w;
    if aux.shape() != [n, 1, h, w] || targets.len() != n * plane || scar.len() != n * plane {
        return Err(Error::Contract(format!(
            "seg loss shapes: main {:?}, aux {:?}, {} targets, {} scar flags",
            main.shape(),
            aux.shape(),
            targets.len(),
            scar.len()
        )));
    }
    let denom = (n * plane) as f64;
    let mut grad_main = Tensor::zeros(main.shape());
    let mut grad_aux = Tensor::zeros(aux.shape());
    let mut xent = 0.0;
    let mut bce = 0.0;
    for i in 0..n {
        let p = main.sample(i);
        let a = aux.sample(i);
        let gm = grad_main.sample_mut(i);
        for px in 0..plane {
            let t = targets[i * plane + px] as usize;
            if t >= c {
                return Err(Error::Contract(format!("target class {t} out of range")));
            }
            let s = scar[i * plane + px];
            let wgt = if s { scar_weight } else { 1.0 };
            let q = p[t * plane + px].f64();
            let qc = q.max(PROB_FLOOR);
            xent -= wgt * qc.ln();
            if q > PROB_FLOOR {
                gm[t * plane + px] = T::of(-wgt / (qc * denom));
            }
        }
        if aux_weight != 0.0 {
            let ga = grad_aux.sample_mut(i);
            for px in 0..plane {
                let y = scar[i * plane + px] as u8 as f64;
                let v = a[px].f64();
                let vc = v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                bce -= y * vc.ln() + (1.0 - y) * (1.0 - vc).ln();
                if v > PROB_FLOOR && v < 1.0 - PROB_FLOOR {
                    ga[px] = T::of(aux_weight * (vc - y) / (vc * (1.0 - vc) * denom));
                }
            }
        }
    }
    xent /= denom;
    bce /= denom;
    Ok(SegLoss { total: xent + aux_weight * bce, weighted_xent: xent, aux_bce: bce, grad_main, grad_aux })
}

/// Single-slice form of [`weighted_seg_loss_batch`]: `pred_main` holds
/// [`SEG_CLASSES`] probability planes and `pred_aux` one scar probability per pixel.
pub fn weighted_seg_loss(
    pred_main: &[f64],
    pred_aux: &[f64],
    target_classes: &[u8],
    target_scar: &[bool],
    scar_weight: f64,
    aux_weight: f64,
) -> Result<f64> {
    let px = target_classes.len();
    if pred_main.len() != SEG_CLASSES * px || pred_aux.len() != px {
        return Err(Error::Contract("prediction sizes do not match the targets".into()));
    }
    let main = Tensor::from_vec([1, SEG_CLASSES, 1, px], pred_main.to_vec());
    let aux = Tensor::from_vec([1, 1, 1, px], pred_aux.to_vec());
    Ok(weighted_seg_loss_batch(&main, &aux, target_classes, target_scar, scar_weight, aux_weight)?.total)
}

// ---------------------------------------------------------------- augmentation

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub translation: bool,
    pub scale: bool,
    pub rotation: bool,
    pub elastic: bool,
    /// Max shift as a fraction of the frame side.
    pub max_shift: f64,
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Max displacement of the elastic control points, in pixels.
    pub elastic_magnitude: f64,
    /// Control points per side of the elastic grid.
    pub elastic_grid: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translation: true,
            scale: true,
            rotation: true,
            elastic: true,
            max_shift: 0.08,
            scale_range: (0.9, 1.1),
            max_rotation_deg: 15.0,
            elastic_magnitude: 1.0,
            elastic_grid: 4,
        }
    }
}

impl AugmentConfig {
    pub const OFF: AugmentConfig =
        AugmentConfig { translation: false, scale: false, rotation: false, elastic: false, max_shift: 0.0, scale_range: (1.0, 1.0), max_rotation_deg: 0.0, elastic_magnitude: 0.0, elastic_grid: 2 };

    pub fn any(&self) -> bool {
        self.translation || self.scale || self.rotation || self.elastic
    }
}

/// Source coordinate for every output pixel of a random warp about the frame centre.
pub fn sample_warp(size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let n = size as f64;
    let c = (n - 1.0) / 2.0;
    let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..m) } else { 0.0 };
    let (tx, ty) = if cfg.translation { (sym(rng, cfg.max_shift * n), sym(rng, cfg.max_shift * n)) } else { (0.0, 0.0) };
    let s = if cfg.scale && cfg.scale_range.1 > cfg.scale_range.0 { rng.gen_range(cfg.scale_range.0..cfg.scale_range.1) } else { 1.0 };
    let th = if cfg.rotation { sym(rng, cfg.max_rotation_deg.to_radians()) } else { 0.0 };
    let g = cfg.elastic_grid.max(2);
    let grid: Vec<(f64, f64)> = (0..g * g)
        .map(|_| if cfg.elastic { (sym(rng, cfg.elastic_magnitude), sym(rng, cfg.elastic_magnitude)) } else { (0.0, 0.0) })
        .collect();
    let (cos, sin) = (th.cos(), th.sin());
    let mut map = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // Output pixel -> source: inverse rotation and scale, then shift.
            let (dx, dy) = (x as f64 - c - tx, y as f64 - c - ty);
            let sx = (cos * dx + sin * dy) / s + c;
            let sy = (-sin * dx + cos * dy) / s + c;
            let gx = x as f64 / (n - 1.0).max(1.0) * (g - 1) as f64;
            let gy = y as f64 / (n - 1.0).max(1.0) * (g - 1) as f64;
            let (ex, ey) = bilinear_pair(&grid, g, gx, gy);
            map.push((sx + ex, sy + ey));
        }
    }
    map
}

fn bilinear_pair(grid: &[(f64, f64)], g: usize, x: f64, y: f64) -> (f64, f64) {
    let x0 = (x.floor() as usize).min(g - 2);
    let y0 = (y.floor() as usize).min(g - 2);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |i: usize, j: usize| grid[j * g + i];
    let mix = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
    (mix(mix(a.0, b.0, fx), mix(c.0, d.0, fx), fy), mix(mix(a.1, b.1, fx), mix(c.1, d.1, fx), fy))
}

/// Bilinear resampling with clamp-to-edge.
pub fn warp_image(image: &[f32], size: usize, map: &[(f64, f64)]) -> Vec<f32> {
    let max = (size - 1) as f64;
    map.iter()
        .map(|&(sx, sy)| {
            let (sx, sy) = (sx.clamp(0.0, max), sy.clamp(0.0, max));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let at = |x: usize, y: usize| image[y * size + x];
            let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
            let bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
            top + (bot - top) * fy
        })
        .collect()
}

/// Nearest-neighbour resampling with clamp-to-edge.
pub fn warp_nearest<V: Copy>(values: &[V], size: usize, map: &[(f64, f64)]) -> Vec<V> {
    let max = (size - 1) as f64;
    map.iter()
        .map(|&(sx, sy)| {
            let x = (sx.clamp(0.0, max) + 0.5).floor() as usize;
            let y = (sy.clamp(0.0, max) + 0.5).floor() as usize;
            values[y.min(size - 1) * size + x.min(size - 1)]
        })
        .collect()
}

// ---------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub initial_filters: usize,
    pub depth: usize,
    pub input_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        let s = build_segnet();
        Self { initial_filters: s.initial_filters, depth: s.depth, input_size: s.input_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub learning_rate: f64,
    pub scar_pixel_weight: f64,
    pub aux_loss_weight: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub net: SegNetConfig,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            scar_pixel_weight: 5.0,
            aux_loss_weight: 1.0,
            steps: 2000,
            batch_size: 8,
            augment: AugmentConfig::default(),
            net: SegNetConfig::default(),
            log_every: 50,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn spec(&self) -> NetworkSpec {
        build_segnet().scaled(self.net.initial_filters, self.net.depth, self.net.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scar_pixel_weight >= 1.0) {
            return Err(Error::Config(format!("scar_pixel_weight {} must be at least 1", self.scar_pixel_weight)));
        }
        if !(self.aux_loss_weight >= 0.0) {
            return Err(Error::Config("aux_loss_weight must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: normalized image, class targets and aux scar target.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Vec<f32>,
    pub target: Vec<u8>,
    pub scar: Vec<bool>,
}

/// Aux-head supervision: simulated slices use the generated scar mask, real
/// slices the FWHM mask seeded by their annotated scar, scar-free slices nothing.
pub fn scar_target(slice: &ScanSlice, provenance: Option<Provenance>) -> Result<Vec<bool>> {
    let scar = slice.mask.indicator(Class::Scar);
    match provenance {
        Some(Provenance::Simulated) => Ok(scar),
        _ => gt_scar(slice),
    }
}

impl SegSample {
    pub fn from_slice(slice: &ScanSlice, provenance: Option<Provenance>) -> Result<Self> {
        Ok(Self { image: normalize(&slice.image).0, target: seg_target(&slice.mask), scar: scar_target(slice, provenance)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLogRecord {
    pub step: u64,
    pub loss: f64,
    pub weighted_xent: f64,
    pub aux_bce: f64,
}

#[derive(Clone, Debug)]
pub struct SegRun {
    pub snapshot: WeightSnapshot,
    pub log: Vec<SegLogRecord>,
}

fn train_loop(net: &mut Network<f32>, samples: &[SegSample], cfg: &SegTrainConfig, aux_weight: f64, tag: &str) -> Result<SegRun> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training slices".into()));
    }
    let n = net.spec().input_size;
    if samples.iter().any(|s| s.image.len() != n * n) {
        return Err(Error::Contract(format!("training slices must be {n}x{n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let b = cfg.batch_size;
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let mut images = Vec::with_capacity(b * n * n);
        let mut targets = Vec::with_capacity(b * n * n);
        let mut scar = Vec::with_capacity(b * n * n);
        for _ in 0..b {
            let s = &samples[rng.gen_range(0..samples.len())];
            if cfg.augment.any() {
                let map = sample_warp(n, &cfg.augment, &mut rng);
                images.extend(warp_image(&s.image, n, &map));
                targets.extend(warp_nearest(&s.target, n, &map));
                scar.extend(warp_nearest(&s.scar, n, &map));
            } else {
                images.extend_from_slice(&s.image);
                targets.extend_from_slice(&s.target);
                scar.extend_from_slice(&s.scar);
            }
        }
        let x = Tensor::from_vec([b, 1, n, n], images);
        net.zero_grad();
        let out = net.forward(&x, Mode::TRAIN);
        let aux = out.aux.expect("segnet has an aux head");
        let loss = weighted_seg_loss_batch(&out.main, &aux, &targets, &scar, cfg.scar_pixel_weight, aux_weight)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, what: "segmentation loss" });
        }
        net.backward(&loss.grad_main, Some(&loss.grad_aux));
        if !net.store().grads_finite() {
            return Err(Error::Diverged { step, what: "segmentation gradient" });
        }
        opt.step(net.store_mut());
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            log.push(SegLogRecord { step, loss: loss.total, weighted_xent: loss.weighted_xent, aux_bce: loss.aux_bce });
        }
    }
    Ok(SegRun { snapshot: net.snapshot(cfg.steps, tag), log })
}

/// Pretrains from scratch on slices whose scar is rendered invisible. The
/// scar head is left unsupervised since such images carry no scar signal.
pub fn pretrain(slices: &[ScanSlice], cfg: &SegTrainConfig) -> Result<SegRun> {
    let samples = slices.iter().map(|s| SegSample::from_slice(s, None)).collect::<Result<Vec<_>>>()?;
    let mut net = Network::new(&cfg.spec(), cfg.seed)?;
    train_loop(&mut net, &samples, cfg, 0.0, &format!("{SEG_TAG}_pretrain"))
}

/// Continues training a pretrained snapshot on a regime's training slices.
pub fn finetune(pretrained: &WeightSnapshot, slices: &[ScanSlice], entries: &[ManifestEntry], cfg: &SegTrainConfig, tag: &str) -> Result<SegRun> {
    if slices.len() != entries.len() {
        return Err(Error::Contract("one manifest entry per training slice".into()));
    }
    if pretrained.net.kind != build_segnet().kind {
        return Err(Error::Topology(format!("snapshot '{}' is not a segmentation network", pretrained.id())));
    }
    let samples = slices.iter().zip(entries).map(|(s, e)| SegSample::from_slice(s, e.provenance)).collect::<Result<Vec<_>>>()?;
    let mut net = Network::from_snapshot(pretrained, cfg.seed)?;
    train_loop(&mut net, &samples, cfg, cfg.aux_loss_weight, tag)
}

// ---------------------------------------------------------------- prediction

#[derive(Clone, Debug)]
pub struct SegPrediction {
    pub size: usize,
    /// [`SEG_CLASSES`] probability planes.
    pub probabilities: Vec<f32>,
    pub scar_probability: Vec<f32>,
    pub classes: Vec<u8>,
}

impl SegPrediction {
    fn class_mask(&self, c: SegClass) -> Vec<bool> {
        self.classes.iter().map(|&k| k == c as u8).collect()
    }

    pub fn lv_endo(&self) -> Vec<bool> {
        self.class_mask(SegClass::LvEndo)
    }

    pub fn rv_endo(&self) -> Vec<bool> {
        self.class_mask(SegClass::RvEndo)
    }

    /// Filled epicardial region: LV epi annulus plus LV endo.
    pub fn lv_epi(&self) -> Vec<bool> {
        self.classes.iter().map(|&k| k == SegClass::LvEpi as u8 || k == SegClass::LvEndo as u8).collect()
    }

    /// `lv_epi \ lv_endo`.
    pub fn lv_myo(&self) -> Vec<bool> {
        self.lv_epi().iter().zip(self.lv_endo()).map(|(&e, n)| e && !n).collect()
    }

    pub fn scar(&self) -> Vec<bool> {
        self.scar_probability.iter().map(|&p| p >= 0.5).collect()
    }
}

/// Inference-mode segmenter reusable across slices.
pub struct Segmenter {
    net: Network<f32>,
}

impl Segmenter {
    pub fn new(snapshot: &WeightSnapshot) -> Result<Self> {
        if snapshot.net.kind != build_segnet().kind {
            return Err(Error::Topology(format!("snapshot '{}' is not a segmentation network", snapshot.id())));
        }
        Ok(Self { net: Network::from_snapshot(snapshot, 0)? })
    }

    pub fn predict(&mut self, image: &[u16]) -> Result<SegPrediction> {
        let size = (image.len() as f64).sqrt() as usize;
        if size * size != image.len() {
            return Err(Error::Topology(format!("{} pixels is not a square image", image.len())));
        }
        self.net.spec().check_input([1, 1, size, size])?;
        let x = Tensor::from_vec([1, 1, size, size], normalize(image).0);
        let out = self.net.forward(&x, Mode::EVAL);
        let probabilities = out.main.into_vec();
        let plane = size * size;
        let classes = (0..plane)
            .map(|px| {
                (0..SEG_CLASSES).fold(0, |best, c| if probabilities[c * plane + px] > probabilities[best * plane + px] { c } else { best }) as u8
            })
            .collect();
        let scar_probability = out.aux.expect("segnet has an aux head").into_vec();
        Ok(SegPrediction { size, probabilities, scar_probability, classes })
    }
}

pub fn predict(snapshot: &WeightSnapshot, slice: &ScanSlice) -> Result<SegPrediction> {
    Segmenter::new(snapshot)?.predict(&slice.image)
}

// ---------------------------------------------------------------- cross-validation

/// Rejects a split where a patient appears on both sides or validation holds simulated slices.
pub fn check_fold_split(train: &[ManifestEntry], validation: &[ManifestEntry]) -> Result<()> {
    let train_patients: BTreeSet<&str> = train.iter().map(|e| e.patient_id.as_str()).collect();
    if let Some(e) = validation.iter().find(|e| train_patients.contains(e.patient_id.as_str())) {
        return Err(Error::FoldLeakage(e.patient_id.clone()));
    }
    if let Some(e) = validation.iter().find(|e| e.provenance == Some(Provenance::Simulated)) {
        return Err(Error::Contract(format!("simulated slice {} in a validation fold", e.slice_id)));
    }
    Ok(())
}

/// Metrics of a trained segmenter over one validation fold. Dice is averaged
/// over all slices; scar inclusion pools the FWHM scar pixels of the fold's
/// scar slices.
pub fn evaluate_fold(snapshot: &WeightSnapshot, validation: &[ScanSlice], fold: usize, regime: Regime, seed: u64) -> Result<FoldMetrics> {
    if validation.is_empty() {
        return Err(Error::Config(format!("fold {fold} has no validation slices")));
    }
    let mut seg = Segmenter::new(snapshot)?;
    let mut score = SegScore::default();
    for s in validation {
        let p = seg.predict(&s.image)?;
        score.add(s, &p.lv_endo(), &p.lv_epi())?;
    }
    let e = score.finish();
    Ok(FoldMetrics {
        fold,
        regime,
        seed,
        dice_endo: e.dice_endo,
        dice_epi: e.dice_epi,
        pct_scar_in_myo: e.pct_scar_in_myo,
        pct_scar_in_endo: e.pct_scar_in_endo,
    })
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: FoldAssignment,
    pub metrics: Vec<FoldMetrics>,
    pub snapshots: Vec<WeightSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub fold_count: usize,
    pub fold_seed: u64,
    /// Folds trained concurrently.
    pub threads: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { fold_count: crate::dataset::DEFAULT_FOLDS, fold_seed: 0, threads: 1 }
    }
}

/// Builds the regime's training set over the whole corpus, then for every
/// fold fine-tunes on the other folds' patients and evaluates on the fold's
/// real slices. `plan` supplies the snapshots; its regime decides the set.
pub fn cross_validate(
    corpus: &[ScanSlice],
    plan: &AugmentPlan,
    pretrained: &WeightSnapshot,
    cfg: &SegTrainConfig,
    cv: &CvConfig,
) -> Result<CrossValidation> {
    let patients: Vec<String> = corpus.iter().map(|s| s.patient_id.clone()).collect();
    let folds = split_folds(&patients, cv.fold_count, cv.fold_seed)?;
    let real: Vec<ScanSlice> = corpus.iter().filter(|s| s.has_scar).cloned().collect();
    let free: Vec<ScanSlice> = corpus.iter().filter(|s| !s.has_scar).cloned().collect();
    let set = build_training_set(&real, &free, plan)?;
    let run_fold = |fold: usize| -> Result<(FoldMetrics, WeightSnapshot)> {
        let in_fold = |p: &str| folds.fold_of(p) == Some(fold);
        let (train_slices, train_entries): (Vec<ScanSlice>, Vec<ManifestEntry>) = set
            .slices
            .iter()
            .zip(&set.entries)
            .filter(|(_, e)| !in_fold(&e.patient_id))
            .map(|(s, e)| (s.clone(), e.clone()))
            .unzip();
        let validation: Vec<ScanSlice> = corpus.iter().filter(|s| in_fold(&s.patient_id)).cloned().collect();
        let val_entries: Vec<ManifestEntry> = validation
            .iter()
            .map(|s| ManifestEntry { provenance: Some(if s.has_scar { Provenance::Real } else { Provenance::NoScar }), ..ManifestEntry::of(s) })
            .collect();
        check_fold_split(&train_entries, &val_entries)?;
        let fold_cfg = SegTrainConfig { seed: cfg.seed.wrapping_add(fold as u64), ..cfg.clone() };
        let tag = format!("{SEG_TAG}_{}_fold{fold}", plan.regime.as_str().replace('+', "p"));
        let run = finetune(pretrained, &train_slices, &train_entries, &fold_cfg, &tag)?;
        Ok((evaluate_fold(&run.snapshot, &validation, fold, plan.regime, cfg.seed)?, run.snapshot))
    };
    let fold_ids: Vec<usize> = (0..cv.fold_count).collect();
    let mut results: Vec<Result<(FoldMetrics, WeightSnapshot)>> = Vec::with_capacity(cv.fold_count);
    for chunk in fold_ids.chunks(cv.threads.max(1)) {
        if chunk.len() == 1 {
            results.push(run_fold(chunk[0]));
            continue;
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&f| scope.spawn(move || run_fold(f))).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("fold thread panicked")));
        });
    }
    let mut metrics = Vec::with_capacity(cv.fold_count);
    let mut snapshots = Vec::with_capacity(cv.fold_count);
    for r in results {
        let (m, s) = r?;
        metrics.push(m);
        snapshots.push(s);
    }
    Ok(CrossValidation { folds, metrics, snapshots })
}
