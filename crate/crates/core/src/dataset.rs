//! Slices, masks, the synthetic phantom corpus, on-disk formats and
//! patient-level folds.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <root>/manifest.json
//! <root>/slices/<slice_id>.img.pgm    P5, maxval 65535, big-endian samples
//! <root>/slices/<slice_id>.mask.pgm   P5, maxval 255, class index per byte
//! ```
//!
//! The image header carries one comment line `# scargan {json}` holding the
//! slice metadata, so a file pair round-trips without the manifest.
//!
//! Rasterisation: pixel `(x, y)` belongs to a disk of centre `c` and radius
//! `r` iff `(x - cx)^2 + (y - cy)^2 <= r^2`, pixel indices used as coordinates.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const DEFAULT_FOLDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    RvEndo = 1,
    LvMyo = 2,
    LvEndo = 3,
    Scar = 4,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Background, Class::RvEndo, Class::LvMyo, Class::LvEndo, Class::Scar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Class> {
        Self::ALL.get(i as usize).copied()
    }
}

/// Square per-pixel class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    size: usize,
    labels: Vec<Class>,
}

impl SegMask {
    pub fn new(size: usize) -> Self {
        Self { size, labels: vec![Class::Background; size * size] }
    }

    pub fn from_labels(size: usize, labels: Vec<Class>) -> Self {
        assert_eq!(labels.len(), size * size, "label count does not match {size}x{size}");
        Self { size, labels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> &[Class] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Class] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Class {
        self.labels[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Class) {
        self.labels[y * self.size + x] = c;
    }

    pub fn count(&self, c: Class) -> usize {
        self.labels.iter().filter(|&&l| l == c).count()
    }

    pub fn has(&self, c: Class) -> bool {
        self.labels.contains(&c)
    }

    pub fn indicator(&self, c: Class) -> Vec<bool> {
        self.labels.iter().map(|&l| l == c).collect()
    }

    /// Pixels whose class is any of `classes`.
    pub fn union(&self, classes: &[Class]) -> Vec<bool> {
        self.labels.iter().map(|l| classes.contains(l)).collect()
    }

    /// `[NUM_CLASSES, size, size]` one-hot planes.
    pub fn one_hot(&self) -> Vec<f32> {
        let plane = self.size * self.size;
        let mut out = vec![0.0; NUM_CLASSES * plane];
        for (p, &l) in self.labels.iter().enumerate() {
            out[l.index() * plane + p] = 1.0;
        }
        out
    }

    /// Per-pixel argmax over `[NUM_CLASSES, size, size]` planes; ties go to the lower class.
    pub fn from_planes(size: usize, planes: &[f32]) -> Self {
        let plane = size * size;
        assert_eq!(planes.len(), NUM_CLASSES * plane, "plane buffer size");
        let labels = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if planes[c * plane + p] > planes[best * plane + p] {
                        best = c;
                    }
                }
                Class::ALL[best]
            })
            .collect();
        Self { size, labels }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub patient_id: String,
    pub slice_id: String,
    pub has_scar: bool,
}

/// One short-axis slice: 16-bit image, class mask and identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanSlice {
    pub image: Vec<u16>,
    pub mask: SegMask,
    pub patient_id: String,
    pub slice_id: String,
    pub has_scar: bool,
}

impl ScanSlice {
    pub fn size(&self) -> usize {
        self.mask.size()
    }

    pub fn meta(&self) -> SliceMeta {
        SliceMeta { patient_id: self.patient_id.clone(), slice_id: self.slice_id.clone(), has_scar: self.has_scar }
    }

    /// Checks the size and scar-flag invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.size();
        if self.image.len() != n * n {
            return Err(Error::Contract(format!(
                "slice {}: image has {} pixels, mask is {n}x{n}",
                self.slice_id,
                self.image.len()
            )));
        }
        if self.has_scar != self.mask.has(Class::Scar) {
            return Err(Error::Contract(format!("slice {}: has_scar flag disagrees with the mask", self.slice_id)));
        }
        Ok(())
    }
}

/// Value at rank `ceil(p * n)` (1-based) of the sorted values; `p` in (0, 1].
pub fn nearest_rank<T: Copy + Ord>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScarArcRange {
    /// Angular extent in radians; the start angle is uniform per slice.
    pub extent: (f64, f64),
    /// Depth from the endocardium as a fraction of wall thickness.
    pub radial_fraction: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub size: usize,
    pub lv_center: (f64, f64),
    pub r_endo: f64,
    pub r_epi: f64,
    /// Leftward distance from the LV centre to the RV ellipse centre.
    pub rv_offset: f64,
    pub rv_semi_axes: (f64, f64),
    pub background_intensity_range: (u16, u16),
    pub blood_intensity_range: (u16, u16),
    pub myo_intensity_range: (u16, u16),
    pub scar_intensity_range: (u16, u16),
    pub noise_sigma: f64,
    pub scar_arc: ScarArcRange,
    /// When false, scar pixels are labelled but rendered as myocardium.
    pub scar_contrast: bool,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 192,
            lv_center: (100.0, 96.0),
            r_endo: 22.0,
            r_epi: 34.0,
            rv_offset: 44.0,
            rv_semi_axes: (16.0, 34.0),
            background_intensity_range: (500, 800),
            blood_intensity_range: (1400, 1800),
            myo_intensity_range: (250, 450),
            scar_intensity_range: (1300, 1900),
            noise_sigma: 40.0,
            scar_arc: ScarArcRange { extent: (0.6, 2.2), radial_fraction: (0.45, 1.0) },
            scar_contrast: true,
        }
    }
}

impl PhantomParams {
    /// Default anatomy on a `size` frame, enlarged by `zoom` about the frame centre.
    pub fn scaled(size: usize, zoom: f64) -> Self {
        let d = Self::default();
        let s = size as f64 / d.size as f64 * zoom;
        let half = size as f64 / 2.0;
        let d_half = d.size as f64 / 2.0;
        Self {
            size,
            lv_center: (half + (d.lv_center.0 - d_half) * s, half + (d.lv_center.1 - d_half) * s),
            r_endo: d.r_endo * s,
            r_epi: d.r_epi * s,
            rv_offset: d.rv_offset * s,
            rv_semi_axes: (d.rv_semi_axes.0 * s, d.rv_semi_axes.1 * s),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Geometry(m));
        if self.size < 8 {
            return bad(format!("frame size {} is too small", self.size));
        }
        if !(self.r_endo > 0.0 && self.r_endo < self.r_epi) {
            return bad(format!("need 0 < r_endo < r_epi, got {} and {}", self.r_endo, self.r_epi));
        }
        let n = self.size as f64;
        let (cx, cy) = self.lv_center;
        if cx - self.r_epi < 0.0 || cy - self.r_epi < 0.0 || cx + self.r_epi > n - 1.0 || cy + self.r_epi > n - 1.0 {
            return bad(format!("LV epicardium (centre {cx},{cy}, radius {}) exceeds the {n}x{n} frame", self.r_epi));
        }
        let rx = cx - self.rv_offset;
        let (ax, ay) = self.rv_semi_axes;
        if ax <= 0.0 || ay <= 0.0 {
            return bad("RV semi-axes must be positive".into());
        }
        if rx - ax < 0.0 || rx + ax > n - 1.0 || cy - ay < 0.0 || cy + ay > n - 1.0 {
            return bad(format!("RV ellipse (centre {rx},{cy}, semi-axes {ax},{ay}) exceeds the frame"));
        }
        if rx + ax <= cx - self.r_epi {
            return bad("RV ellipse does not reach the septum".into());
        }
        for (name, (lo, hi)) in [
            ("background", self.background_intensity_range),
            ("blood", self.blood_intensity_range),
            ("myocardium", self.myo_intensity_range),
            ("scar", self.scar_intensity_range),
        ] {
            if lo > hi {
                return bad(format!("{name} intensity range is reversed"));
            }
        }
        let (bl, bh) = self.blood_intensity_range;
        let (sl, sh) = self.scar_intensity_range;
        if sh < bl || sl > bh {
            return bad("scar intensity range must overlap the blood range".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        let (e0, e1) = self.scar_arc.extent;
        let (f0, f1) = self.scar_arc.radial_fraction;
        if !(0.0 < e0 && e0 <= e1 && e1 <= 2.0 * PI) || !(0.0 < f0 && f0 <= f1 && f1 <= 1.0) {
            return bad("scar arc ranges must be increasing within (0, 2pi] and (0, 1]".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn uniform_u16(rng: &mut ChaCha8Rng, (lo, hi): (u16, u16)) -> f64 {
    uniform(rng, (lo as f64, hi as f64))
}

/// Angle in `[0, 2pi)` measured from +x towards +y.
fn angle_of(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx).rem_euclid(2.0 * PI)
}

/// Renders one phantom slice. Ids are derived from the seed; corpus code renames them.
pub fn generate_slice(seed: u64, with_scar: bool, params: &PhantomParams) -> Result<ScanSlice> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.size;
    let (cx, cy) = params.lv_center;
    let (rx, (ax, ay)) = (cx - params.rv_offset, params.rv_semi_axes);
    let mut mask = SegMask::new(n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d2 = dx * dx + dy * dy;
            let c = if d2 <= params.r_endo * params.r_endo {
                Class::LvEndo
            } else if d2 <= params.r_epi * params.r_epi {
                Class::LvMyo
            } else {
                let (ex, ey) = ((x as f64 - rx) / ax, (y as f64 - cy) / ay);
                if ex * ex + ey * ey <= 1.0 {
                    Class::RvEndo
                } else {
                    Class::Background
                }
            };
            mask.set(x, y, c);
        }
    }

    // Scar texture field, drawn whether or not the slice has scar so the
    // remaining random stream does not depend on `with_scar`.
    let start = rng.gen_range(0.0..2.0 * PI);
    let extent = uniform(&mut rng, params.scar_arc.extent);
    let depth = uniform(&mut rng, params.scar_arc.radial_fraction);
    let wobble: [(f64, f64); 2] = [(rng.gen_range(0.0..2.0 * PI), 0.2), (rng.gen_range(0.0..2.0 * PI), 0.1)];
    if with_scar {
        let wall = params.r_epi - params.r_endo;
        let mut best: Option<(f64, usize, usize)> = None;
        for y in 0..n {
            for x in 0..n {
                if mask.get(x, y) != Class::LvMyo {
                    continue;
                }
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let along = (angle_of(dx, dy) - start).rem_euclid(2.0 * PI);
                let dist = (dx * dx + dy * dy).sqrt();
                let mid_gap = (along - extent / 2.0).abs();
                if best.is_none_or(|(g, _, _)| mid_gap < g) {
                    best = Some((mid_gap, x, y));
                }
                if along > extent {
                    continue;
                }
                // Depth tapers towards both ends of the arc and wobbles along it.
                let t = along / extent;
                let taper = (PI * t).sin().sqrt();
                let w: f64 = wobble.iter().enumerate().map(|(k, &(ph, a))| a * ((k as f64 + 2.0) * PI * t + ph).sin()).sum();
                let reach = (depth * taper * (1.0 + w)).clamp(0.0, 1.0) * wall;
                if dist - params.r_endo <= reach {
                    mask.set(x, y, Class::Scar);
                }
            }
        }
        if !mask.has(Class::Scar) {
            let (_, x, y) = best.ok_or_else(|| Error::Geometry("myocardium has no pixels".into()))?;
            mask.set(x, y, Class::Scar);
        }
    }

    let bg = uniform_u16(&mut rng, params.background_intensity_range);
    let blood = uniform_u16(&mut rng, params.blood_intensity_range);
    let rv_blood = blood * rng.gen_range(0.9..1.05);
    let myo = uniform_u16(&mut rng, params.myo_intensity_range);
    let scar = uniform_u16(&mut rng, params.scar_intensity_range);
    let scar_spread = (params.scar_intensity_range.1 - params.scar_intensity_range.0) as f64 / 4.0;
    let grain = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clean: Vec<f64> = mask
        .labels()
        .iter()
        .map(|&c| match c {
            Class::Background => bg,
            Class::RvEndo => rv_blood,
            Class::LvEndo => blood,
            Class::LvMyo => myo,
            Class::Scar if params.scar_contrast => scar + scar_spread * grain.sample(&mut rng),
            Class::Scar => myo,
        })
        .collect();
    // Partial-volume edges: separable [1 2 1] / 4 blur, edges replicated.
    for pass in 0..2 {
        let src = clean.clone();
        for y in 0..n {
            for x in 0..n {
                let at = |k: isize| {
                    let (xx, yy) = if pass == 0 { (x as isize + k, y as isize) } else { (x as isize, y as isize + k) };
                    src[yy.clamp(0, n as isize - 1) as usize * n + xx.clamp(0, n as isize - 1) as usize]
                };
                clean[y * n + x] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
            }
        }
    }
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let image = clean
        .iter()
        .map(|&v| {
            let v = if params.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
            v.round().clamp(0.0, 65535.0) as u16
        })
        .collect();
    let has_scar = mask.has(Class::Scar);
    Ok(ScanSlice {
        image,
        mask,
        patient_id: format!("phantom{seed}"),
        slice_id: format!("phantom{seed}_s0"),
        has_scar,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_slices: usize,
    pub scar_fraction: f64,
    pub slices_per_patient: usize,
    /// Relative per-patient variation of radii, offsets and centre.
    pub anatomy_jitter: f64,
    pub params: PhantomParams,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_slices: 160,
            scar_fraction: 0.434,
            slices_per_patient: 4,
            anatomy_jitter: 0.1,
            params: PhantomParams::default(),
            seed: 0,
        }
    }
}

fn jittered(base: &PhantomParams, rng: &mut ChaCha8Rng, j: f64, slice_scale: f64) -> PhantomParams {
    let mut f = |v: f64| v * (1.0 + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 });
    let r_endo = f(base.r_endo) * slice_scale;
    let wall = f(base.r_epi - base.r_endo);
    let rv_offset = f(base.rv_offset);
    let rv_semi_axes = (f(base.rv_semi_axes.0), f(base.rv_semi_axes.1));
    let shift = base.size as f64 * j * 0.2;
    let mut g = |v: f64| v + if shift > 0.0 { rng.gen_range(-shift..shift) } else { 0.0 };
    PhantomParams {
        lv_center: (g(base.lv_center.0), g(base.lv_center.1)),
        r_endo,
        r_epi: r_endo + wall,
        rv_offset,
        rv_semi_axes,
        ..base.clone()
    }
}

/// Generates a patient-structured corpus: anatomy is drawn per patient, slices
/// of one patient shrink slightly towards the apex, and exactly
/// `round(n_slices * scar_fraction)` slices carry scar, assigned patient by patient.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<ScanSlice>> {
    cfg.params.validate()?;
    if cfg.slices_per_patient == 0 || cfg.n_slices == 0 {
        return Err(Error::Config("corpus needs at least one slice and one slice per patient".into()));
    }
    if !(0.0..=1.0).contains(&cfg.scar_fraction) {
        return Err(Error::Config(format!("scar_fraction {} outside [0, 1]", cfg.scar_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_patients = cfg.n_slices.div_ceil(cfg.slices_per_patient);
    let mut order: Vec<usize> = (0..n_patients).collect();
    order.shuffle(&mut rng);
    let mut scar_left = (cfg.n_slices as f64 * cfg.scar_fraction).round() as usize;
    let mut plan = Vec::with_capacity(cfg.n_slices);
    for &p in &order {
        let first = p * cfg.slices_per_patient;
        for s in 0..cfg.slices_per_patient {
            if first + s >= cfg.n_slices {
                break;
            }
            let scar = scar_left > 0;
            scar_left -= scar as usize;
            plan.push((p, s, scar));
        }
    }
    plan.sort_unstable();
    let mut out = Vec::with_capacity(plan.len());
    let mut anatomy: BTreeMap<usize, PhantomParams> = BTreeMap::new();
    for (p, s, scar) in plan {
        let base = anatomy.entry(p).or_insert_with(|| {
            let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (p as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            // Redraw anatomy that leaves the frame; fall back to the base geometry.
            (0..64)
                .map(|_| jittered(&cfg.params, &mut prng, cfg.anatomy_jitter, 1.0))
                .find(|a| a.validate().is_ok())
                .unwrap_or_else(|| cfg.params.clone())
        });
        let scale = 1.0 - 0.04 * s as f64;
        let params = PhantomParams { r_endo: base.r_endo * scale, ..base.clone() };
        let slice_seed = rng.gen::<u64>();
        let mut slice = generate_slice(slice_seed, scar, &params)?;
        slice.patient_id = format!("P{p:03}");
        slice.slice_id = format!("P{p:03}_s{s:02}");
        out.push(slice);
    }
    Ok(out)
}

// ---------------------------------------------------------------- PGM I/O

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: usize,
    comments: Vec<String>,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8], path: &Path) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(path, 0, "not a binary PGM (expected P5)"));
    }
    let mut pos = 2;
    let mut comments = Vec::new();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                    comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
                    pos = end;
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, start, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse(path, start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, pos, format!("maxval {maxval} out of range")));
    }
    Ok(PgmHeader { width, height, maxval, comments, data_offset: pos + 1 })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a bare 16-bit square PGM with no metadata.
pub fn write_pgm16(path: &Path, size: usize, data: &[u16]) -> Result<()> {
    assert_eq!(data.len(), size * size, "pgm data size");
    let mut bytes = format!("P5\n{size} {size}\n65535\n").into_bytes();
    for &v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_file(path, &bytes)
}

/// Reads a square 16-bit PGM written by [`write_pgm16`] or [`write_slice`].
pub fn read_pgm16(path: &Path) -> Result<(usize, Vec<u16>)> {
    let bytes = read_file(path)?;
    let h = parse_pgm_header(&bytes, path)?;
    if h.maxval != 65535 || h.width != h.height {
        return Err(Error::parse(path, 0, format!("expected a square 16-bit image, got {}x{} maxval {}", h.width, h.height, h.maxval)));
    }
    let n = h.width;
    if bytes.len() != h.data_offset + 2 * n * n {
        return Err(Error::parse(path, bytes.len(), format!("expected {} data bytes", 2 * n * n)));
    }
    Ok((n, bytes[h.data_offset..].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()))
}

const META_PREFIX: &str = "scargan ";

pub fn slice_paths(dir: &Path, slice_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{slice_id}.img.pgm")), dir.join(format!("{slice_id}.mask.pgm")))
}

/// Writes `<dir>/<slice_id>.img.pgm` and `<dir>/<slice_id>.mask.pgm`.
pub fn write_slice(slice: &ScanSlice, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    slice.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = slice.size();
    let (img_path, mask_path) = slice_paths(dir, &slice.slice_id);
    let meta = serde_json::to_string(&slice.meta()).expect("metadata serializes");
    let mut img = format!("P5\n# {META_PREFIX}{meta}\n{n} {n}\n65535\n").into_bytes();
    for &v in &slice.image {
        img.extend_from_slice(&v.to_be_bytes());
    }
    write_file(&img_path, &img)?;
    let mut mask = format!("P5\n{n} {n}\n255\n").into_bytes();
    mask.extend(slice.mask.labels().iter().map(|&c| c as u8));
    write_file(&mask_path, &mask)?;
    Ok((img_path, mask_path))
}

pub fn read_slice(dir: &Path, slice_id: &str) -> Result<ScanSlice> {
    let (img_path, mask_path) = slice_paths(dir, slice_id);
    let bytes = read_file(&img_path)?;
    let h = parse_pgm_header(&bytes, &img_path)?;
    if h.maxval != 65535 {
        return Err(Error::parse(&img_path, h.data_offset - 1, format!("image maxval must be 65535, got {}", h.maxval)));
    }
    if h.width != h.height {
        return Err(Error::parse(&img_path, 0, format!("dimension mismatch: image is {}x{}, expected square", h.width, h.height)));
    }
    let n = h.width;
    let need = h.data_offset + 2 * n * n;
    if bytes.len() != need {
        return Err(Error::parse(&img_path, bytes.len().min(need), format!("expected {} data bytes, found {}", 2 * n * n, bytes.len() - h.data_offset)));
    }
    let image: Vec<u16> = bytes[h.data_offset..].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let meta: SliceMeta = h
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(META_PREFIX))
        .ok_or_else(|| Error::parse(&img_path, 3, "missing scargan metadata comment"))
        .and_then(|m| serde_json::from_str(m).map_err(|e| Error::parse(&img_path, 3, format!("bad metadata: {e}"))))?;

    let bytes = read_file(&mask_path)?;
    let mh = parse_pgm_header(&bytes, &mask_path)?;
    if mh.maxval > 255 {
        return Err(Error::parse(&mask_path, mh.data_offset - 1, "mask must be 8-bit"));
    }
    if (mh.width, mh.height) != (n, n) {
        return Err(Error::parse(
            &mask_path,
            0,
            format!("dimension mismatch: mask is {}x{}, image is {n}x{n}", mh.width, mh.height),
        ));
    }
    if bytes.len() != mh.data_offset + n * n {
        return Err(Error::parse(&mask_path, bytes.len(), format!("expected {} mask bytes", n * n)));
    }
    let mut labels = Vec::with_capacity(n * n);
    for (i, &b) in bytes[mh.data_offset..].iter().enumerate() {
        let c = Class::from_index(b)
            .ok_or_else(|| Error::parse(&mask_path, mh.data_offset + i, format!("class out of range: {b}")))?;
        labels.push(c);
    }
    let slice = ScanSlice {
        image,
        mask: SegMask::from_labels(n, labels),
        patient_id: meta.patient_id,
        slice_id: meta.slice_id,
        has_scar: meta.has_scar,
    };
    if slice.slice_id != slice_id {
        return Err(Error::parse(&img_path, 3, format!("file holds slice '{}'", slice.slice_id)));
    }
    slice.validate()?;
    Ok(slice)
}

// ---------------------------------------------------------------- manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    NoScar,
    Simulated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slice_id: String,
    pub patient_id: String,
    pub has_scar: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_snapshot_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner_snapshot_tag: Option<String>,
    /// Slice this entry was simulated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_slice_id: Option<String>,
}

impl ManifestEntry {
    pub fn of(slice: &ScanSlice) -> Self {
        Self {
            slice_id: slice.slice_id.clone(),
            patient_id: slice.patient_id.clone(),
            has_scar: slice.has_scar,
            provenance: None,
            mask_snapshot_tag: None,
            refiner_snapshot_tag: None,
            source_slice_id: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub slices: Vec<ManifestEntry>,
    pub params: PhantomParams,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SLICES_DIR: &str = "slices";

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_file(&path, &json)?;
        Ok(path)
    }

    pub fn patients(&self) -> Vec<String> {
        self.slices.iter().map(|e| e.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// Writes slices plus manifest under `root`.
pub fn write_dataset(root: &Path, slices: &[ScanSlice], entries: Vec<ManifestEntry>, params: &PhantomParams, seed: u64) -> Result<Manifest> {
    assert_eq!(slices.len(), entries.len(), "one manifest entry per slice");
    let dir = root.join(SLICES_DIR);
    for s in slices {
        write_slice(s, &dir)?;
    }
    let manifest = Manifest { slices: entries, params: params.clone(), seed };
    manifest.save(root)?;
    Ok(manifest)
}

/// Reads every slice listed in the manifest, in manifest order.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<ScanSlice>)> {
    let manifest = Manifest::load(root)?;
    let dir = root.join(SLICES_DIR);
    let slices = manifest.slices.iter().map(|e| read_slice(&dir, &e.slice_id)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, slices))
}

// ---------------------------------------------------------------- folds

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_count: usize,
    pub mapping: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.mapping.get(patient_id).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.mapping.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.as_str()).collect()
    }
}

/// Shuffles the distinct patient ids under `seed` and deals them round-robin into `k` folds.
pub fn split_folds(patients: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut unique: Vec<&String> = patients.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < k {
        return Err(Error::Config(format!("{} patients cannot fill {k} folds", unique.len())));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mapping = unique.into_iter().enumerate().map(|(i, p)| (p.clone(), i % k)).collect();
    Ok(FoldAssignment { fold_count: k, mapping })
}
