//! Image refiner R(x) and discriminator D_R, trained on [0,1]-normalized
//! whole slices with an L1 pull toward the heuristic input.

use serde::{Deserialize, Serialize};

use crate::dataset::{Class, ScanSlice};
use crate::error::{Error, Result};
use crate::heuristic::{paint_scar, HeuristicParams};
use crate::maskgan::{train_gan, validate_schedule, GanNetConfig, GanProblem, GanRun, GenLoss, RegKind, ShapeSimulator};
use crate::nets::{build_discriminator, build_generator, Network, NetworkSpec, OutputNonlinearity, WeightSnapshot};
use crate::nn::{AdamConfig, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const REFINER_TAG: &str = "refiner";

/// Batch form of [`refine_gen_loss`]: mean over samples of
/// `(1 - D(R(x)))^2 + alpha * mean |R(x) - x|`.
pub fn refine_gen_loss_batch<T: Scalar>(
    scores: &Tensor<T>,
    refined: &Tensor<T>,
    input: &Tensor<T>,
    alpha: f64,
) -> Result<GenLoss<T>> {
    if refined.shape() != input.shape() || scores.len() != refined.batch() {
        return Err(Error::Contract(format!(
            "refine loss shapes: scores {:?}, refined {:?}, input {:?}",
            scores.shape(),
            refined.shape(),
            input.shape()
        )));
    }
    let denom = refined.len() as f64;
    let mut l1 = 0.0;
    let mut grad_output = Tensor::zeros(refined.shape());
    for ((&r, &x), g) in refined.data().iter().zip(input.data()).zip(grad_output.data_mut()) {
        let d = r.f64() - x.f64();
        l1 += d.abs();
        // Subgradient 0 at d == 0.
        *g = T::of(alpha * d.signum() * (d != 0.0) as u8 as f64 / denom);
    }
    l1 /= denom;
    let n = scores.len() as f64;
    let adversarial = scores.data().iter().map(|s| (1.0 - s.f64()).powi(2)).sum::<f64>() / n;
    let grad_score = scores.map(|s| T::of(-2.0 * (1.0 - s.f64()) / n));
    Ok(GenLoss { total: adversarial + alpha * l1, adversarial, regulariser: l1, grad_score, grad_output })
}

/// `(1 - d_fake)^2 + alpha * mean |refined - input|`.
pub fn refine_gen_loss(d_fake_score: f64, refined_image: &[f64], input_image: &[f64], alpha: f64) -> Result<f64> {
    if refined_image.len() != input_image.len() || refined_image.is_empty() {
        return Err(Error::Contract(format!("image sizes {} and {} differ", refined_image.len(), input_image.len())));
    }
    let l1 = refined_image.iter().zip(input_image).map(|(r, x)| (r - x).abs()).sum::<f64>() / refined_image.len() as f64;
    Ok((1.0 - d_fake_score).powi(2) + alpha * l1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineGanConfig {
    pub alpha: f64,
    pub disc_steps_per_gen_step: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub snapshot_every: u64,
    pub replay_capacity: usize,
    pub optimizer: AdamConfig,
    pub net: GanNetConfig,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for RefineGanConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            disc_steps_per_gen_step: 3,
            batch_size: 8,
            steps: 50_000,
            snapshot_every: 10_000,
            replay_capacity: 500 * 8,
            optimizer: AdamConfig::GAN,
            net: GanNetConfig::default(),
            log_every: 10,
            seed: 0,
        }
    }
}

impl RefineGanConfig {
    pub fn generator_spec(&self) -> NetworkSpec {
        let n = &self.net;
        let mut spec = build_generator(1, 1, OutputNonlinearity::Sigmoid).scaled(n.initial_filters, n.depth, n.input_size);
        spec.input_residual = true;
        spec
    }

    pub fn discriminator_spec(&self) -> NetworkSpec {
        let n = &self.net;
        let d = build_discriminator(1);
        d.scaled(n.disc_filters, d.depth, n.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        validate_schedule(self.disc_steps_per_gen_step, self.batch_size, self.replay_capacity, self.snapshot_every)
    }
}

/// Per-slice min-max mapping of 16-bit intensities to [0,1].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Normalization {
    pub min: u16,
    pub max: u16,
}

impl Normalization {
    pub fn of(image: &[u16]) -> Self {
        let min = image.iter().copied().min().unwrap_or(0);
        let max = image.iter().copied().max().unwrap_or(0);
        Self { min, max }
    }

    /// A constant image maps to all zeros.
    pub fn apply(&self, image: &[u16]) -> Vec<f32> {
        let span = (self.max - self.min) as f64;
        image
            .iter()
            .map(|&v| if span > 0.0 { ((v.saturating_sub(self.min)) as f64 / span).min(1.0) as f32 } else { 0.0 })
            .collect()
    }

    /// Inverse of [`apply`](Self::apply), rounding half up and saturating to 16 bits.
    pub fn invert(&self, values: &[f32]) -> Vec<u16> {
        let span = (self.max - self.min) as f64;
        values.iter().map(|&v| (self.min as f64 + v as f64 * span + 0.5).floor().clamp(0.0, 65535.0) as u16).collect()
    }
}

pub fn normalize(image: &[u16]) -> (Vec<f32>, Normalization) {
    let n = Normalization::of(image);
    (n.apply(image), n)
}

/// Refiner inputs: every scar-free slice painted with a shape from `mask_snapshot`, normalized.
pub fn heuristic_inputs(no_scar: &[ScanSlice], mask_snapshot: &WeightSnapshot, params: &HeuristicParams, seed: u64) -> Result<Vec<Vec<f32>>> {
    let mut sim = ShapeSimulator::new(mask_snapshot, false, seed)?;
    no_scar
        .iter()
        .map(|s| {
            let m = sim.simulate(&s.mask)?;
            let painted = paint_scar(&s.image, &m.indicator(Class::Scar), &m.indicator(Class::LvEndo), params)?;
            Ok(normalize(&painted).0)
        })
        .collect()
}

/// Trains R(x) on normalized heuristic images against D_R on normalized real-scar images.
pub fn train_refinegan(heuristic_images: &[Vec<f32>], real_scar_images: &[Vec<f32>], cfg: &RefineGanConfig) -> Result<GanRun> {
    cfg.validate()?;
    let n = cfg.net.input_size;
    for img in heuristic_images.iter().chain(real_scar_images) {
        if img.len() != n * n {
            return Err(Error::Contract(format!("image has {} pixels, networks expect {n}x{n}", img.len())));
        }
        if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("refiner images must be normalized to [0,1]".into()));
        }
    }
    let problem = GanProblem {
        tag: REFINER_TAG,
        gen_spec: cfg.generator_spec(),
        disc_spec: cfg.discriminator_spec(),
        inputs: heuristic_images,
        reals: real_scar_images,
        in_chw: [1, n, n],
        out_chw: [1, n, n],
        ratio: cfg.disc_steps_per_gen_step,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        snapshot_every: cfg.snapshot_every,
        replay_capacity: cfg.replay_capacity,
        optimizer: cfg.optimizer,
        log_every: cfg.log_every,
        seed: cfg.seed,
        reg_kind: RegKind::L1,
    };
    let alpha = cfg.alpha;
    train_gan(&problem, &|s, y, x| refine_gen_loss_batch(s, y, x, alpha))
}

/// Refiner instantiated from a snapshot; dropout is off so output is deterministic.
pub struct Refiner {
    net: Network<f32>,
    tag: String,
}

impl Refiner {
    pub fn new(snapshot: &WeightSnapshot) -> Result<Self> {
        let spec = &snapshot.net;
        if spec.in_channels != 1 || spec.out_channels != 1 || spec.output_nonlinearity != OutputNonlinearity::Sigmoid {
            return Err(Error::Topology(format!("snapshot '{}' is not an image refiner", snapshot.id())));
        }
        Ok(Self { net: Network::from_snapshot(snapshot, 0)?, tag: snapshot.id() })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Refines one normalized square image.
    pub fn refine(&mut self, image: &[f32]) -> Result<Vec<f32>> {
        let side = (image.len() as f64).sqrt() as usize;
        if side * side != image.len() {
            return Err(Error::Topology(format!("{} pixels is not a square image", image.len())));
        }
        self.net.spec().check_input([1, 1, side, side])?;
        let x = Tensor::from_vec([1, 1, side, side], image.to_vec());
        Ok(self.net.forward(&x, Mode::EVAL).main.into_vec())
    }

    /// Normalizes, refines and maps back to the slice's intensity range.
    pub fn refine_u16(&mut self, image: &[u16]) -> Result<Vec<u16>> {
        let (x, norm) = normalize(image);
        Ok(norm.invert(&self.refine(&x)?))
    }
}

pub fn refine(snapshot: &WeightSnapshot, heuristic_image: &[f32]) -> Result<Vec<f32>> {
    Refiner::new(snapshot)?.refine(heuristic_image)
}
