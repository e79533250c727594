//! Mask generator M(x) and discriminator D_M: least-squares adversarial
//! training with a cross-entropy anchor to the scar-free input, experience
//! replay and periodic snapshots.
//!
//! The replay buffer, discriminator loss and alternating training loop are
//! shared with the refiner.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Class, SegMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nets::{build_discriminator, build_generator, Network, NetworkSpec, OutputNonlinearity, WeightSnapshot};
use crate::nn::{Adam, AdamConfig, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;
/// Tolerance on probability rows summing to one.
pub const ROW_TOL: f64 = 1e-4;

/// Loss value with the gradients needed to backpropagate it.
#[derive(Clone, Debug)]
pub struct GenLoss<T> {
    pub total: f64,
    pub adversarial: f64,
    pub regulariser: f64,
    /// d total / d score, `[N, 1, 1, 1]`.
    pub grad_score: Tensor<T>,
    /// d total / d generator output (regulariser part only).
    pub grad_output: Tensor<T>,
}

fn adversarial_term<T: Scalar>(scores: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = scores.len() as f64;
    let value = scores.data().iter().map(|s| (1.0 - s.f64()).powi(2)).sum::<f64>() / n;
    let grad = scores.map(|s| T::of(-2.0 * (1.0 - s.f64()) / n));
    (value, grad)
}

/// Batch form of [`mask_gen_loss`]: mean over samples of
/// `(1 - D(M(x)))^2 + alpha * xent(M(x), x)`, where the cross-entropy is
/// averaged over pixels and classes.
pub fn mask_gen_loss_batch<T: Scalar>(
    scores: &Tensor<T>,
    pred: &Tensor<T>,
    input: &Tensor<T>,
    alpha: f64,
) -> Result<GenLoss<T>> {
    if pred.shape() != input.shape() || scores.len() != pred.batch() {
        return Err(Error::Contract(format!(
            "mask loss shapes: scores {:?}, prediction {:?}, input {:?}",
            scores.shape(),
            pred.shape(),
            input.shape()
        )));
    }
    let [n, c, h, w] = pred.shape();
    let plane = h * w;
    for i in 0..n {
        let p = pred.sample(i);
        for px in 0..plane {
            let s: f64 = (0..c).map(|ci| p[ci * plane + px].f64()).sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Contract(format!("probability row at sample {i}, pixel {px} sums to {s}")));
            }
        }
    }
    let denom = (n * c * plane) as f64;
    let mut xent = 0.0;
    let mut grad_output = Tensor::zeros(pred.shape());
    for ((&q, &t), g) in pred.data().iter().zip(input.data()).zip(grad_output.data_mut()) {
        let (q, t) = (q.f64(), t.f64());
        if t == 0.0 {
            continue;
        }
        let qc = q.clamp(PROB_FLOOR, 1.0);
        xent -= t * qc.ln();
        if q > PROB_FLOOR {
            *g = T::of(-alpha * t / (qc * denom));
        }
    }
    // Mean over samples, pixels and classes.
    xent /= denom;
    let (adversarial, grad_score) = adversarial_term(scores);
    Ok(GenLoss { total: adversarial + alpha * xent, adversarial, regulariser: xent, grad_score, grad_output })
}

/// `(1 - d_fake)^2 + alpha * xent(pred, input)` for one mask given as
/// `[classes, pixels]` probability and one-hot planes.
pub fn mask_gen_loss(d_fake_score: f64, pred_mask: &[f64], input_mask: &[f64], classes: usize, alpha: f64) -> Result<f64> {
    if classes == 0 || pred_mask.len() % classes != 0 {
        return Err(Error::Contract(format!("{} values do not form {classes} planes", pred_mask.len())));
    }
    let shape = [1, classes, 1, pred_mask.len() / classes];
    let pred = Tensor::from_vec(shape, pred_mask.to_vec());
    let input = Tensor::from_vec(shape, input_mask.to_vec());
    let scores = Tensor::from_vec([1, 1, 1, 1], vec![d_fake_score]);
    Ok(mask_gen_loss_batch(&scores, &pred, &input, alpha)?.total)
}

/// Least-squares discriminator loss, `(d_real - 1)^2 + d_fake^2`.
pub fn disc_loss(d_real_score: f64, d_fake_score: f64) -> f64 {
    (d_real_score - 1.0).powi(2) + d_fake_score.powi(2)
}

/// Batch mean of [`disc_loss`] with gradients for the real and fake scores.
pub fn disc_loss_batch<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> (f64, Tensor<T>, Tensor<T>) {
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let value = real.data().iter().map(|r| (r.f64() - 1.0).powi(2)).sum::<f64>() / nr
        + fake.data().iter().map(|f| f.f64().powi(2)).sum::<f64>() / nf;
    let gr = real.map(|r| T::of(2.0 * (r.f64() - 1.0) / nr));
    let gf = fake.map(|f| T::of(2.0 * f.f64() / nf));
    (value, gr, gf)
}

/// Bounded store of past generator outputs with uniform random replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, items: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Vec<f32>] {
        &self.items
    }

    /// Stores a random half (rounded up) of the batch.
    pub fn push(&mut self, batch: &Tensor<f32>) {
        let n = batch.batch();
        let keep = n.div_ceil(2);
        for i in index::sample(&mut self.rng, n, keep).into_vec() {
            self.insert(batch.sample(i).to_vec());
        }
    }

    fn insert(&mut self, item: Vec<f32>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = self.rng.gen_range(0..self.capacity);
            self.items[slot] = item;
        }
    }

    /// Builds a discriminator batch of `batch_size` samples: half from `fresh`,
    /// half drawn uniformly without replacement from the buffer. A buffer
    /// holding fewer than half leaves the shortfall to fresh samples. Returns
    /// the batch and the indices of the replayed items.
    pub fn compose(&mut self, fresh: &Tensor<f32>, batch_size: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        if !self.is_empty() && batch_size % 2 != 0 {
            return Err(Error::Contract(format!("batch size {batch_size} must be even once replay is active")));
        }
        let replayed = (batch_size / 2).min(self.len());
        let n_fresh = batch_size - replayed;
        if fresh.batch() < n_fresh {
            return Err(Error::Contract(format!("need {n_fresh} fresh samples, got {}", fresh.batch())));
        }
        let len = self.len();
        let picks = if replayed > 0 { index::sample(&mut self.rng, len, replayed).into_vec() } else { Vec::new() };
        let [_, c, h, w] = fresh.shape();
        let mut samples: Vec<&[f32]> = (0..n_fresh).map(|i| fresh.sample(i)).collect();
        samples.extend(picks.iter().map(|&i| self.items[i].as_slice()));
        Ok((Tensor::stack(&samples, [c, h, w]), picks))
    }
}

/// Width, depth and resolution of the generator/discriminator pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanNetConfig {
    pub initial_filters: usize,
    pub depth: usize,
    pub disc_filters: usize,
    pub input_size: usize,
}

impl Default for GanNetConfig {
    fn default() -> Self {
        Self { initial_filters: 64, depth: 4, disc_filters: 64, input_size: 192 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGanConfig {
    pub alpha: f64,
    pub disc_steps_per_gen_step: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub snapshot_every: u64,
    /// Stored samples, not batches.
    pub replay_capacity: usize,
    pub optimizer: AdamConfig,
    pub net: GanNetConfig,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for MaskGanConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            disc_steps_per_gen_step: 2,
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

impl MaskGanConfig {
    pub fn generator_spec(&self) -> NetworkSpec {
        let n = &self.net;
        let mut spec = build_generator(NUM_CLASSES, NUM_CLASSES, OutputNonlinearity::Softmax).scaled(n.initial_filters, n.depth, n.input_size);
        spec.input_residual = true;
        spec
    }

    pub fn discriminator_spec(&self) -> NetworkSpec {
        let n = &self.net;
        let d = build_discriminator(NUM_CLASSES);
        d.scaled(n.disc_filters, d.depth, n.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        validate_schedule(self.disc_steps_per_gen_step, self.batch_size, self.replay_capacity, self.snapshot_every)
    }
}

pub(crate) fn validate_schedule(ratio: usize, batch_size: usize, capacity: usize, snapshot_every: u64) -> Result<()> {
    if ratio < 1 {
        return Err(Error::Config("need at least one discriminator step per generator step".into()));
    }
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size {batch_size} must be even and at least 2")));
    }
    if capacity < batch_size / 2 {
        return Err(Error::Config(format!("replay capacity {capacity} is below half a batch")));
    }
    if snapshot_every == 0 {
        return Err(Error::Config("snapshot_every must be positive".into()));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub disc_updates: u64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xent_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scar_pixel_mean: Option<f64>,
}

/// Result of an adversarial training run.
#[derive(Clone, Debug)]
pub struct GanRun {
    /// Generator snapshots in step order; the last one is the final state.
    pub snapshots: Vec<WeightSnapshot>,
    pub discriminator: WeightSnapshot,
    pub gen_updates: u64,
    pub disc_updates: u64,
    pub log: Vec<LogRecord>,
}

impl GanRun {
    /// Writes `snapshots/*.wts`, the final discriminator and `log.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let snaps = dir.join("snapshots");
        for s in &self.snapshots {
            s.save(&snaps)?;
        }
        self.discriminator.save(&dir.join("discriminator"))?;
        let path = dir.join("log.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.log {
            let line = serde_json::to_string(r).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub(crate) enum RegKind {
    Xent,
    L1,
}

/// Everything the alternating loop needs besides the loss.
pub(crate) struct GanProblem<'a> {
    pub tag: &'a str,
    pub gen_spec: NetworkSpec,
    pub disc_spec: NetworkSpec,
    pub inputs: &'a [Vec<f32>],
    pub reals: &'a [Vec<f32>],
    pub in_chw: [usize; 3],
    pub out_chw: [usize; 3],
    pub ratio: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub snapshot_every: u64,
    pub replay_capacity: usize,
    pub optimizer: AdamConfig,
    pub log_every: u64,
    pub seed: u64,
    pub reg_kind: RegKind,
}

/// Forward pass that samples dropout and uses batch statistics but keeps no activations.
const GENERATE: Mode = Mode { batch_stats: true, dropout: true, record: false };

fn sample_batch(pool: &[Vec<f32>], n: usize, chw: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let picks: Vec<&[f32]> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_slice()).collect();
    Tensor::stack(&picks, chw)
}

fn scar_mean(out: &Tensor<f32>) -> f64 {
    let [n, c, h, w] = out.shape();
    if c != NUM_CLASSES {
        return f64::NAN;
    }
    let plane = h * w;
    let s: f64 = (0..n)
        .map(|i| out.sample(i)[Class::Scar.index() * plane..(Class::Scar.index() + 1) * plane].iter().map(|&v| v as f64).sum::<f64>())
        .sum();
    s / (n * plane) as f64
}

/// Alternating least-squares GAN training: `ratio` discriminator updates,
/// then one generator update, repeated `steps` times.
pub(crate) fn train_gan(
    p: &GanProblem<'_>,
    gen_loss: &dyn Fn(&Tensor<f32>, &Tensor<f32>, &Tensor<f32>) -> Result<GenLoss<f32>>,
) -> Result<GanRun> {
    if p.inputs.is_empty() || p.reals.is_empty() {
        return Err(Error::Config(format!("{}: generator inputs and real samples must be nonempty", p.tag)));
    }
    let in_len: usize = p.in_chw.iter().product();
    let out_len: usize = p.out_chw.iter().product();
    if p.inputs.iter().any(|v| v.len() != in_len) || p.reals.iter().any(|v| v.len() != out_len) {
        return Err(Error::Contract(format!("{}: sample sizes do not match the network", p.tag)));
    }
    let mut gen = Network::<f32>::new(&p.gen_spec, p.seed)?;
    let mut disc = Network::<f32>::new(&p.disc_spec, p.seed.wrapping_add(1))?;
    let mut gen_opt = Adam::new(p.optimizer);
    let mut disc_opt = Adam::new(p.optimizer);
    let mut replay = ReplayBuffer::new(p.replay_capacity, p.seed.wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(3));
    let b = p.batch_size;
    let mut run = GanRun {
        snapshots: Vec::new(),
        discriminator: disc.snapshot(0, &format!("{}_disc", p.tag)),
        gen_updates: 0,
        disc_updates: 0,
        log: Vec::new(),
    };
    for step in 1..=p.steps {
        let mut d_loss = 0.0;
        for _ in 0..p.ratio {
            let x = sample_batch(p.inputs, b, p.in_chw, &mut rng);
            let fresh = gen.forward(&x, GENERATE).main;
            let (fake, _) = replay.compose(&fresh, b)?;
            replay.push(&fresh);
            let real = sample_batch(p.reals, b, p.out_chw, &mut rng);
            disc.zero_grad();
            // Real and fake pass through separately, each with its own batch statistics.
            let s_real = disc.forward(&real, Mode::TRAIN).main;
            let (_, g_real, _) = disc_loss_batch(&s_real, &s_real);
            disc.backward(&g_real, None);
            let s_fake = disc.forward(&fake, Mode::TRAIN).main;
            let (loss, _, g_fake) = disc_loss_batch(&s_real, &s_fake);
            disc.backward(&g_fake, None);
            d_loss = loss;
            if !d_loss.is_finite() || !disc.store().grads_finite() {
                return Err(Error::Diverged { step, what: "discriminator loss" });
            }
            disc_opt.step(disc.store_mut());
            run.disc_updates += 1;
        }

        let x = sample_batch(p.inputs, b, p.in_chw, &mut rng);
        gen.zero_grad();
        let y = gen.forward(&x, Mode::TRAIN).main;
        let scores = disc.forward(&y, Mode::TRAIN).main;
        let loss = gen_loss(&scores, &y, &x)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, what: "generator loss" });
        }
        let mut g_y = disc.backward(&loss.grad_score, None);
        disc.zero_grad();
        g_y.add_assign(&loss.grad_output);
        gen.backward(&g_y, None);
        if !gen.store().grads_finite() {
            return Err(Error::Diverged { step, what: "generator gradient" });
        }
        gen_opt.step(gen.store_mut());
        run.gen_updates += 1;

        if step % p.log_every.max(1) == 0 || step == p.steps {
            let (xent_term, l1_term, scar_pixel_mean) = match p.reg_kind {
                RegKind::Xent => (Some(loss.regulariser), None, Some(scar_mean(&y))),
                RegKind::L1 => (None, Some(loss.regulariser), None),
            };
            run.log.push(LogRecord {
                step,
                disc_updates: run.disc_updates,
                gen_loss: loss.total,
                disc_loss: d_loss,
                xent_term,
                l1_term,
                scar_pixel_mean,
            });
        }
        if step % p.snapshot_every == 0 || step == p.steps {
            run.snapshots.push(gen.snapshot(step, p.tag));
        }
    }
    run.discriminator = disc.snapshot(p.steps, &format!("{}_disc", p.tag));
    Ok(run)
}

pub const MASK_TAG: &str = "maskgan";

/// Trains M(x) on scar-free masks against D_M on real-scar masks.
pub fn train_maskgan(no_scar: &[SegMask], real_scar: &[SegMask], cfg: &MaskGanConfig) -> Result<GanRun> {
    cfg.validate()?;
    let n = cfg.net.input_size;
    for m in no_scar.iter().chain(real_scar) {
        if m.size() != n {
            return Err(Error::Contract(format!("mask is {0}x{0}, networks expect {n}x{n}", m.size())));
        }
    }
    if no_scar.iter().any(|m| m.has(Class::Scar)) {
        return Err(Error::Contract("generator inputs must be scar-free".into()));
    }
    if real_scar.iter().any(|m| !m.has(Class::Scar)) {
        return Err(Error::Contract("discriminator real masks must contain scar".into()));
    }
    let inputs: Vec<Vec<f32>> = no_scar.iter().map(SegMask::one_hot).collect();
    let reals: Vec<Vec<f32>> = real_scar.iter().map(SegMask::one_hot).collect();
    let problem = GanProblem {
        tag: MASK_TAG,
        gen_spec: cfg.generator_spec(),
        disc_spec: cfg.discriminator_spec(),
        inputs: &inputs,
        reals: &reals,
        in_chw: [NUM_CLASSES, n, n],
        out_chw: [NUM_CLASSES, n, n],
        ratio: cfg.disc_steps_per_gen_step,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        snapshot_every: cfg.snapshot_every,
        replay_capacity: cfg.replay_capacity,
        optimizer: cfg.optimizer,
        log_every: cfg.log_every,
        seed: cfg.seed,
        reg_kind: RegKind::Xent,
    };
    let alpha = cfg.alpha;
    train_gan(&problem, &|s, y, x| mask_gen_loss_batch(s, y, x, alpha))
}

/// Generator instantiated from a mask snapshot, reusable across many slices.
pub struct ShapeSimulator {
    net: Network<f32>,
    tag: String,
    dropout: bool,
}

impl ShapeSimulator {
    /// `dropout` keeps the generator's dropout active at inference.
    pub fn new(snapshot: &WeightSnapshot, dropout: bool, seed: u64) -> Result<Self> {
        let spec = &snapshot.net;
        if spec.in_channels != NUM_CLASSES || spec.out_channels != NUM_CLASSES || spec.output_nonlinearity != OutputNonlinearity::Softmax {
            return Err(Error::Topology(format!("snapshot '{}' is not a mask generator", snapshot.id())));
        }
        Ok(Self { net: Network::from_snapshot(snapshot, seed)?, tag: snapshot.id(), dropout })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn simulate(&mut self, mask_no_scar: &SegMask) -> Result<SegMask> {
        if mask_no_scar.has(Class::Scar) {
            return Err(Error::Contract("input mask already contains scar".into()));
        }
        let n = mask_no_scar.size();
        self.net.spec().check_input([1, NUM_CLASSES, n, n])?;
        let x = Tensor::from_vec([1, NUM_CLASSES, n, n], mask_no_scar.one_hot());
        let mode = if self.dropout { Mode::EVAL_WITH_DROPOUT } else { Mode::EVAL };
        let out = self.net.forward(&x, mode).main;
        let predicted = SegMask::from_planes(n, out.data());
        Ok(clip_scar(mask_no_scar, &predicted))
    }
}

/// Input anatomy with predicted scar kept only where the input is LV myo.
pub fn clip_scar(input: &SegMask, predicted: &SegMask) -> SegMask {
    let labels = input
        .labels()
        .iter()
        .zip(predicted.labels())
        .map(|(&i, &p)| if i == Class::LvMyo && p == Class::Scar { Class::Scar } else { i })
        .collect();
    SegMask::from_labels(input.size(), labels)
}

/// One-off form of [`ShapeSimulator::simulate`].
pub fn simulate_shape(snapshot: &WeightSnapshot, mask_no_scar: &SegMask, dropout: bool, seed: u64) -> Result<SegMask> {
    ShapeSimulator::new(snapshot, dropout, seed)?.simulate(mask_no_scar)
}
