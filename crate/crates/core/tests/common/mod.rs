//! Helpers and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scargan::dataset::{Class, PhantomParams, NUM_CLASSES};
use scargan::gradcheck::{check_network, gradients, GradCheckConfig, GradCheckReport};
use scargan::maskgan::{mask_gen_loss_batch, GanNetConfig, MaskGanConfig, MASK_TAG};
use scargan::nets::{Network, NetworkSpec, WeightSnapshot};
use scargan::nn::Mode;
use scargan::refinegan::{refine_gen_loss_batch, RefineGanConfig, REFINER_TAG};
use scargan::Tensor64;

pub const DESK: usize = 32;

pub fn desk_params() -> PhantomParams {
    PhantomParams::scaled(DESK, 1.6)
}

pub fn tiny_net(size: usize) -> GanNetConfig {
    GanNetConfig { initial_filters: 4, depth: 2, disc_filters: 4, input_size: size }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- snapshots

fn set_bias(net: &mut Network<f32>, name: &str, channel: usize, value: f32) {
    let p = net.store_mut().iter_mut().find(|p| p.name == name).expect("bias tensor exists");
    p.value[channel] = value;
}

/// Mask-generator snapshot. `scar_bias` shifts the scar logit of the head:
/// large positive turns all myocardium into scar, large negative yields none.
pub fn mask_snapshot(seed: u64, step: u64, scar_bias: Option<f32>) -> WeightSnapshot {
    let spec = MaskGanConfig { net: tiny_net(DESK), ..Default::default() }.generator_spec();
    let mut net = Network::<f32>::new(&spec, seed).unwrap();
    if let Some(b) = scar_bias {
        set_bias(&mut net, "head.conv.bias", Class::Scar.index(), b);
    }
    net.snapshot(step, MASK_TAG)
}

/// Mask snapshot whose scar logit varies across the myocardium, so shapes
/// cover part of it and differ between seeds.
pub fn partial_mask_snapshot(seed: u64, step: u64) -> WeightSnapshot {
    let spec = MaskGanConfig { net: tiny_net(DESK), ..Default::default() }.generator_spec();
    let mut net = Network::<f32>::new(&spec, seed).unwrap();
    set_bias(&mut net, "head.conv.bias", Class::Scar.index(), 3.0);
    let w = net.store_mut().iter_mut().find(|p| p.name == "head.conv.weight").expect("head weight exists");
    let c_in = w.value.len() / NUM_CLASSES;
    for v in &mut w.value[Class::Scar.index() * c_in..(Class::Scar.index() + 1) * c_in] {
        *v *= 200.0;
    }
    net.snapshot(step, MASK_TAG)
}

/// Untrained refiner; the input residual makes it close to the identity.
pub fn refiner_snapshot(seed: u64) -> WeightSnapshot {
    let spec = RefineGanConfig { net: tiny_net(DESK), ..Default::default() }.generator_spec();
    Network::<f32>::new(&spec, seed).unwrap().snapshot(0, REFINER_TAG)
}

// ---------------------------------------------------------------- loss gradient checks

fn random_one_hot(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor64 {
    let plane = size * size;
    let mut t = Tensor64::zeros([n, NUM_CLASSES, size, size]);
    for i in 0..n {
        let s = t.sample_mut(i);
        for px in 0..plane {
            s[rng.gen_range(0..NUM_CLASSES) * plane + px] = 1.0;
        }
    }
    t
}

/// Checks d L / d theta_G of a full generator loss (generator, then
/// discriminator, then the loss) against finite differences.
fn gan_loss_gradcheck(
    gen: &NetworkSpec,
    disc: &NetworkSpec,
    x: &Tensor64,
    loss: impl Fn(&Tensor64, &Tensor64, &Tensor64) -> (f64, Tensor64, Tensor64),
    seed: u64,
) -> GradCheckReport {
    let mut g = Network::<f64>::new(gen, seed).unwrap();
    let mut d = Network::<f64>::new(disc, seed + 1).unwrap();
    let mode = Mode::TRAIN_NO_DROPOUT;
    g.zero_grad();
    d.zero_grad();
    let out = g.forward(x, mode).main;
    let score = d.forward(&out, mode).main;
    let (_, grad_score, grad_out) = loss(&score, &out, x);
    let mut dout = d.backward(&grad_score, None);
    for (a, b) in dout.data_mut().iter_mut().zip(grad_out.data()) {
        *a += b;
    }
    g.backward(&dout, None);
    let analytic = gradients(&g);
    let value = |g: &mut Network<f64>| {
        let out = g.forward(x, mode).main;
        let score = d.forward(&out, mode).main;
        loss(&score, &out, x).0
    };
    check_network(&mut g, &analytic, value, &GradCheckConfig { seed, ..Default::default() })
}

/// L_M on a 16x16, 4-filter instantiation.
pub fn mask_loss_gradcheck(seed: u64) -> GradCheckReport {
    let cfg = MaskGanConfig { net: tiny_net(16), ..Default::default() };
    let x = random_one_hot(2, 16, &mut rng(seed));
    let alpha = cfg.alpha;
    gan_loss_gradcheck(
        &cfg.generator_spec(),
        &cfg.discriminator_spec(),
        &x,
        |s, p, x| {
            let l = mask_gen_loss_batch(s, p, x, alpha).unwrap();
            (l.total, l.grad_score, l.grad_output)
        },
        seed,
    )
}

/// L_R on a 16x16, 4-filter instantiation.
pub fn refine_loss_gradcheck(seed: u64) -> GradCheckReport {
    let cfg = RefineGanConfig { net: tiny_net(16), ..Default::default() };
    let mut r = rng(seed);
    let x = Tensor64::from_vec([2, 1, 16, 16], (0..512).map(|_| r.gen_range(0.05..0.95)).collect());
    let alpha = cfg.alpha;
    gan_loss_gradcheck(
        &cfg.generator_spec(),
        &cfg.discriminator_spec(),
        &x,
        |s, p, x| {
            let l = refine_gen_loss_batch(s, p, x, alpha).unwrap();
            (l.total, l.grad_score, l.grad_output)
        },
        seed,
    )
}

// ---------------------------------------------------------------- oracles

/// Smallest value with at least `p * n` values at or below it.
pub fn nearest_rank_oracle(values: &[u16], p: f64) -> u16 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let need = p * v.len() as f64;
    *v.iter().enumerate().find(|(i, _)| (*i + 1) as f64 >= need).map(|(_, x)| x).expect("nonempty")
}

pub fn fwhm_oracle(image: &[u16], myo: &[bool], roi: &[bool]) -> Vec<bool> {
    let mut max: Option<f64> = None;
    for i in 0..image.len() {
        if roi[i] {
            max = Some(max.map_or(image[i] as f64, |m: f64| m.max(image[i] as f64)));
        }
    }
    match max {
        None => vec![false; image.len()],
        Some(m) => (0..image.len()).map(|i| myo[i] && image[i] as f64 >= 0.5 * m).collect(),
    }
}

fn set_of(mask: &[bool]) -> HashSet<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let (a, b) = (set_of(a), set_of(b));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// (pct in myo, pct in endo).
pub fn inclusion_oracle(gt: &[bool], endo: &[bool], myo: &[bool]) -> (f64, f64) {
    let g = set_of(gt);
    let n = g.len() as f64;
    (100.0 * g.intersection(&set_of(myo)).count() as f64 / n, 100.0 * g.intersection(&set_of(endo)).count() as f64 / n)
}

/// Exact two-sided binomial p-value from integer binomial coefficients.
pub fn binomial_oracle(k: u64, n: u64) -> f64 {
    assert!(n <= 120);
    let mut row: Vec<u128> = vec![1];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let dev = (2 * k as i64 - n as i64).abs();
    let tail: u128 = (0..=n).filter(|&x| (2 * x as i64 - n as i64).abs() >= dev).map(|x| row[x as usize]).sum();
    (tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

pub fn gaussian_center_oracle(sigma: f64) -> f64 {
    let mut total = 0.0;
    for dy in -2i32..=2 {
        for dx in -2i32..=2 {
            total += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    1.0 / total
}

/// Chebyshev distance from each pixel to the nearest set pixel of `mask`.
pub fn chebyshev_distance(mask: &[bool], size: usize) -> Vec<usize> {
    let set: Vec<(usize, usize)> = (0..size * size).filter(|&i| mask[i]).map(|i| (i % size, i / size)).collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            set.iter().map(|&(a, b)| x.abs_diff(a).max(y.abs_diff(b))).min().unwrap_or(usize::MAX)
        })
        .collect()
}

/// Upper-tail probability of a chi-square variable, by series for the
/// regularized lower incomplete gamma.
pub fn chi_square_sf(stat: f64, dof: usize) -> f64 {
    let a = dof as f64 / 2.0;
    let x = stat / 2.0;
    let ln_gamma_a = ln_gamma(a);
    let mut sum = 1.0 / a;
    let mut term = sum;
    for k in 1..10_000 {
        term *= x / (a + k as f64);
        sum += term;
        if term < sum * 1e-15 {
            break;
        }
    }
    let lower = (a * x.ln() - x - ln_gamma_a).exp() * sum;
    (1.0 - lower).max(0.0)
}

fn ln_gamma(z: f64) -> f64 {
    // Lanczos, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let z = z - 1.0;
    let mut x = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}
