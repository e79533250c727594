//! Central finite-difference gradient checks for `f64` networks.
//!
//! Piecewise-linear activations put kinks everywhere; a stencil that straddles
//! one measures an average slope instead of the derivative. Each probe
//! therefore starts at `steps[0]` and moves to the next smaller step while
//! the forward and backward one-sided slopes disagree. Probes that never
//! become smooth are counted as skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nets::Network;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Entries sampled per parameter tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub steps: Vec<f64>,
    /// Denominator floor of the relative error, for parameters whose true gradient is zero.
    pub floor: f64,
    /// Max relative disagreement of the one-sided slopes for a stencil to count as smooth.
    pub smoothness_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { samples_per_tensor: 8, steps: vec![1e-6, 1e-7, 1e-8], floor: 1e-5, smoothness_tol: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares `analytic` (one gradient vector per store entry, empty for
/// non-trainable entries) against finite differences of `loss`.
pub fn check_network(
    net: &mut Network<f64>,
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&mut Network<f64>) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let base = loss(net);
    let n_tensors = net.store().len();
    for pi in 0..n_tensors {
        let (trainable, len, name) = {
            let p = net.store().iter().nth(pi).expect("index in range");
            (p.trainable, p.len(), p.name.clone())
        };
        if !trainable {
            continue;
        }
        let picks: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            (0..cfg.samples_per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in picks {
            let set = |net: &mut Network<f64>, v: f64| {
                net.store_mut().iter_mut().nth(pi).expect("index in range").value[i] = v;
            };
            let orig = net.store().iter().nth(pi).expect("index in range").value[i];
            let mut estimate = None;
            for &h in &cfg.steps {
                set(net, orig + h);
                let lp = loss(net);
                set(net, orig - h);
                let lm = loss(net);
                set(net, orig);
                let fwd = (lp - base) / h;
                let bwd = (base - lm) / h;
                let scale = fwd.abs().max(bwd.abs()).max(cfg.floor);
                if (fwd - bwd).abs() / scale <= cfg.smoothness_tol.max(1e-12 / h) {
                    estimate = Some((lp - lm) / (2.0 * h));
                    break;
                }
            }
            let Some(fd) = estimate else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[pi][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {a:.6e} vs numeric {fd:.6e}");
            }
        }
    }
    report
}

/// Snapshot of accumulated gradients in store order.
pub fn gradients(net: &Network<f64>) -> Vec<Vec<f64>> {
    net.store().iter().map(|p| p.grad.clone()).collect()
}
