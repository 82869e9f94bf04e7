//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use gas_core::models::NetOutput;
use gas_core::numcore::{Rng, Tape, Tensor};
use gas_core::objectives::aggregate_entropy;

/// Monte-Carlo entropy of the equal-weight mixture of diagonal Gaussians
/// with rows `mean[i]`, `std[i]`. Returns (estimate, standard error).
pub fn mc_mixture_entropy(mean: &[Vec<f64>], std: &[Vec<f64>], samples: usize, rng: &mut Rng) -> (f64, f64) {
    let b = mean.len();
    let m = mean[0].len();
    let log_norm: Vec<f64> = std
        .iter()
        .map(|s| s.iter().map(|v| -(v.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum())
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut x = vec![0.0; m];
    let mut logs = vec![0.0; b];
    for _ in 0..samples {
        let k = rng.below(b);
        for d in 0..m {
            x[d] = mean[k][d] + std[k][d] * rng.normal();
        }
        for j in 0..b {
            let q: f64 = (0..m).map(|d| ((x[d] - mean[j][d]) / std[j][d]).powi(2)).sum();
            logs[j] = log_norm[j] - 0.5 * q;
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        let nll = -(lse - (b as f64).ln());
        sum += nll;
        sum_sq += nll * nll;
    }
    let n = samples as f64;
    let mean_est = sum / n;
    let var = (sum_sq / n - mean_est * mean_est).max(0.0) * n / (n - 1.0);
    (mean_est, (var / n).sqrt())
}

/// The library's closed-form lower bound for the same mixture.
pub fn h_lower(mean: &[Vec<f64>], std: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let out = NetOutput::from_gaussian(
        &mut tape,
        Tensor::from_rows(mean).unwrap(),
        Tensor::from_rows(std).unwrap(),
    );
    let h = aggregate_entropy(&mut tape, &out).unwrap();
    tape.item(h)
}

/// Random mixture with `b` components in `m` dimensions.
pub fn random_mixture(rng: &mut Rng, b: usize, m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mean = (0..b).map(|_| (0..m).map(|_| 2.0 * rng.normal()).collect()).collect();
    let std = (0..b)
        .map(|_| (0..m).map(|_| (rng.uniform() * 2.0 - 1.5).exp()).collect())
        .collect();
    (mean, std)
}

/// GAE by summing discounted TD errors directly, O(T^2).
pub fn gae_bruteforce(r: &[f64], v: &[f64], done: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if done[t] { 0.0 } else { g * value_after(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for k in t..n {
                a += w * delta[k];
                if done[k] {
                    break;
                }
                w *= g * l;
            }
            a
        })
        .collect()
}
