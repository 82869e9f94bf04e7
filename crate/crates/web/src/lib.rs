//! Browser demo: distill the quadrant toy teacher with GAS or DAFL and
//! watch where the generated inputs land, and compare the closed-form
//! mixture entropy bound against a Monte Carlo estimate.
//!
//! Each exported function returns a JSON string. The plain-Rust halves
//! are public so they can be tested natively.

use gas_core::cli::experiments::{quadrant_task, toy_gas, ToyConfig, ToyTask};
use gas_core::distill::{agreement, CoverageCounter, Mode, Trainer};
use gas_core::models::{Activation, ModelSpec};
use gas_core::numcore::{Rng, Tape, Tensor};
use gas_core::objectives::gaussian_mixture_entropy_lower;
use gas_core::tasks::quadrant_of;
use gas_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Points kept for the scatter plot, taken from the last epochs.
const SCATTER_POINTS: usize = 1500;
/// Teacher decision map resolution over `[-EXTENT, EXTENT]^2`.
const GRID: usize = 48;
const EXTENT: f64 = 3.0;

#[derive(Debug, Serialize)]
pub struct Scatter {
    pub method: &'static str,
    pub points: Vec<[f64; 2]>,
    /// Quadrant (1..=4 counter-clockwise from the positive one) of each point.
    pub quadrants: Vec<usize>,
    pub coverage: Vec<f64>,
    pub agreement: f64,
    pub teacher_accuracy: f64,
    /// Teacher class per grid cell, row-major from the top-left corner.
    pub grid: Vec<usize>,
    pub grid_size: usize,
    pub extent: f64,
}

fn small_toy() -> ToyConfig {
    let mut cfg = ToyConfig::quadrant();
    cfg.n_per_mode = 200;
    cfg.teacher.steps = 300;
    cfg
}

fn teacher_grid(task: &ToyTask) -> Result<Vec<usize>> {
    let step = 2.0 * EXTENT / (GRID - 1) as f64;
    let mut rows = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            rows.push(vec![-EXTENT + c as f64 * step, EXTENT - r as f64 * step]);
        }
    }
    let x = Tensor::from_rows(&rows)?;
    Ok(task.teacher.mode(&x)?.data().iter().map(|&k| k as usize).collect())
}

/// Trains a teacher on the quadrant toy, then distills it for `epochs`
/// epochs with `mode`, recording the generated inputs.
pub fn scatter(mode: Mode, seed: u64, epochs: usize) -> Result<Scatter> {
    let toy = small_toy();
    let task = quadrant_task(&toy, seed)?;
    let mut gas = toy_gas();
    gas.mode = mode;
    gas.seed = seed;
    gas.epochs = epochs.max(1);
    let student = ModelSpec::new(2, &toy.student_hidden, Activation::Relu, task.teacher.spec.head);
    let mut trainer = Trainer::new(&task.teacher, &student, &gas, Some(&task.train.features))?;
    let mut counter = CoverageCounter::new(task.centers.clone());
    let mut recent: Vec<[f64; 2]> = Vec::new();
    for _ in 0..gas.epochs {
        trainer.epoch_step(|x| {
            counter.add(x);
            recent.extend((0..x.rows()).map(|r| [x.row_slice(r)[0], x.row_slice(r)[1]]));
            if recent.len() > 4 * SCATTER_POINTS {
                recent.drain(..recent.len() - SCATTER_POINTS);
            }
        })?;
    }
    let points: Vec<[f64; 2]> = recent[recent.len().saturating_sub(SCATTER_POINTS)..].to_vec();
    Ok(Scatter {
        method: mode.name(),
        quadrants: points.iter().map(|p| quadrant_of(p[0], p[1]) + 1).collect(),
        points,
        coverage: counter.shares(),
        agreement: agreement(&task.teacher, &trainer.student, &task.test.features)?,
        teacher_accuracy: task.teacher_accuracy()?,
        grid: teacher_grid(&task)?,
        grid_size: GRID,
        extent: EXTENT,
    })
}

#[derive(Debug, Serialize)]
pub struct EntropyBound {
    pub components: usize,
    pub dim: usize,
    pub spread: f64,
    pub h_lower: f64,
    pub monte_carlo: f64,
    pub standard_error: f64,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

fn log_normal_pdf(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

fn log_mixture_pdf(x: &[f64], means: &[Vec<f64>], stds: &[Vec<f64>]) -> f64 {
    let logs: Vec<f64> = means.iter().zip(stds).map(|(m, s)| log_normal_pdf(x, m, s)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - (means.len() as f64).ln()
}

/// Draws an equal-weight diagonal Gaussian mixture whose means are spread
/// by `spread` and compares the closed-form lower bound on its entropy
/// with a `samples`-point Monte Carlo estimate.
pub fn entropy_bound(seed: u64, components: usize, dim: usize, spread: f64, samples: usize) -> Result<EntropyBound> {
    let (components, dim, samples) = (components.max(1), dim.max(1), samples.max(2));
    let mut rng = Rng::new(seed).split("mixture", 0);
    let means: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..dim).map(|_| spread * rng.normal()).collect())
        .collect();
    let stds: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..dim).map(|_| (rng.uniform() * 2.0 - 1.5).exp()).collect())
        .collect();
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(&means)?);
    let ls = tape.constant(Tensor::from_rows(&stds)?.map(f64::ln));
    let h = gaussian_mixture_entropy_lower(&mut tape, m, ls)?;
    let h_lower = tape.item(h);

    let mut rng = rng.split("samples", 0);
    let mut x = vec![0.0; dim];
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let k = rng.below(components);
            for (d, xd) in x.iter_mut().enumerate() {
                *xd = means[k][d] + stds[k][d] * rng.normal();
            }
            -log_mixture_pdf(&x, &means, &stds)
        })
        .collect();
    let n = samples as f64;
    let mc = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(EntropyBound {
        components,
        dim,
        spread,
        h_lower,
        monte_carlo: mc,
        standard_error: (var / n).sqrt(),
        means,
        stds,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen]
pub fn quadrant_scatter(method: &str, seed: u32, epochs: u32) -> std::result::Result<String, JsValue> {
    let mode = match method {
        "gas" => Mode::Gas,
        "dafl" => Mode::Dafl,
        "reinit_only" => Mode::ReinitOnly,
        other => return Err(JsValue::from_str(&format!("unknown method {other}"))),
    };
    to_js(scatter(mode, seed as u64, epochs as usize))
}

#[wasm_bindgen]
pub fn mixture_entropy(seed: u32, components: u32, dim: u32, spread: f64, samples: u32) -> std::result::Result<String, JsValue> {
    to_js(entropy_bound(seed as u64, components as usize, dim as usize, spread, samples as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_sits_below_monte_carlo() {
        for (seed, spread) in [(0, 0.0), (1, 0.5), (2, 2.0), (3, 6.0)] {
            let r = entropy_bound(seed, 4, 2, spread, 20_000).unwrap();
            assert!(r.h_lower <= r.monte_carlo + 3.0 * r.standard_error, "{r:?}");
        }
    }

    #[test]
    fn single_component_bound_is_exact() {
        let r = entropy_bound(5, 1, 3, 1.0, 200).unwrap();
        let exact: f64 = r.stds[0].iter().map(|s| 0.5 * (4.0 * std::f64::consts::PI * s * s).ln()).sum();
        assert!((r.h_lower - exact).abs() < 1e-9);
    }

    #[test]
    fn scatter_shapes() {
        let s = scatter(Mode::Gas, 0, 3).unwrap();
        assert_eq!(s.points.len(), SCATTER_POINTS);
        assert_eq!(s.quadrants.len(), s.points.len());
        assert_eq!(s.grid.len(), GRID * GRID);
        assert_eq!(s.coverage.len(), 4);
        assert!((s.coverage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // corners: top-left class 1, top-right class 0, bottom-right class 2
        assert_eq!(s.grid[0], 1);
        assert_eq!(s.grid[GRID - 1], 0);
        assert_eq!(s.grid[GRID * GRID - 1], 2);
    }
}
