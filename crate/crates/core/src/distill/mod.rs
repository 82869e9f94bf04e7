//! Data-free distillation: alternate student and generator updates, with
//! periodic generator reinitialization and a generator ensemble.

mod coverage;
mod policy;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward, init_params, reinit_params, Head, ModelSpec, NetOutput, Network, OutputActivation, Params, Activation};
use crate::numcore::{Adam, Rng, Tape, Tensor};
use crate::objectives::{loss_adapt, loss_distill, LossWeights};

pub use coverage::{mode_coverage, CoverageCounter};
pub use policy::{distill_policy, student_spec_for, teacher_pool, PolicyDistillation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gas,
    Dafl,
    ReinitOnly,
    StudentKd,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Gas => "gas",
            Mode::Dafl => "dafl",
            Mode::ReinitOnly => "reinit_only",
            Mode::StudentKd => "student_kd",
        }
    }

    pub const ALL: [Mode; 4] = [Mode::Gas, Mode::Dafl, Mode::ReinitOnly, Mode::StudentKd];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GasConfig {
    pub epochs: usize,
    pub student_steps: usize,
    pub generator_steps: usize,
    /// Reinitialize generators when `epoch % reinit_period == 0`. `None`
    /// reinitializes only at epoch 0.
    pub reinit_period: Option<usize>,
    pub num_generators: usize,
    pub noise_dim: usize,
    pub noise_batch: usize,
    pub generator_hidden: Vec<usize>,
    pub generator_output: OutputActivation,
    pub weights: LossWeights,
    pub student_lr: f64,
    pub generator_lr: f64,
    pub mode: Mode,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Stop after this many evaluations without a strict improvement.
    pub patience: usize,
    /// Optional wall-clock patience. Breaks run-to-run determinism.
    pub patience_seconds: Option<f64>,
    pub seed: u64,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig {
            epochs: 200,
            student_steps: 100,
            generator_steps: 20,
            reinit_period: Some(40),
            num_generators: 8,
            noise_dim: 100,
            noise_batch: 512,
            generator_hidden: vec![256],
            generator_output: OutputActivation::Identity,
            weights: LossWeights::default(),
            student_lr: 1e-3,
            generator_lr: 1e-2,
            mode: Mode::Gas,
            eval_every: 1,
            patience: 20,
            patience_seconds: None,
            seed: 0,
        }
    }
}

impl GasConfig {
    /// Policy-distillation defaults: both learning rates 1e-3, 5 student
    /// and 2 generator steps per epoch, reset every 10 epochs, one generator.
    /// Each evaluation plays episodes, so they are sparse and patience short.
    pub fn policy_defaults() -> Self {
        GasConfig {
            epochs: 2000,
            student_steps: 5,
            generator_steps: 2,
            reinit_period: Some(10),
            num_generators: 1,
            student_lr: 1e-3,
            generator_lr: 1e-3,
            eval_every: 20,
            patience: 10,
            ..GasConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.student_steps == 0 || self.noise_dim == 0 || self.noise_batch == 0 {
            return bad("epochs, student_steps, noise_dim and noise_batch must be positive");
        }
        if self.mode != Mode::StudentKd && self.generator_steps == 0 {
            return bad("generator_steps must be positive");
        }
        if self.num_generators == 0 || !self.noise_batch.is_multiple_of(self.num_generators) {
            return bad("noise_batch must be a positive multiple of num_generators");
        }
        if self.reinit_period == Some(0) {
            return bad("reinit_period must be at least 1");
        }
        if self.eval_every == 0 || self.patience == 0 {
            return bad("eval_every and patience must be positive");
        }
        if !(self.student_lr > 0.0 && self.generator_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        self.weights.validate()
    }

    /// The schedule actually run for `mode`. Baselines keep the student step
    /// budget of the configured schedule: one student and one generator step
    /// per epoch, a single generator, no adaptive term.
    pub fn resolved(&self) -> GasConfig {
        let mut c = self.clone();
        match self.mode {
            Mode::Gas => {}
            Mode::Dafl | Mode::ReinitOnly | Mode::StudentKd => {
                c.epochs = self.epochs * self.student_steps;
                c.eval_every = self.eval_every * self.student_steps;
                c.student_steps = 1;
                c.generator_steps = 1;
                c.num_generators = 1;
                c.weights.gamma_adapt = 0.0;
                c.reinit_period = match self.mode {
                    Mode::ReinitOnly => self.reinit_period.map(|r| r * self.student_steps),
                    _ => None,
                };
            }
        }
        c
    }

    pub fn total_student_steps(&self) -> usize {
        self.epochs * self.student_steps
    }
}

/// `[count, dim]` i.i.d. `U(-1, 1)`.
pub fn sample_noise(rng: &mut Rng, count: usize, dim: usize) -> Tensor {
    rng.uniform_tensor([count, dim], -1.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub params: Params,
    pub opt: Adam,
}

#[derive(Clone, Debug)]
pub struct GeneratorEnsemble {
    pub spec: ModelSpec,
    pub members: Vec<Generator>,
}

impl GeneratorEnsemble {
    pub fn new(spec: ModelSpec, count: usize, lr: f64, rng: &Rng) -> Result<Self> {
        spec.validate()?;
        let members = (0..count)
            .map(|g| {
                let params = init_params(&spec, &mut rng.split("generator_init", g as u64));
                let opt = Adam::new(params.len(), lr);
                Generator { params, opt }
            })
            .collect();
        Ok(GeneratorEnsemble { spec, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Reinitializes every member and zeroes its optimizer state.
    pub fn reinit(&mut self, rng: &mut Rng) -> Result<()> {
        for g in &mut self.members {
            let old = std::mem::replace(&mut g.params, Params { layers: vec![], log_std: None });
            let fresh = reinit_params(old, &self.spec, rng)?;
            g.params = fresh.params;
            if fresh.reset_optimizer {
                g.opt.reset();
            }
        }
        Ok(())
    }
}

pub fn generator_spec(cfg: &GasConfig, output_dim: usize) -> ModelSpec {
    ModelSpec::new(
        cfg.noise_dim,
        &cfg.generator_hidden,
        Activation::Relu,
        Head::Dense {
            dim: output_dim,
            activation: cfg.generator_output,
        },
    )
}

fn check_blocks(ensemble: &GeneratorEnsemble, noise: &Tensor) -> Result<usize> {
    let g = ensemble.len();
    if g == 0 || !noise.rows().is_multiple_of(g) {
        return Err(Error::invalid(
            "ensemble_generate",
            format!("{} noise rows do not split over {g} generators", noise.rows()),
        ));
    }
    Ok(noise.rows() / g)
}

/// Splits `noise` into `G` contiguous blocks, runs block `k` through
/// generator `k` and stacks the outputs in the same order.
pub fn ensemble_generate(ensemble: &GeneratorEnsemble, noise: &Tensor) -> Result<Tensor> {
    let per = check_blocks(ensemble, noise)?;
    let mut parts = Vec::with_capacity(ensemble.len());
    for (k, g) in ensemble.members.iter().enumerate() {
        let net = Network {
            spec: ensemble.spec.clone(),
            params: g.params.clone(),
        };
        parts.push(net.mode(&noise.slice_rows(k * per, (k + 1) * per)?)?);
    }
    Tensor::concat_rows(&parts)
}

fn teacher_forward(tape: &mut Tape, net: &Network, x: crate::numcore::Var) -> Result<NetOutput> {
    let bound = net.params.bind(tape, false);
    forward(tape, &net.spec, &bound, x, None)
}

fn diverged(what: &str, e: usize, step: usize, v: f64) -> Error {
    Error::Diverged(format!("{what} loss {v} at epoch {e}, step {step}"))
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub student_updates: usize,
    pub generator_updates: usize,
    pub distill_loss: f64,
    pub generator_loss: Option<f64>,
    pub pointwise_entropy: Option<f64>,
    pub aggregate_entropy: Option<f64>,
    pub reinit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub student_updates: usize,
    pub score: f64,
    pub best: f64,
}

pub struct GasOutcome {
    pub best: Network,
    pub best_score: f64,
    pub final_student: Network,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
    pub stopped_early: bool,
}

/// True when the best score has not strictly improved during the last
/// `patience` evaluations.
pub fn check_stop(history: &[f64], patience: usize) -> bool {
    let Some(first_best) = history
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &s)| match acc {
            Some((_, b)) if s <= b => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
    else {
        return false;
    };
    history.len() - 1 - first_best >= patience
}

/// Training state of one run: the frozen teacher, the student with its
/// optimizer, the generators and the update counters.
pub struct Trainer<'a> {
    pub cfg: GasConfig,
    pub teacher: &'a Network,
    pub student: Network,
    pub student_opt: Adam,
    pub ensemble: GeneratorEnsemble,
    /// Real inputs for the `student_kd` baseline.
    pub pool: Option<&'a Tensor>,
    pub epoch: usize,
    /// Completed student updates.
    pub j: usize,
    /// Completed generator updates.
    pub i: usize,
    rng: Rng,
}

impl<'a> Trainer<'a> {
    /// `cfg` is resolved for its mode here; `pool` is required for
    /// `student_kd` and ignored otherwise.
    pub fn new(teacher: &'a Network, student_spec: &ModelSpec, cfg: &GasConfig, pool: Option<&'a Tensor>) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        if student_spec.input_dim != teacher.spec.input_dim {
            return Err(Error::invalid("run_gas", "student and teacher input dims differ"));
        }
        if student_spec.output_dim() != teacher.spec.output_dim() {
            return Err(Error::invalid("run_gas", "student and teacher output dims differ"));
        }
        if cfg.mode == Mode::StudentKd {
            match pool {
                Some(p) if p.rows() > 0 && p.cols() == teacher.spec.input_dim => {}
                _ => return Err(Error::invalid("run_gas", "student_kd needs a pool of real inputs")),
            }
        }
        let rng = Rng::new(cfg.seed);
        let student = Network::new(student_spec.clone(), &mut rng.split("student_init", 0))?;
        let student_opt = Adam::new(student.params.len(), cfg.student_lr);
        let ensemble = GeneratorEnsemble::new(
            generator_spec(&cfg, teacher.spec.input_dim),
            cfg.num_generators,
            cfg.generator_lr,
            &rng,
        )?;
        Ok(Trainer {
            cfg,
            teacher,
            student,
            student_opt,
            ensemble,
            pool,
            epoch: 0,
            j: 0,
            i: 0,
            rng,
        })
    }

    /// Inputs for student update `j`: generated, or drawn from the pool.
    pub fn student_batch(&self, j: usize) -> Result<Tensor> {
        let mut r = self.rng.split("student_noise", j as u64);
        match (self.cfg.mode, self.pool) {
            (Mode::StudentKd, Some(pool)) => {
                let idx: Vec<usize> = (0..self.cfg.noise_batch).map(|_| r.below(pool.rows())).collect();
                Ok(pool.select_rows(&idx))
            }
            _ => {
                let z = sample_noise(&mut r, self.cfg.noise_batch, self.cfg.noise_dim);
                ensemble_generate(&self.ensemble, &z)
            }
        }
    }

    /// One student update on `x`; returns the distillation loss before it.
    pub fn student_step(&mut self, x: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let t_out = teacher_forward(&mut tape, self.teacher, xv)?;
        let bound = self.student.params.bind(&mut tape, true);
        let s_out = forward(&mut tape, &self.student.spec, &bound, xv, None)?;
        let loss = loss_distill(&mut tape, &t_out, &s_out, &self.cfg.weights)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(diverged("distill", self.epoch, self.j, value));
        }
        let grads = tape.backward(loss)?;
        let g = bound.flat_grad(&grads);
        let mut flat = self.student.params.to_flat();
        self.student_opt.step(&mut flat, &g)?;
        self.student.params.copy_from_flat(&flat)?;
        self.j += 1;
        Ok(value)
    }

    /// `student_steps` updates on fresh batches; returns the mean loss.
    pub fn student_phase(&mut self, mut on_batch: impl FnMut(&Tensor)) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..self.cfg.student_steps {
            let x = self.student_batch(self.j)?;
            on_batch(&x);
            total += self.student_step(&x)?;
        }
        Ok(total / self.cfg.student_steps as f64)
    }

    /// Reinitializes the generators when `epoch % reinit_period == 0`.
    pub fn maybe_reinit(&mut self) -> Result<bool> {
        let due = match self.cfg.reinit_period {
            Some(r) => self.epoch.is_multiple_of(r),
            None => self.epoch == 0,
        };
        if due && self.cfg.mode != Mode::StudentKd {
            let mut r = self.rng.split("reinit", self.epoch as u64);
            self.ensemble.reinit(&mut r)?;
        }
        Ok(due)
    }

    /// One joint update of all generators; returns the loss report values
    /// `(loss, pointwise entropy, aggregate entropy)`.
    pub fn generator_step(&mut self) -> Result<(f64, f64, f64)> {
        let mut r = self.rng.split("generator_noise", self.i as u64);
        let z = sample_noise(&mut r, self.cfg.noise_batch, self.cfg.noise_dim);
        let per = check_blocks(&self.ensemble, &z)?;
        let mut tape = Tape::new();
        let mut bounds = Vec::with_capacity(self.ensemble.len());
        let mut outs = Vec::with_capacity(self.ensemble.len());
        for (k, g) in self.ensemble.members.iter().enumerate() {
            let b = g.params.bind(&mut tape, true);
            let zk = tape.constant(z.slice_rows(k * per, (k + 1) * per)?);
            let NetOutput::Dense { out, .. } = forward(&mut tape, &self.ensemble.spec, &b, zk, None)? else {
                unreachable!("generators have dense heads")
            };
            bounds.push(b);
            outs.push(out);
        }
        let x = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, crate::numcore::Axis::Rows)?
        };
        let t_out = teacher_forward(&mut tape, self.teacher, x)?;
        let s_out = if self.cfg.weights.gamma_adapt > 0.0 {
            teacher_forward(&mut tape, &self.student, x)?
        } else {
            t_out
        };
        let report = loss_adapt(&mut tape, &t_out, &s_out, &self.cfg.weights)?;
        if !report.value.is_finite() {
            return Err(diverged("generator", self.epoch, self.i, report.value));
        }
        let grads = tape.backward(report.total)?;
        for (g, b) in self.ensemble.members.iter_mut().zip(&bounds) {
            let grad = b.flat_grad(&grads);
            let mut flat = g.params.to_flat();
            g.opt.step(&mut flat, &grad)?;
            g.params.copy_from_flat(&flat)?;
        }
        self.i += 1;
        Ok((report.value, report.pointwise_entropy, report.aggregate_entropy))
    }

    pub fn generator_phase(&mut self) -> Result<(f64, f64, f64)> {
        let mut acc = (0.0, 0.0, 0.0);
        let n = self.cfg.generator_steps;
        for _ in 0..n {
            let (l, p, a) = self.generator_step()?;
            acc = (acc.0 + l, acc.1 + p, acc.2 + a);
        }
        let n = n as f64;
        Ok((acc.0 / n, acc.1 / n, acc.2 / n))
    }

    /// One epoch: student phase, reinit check, generator phase.
    pub fn epoch_step(&mut self, on_batch: impl FnMut(&Tensor)) -> Result<EpochRecord> {
        let distill_loss = self.student_phase(on_batch)?;
        let (reinit, gen) = if self.cfg.mode == Mode::StudentKd {
            (false, None)
        } else {
            let reinit = self.maybe_reinit()?;
            (reinit, Some(self.generator_phase()?))
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            student_updates: self.j,
            generator_updates: self.i,
            distill_loss,
            generator_loss: gen.map(|g| g.0),
            pointwise_entropy: gen.map(|g| g.1),
            aggregate_entropy: gen.map(|g| g.2),
            reinit,
        };
        self.epoch += 1;
        Ok(rec)
    }

    /// Full run with evaluation, best-snapshot tracking and early stopping.
    pub fn run(
        mut self,
        mut eval_fn: impl FnMut(&Network) -> Result<f64>,
        mut on_batch: impl FnMut(&Tensor),
    ) -> Result<GasOutcome> {
        let mut epochs = Vec::new();
        let mut evals: Vec<EvalRecord> = Vec::new();
        let mut history = Vec::new();
        let mut best: Option<(f64, Network)> = None;
        // the clock is only read when wall-clock patience is on
        let clock = |_| Instant::now();
        let mut last_improvement = self.cfg.patience_seconds.map(clock);
        let mut stopped_early = false;
        let total = self.cfg.epochs;
        for e in 0..total {
            epochs.push(self.epoch_step(&mut on_batch)?);
            if (e + 1) % self.cfg.eval_every != 0 && e + 1 != total {
                continue;
            }
            let score = eval_fn(&self.student)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, self.student.clone()));
                last_improvement = self.cfg.patience_seconds.map(clock);
            }
            let best_score = best.as_ref().map_or(score, |b| b.0);
            log::debug!("{} epoch {e}: score {score:.4} best {best_score:.4}", self.cfg.mode.name());
            evals.push(EvalRecord {
                epoch: e,
                student_updates: self.j,
                score,
                best: best_score,
            });
            history.push(score);
            let timed_out = self
                .cfg
                .patience_seconds
                .zip(last_improvement)
                .is_some_and(|(s, t)| t.elapsed().as_secs_f64() > s);
            if check_stop(&history, self.cfg.patience) || timed_out {
                stopped_early = e + 1 != total;
                break;
            }
        }
        let (best_score, best) = best.expect("at least one evaluation runs");
        Ok(GasOutcome {
            best,
            best_score,
            final_student: self.student,
            epochs,
            evals,
            stopped_early,
        })
    }
}

/// Distills `teacher` into a fresh `student_spec` network.
pub fn run_gas(
    teacher: &Network,
    student_spec: &ModelSpec,
    cfg: &GasConfig,
    pool: Option<&Tensor>,
    eval_fn: impl FnMut(&Network) -> Result<f64>,
) -> Result<GasOutcome> {
    Trainer::new(teacher, student_spec, cfg, pool)?.run(eval_fn, |_| {})
}

/// Fraction of rows on which two networks pick the same class (or, for
/// other heads, the mean absolute difference of their modes, negated).
pub fn agreement(a: &Network, b: &Network, x: &Tensor) -> Result<f64> {
    let (ma, mb) = (a.mode(x)?, b.mode(x)?);
    match a.spec.head {
        Head::Categorical { .. } => {
            let same = ma.data().iter().zip(mb.data()).filter(|(p, q)| p == q).count();
            Ok(same as f64 / x.rows() as f64)
        }
        _ => Ok(-ma.data().iter().zip(mb.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / ma.len() as f64),
    }
}

/// Fraction of rows where `net`'s argmax equals `labels`.
pub fn accuracy(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let m = net.mode(x)?;
    let hits = m.data().iter().zip(labels).filter(|(p, &l)| **p as usize == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
