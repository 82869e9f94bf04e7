//! Distillation distance, entropy objectives and the generator losses.
//!
//! Every function records its computation on the caller's tape, so the same
//! code yields values and gradients. Which parameters receive gradient is
//! decided by how the caller bound them (leaves vs constants).

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::NetOutput;
use crate::numcore::{Axis, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the expected per-sample entropy.
    pub alpha: f64,
    /// Weight on the entropy of the batch-mean output.
    pub beta: f64,
    /// Weight on the teacher hidden-activation magnitude.
    pub lambda_act: f64,
    /// Weight on the student-teacher disagreement in the adaptive loss.
    pub gamma_adapt: f64,
    pub kd_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 5.0,
            lambda_act: 0.0,
            gamma_adapt: 0.4,
            kd_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.lambda_act, self.gamma_adapt];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.kd_temperature > 0.0) || !self.kd_temperature.is_finite() {
            return Err(Error::Config("kd_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A loss node plus the scalar value of each term that went into it.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub total: Var,
    pub value: f64,
    /// Batch mean of the per-row entropy.
    pub pointwise_entropy: f64,
    pub aggregate_entropy: f64,
    /// Mean absolute teacher hidden activation.
    pub activation: f64,
    pub distill: f64,
}

fn kind_mismatch(a: &NetOutput, b: &NetOutput) -> Error {
    Error::invalid(
        "kl_divergence",
        format!("head kinds differ: {} vs {}", a.kind_name(), b.kind_name()),
    )
}

/// `KL(teacher || student)` per row, `[batch, 1]`.
pub fn kl_rows(tape: &mut Tape, teacher: &NetOutput, student: &NetOutput, temperature: f64) -> Result<Var> {
    match (*teacher, *student) {
        (
            NetOutput::Categorical {
                log_probs: lt,
                probs: pt,
                ..
            },
            NetOutput::Categorical { log_probs: ls, .. },
        ) => {
            let (ts, ss) = (tape.value(lt).shape().to_vec(), tape.value(ls).shape().to_vec());
            if ts != ss {
                return Err(Error::Shape {
                    op: "kl_divergence",
                    lhs: ts,
                    rhs: ss,
                });
            }
            let (lt, pt, ls) = if temperature == 1.0 {
                (lt, pt, ls)
            } else {
                let a = tape.scale(lt, 1.0 / temperature)?;
                let lt = tape.log_softmax(a)?;
                let pt = tape.exp(lt)?;
                let b = tape.scale(ls, 1.0 / temperature)?;
                (lt, pt, tape.log_softmax(b)?)
            };
            let d = tape.sub(lt, ls)?;
            let w = tape.mul(pt, d)?;
            tape.sum_axis(w, Axis::Cols)
        }
        (
            NetOutput::Gaussian {
                mean: mt,
                log_std: lt,
                ..
            },
            NetOutput::Gaussian {
                mean: ms,
                log_std: ls,
                ..
            },
        ) => {
            let (ts, ss) = (tape.value(mt).shape().to_vec(), tape.value(ms).shape().to_vec());
            if ts != ss {
                return Err(Error::Shape {
                    op: "kl_divergence",
                    lhs: ts,
                    rhs: ss,
                });
            }
            // log(ss/st) + (st^2 + (mt - ms)^2) / (2 ss^2) - 1/2, summed over dims
            let log_ratio = tape.sub(ls, lt)?;
            let two_lt = tape.scale(lt, 2.0)?;
            let var_t = tape.exp(two_lt)?;
            let dm = tape.sub(mt, ms)?;
            let dm2 = tape.square(dm)?;
            let num = tape.add(var_t, dm2)?;
            let m2ls = tape.scale(ls, -2.0)?;
            let inv_var_s = tape.exp(m2ls)?;
            let q = tape.mul(num, inv_var_s)?;
            let q = tape.scale(q, 0.5)?;
            let per_dim = tape.add(log_ratio, q)?;
            let per_dim = tape.add_scalar(per_dim, -0.5)?;
            tape.sum_axis(per_dim, Axis::Cols)
        }
        (a, b) => Err(kind_mismatch(&a, &b)),
    }
}

/// Batch mean of `KL(teacher || student)`.
pub fn kl_divergence(tape: &mut Tape, teacher: &NetOutput, student: &NetOutput, temperature: f64) -> Result<Var> {
    let rows = kl_rows(tape, teacher, student, temperature)?;
    tape.mean(rows)
}

/// Distillation loss: mean KL of the student from the teacher on one batch.
pub fn loss_distill(tape: &mut Tape, teacher: &NetOutput, student: &NetOutput, weights: &LossWeights) -> Result<Var> {
    kl_divergence(tape, teacher, student, weights.kd_temperature)
}

/// Entropy of each row's output distribution, `[batch, 1]`.
pub fn pointwise_entropy(tape: &mut Tape, out: &NetOutput) -> Result<Var> {
    match *out {
        NetOutput::Categorical { log_probs, probs, .. } => {
            let plogp = tape.mul(probs, log_probs)?;
            let s = tape.sum_axis(plogp, Axis::Cols)?;
            tape.neg(s)
        }
        NetOutput::Gaussian { log_std, .. } => {
            let m = tape.value(log_std).cols() as f64;
            let s = tape.sum_axis(log_std, Axis::Cols)?;
            tape.add_scalar(s, 0.5 * m * (2.0 * PI * E).ln())
        }
        NetOutput::Dense { .. } => Err(Error::invalid("pointwise_entropy", "dense output has no distribution")),
    }
}

/// Entropy of the batch-average output. Categorical: exact entropy of the
/// mean probability vector. Gaussian: closed-form lower bound on the entropy
/// of the equally weighted mixture of the row Gaussians.
pub fn aggregate_entropy(tape: &mut Tape, out: &NetOutput) -> Result<Var> {
    match *out {
        NetOutput::Categorical { log_probs, .. } => {
            let b = tape.value(log_probs).rows() as f64;
            // log of the mean probability, per class, in log space
            let lt = tape.transpose(log_probs)?;
            let lse = tape.logsumexp_rows(lt)?;
            let log_pbar = tape.add_scalar(lse, -b.ln())?;
            let pbar = tape.exp(log_pbar)?;
            let plogp = tape.mul(pbar, log_pbar)?;
            let s = tape.sum(plogp)?;
            tape.neg(s)
        }
        NetOutput::Gaussian { mean, log_std, .. } => gaussian_mixture_entropy_lower(tape, mean, log_std),
        NetOutput::Dense { .. } => Err(Error::invalid("aggregate_entropy", "dense output has no distribution")),
    }
}

/// `H_lower = -sum_i w_i log sum_j w_j N(mu_i; mu_j, C_i + C_j)` with
/// `w = 1/b` and diagonal covariances `C_i = diag(exp(2 log_std_i))`.
pub fn gaussian_mixture_entropy_lower(tape: &mut Tape, mean: Var, log_std: Var) -> Result<Var> {
    let shape = tape.value(mean).shape().to_vec();
    if shape != tape.value(log_std).shape() {
        return Err(Error::Shape {
            op: "aggregate_entropy",
            lhs: shape,
            rhs: tape.value(log_std).shape().to_vec(),
        });
    }
    let (b, m) = (shape[0], shape[1]);
    let ones = tape.constant(Tensor::ones([1, b]));
    let two_ls = tape.scale(log_std, 2.0)?;
    let var = tape.exp(two_ls)?;
    let mut quad: Option<Var> = None;
    for d in 0..m {
        let mu = tape.slice(mean, Axis::Cols, d, d + 1)?;
        let v = tape.slice(var, Axis::Cols, d, d + 1)?;
        let mi = tape.matmul(mu, ones)?;
        let mj = tape.transpose(mi)?;
        let diff = tape.sub(mi, mj)?;
        let diff2 = tape.square(diff)?;
        let vi = tape.matmul(v, ones)?;
        let vj = tape.transpose(vi)?;
        let s = tape.add(vi, vj)?;
        let log_s = tape.log(s)?;
        let neg_log_s = tape.neg(log_s)?;
        let inv_s = tape.exp(neg_log_s)?;
        let maha = tape.mul(diff2, inv_s)?;
        let term = tape.add(log_s, maha)?;
        quad = Some(match quad {
            None => term,
            Some(q) => tape.add(q, term)?,
        });
    }
    let quad = quad.ok_or_else(|| Error::invalid("aggregate_entropy", "zero-dimensional output"))?;
    // log z_ij = -1/2 (m log 2pi + sum_d [log S_ijd + diff^2 / S_ijd])
    let log_z = tape.add_scalar(quad, m as f64 * (2.0 * PI).ln())?;
    let log_z = tape.scale(log_z, -0.5)?;
    let lse = tape.logsumexp_rows(log_z)?;
    let mean_lse = tape.mean(lse)?;
    let neg = tape.neg(mean_lse)?;
    tape.add_scalar(neg, (b as f64).ln())
}

/// `alpha * E[H(f(x))] - beta * H(E[f(x)])`.
pub fn loss_h(tape: &mut Tape, out: &NetOutput, weights: &LossWeights) -> Result<LossReport> {
    let pw_rows = pointwise_entropy(tape, out)?;
    let pw = tape.mean(pw_rows)?;
    let agg = aggregate_entropy(tape, out)?;
    let a = tape.scale(pw, weights.alpha)?;
    let b = tape.scale(agg, weights.beta)?;
    let total = tape.sub(a, b)?;
    Ok(LossReport {
        total,
        value: tape.item(total),
        pointwise_entropy: tape.item(pw),
        aggregate_entropy: tape.item(agg),
        activation: 0.0,
        distill: 0.0,
    })
}

/// Non-adaptive generator loss: `loss_h - lambda_act * mean(|h|)` where `h`
/// is the teacher's last hidden layer.
pub fn loss_g(tape: &mut Tape, out: &NetOutput, weights: &LossWeights) -> Result<LossReport> {
    let mut report = loss_h(tape, out, weights)?;
    if weights.lambda_act == 0.0 {
        return Ok(report);
    }
    let h = out
        .hidden()
        .ok_or_else(|| Error::invalid("loss_g", "activation term needs the teacher's hidden layer"))?;
    let abs = tape.abs(h)?;
    let act = tape.mean(abs)?;
    let scaled = tape.scale(act, weights.lambda_act)?;
    report.total = tape.sub(report.total, scaled)?;
    report.value = tape.item(report.total);
    report.activation = tape.item(act);
    Ok(report)
}

/// Adaptive generator loss: `loss_g - gamma_adapt * loss_distill`.
pub fn loss_adapt(
    tape: &mut Tape,
    teacher: &NetOutput,
    student: &NetOutput,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut report = loss_g(tape, teacher, weights)?;
    if weights.gamma_adapt == 0.0 {
        return Ok(report);
    }
    let d = loss_distill(tape, teacher, student, weights)?;
    let scaled = tape.scale(d, weights.gamma_adapt)?;
    report.total = tape.sub(report.total, scaled)?;
    report.value = tape.item(report.total);
    report.distill = tape.item(d);
    Ok(report)
}

impl LossReport {
    /// Recombines the components with `weights`; matches `value` up to
    /// rounding.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        weights.alpha * self.pointwise_entropy - weights.beta * self.aggregate_entropy
            - weights.lambda_act * self.activation
            - weights.gamma_adapt * self.distill
    }
}

/// Largest class share in the batch-mean output. A teacher that never
/// emits some class keeps this far from `1/m` however the generator moves.
pub fn max_class_share(tape: &Tape, out: &NetOutput) -> Option<f64> {
    match *out {
        NetOutput::Categorical { probs, .. } => {
            let p = tape.value(probs);
            let (r, c) = (p.rows(), p.cols());
            (0..c)
                .map(|j| (0..r).map(|i| p.get2(i, j)).sum::<f64>() / r as f64)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        }
        _ => None,
    }
}
