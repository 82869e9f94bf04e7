//! Gradient self-test over small composed models: generator ensembles
//! feeding a frozen teacher and a trainable student, through every loss
//! the trainers use.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::Result;
use crate::models::{forward, init_params, Activation, Bound, Head, ModelSpec, NetOutput, OutputActivation};
use crate::numcore::{gradcheck, Axis, OpKind, Rng, Tape, Tensor, Var};
use crate::objectives::{loss_adapt, loss_distill, loss_g, loss_h, LossWeights};
use crate::rlteacher::ppo_policy_loss;

pub const SUITE_SIZE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteLoss {
    Distill,
    Entropy,
    Generator,
    Adaptive,
    PolicySurrogate,
}

impl SuiteLoss {
    pub const ALL: [SuiteLoss; 5] = [
        SuiteLoss::Distill,
        SuiteLoss::Entropy,
        SuiteLoss::Generator,
        SuiteLoss::Adaptive,
        SuiteLoss::PolicySurrogate,
    ];
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub index: usize,
    pub loss: SuiteLoss,
    pub head: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub ops: Vec<&'static str>,
    pub offending: Option<String>,
}

struct Case {
    loss: SuiteLoss,
    teacher: ModelSpec,
    student: ModelSpec,
    generator: ModelSpec,
    teacher_params: Vec<Tensor>,
    noise: [Tensor; 2],
    actions: Tensor,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    weights: LossWeights,
    /// Leaves: two generators, then the student.
    leaves: Vec<Tensor>,
    gen_len: usize,
}

fn bound_from(vars: &[Var], spec: &ModelSpec) -> Bound {
    let n = spec.hidden.len() + 1;
    let layers = (0..n).map(|k| (vars[2 * k], vars[2 * k + 1])).collect();
    let log_std = matches!(spec.head, Head::DiagGaussian { .. }).then(|| vars[2 * n]);
    Bound { layers, log_std }
}

/// Fresh parameters shifted by noise, so biases and log-stds start away
/// from zero and their gradients are exercised.
fn perturbed(spec: &ModelSpec, init: &Rng, noise: &mut Rng) -> Vec<Tensor> {
    let p = init_params(spec, &mut init.clone());
    p.tensors()
        .map(|t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * noise.normal());
            t
        })
        .collect()
}

fn make_case(index: usize, rng: &mut Rng) -> Case {
    let loss = SuiteLoss::ALL[index % 5];
    let gaussian = (index / 5) % 2 == 1;
    let act = if index.is_multiple_of(3) { Activation::Relu } else { Activation::Tanh };
    let out_act = [OutputActivation::Identity, OutputActivation::Tanh, OutputActivation::Sigmoid][index % 3];
    let (in_dim, out_dim, batch, noise_dim) = (3, 2 + index % 2, 4, 2);
    let head = if gaussian {
        Head::DiagGaussian { dim: out_dim }
    } else {
        Head::Categorical { classes: out_dim }
    };
    let teacher = ModelSpec::new(in_dim, &[5], Activation::Tanh, head);
    let student = ModelSpec::new(in_dim, &[4], act, head);
    let generator = ModelSpec::new(
        noise_dim,
        &[4],
        act,
        Head::Dense {
            dim: in_dim,
            activation: out_act,
        },
    );
    let teacher_params = perturbed(&teacher, &rng.split("teacher", index as u64), rng);
    let g0 = perturbed(&generator, &rng.split("gen", 2 * index as u64), rng);
    let g1 = perturbed(&generator, &rng.split("gen", 2 * index as u64 + 1), rng);
    let s = perturbed(&student, &rng.split("student", index as u64), rng);
    let gen_len = g0.len();
    let leaves: Vec<Tensor> = g0.into_iter().chain(g1).chain(s).collect();
    let noise = [
        rng.uniform_tensor([batch / 2, noise_dim], -1.0, 1.0),
        rng.uniform_tensor([batch / 2, noise_dim], -1.0, 1.0),
    ];
    let actions = if gaussian {
        rng.normal_tensor([batch, out_dim], 1.0)
    } else {
        let a: Vec<f64> = (0..batch).map(|_| rng.below(out_dim) as f64).collect();
        Tensor::new([batch, 1], a).expect("shape")
    };
    let old_log_probs = (0..batch).map(|_| -1.0 + 0.5 * rng.normal()).collect();
    let advantages = (0..batch).map(|_| rng.normal()).collect();
    let weights = LossWeights {
        alpha: 0.5 + rng.uniform(),
        beta: 1.0 + 4.0 * rng.uniform(),
        lambda_act: if loss == SuiteLoss::Entropy { 0.0 } else { 0.1 + rng.uniform() },
        gamma_adapt: 0.2 + rng.uniform(),
        kd_temperature: if index % 4 == 1 { 2.0 } else { 1.0 },
    };
    Case {
        loss,
        teacher,
        student,
        generator,
        teacher_params,
        noise,
        actions,
        old_log_probs,
        advantages,
        weights,
        leaves,
        gen_len,
    }
}

impl Case {
    fn build(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Var> {
        let g = self.gen_len;
        let mut parts = Vec::with_capacity(2);
        for (k, noise) in self.noise.iter().enumerate() {
            let gb = bound_from(&leaves[k * g..(k + 1) * g], &self.generator);
            let z = tape.constant(noise.clone());
            let NetOutput::Dense { out, .. } = forward(tape, &self.generator, &gb, z, None)? else {
                unreachable!("dense generator")
            };
            parts.push(out);
        }
        let x = tape.concat(&parts, Axis::Rows)?;
        let tvars: Vec<Var> = self.teacher_params.iter().map(|t| tape.constant(t.clone())).collect();
        let teacher = forward(tape, &self.teacher, &bound_from(&tvars, &self.teacher), x, None)?;
        let student = forward(tape, &self.student, &bound_from(&leaves[2 * g..], &self.student), x, None)?;
        match self.loss {
            SuiteLoss::Distill => loss_distill(tape, &teacher, &student, &self.weights),
            SuiteLoss::Entropy => Ok(loss_h(tape, &teacher, &self.weights)?.total),
            SuiteLoss::Generator => Ok(loss_g(tape, &teacher, &self.weights)?.total),
            SuiteLoss::Adaptive => Ok(loss_adapt(tape, &teacher, &student, &self.weights)?.total),
            SuiteLoss::PolicySurrogate => {
                let (l, _) = ppo_policy_loss(tape, &student, &self.actions, &self.old_log_probs, &self.advantages, 0.2)?;
                // value-style regression of the mean output onto the teacher's
                let (s, t) = match (student, teacher) {
                    (NetOutput::Categorical { probs: s, .. }, NetOutput::Categorical { probs: t, .. }) => (s, t),
                    (NetOutput::Gaussian { mean: s, .. }, NetOutput::Gaussian { mean: t, .. }) => (s, t),
                    _ => unreachable!("matching heads"),
                };
                let d = tape.sub(s, t)?;
                let d2 = tape.square(d)?;
                let v = tape.mean(d2)?;
                let v = tape.scale(v, 0.5)?;
                tape.add(l, v)
            }
        }
    }
}

/// Runs the `SUITE_SIZE` composed-model gradient checks drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = Rng::new(seed).split("gradcheck_suite", 0);
    let mut out = Vec::with_capacity(SUITE_SIZE);
    for index in 0..SUITE_SIZE {
        let case = make_case(index, &mut rng);
        let report = gradcheck(|tape, leaves| case.build(tape, leaves), &case.leaves)?;
        out.push(SuiteCase {
            index,
            loss: case.loss,
            head: if matches!(case.teacher.head, Head::DiagGaussian { .. }) {
                "diag_gaussian"
            } else {
                "categorical"
            },
            params: case.leaves.iter().map(Tensor::len).sum(),
            max_rel_error: report.max_rel_error,
            passed: report.passed,
            ops: report.ops.iter().map(|k| k.name()).collect(),
            offending: report.offending,
        });
    }
    Ok(out)
}

/// Differentiable primitives that no case in `cases` exercised.
pub fn uncovered_primitives(cases: &[SuiteCase]) -> Vec<&'static str> {
    let seen: BTreeSet<&str> = cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
    OpKind::PRIMITIVES
        .iter()
        .map(|k| k.name())
        .filter(|n| !seen.contains(n))
        .collect()
}
