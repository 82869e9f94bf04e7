use crate::distill::{run_gas, GasConfig, GasOutcome, Mode};
use crate::error::{Error, Result};
use crate::models::{Checkpoint, ModelSpec, Network};
use crate::numcore::{Rng, Tensor};
use crate::rlteacher::{evaluate_policy, mode_actions};
use crate::tasks::{env_reset, env_step, EnvKind, RunningMoments};

/// Student architecture: the teacher's with every hidden width halved.
pub fn student_spec_for(teacher: &ModelSpec) -> ModelSpec {
    let hidden: Vec<usize> = teacher.hidden.iter().map(|h| (h / 2).max(1)).collect();
    ModelSpec {
        hidden,
        dropout: 0.0,
        ..teacher.clone()
    }
}

/// Normalized observations visited by the teacher acting greedily, for the
/// `student_kd` baseline.
pub fn teacher_pool(teacher: &Network, moments: &RunningMoments, kind: EnvKind, count: usize, rng: &Rng) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(count);
    let mut ep = 0;
    while rows.len() < count {
        let mut st = env_reset(kind, rng.split("pool_episode", ep));
        ep += 1;
        while !st.done && rows.len() < count {
            let obs = moments.normalize_row(&st.obs);
            let a = mode_actions(teacher, kind, &Tensor::row(&obs))?[0];
            rows.push(obs);
            env_step(&mut st, a)?;
        }
    }
    Tensor::from_rows(&rows)
}

pub struct PolicyDistillation {
    pub outcome: GasOutcome,
    /// Mean and std of the teacher over the final evaluation episodes.
    pub teacher_score: (f64, f64),
    pub student_score: (f64, f64),
}

/// Distills a policy checkpoint without environment interaction during
/// training. Generators emit normalized observations directly; the
/// environment is used only to score the student, whose raw observations
/// are normalized with the teacher's frozen moments.
pub fn distill_policy(ckpt: &Checkpoint, kind: EnvKind, cfg: &GasConfig, eval_episodes: usize) -> Result<PolicyDistillation> {
    let moments = ckpt.moments.as_ref().ok_or(Error::MissingMoments)?;
    if moments.dim() != kind.obs_dim() || ckpt.spec.input_dim != kind.obs_dim() {
        return Err(Error::invalid("distill_policy", format!("checkpoint does not fit {}", kind.name())));
    }
    let teacher = ckpt.network();
    let student_spec = student_spec_for(&teacher.spec);
    let root = Rng::new(cfg.seed);
    let pool = match cfg.mode {
        Mode::StudentKd => Some(teacher_pool(&teacher, moments, kind, 4096, &root.split("pool", 0))?),
        _ => None,
    };
    let eval_rng = root.split("distill_eval", 0);
    let outcome = run_gas(&teacher, &student_spec, cfg, pool.as_ref(), |s| {
        Ok(evaluate_policy(s, moments, kind, eval_episodes, &eval_rng)?.0)
    })?;
    let final_rng = root.split("final_eval", 0);
    let teacher_score = evaluate_policy(&teacher, moments, kind, eval_episodes, &final_rng)?;
    let student_score = evaluate_policy(&outcome.best, moments, kind, eval_episodes, &final_rng)?;
    Ok(PolicyDistillation {
        outcome,
        teacher_score,
        student_score,
    })
}
