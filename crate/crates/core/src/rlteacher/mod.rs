//! Teacher policies: synchronous PPO with GAE, behavior cloning from the
//! scripted experts, and deterministic evaluation.

mod gae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward, Activation, Checkpoint, Head, ModelSpec, NetOutput, Network, OutputActivation, Prediction};
use crate::numcore::{Adam, Axis, Rng, Tape, Tensor, Var};
use crate::tasks::{env_reset, env_step, scripted_expert, Action, EnvKind, EnvState, RunningMoments, Transition};

pub use gae::{compute_gae, normalize_advantages};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMethod {
    Ppo,
    BehaviorClone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub method: TeacherMethod,
    pub clip_ratio: f64,
    pub grad_steps_per_update: usize,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub discount: f64,
    pub lr: f64,
    pub concurrent_envs: usize,
    pub rollout_len: usize,
    /// Rows per gradient step; `None` uses the whole rollout.
    pub minibatch_size: Option<usize>,
    pub value_coef: f64,
    pub max_transitions: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Evaluate every this many updates.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once this many consecutive evaluations reach this score.
    pub target_score: Option<f64>,
    pub target_streak: usize,
    /// Expert transitions collected for behavior cloning.
    pub bc_samples: usize,
    pub bc_epochs: usize,
    pub bc_batch: usize,
    /// Probability of a random action (discrete) or std of action noise
    /// (continuous) while collecting expert data.
    pub bc_noise: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            method: TeacherMethod::Ppo,
            clip_ratio: 0.2,
            grad_steps_per_update: 10,
            gae_lambda: 0.95,
            entropy_coef: 0.0,
            discount: 0.99,
            lr: 1e-3,
            concurrent_envs: 16,
            rollout_len: 32,
            minibatch_size: None,
            value_coef: 0.5,
            max_transitions: 10_000_000,
            hidden: vec![512],
            activation: Activation::Tanh,
            eval_every: 5,
            eval_episodes: 10,
            target_score: None,
            target_streak: 3,
            bc_samples: 20_000,
            bc_epochs: 30,
            bc_batch: 256,
            bc_noise: 0.2,
        }
    }
}

impl PpoConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CartPole => PpoConfig {
                discount: 0.99,
                target_score: Some(200.0),
                max_transitions: 200_000,
                ..PpoConfig::default()
            },
            EnvKind::MountainCar => PpoConfig {
                method: TeacherMethod::BehaviorClone,
                discount: 0.995,
                target_score: None,
                ..PpoConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.discount) {
            return bad("gae_lambda and discount must be in [0, 1]");
        }
        if self.concurrent_envs == 0 || self.rollout_len == 0 || self.grad_steps_per_update == 0 {
            return bad("concurrent_envs, rollout_len and grad_steps_per_update must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.target_streak == 0 || !(self.lr > 0.0) {
            return bad("eval_every, eval_episodes, target_streak and lr must be positive");
        }
        if self.minibatch_size == Some(0) || self.bc_batch == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }

    pub fn policy_spec(&self, kind: EnvKind) -> ModelSpec {
        let head = if kind.is_discrete() {
            Head::Categorical { classes: kind.action_dim() }
        } else {
            Head::DiagGaussian { dim: kind.action_dim() }
        };
        ModelSpec::new(kind.obs_dim(), &self.hidden, self.activation, head)
    }

    pub fn value_spec(&self, kind: EnvKind) -> ModelSpec {
        ModelSpec::new(
            kind.obs_dim(),
            &self.hidden,
            self.activation,
            Head::Dense {
                dim: 1,
                activation: OutputActivation::Identity,
            },
        )
    }
}

/// Log-density of `actions` (`[b, 1]` class indices or `[b, m]` values)
/// under a policy output; `[b, 1]`.
pub fn log_prob(tape: &mut Tape, out: &NetOutput, actions: &Tensor) -> Result<Var> {
    match *out {
        NetOutput::Categorical { log_probs, .. } => {
            let shape = tape.value(log_probs).shape().to_vec();
            let mut onehot = Tensor::zeros(shape.clone());
            for r in 0..shape[0] {
                let a = actions.data()[r] as usize;
                if a >= shape[1] {
                    return Err(Error::invalid("log_prob", format!("action {a} out of range")));
                }
                onehot.data_mut()[r * shape[1] + a] = 1.0;
            }
            let oh = tape.constant(onehot);
            let picked = tape.mul(log_probs, oh)?;
            tape.sum_axis(picked, Axis::Cols)
        }
        NetOutput::Gaussian { mean, log_std, .. } => {
            let m = tape.value(mean).cols() as f64;
            let a = tape.constant(actions.clone());
            let diff = tape.sub(a, mean)?;
            let neg_ls = tape.neg(log_std)?;
            let inv_std = tape.exp(neg_ls)?;
            let z = tape.mul(diff, inv_std)?;
            let z2 = tape.square(z)?;
            let q = tape.scale(z2, -0.5)?;
            let per_dim = tape.sub(q, log_std)?;
            let s = tape.sum_axis(per_dim, Axis::Cols)?;
            tape.add_scalar(s, -0.5 * m * (2.0 * std::f64::consts::PI).ln())
        }
        NetOutput::Dense { .. } => Err(Error::invalid("log_prob", "dense head is not a policy")),
    }
}

fn to_action(kind: EnvKind, a: &[f64]) -> Action {
    if kind.is_discrete() {
        Action::Discrete(a[0] as usize)
    } else {
        Action::Continuous(a[0])
    }
}

/// Most likely action per row, as environment actions.
pub fn mode_actions(policy: &Network, kind: EnvKind, obs: &Tensor) -> Result<Vec<Action>> {
    let m = policy.mode(obs)?;
    Ok((0..m.rows()).map(|r| to_action(kind, m.row_slice(r))).collect())
}

fn sample_actions(pred: &Prediction, rng: &mut Rng) -> Tensor {
    match pred {
        Prediction::Probs(p) => {
            let data = (0..p.rows())
                .map(|r| {
                    let u = rng.uniform();
                    let row = p.row_slice(r);
                    let mut acc = 0.0;
                    for (k, &pk) in row.iter().enumerate() {
                        acc += pk;
                        if u < acc {
                            return k as f64;
                        }
                    }
                    (row.len() - 1) as f64
                })
                .collect();
            Tensor::new([p.rows(), 1], data).expect("shape")
        }
        Prediction::Gaussian { mean, std } => {
            let mut out = mean.clone();
            for (o, s) in out.data_mut().iter_mut().zip(std.data()) {
                *o += s * rng.normal();
            }
            out
        }
        Prediction::Dense(t) => t.clone(),
    }
}

/// Runs `episodes` deterministic episodes with mode actions, stepping all
/// episodes in lockstep. Episode `k` uses seed stream `("eval_episode", k)`
/// of `rng`. Returns the mean and population std of the returns.
pub fn evaluate_policy(
    policy: &Network,
    moments: &RunningMoments,
    kind: EnvKind,
    episodes: usize,
    rng: &Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::invalid("evaluate_policy", "episodes must be at least 1"));
    }
    let mut envs: Vec<EnvState> = (0..episodes)
        .map(|k| env_reset(kind, rng.split("eval_episode", k as u64)))
        .collect();
    loop {
        let live: Vec<usize> = (0..episodes).filter(|&k| !envs[k].done).collect();
        if live.is_empty() {
            break;
        }
        let rows: Vec<Vec<f64>> = live.iter().map(|&k| moments.normalize_row(&envs[k].obs)).collect();
        let acts = mode_actions(policy, kind, &Tensor::from_rows(&rows)?)?;
        for (&k, a) in live.iter().zip(acts) {
            env_step(&mut envs[k], a)?;
        }
    }
    let rets: Vec<f64> = envs.iter().map(|e| e.episode_return).collect();
    let mean = rets.iter().sum::<f64>() / episodes as f64;
    let var = rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / episodes as f64;
    Ok((mean, var.sqrt()))
}

/// Synchronous set of environments that reset themselves when an episode
/// ends.
pub struct VecEnv {
    pub kind: EnvKind,
    pub envs: Vec<EnvState>,
    streams: Vec<Rng>,
    pub finished_returns: Vec<f64>,
}

impl VecEnv {
    pub fn new(kind: EnvKind, n: usize, rng: &Rng) -> Self {
        let mut streams: Vec<Rng> = (0..n).map(|i| rng.split("env", i as u64)).collect();
        let envs = streams
            .iter_mut()
            .map(|s| env_reset(kind, s.next_split("episode")))
            .collect();
        VecEnv {
            kind,
            envs,
            streams,
            finished_returns: Vec::new(),
        }
    }

    pub fn raw_obs(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.envs.iter().map(|e| e.obs.clone()).collect();
        Tensor::from_rows(&rows).expect("equal obs dims")
    }
}

/// One round of experience with advantages already computed.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub version: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.obs.clone()).collect();
        Tensor::from_rows(&rows).expect("equal obs dims")
    }

    pub fn actions(&self, dim: usize) -> Tensor {
        let data = self.transitions.iter().map(|t| t.action).collect();
        Tensor::new([self.len(), dim], data).expect("scalar actions")
    }
}

fn values_of(value_net: &Network, obs: &Tensor) -> Result<Vec<f64>> {
    match value_net.predict(obs)? {
        Prediction::Dense(v) => Ok(v.into_data()),
        _ => Err(Error::invalid("value", "value network needs a dense head")),
    }
}

/// Steps every environment `rollout_len` times with sampled actions.
/// Observations are normalized with `moments`, which are first updated
/// with each new raw observation batch. Advantages are normalized.
pub fn collect_rollouts(
    policy: &Network,
    value_net: &Network,
    moments: &mut RunningMoments,
    venv: &mut VecEnv,
    cfg: &PpoConfig,
    rng: &mut Rng,
    version: usize,
) -> Result<RolloutBuffer> {
    let n = venv.envs.len();
    let t_len = cfg.rollout_len;
    let kind = venv.kind;
    let mut steps: Vec<Vec<Transition>> = vec![Vec::with_capacity(t_len); n];
    for _ in 0..t_len {
        let raw = venv.raw_obs();
        moments.update(&raw)?;
        let obs = moments.normalize(&raw)?;
        let pred = policy.predict(&obs)?;
        let actions = sample_actions(&pred, rng);
        let mut tape = Tape::new();
        let bound = policy.params.bind(&mut tape, false);
        let ov = tape.constant(obs.clone());
        let out = forward(&mut tape, &policy.spec, &bound, ov, None)?;
        let lp = log_prob(&mut tape, &out, &actions)?;
        let lp = tape.value(lp).data().to_vec();
        let values = values_of(value_net, &obs)?;
        for e in 0..n {
            let a = actions.row_slice(e);
            let (mut reward, done) = env_step(&mut venv.envs[e], to_action(kind, a)).map_err(|err| match err {
                Error::Env { env, msg } => Error::Env {
                    env,
                    msg: format!("env #{e}: {msg}"),
                },
                other => other,
            })?;
            if done {
                let st = &venv.envs[e];
                if st.truncated {
                    // bootstrap through the time limit
                    let last = moments.normalize(&Tensor::row(&st.obs))?;
                    reward += cfg.discount * values_of(value_net, &last)?[0];
                }
                venv.finished_returns.push(st.episode_return);
                let next = venv.streams[e].next_split("episode");
                venv.envs[e] = env_reset(kind, next);
            }
            steps[e].push(Transition {
                obs: obs.row_slice(e).to_vec(),
                action: a[0],
                reward,
                done,
                log_prob: lp[e],
                value: values[e],
            });
        }
    }
    let boot_obs = moments.normalize(&venv.raw_obs())?;
    let boot = values_of(value_net, &boot_obs)?;
    let mut transitions = Vec::with_capacity(n * t_len);
    let mut advantages = Vec::with_capacity(n * t_len);
    let mut returns = Vec::with_capacity(n * t_len);
    for (e, seq) in steps.into_iter().enumerate() {
        let r: Vec<f64> = seq.iter().map(|t| t.reward).collect();
        let v: Vec<f64> = seq.iter().map(|t| t.value).collect();
        let d: Vec<bool> = seq.iter().map(|t| t.done).collect();
        let (a, ret) = compute_gae(&r, &v, &d, boot[e], cfg.discount, cfg.gae_lambda);
        advantages.extend(a);
        returns.extend(ret);
        transitions.extend(seq);
    }
    normalize_advantages(&mut advantages);
    Ok(RolloutBuffer {
        transitions,
        advantages,
        returns,
        version,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped-surrogate loss for one batch, recorded on `tape`. Returns the
/// loss node and the fraction of rows where the clip was active.
pub fn ppo_policy_loss(
    tape: &mut Tape,
    out: &NetOutput,
    actions: &Tensor,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_ratio: f64,
) -> Result<(Var, f64)> {
    let b = advantages.len();
    let lp = log_prob(tape, out, actions)?;
    let old = tape.constant(Tensor::new([b, 1], old_log_probs.to_vec())?);
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff)?;
    // min(r A, clip(r) A): rows where the clipped branch wins contribute a
    // constant, the rest contribute r A.
    let rv = tape.value(ratio).data().to_vec();
    let mut mask_adv = vec![0.0; b];
    let mut constant = 0.0;
    let mut clipped = 0;
    for k in 0..b {
        let a = advantages[k];
        let rc = rv[k].clamp(1.0 - clip_ratio, 1.0 + clip_ratio);
        if rc * a < rv[k] * a {
            constant += rc * a;
            clipped += 1;
        } else {
            mask_adv[k] = a;
        }
    }
    let ma = tape.constant(Tensor::new([b, 1], mask_adv)?);
    let surr = tape.mul(ratio, ma)?;
    let s = tape.sum(surr)?;
    let s = tape.add_scalar(s, constant)?;
    let loss = tape.scale(s, -1.0 / b as f64)?;
    Ok((loss, clipped as f64 / b as f64))
}

/// `grad_steps_per_update` Adam steps on the clipped surrogate plus the
/// value regression, over the buffer (or minibatches of it).
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut Network,
    value_net: &mut Network,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    let n = buffer.len();
    let obs = buffer.obs();
    let act_dim = match policy.spec.head {
        Head::Categorical { .. } => 1,
        h => h.output_dim(),
    };
    let actions = buffer.actions(act_dim);
    let old: Vec<f64> = buffer.transitions.iter().map(|t| t.log_prob).collect();
    let mut stats = PpoStats::default();
    for _ in 0..cfg.grad_steps_per_update {
        let idx: Vec<usize> = match cfg.minibatch_size {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let x = obs.select_rows(&idx);
        let a = actions.select_rows(&idx);
        let o: Vec<f64> = idx.iter().map(|&i| old[i]).collect();
        let adv: Vec<f64> = idx.iter().map(|&i| buffer.advantages[i]).collect();
        let ret: Vec<f64> = idx.iter().map(|&i| buffer.returns[i]).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pb = policy.params.bind(&mut tape, true);
        let out = forward(&mut tape, &policy.spec, &pb, xv, None)?;
        let (pl, clip_frac) = ppo_policy_loss(&mut tape, &out, &a, &o, &adv, cfg.clip_ratio)?;
        let vb = value_net.params.bind(&mut tape, true);
        let NetOutput::Dense { out: v, .. } = forward(&mut tape, &value_net.spec, &vb, xv, None)? else {
            return Err(Error::invalid("ppo_update", "value network needs a dense head"));
        };
        let target = tape.constant(Tensor::new([ret.len(), 1], ret)?);
        let err = tape.sub(v, target)?;
        let sq = tape.square(err)?;
        let vl = tape.mean(sq)?;
        let weighted = tape.scale(vl, cfg.value_coef)?;
        let total = tape.add(pl, weighted)?;
        let (plv, vlv) = (tape.item(pl), tape.item(vl));
        if !plv.is_finite() || !vlv.is_finite() {
            return Err(Error::Diverged(format!(
                "ppo update v{}: policy loss {plv}, value loss {vlv}",
                buffer.version
            )));
        }
        let grads = tape.backward(total)?;
        let mut pf = policy.params.to_flat();
        policy_opt.step(&mut pf, &pb.flat_grad(&grads))?;
        policy.params.copy_from_flat(&pf)?;
        let mut vf = value_net.params.to_flat();
        value_opt.step(&mut vf, &vb.flat_grad(&grads))?;
        value_net.params.copy_from_flat(&vf)?;
        stats = PpoStats {
            policy_loss: plv,
            value_loss: vlv,
            clip_fraction: clip_frac,
            approx_kl: 0.0,
        };
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherEval {
    pub update: usize,
    pub transitions: usize,
    pub mean: f64,
    pub std: f64,
}

pub struct TeacherOutcome {
    pub checkpoint: Checkpoint,
    pub best_score: f64,
    pub transitions: usize,
    pub history: Vec<TeacherEval>,
}

fn teacher_checkpoint(policy: &Network, moments: &RunningMoments, kind: EnvKind, method: &str, score: f64) -> Checkpoint {
    Checkpoint::new(policy.spec.clone(), policy.params.clone())
        .with_moments(moments.clone())
        .with_meta("env_id", kind.name())
        .with_meta("method", method)
        .with_meta("eval_score", score)
}

/// Trains a teacher with the configured method.
pub fn train_teacher(kind: EnvKind, cfg: &PpoConfig, rng: &Rng) -> Result<TeacherOutcome> {
    match cfg.method {
        TeacherMethod::Ppo => train_ppo(kind, cfg, rng),
        TeacherMethod::BehaviorClone => behavior_clone(kind, cfg, rng),
    }
}

/// PPO loop: collect, update, evaluate every `eval_every` updates, keep the
/// best checkpoint. Stops at `target_score` or `max_transitions`.
pub fn train_ppo(kind: EnvKind, cfg: &PpoConfig, rng: &Rng) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let mut policy = Network::new(cfg.policy_spec(kind), &mut rng.split("policy_init", 0))?;
    let mut value_net = Network::new(cfg.value_spec(kind), &mut rng.split("value_init", 0))?;
    let mut popt = Adam::new(policy.params.len(), cfg.lr);
    let mut vopt = Adam::new(value_net.params.len(), cfg.lr);
    let mut moments = RunningMoments::new(kind.obs_dim());
    let mut venv = VecEnv::new(kind, cfg.concurrent_envs, rng);
    let mut act_rng = rng.split("actions", 0);
    let mut batch_rng = rng.split("minibatch", 0);
    let eval_rng = rng.split("eval", 0);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::new();
    let mut transitions = 0;
    let mut update = 0;
    let mut streak = 0;
    while transitions < cfg.max_transitions {
        let buf = collect_rollouts(&policy, &value_net, &mut moments, &mut venv, cfg, &mut act_rng, update)?;
        transitions += buf.len();
        ppo_update(&mut policy, &mut value_net, &mut popt, &mut vopt, &buf, cfg, &mut batch_rng)?;
        update += 1;
        if update % cfg.eval_every != 0 && transitions < cfg.max_transitions {
            continue;
        }
        let (mean, std) = evaluate_policy(&policy, &moments, kind, cfg.eval_episodes, &eval_rng)?;
        log::info!("{} ppo update {update} ({transitions} transitions): {mean:.2} ± {std:.2}", kind.name());
        history.push(TeacherEval {
            update,
            transitions,
            mean,
            std,
        });
        if best.as_ref().is_none_or(|(b, _)| mean >= *b) {
            best = Some((mean, teacher_checkpoint(&policy, &moments, kind, "ppo", mean)));
        }
        streak = if cfg.target_score.is_some_and(|t| mean >= t) { streak + 1 } else { 0 };
        if streak >= cfg.target_streak {
            break;
        }
    }
    let (best_score, checkpoint) = best.expect("evaluated at least once");
    Ok(TeacherOutcome {
        checkpoint,
        best_score,
        transitions,
        history,
    })
}

/// Collects `bc_samples` expert-labelled observations. The behavior policy
/// perturbs the expert (random actions or Gaussian action noise) so the
/// data covers states the expert itself would not visit.
pub fn expert_dataset(kind: EnvKind, cfg: &PpoConfig, rng: &Rng) -> Result<(Tensor, Tensor)> {
    let mut noise = rng.split("bc_noise", 0);
    let mut ep_rng = rng.split("bc_episodes", 0);
    let mut obs = Vec::with_capacity(cfg.bc_samples);
    let mut labels = Vec::with_capacity(cfg.bc_samples);
    let mut st = env_reset(kind, ep_rng.next_split("episode"));
    while obs.len() < cfg.bc_samples {
        let expert = scripted_expert(kind, &st.obs);
        obs.push(st.obs.clone());
        labels.push(expert.as_f64());
        let act = match expert {
            Action::Discrete(a) => {
                if noise.bernoulli(cfg.bc_noise) {
                    Action::Discrete(noise.below(2))
                } else {
                    Action::Discrete(a)
                }
            }
            Action::Continuous(a) => Action::Continuous(a + cfg.bc_noise * noise.normal()),
        };
        env_step(&mut st, act)?;
        if st.done {
            st = env_reset(kind, ep_rng.next_split("episode"));
        }
    }
    let n = obs.len();
    Ok((Tensor::from_rows(&obs)?, Tensor::new([n, 1], labels)?))
}

/// Fixed std of a cloned Gaussian policy.
pub const BC_STD: f64 = 0.1;

/// Supervised fit of the policy to the scripted expert: cross-entropy for
/// discrete actions, squared error on the mean for continuous ones (whose
/// log-std is then fixed at `ln 0.1`).
pub fn behavior_clone(kind: EnvKind, cfg: &PpoConfig, rng: &Rng) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let (raw, labels) = expert_dataset(kind, cfg, rng)?;
    let mut moments = RunningMoments::new(kind.obs_dim());
    moments.update(&raw)?;
    let x = moments.normalize(&raw)?;
    let mut policy = Network::new(cfg.policy_spec(kind), &mut rng.split("policy_init", 0))?;
    let mut opt = Adam::new(policy.params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut shuffle = rng.split("bc_shuffle", 0);
    let eval_rng = rng.split("eval", 0);
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut streak = 0;
    for epoch in 0..cfg.bc_epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.bc_batch) {
            let xb = x.select_rows(chunk);
            let yb = labels.select_rows(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let pb = policy.params.bind(&mut tape, true);
            let out = forward(&mut tape, &policy.spec, &pb, xv, None)?;
            let loss = bc_loss(&mut tape, &out, &yb)?;
            let grads = tape.backward(loss)?;
            let mut g = pb.flat_grad(&grads);
            if let Some(ls) = pb.log_std {
                // the log-std is not fitted
                let n = tape.value(ls).len();
                let len = g.len();
                g[len - n..].iter_mut().for_each(|v| *v = 0.0);
            }
            let mut flat = policy.params.to_flat();
            opt.step(&mut flat, &g)?;
            policy.params.copy_from_flat(&flat)?;
        }
        if let Some(ls) = policy.params.log_std.as_mut() {
            ls.data_mut().iter_mut().for_each(|v| *v = BC_STD.ln());
        }
        let last = epoch + 1 == cfg.bc_epochs;
        if (epoch + 1) % cfg.eval_every != 0 && !last {
            continue;
        }
        let (mean, std) = evaluate_policy(&policy, &moments, kind, cfg.eval_episodes, &eval_rng)?;
        log::info!("{} bc epoch {}: {mean:.2} ± {std:.2}", kind.name(), epoch + 1);
        history.push(TeacherEval {
            update: epoch + 1,
            transitions: x.rows(),
            mean,
            std,
        });
        if best.as_ref().is_none_or(|(b, _)| mean >= *b) {
            best = Some((mean, teacher_checkpoint(&policy, &moments, kind, "behavior_clone", mean)));
        }
        streak = if cfg.target_score.is_some_and(|t| mean >= t) { streak + 1 } else { 0 };
        if streak >= cfg.target_streak {
            break;
        }
    }
    let (best_score, checkpoint) = best.expect("evaluated at least once");
    Ok(TeacherOutcome {
        checkpoint,
        best_score,
        transitions: x.rows(),
        history,
    })
}

fn bc_loss(tape: &mut Tape, out: &NetOutput, labels: &Tensor) -> Result<Var> {
    match *out {
        NetOutput::Categorical { .. } => {
            let lp = log_prob(tape, out, labels)?;
            let m = tape.mean(lp)?;
            tape.neg(m)
        }
        NetOutput::Gaussian { mean, .. } => {
            let y = tape.constant(labels.clone());
            let d = tape.sub(mean, y)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        }
        NetOutput::Dense { .. } => Err(Error::invalid("behavior_clone", "dense head is not a policy")),
    }
}

/// Mean cross-entropy or squared error of `policy` against expert labels.
pub fn bc_objective(policy: &Network, x: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pb = policy.params.bind(&mut tape, false);
    let out = forward(&mut tape, &policy.spec, &pb, xv, None)?;
    let l = bc_loss(&mut tape, &out, labels)?;
    Ok(tape.item(l))
}
