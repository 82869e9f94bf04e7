//! Configuration, experiment presets and metric files behind the `gas`
//! binary.

mod config;
pub mod experiments;
mod metrics;
pub mod selftest;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::distill::{distill_policy, EvalRecord, GasConfig, GasOutcome, Mode};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, Checkpoint};
use crate::numcore::Rng;
use crate::rlteacher::{evaluate_policy, train_teacher, TeacherOutcome};
use crate::tasks::EnvKind;

pub use config::{echo_config, load_config, load_config_for, parse_config, parse_config_for, Command, RunConfig};
pub use metrics::{
    mean_std, metrics_without_wall_clock, read_summary, with_aggregates, Emitter, MetricRecord, RunResult, SummaryRow,
    METRICS_FILE, PARTIAL_MARKER, SUMMARY_FILE,
};

use experiments::{mnist_run, mnist_task, multimode_task, quadrant_task, toy_run};

/// Share a mode needs to count as covered.
pub const COVERED_SHARE: f64 = 0.05;

/// Parallel seed runs allowed by `GAS_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("GAS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs `f` on every seed with at most `threads` in flight. Results come
/// back in seed order whatever the scheduling.
fn per_seed<T: Send>(seeds: &[u64], threads: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(seeds.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= seeds.len() {
                    break;
                }
                let r = f(seeds[k]);
                *slots[k].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every seed ran"))
        .collect()
}

fn record_evals(run: &mut RunResult, evals: &[EvalRecord], metric: &str) {
    for e in evals {
        run.record(
            e.student_updates as u64,
            "eval",
            [(metric, e.score), ("best", e.best), ("epoch", e.epoch as f64)],
        );
    }
}

fn record_training(run: &mut RunResult, outcome: &GasOutcome) {
    for e in &outcome.epochs {
        let mut m = vec![
            ("distill_loss", e.distill_loss),
            ("student_updates", e.student_updates as f64),
            ("generator_updates", e.generator_updates as f64),
            ("reinit", if e.reinit { 1.0 } else { 0.0 }),
        ];
        m.extend(e.generator_loss.map(|v| ("generator_loss", v)));
        m.extend(e.pointwise_entropy.map(|v| ("pointwise_entropy", v)));
        m.extend(e.aggregate_entropy.map(|v| ("aggregate_entropy", v)));
        run.record(e.epoch as u64, "train", m);
    }
}

fn teacher_run(env: EnvKind, cfg: &RunConfig, seed: u64) -> Result<(TeacherOutcome, RunResult)> {
    let rng = Rng::new(seed);
    let out = train_teacher(env, &cfg.ppo, &rng)?;
    let mut run = RunResult::new(seed, "teacher", env.name());
    for h in &out.history {
        run.record(
            h.transitions as u64,
            "teacher_eval",
            [("score", h.mean), ("score_std", h.std), ("update", h.update as f64)],
        );
    }
    let ckpt = &out.checkpoint;
    let moments = ckpt.moments.as_ref().ok_or(Error::MissingMoments)?;
    let (mean, std) = evaluate_policy(&ckpt.network(), moments, env, cfg.eval_episodes, &rng.split("final_eval", 0))?;
    run.summarize("score", mean);
    run.summarize("score_std", std);
    run.summarize("selection_score", out.best_score);
    run.summarize("transitions", out.transitions as f64);
    run.checkpoints.push(("teacher".into(), out.checkpoint.clone()));
    Ok((out, run))
}

fn distill_run(ckpt: &Checkpoint, env: EnvKind, gas: &GasConfig, mode: Mode, seed: u64, episodes: usize) -> Result<RunResult> {
    let g = GasConfig {
        mode,
        seed,
        ..gas.clone()
    };
    let d = distill_policy(ckpt, env, &g, episodes)?;
    let mut run = RunResult::new(seed, mode.name(), env.name());
    record_training(&mut run, &d.outcome);
    record_evals(&mut run, &d.outcome.evals, "score");
    run.summarize("score", d.student_score.0);
    run.summarize("score_std", d.student_score.1);
    run.summarize("teacher_score", d.teacher_score.0);
    run.summarize("score_ratio", d.student_score.0 / d.teacher_score.0);
    run.summarize(
        "student_updates",
        d.outcome.epochs.last().map_or(0.0, |e| e.student_updates as f64),
    );
    run.checkpoints.push((
        "student".into(),
        Checkpoint::new(d.outcome.best.spec.clone(), d.outcome.best.params.clone())
            .with_moments(ckpt.moments.clone().ok_or(Error::MissingMoments)?)
            .with_meta("env_id", env.name())
            .with_meta("method", mode.name())
            .with_meta("eval_score", d.student_score.0),
    ));
    Ok(run)
}

fn env_of(cfg: &RunConfig) -> Result<EnvKind> {
    cfg.env
        .ok_or_else(|| Error::Config(format!("{} needs an env", cfg.command.name())))
}

fn checkpoint_of(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} needs teacher_checkpoint", cfg.command.name())))?;
    load_checkpoint(path)
}

/// Runs the configured command, writing `config.json`, `metrics.jsonl`,
/// `summary.csv` and checkpoints under `cfg.out_dir`. Returns the summary
/// rows including aggregates.
pub fn run_command(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    echo_config(cfg, &cfg.out_dir)?;
    let mut emitter = Emitter::open(&cfg.out_dir, cfg.command.name())?;
    let threads = thread_budget();
    let mut failure = None;
    match cfg.command {
        Command::TrainTeacher => {
            let env = env_of(cfg)?;
            for (_, run) in per_seed(&cfg.seeds, threads, |s| teacher_run(env, cfg, s))? {
                emitter.emit(run)?;
            }
        }
        Command::Distill => {
            let (env, ckpt) = (env_of(cfg)?, checkpoint_of(cfg)?);
            let runs = per_seed(&cfg.seeds, threads, |s| {
                distill_run(&ckpt, env, &cfg.gas, cfg.gas.mode, s, cfg.eval_episodes)
            })?;
            for run in runs {
                emitter.emit(run)?;
            }
        }
        Command::Evaluate => {
            let (env, ckpt) = (env_of(cfg)?, checkpoint_of(cfg)?);
            let moments = ckpt.moments.as_ref().ok_or(Error::MissingMoments)?;
            let net = ckpt.network();
            let method = ckpt.meta.get("method").and_then(|v| v.as_str()).unwrap_or("checkpoint").to_string();
            for &s in &cfg.seeds {
                let (mean, std) = evaluate_policy(&net, moments, env, cfg.eval_episodes, &Rng::new(s).split("evaluate", 0))?;
                let mut run = RunResult::new(s, method.clone(), env.name());
                run.record(0, "evaluate", [("score", mean), ("score_std", std)]);
                run.summarize("score", mean);
                run.summarize("score_std", std);
                emitter.emit(run)?;
            }
        }
        Command::Gradcheck => {
            for &s in &cfg.seeds {
                let cases = selftest::gradcheck_suite(s)?;
                let mut run = RunResult::new(s, "gradcheck", "composed_models");
                for c in &cases {
                    run.record(
                        c.index as u64,
                        "gradcheck",
                        [
                            ("max_rel_error", c.max_rel_error),
                            ("passed", c.passed as u8 as f64),
                            ("params", c.params as f64),
                        ],
                    );
                }
                let uncovered = selftest::uncovered_primitives(&cases);
                let passed = cases.iter().filter(|c| c.passed).count();
                let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
                run.summarize("cases_passed", passed as f64);
                run.summarize("max_rel_error", worst);
                run.summarize("uncovered_primitives", uncovered.len() as f64);
                emitter.emit(run)?;
                if passed < cases.len() || !uncovered.is_empty() {
                    let bad: Vec<String> = cases
                        .iter()
                        .filter(|c| !c.passed)
                        .map(|c| format!("case {} ({:?}, {}) at {}", c.index, c.loss, c.head, c.offending.as_deref().unwrap_or("?")))
                        .collect();
                    failure = Some(format!("seed {s}: failed [{}], uncovered {uncovered:?}", bad.join("; ")));
                }
            }
        }
        Command::ExpFig1 => {
            let runs = per_seed(&cfg.seeds, threads, |s| {
                let task = quadrant_task(&cfg.toy, s)?;
                cfg.methods
                    .iter()
                    .map(|&m| {
                        let r = toy_run(&task, &cfg.toy, &cfg.gas, m, s)?;
                        let mut run = RunResult::new(s, m.name(), "quadrant");
                        record_evals(&mut run, &r.evals, "agreement");
                        for (q, share) in r.coverage.iter().enumerate() {
                            run.summarize(&format!("coverage_{q}"), *share);
                        }
                        run.summarize("modes_covered", r.modes_covered(COVERED_SHARE) as f64);
                        run.summarize("min_share", r.min_share());
                        run.summarize("agreement", r.agreement);
                        run.summarize("accuracy", r.student_accuracy);
                        run.summarize("teacher_accuracy", r.teacher_accuracy);
                        Ok(run)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for run in runs.into_iter().flatten() {
                emitter.emit(run)?;
            }
        }
        Command::ExpModes => {
            let runs = per_seed(&cfg.seeds, threads, |s| {
                let mut out = Vec::new();
                for &k in &cfg.modes_per_class {
                    let task = multimode_task(&cfg.toy, k, cfg.dim, s)?;
                    for &m in &cfg.methods {
                        let r = toy_run(&task, &cfg.toy, &cfg.gas, m, s)?;
                        let mut run = RunResult::new(s, m.name(), format!("multimode-k{k}"));
                        record_evals(&mut run, &r.evals, "agreement");
                        run.summarize("accuracy", r.student_accuracy);
                        run.summarize("agreement", r.agreement);
                        run.summarize("teacher_accuracy", r.teacher_accuracy);
                        out.push(run);
                    }
                }
                Ok(out)
            })?;
            for run in runs.into_iter().flatten() {
                emitter.emit(run)?;
            }
        }
        Command::ExpMnist => {
            let dir = cfg
                .mnist_dir
                .as_ref()
                .ok_or_else(|| Error::Config("exp-mnist needs mnist_dir".into()))?;
            let runs = per_seed(&cfg.seeds, threads, |s| {
                let task = mnist_task(dir, &cfg.mnist, s)?;
                cfg.methods
                    .iter()
                    .map(|&m| {
                        let r = mnist_run(&task, &cfg.mnist, &cfg.gas, m, s)?;
                        let mut run = RunResult::new(s, m.name(), "mnist");
                        record_evals(&mut run, &r.evals, "val_accuracy");
                        run.summarize("accuracy", r.student_accuracy);
                        run.summarize("teacher_accuracy", r.teacher_accuracy);
                        run.summarize("accuracy_ratio", r.student_accuracy / r.teacher_accuracy);
                        run.summarize("student_updates", r.student_updates as f64);
                        Ok(run)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for run in runs.into_iter().flatten() {
                emitter.emit(run)?;
            }
        }
        Command::ExpCartpole | Command::ExpMountaincar => {
            let env = env_of(cfg)?;
            let (teacher, run) = teacher_run(env, cfg, cfg.teacher_seed)?;
            emitter.emit(run)?;
            let ckpt = teacher.checkpoint;
            let runs = per_seed(&cfg.seeds, threads, |s| {
                cfg.methods
                    .iter()
                    .map(|&m| distill_run(&ckpt, env, &cfg.gas, m, s, cfg.eval_episodes))
                    .collect::<Result<Vec<_>>>()
            })?;
            for run in runs.into_iter().flatten() {
                emitter.emit(run)?;
            }
        }
    }
    let rows = emitter.finish()?;
    match failure {
        Some(msg) => Err(Error::invalid("gradcheck", msg)),
        None => Ok(rows),
    }
}

/// Value of `metric` for `method` on `task`: per-seed values in seed order.
pub fn per_seed_values(rows: &[SummaryRow], method: &str, task: &str, metric: &str) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.seed.is_some() && r.method == method && r.task == task && r.metric == metric)
        .map(|r| r.value)
        .collect()
}

/// Machine-readable error record for a failed run.
pub fn error_record(command: &str, err: &Error) -> serde_json::Value {
    let kind = match err {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Diverged(_) => "diverged",
        Error::Env { .. } => "env",
        Error::MissingMoments
        | Error::CheckpointLength { .. }
        | Error::CheckpointVersion(_)
        | Error::CheckpointManifest { .. } => "checkpoint",
        Error::IdxMagic { .. } | Error::IdxCount { .. } | Error::IdxTruncated { .. } => "dataset",
        _ => "runtime",
    };
    serde_json::json!({ "command": command, "error": kind, "message": err.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_seed_order_independent_of_threads() {
        let seeds = [5, 1, 4, 2, 3];
        let f = |s: u64| -> Result<u64> { Ok(s * s) };
        assert_eq!(per_seed(&seeds, 1, f).unwrap(), per_seed(&seeds, 3, f).unwrap());
        assert_eq!(per_seed(&seeds, 4, f).unwrap(), vec![25, 1, 16, 4, 9]);
        assert!(per_seed(&seeds, 2, |s| if s == 4 { Err(Error::Config("x".into())) } else { Ok(s) }).is_err());
    }

    #[test]
    fn error_record_kinds() {
        let r = error_record("distill", &Error::Config("bad".into()));
        assert_eq!(r["error"], "config");
        assert_eq!(r["command"], "distill");
        assert_eq!(error_record("x", &Error::MissingMoments)["error"], "checkpoint");
    }
}
