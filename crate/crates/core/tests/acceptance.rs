//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `GAS_ACCEPTANCE_ONLY=1,2,4` restricts the run to the listed criteria.
//! `GAS_MNIST_DIR` points at the uncompressed MNIST IDX files; without it
//! the MNIST criterion reports BLOCKED.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{gae_bruteforce, h_lower, mc_mixture_entropy, random_mixture};
use gas_core::cli::selftest::{gradcheck_suite, uncovered_primitives, SuiteLoss};
use gas_core::cli::{
    metrics_without_wall_clock, parse_config, per_seed_values, run_command, RunConfig, SummaryRow, METRICS_FILE,
    SUMMARY_FILE,
};
use gas_core::models::NetOutput;
use gas_core::numcore::{Rng, Tape, Tensor};
use gas_core::objectives::{aggregate_entropy, kl_divergence, pointwise_entropy};
use gas_core::rlteacher::compute_gae;

/// Criteria expected to stay red, with the reason.
const KNOWN_RED: &[(u32, &str)] = &[(
    5,
    "dafl keeps both class-2 quadrants populated on this toy; see README",
)];

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(ok: bool, detail: String, elapsed: Duration, limit_s: u64) -> Verdict {
    let detail = format!("{detail}; {:.0}s (limit {limit_s}s)", elapsed.as_secs_f64());
    verdict(ok && elapsed.as_secs() < limit_s, detail)
}

fn config(json: &str, out: &Path) -> RunConfig {
    let mut c = parse_config(json).expect("acceptance config parses");
    c.out_dir = out.to_path_buf();
    c
}

fn run(json: &str, out: &Path) -> Vec<SummaryRow> {
    run_command(&config(json, out)).expect("command runs")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_gradcheck() -> Verdict {
    let t = Instant::now();
    let cases = gradcheck_suite(0).expect("suite runs");
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<usize> = cases.iter().filter(|c| !c.passed).map(|c| c.index).collect();
    let uncovered = uncovered_primitives(&cases);
    let combos = SuiteLoss::ALL
        .iter()
        .all(|&l| ["categorical", "diag_gaussian"].iter().all(|h| cases.iter().any(|c| c.loss == l && c.head == *h)));
    within(
        cases.len() == 20 && failed.is_empty() && uncovered.is_empty() && combos,
        format!(
            "{} models, max rel error {worst:.2e}, failed {failed:?}, uncovered primitives {uncovered:?}",
            cases.len()
        ),
        t.elapsed(),
        60,
    )
}

fn c2_analytic() -> Verdict {
    let mut tape = Tape::new();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let cat = |tape: &mut Tape, rows: &[Vec<f64>]| NetOutput::from_probs(tape, Tensor::from_rows(rows).unwrap());
    let gauss = |tape: &mut Tape, m: &[Vec<f64>], s: &[Vec<f64>]| {
        NetOutput::from_gaussian(tape, Tensor::from_rows(m).unwrap(), Tensor::from_rows(s).unwrap())
    };

    let t = cat(&mut tape, &[vec![0.2, 0.3, 0.5]]);
    let v = kl_divergence(&mut tape, &t, &t, 1.0).unwrap();
    checks.push(("kl identical", tape.item(v), 0.0));
    let (t, s) = (cat(&mut tape, &[vec![1.0, 0.0]]), cat(&mut tape, &[vec![0.5, 0.5]]));
    let v = kl_divergence(&mut tape, &t, &s, 1.0).unwrap();
    checks.push(("kl one-hot vs uniform", tape.item(v), 2f64.ln()));
    let (t, s) = (gauss(&mut tape, &[vec![0.0]], &[vec![1.0]]), gauss(&mut tape, &[vec![1.0]], &[vec![1.0]]));
    let v = kl_divergence(&mut tape, &t, &s, 1.0).unwrap();
    checks.push(("kl N(0,1)||N(1,1)", tape.item(v), 0.5));

    let u = cat(&mut tape, &[vec![0.1; 10]]);
    let v = pointwise_entropy(&mut tape, &u).unwrap();
    checks.push(("entropy uniform 10", tape.item(v), 10f64.ln()));
    let o = cat(&mut tape, &[vec![0.0, 1.0, 0.0]]);
    let v = pointwise_entropy(&mut tape, &o).unwrap();
    checks.push(("entropy one-hot", tape.item(v), 0.0));
    let g = gauss(&mut tape, &[vec![0.3, -1.0]], &[vec![1.0, 1.0]]);
    let v = pointwise_entropy(&mut tape, &g).unwrap();
    checks.push((
        "entropy gaussian m=2",
        tape.item(v),
        (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
    ));

    let b = cat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let v = aggregate_entropy(&mut tape, &b).unwrap();
    checks.push(("aggregate two one-hots", tape.item(v), 2f64.ln()));
    let row = vec![0.6, 0.3, 0.1];
    let same = cat(&mut tape, &[row.clone(), row.clone(), row.clone()]);
    let one = cat(&mut tape, &[row]);
    let (a, p) = (
        aggregate_entropy(&mut tape, &same).unwrap(),
        pointwise_entropy(&mut tape, &one).unwrap(),
    );
    checks.push(("aggregate identical rows", tape.item(a), tape.item(p)));
    let g1 = gauss(&mut tape, &[vec![0.0]], &[vec![1.0]]);
    let v = aggregate_entropy(&mut tape, &g1).unwrap();
    checks.push(("H_lower single N(0,1)", tape.item(v), 0.5 * (4.0 * std::f64::consts::PI).ln()));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() >= 1e-9)
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    // the single-Gaussian bound sits strictly below the exact entropy
    let (mc, se) = mc_mixture_entropy(&[vec![0.0]], &[vec![1.0]], 100_000, &mut Rng::new(3));
    let exact = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let gap_ok = 0.5 * (4.0 * std::f64::consts::PI).ln() < exact && (mc - exact).abs() < 4.0 * se;
    verdict(
        bad.is_empty() && gap_ok,
        format!("{} examples to 1e-9, mismatches {bad:?}; exact {exact:.6} vs MC {mc:.6}", checks.len()),
    )
}

fn c3_entropy_bound() -> Verdict {
    let t = Instant::now();
    let mut rng = Rng::new(2024);
    let mut violations = 0;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..200 {
        let b = 1 + rng.below(8);
        let m = 1 + rng.below(4);
        let (mean, std) = random_mixture(&mut rng, b, m);
        let (mc, se) = mc_mixture_entropy(&mean, &std, 100_000, &mut rng);
        let margin = mc + 3.0 * se - h_lower(&mean, &std);
        worst_margin = worst_margin.min(margin);
        if margin < 0.0 {
            violations += 1;
        }
    }
    let mut single_err = 0.0f64;
    for m in 1..=4 {
        let (mean, std) = random_mixture(&mut rng, 1, m);
        let det: f64 = std[0].iter().map(|s| (4.0 * std::f64::consts::PI * s * s).ln()).sum();
        single_err = single_err.max((h_lower(&mean, &std) - 0.5 * det).abs());
    }
    within(
        violations == 0 && single_err < 1e-9,
        format!("200 mixtures, {violations} above MC+3SE (min margin {worst_margin:.4}); single-Gaussian error {single_err:.1e}"),
        t.elapsed(),
        300,
    )
}

fn c4_gae() -> Verdict {
    let mut rng = Rng::new(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(10);
        let r: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.2)).collect();
        let boot = rng.normal();
        let (g, l) = (0.9 + 0.1 * rng.uniform(), rng.uniform());
        let (adv, _) = compute_gae(&r, &v, &d, boot, g, l);
        let oracle = gae_bruteforce(&r, &v, &d, boot, g, l);
        for (a, o) in adv.iter().zip(&oracle) {
            worst = worst.max((a - o).abs());
        }
    }
    verdict(worst < 1e-12, format!("100 sequences, max deviation {worst:.1e}"))
}

fn c5_fig1(dir: &Path) -> Verdict {
    let t = Instant::now();
    let rows = run(r#"{"command": "exp-fig1", "methods": ["gas", "dafl"]}"#, dir);
    let covered = per_seed_values(&rows, "gas", "quadrant", "modes_covered");
    let agree = per_seed_values(&rows, "gas", "quadrant", "agreement");
    let dafl_min = per_seed_values(&rows, "dafl", "quadrant", "min_share");
    let gas_full = covered.iter().filter(|&&c| c == 4.0).count();
    let dafl_missing = dafl_min.iter().filter(|&&s| s < 0.01).count();
    let agree_min = agree.iter().copied().fold(1.0, f64::min);
    within(
        gas_full >= 4 && agree_min >= 0.99 && dafl_missing >= 3,
        format!(
            "gas 4/4 coverage in {gas_full}/5 seeds, min agreement {agree_min:.4}; dafl drops a mode in {dafl_missing}/5 seeds (smallest shares {:?})",
            dafl_min.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
        t.elapsed(),
        300,
    )
}

fn c6_modes(dir: &Path) -> Verdict {
    let t = Instant::now();
    let rows = run(r#"{"command": "exp-modes", "methods": ["gas", "dafl"]}"#, dir);
    let mut ok = true;
    let mut table = Vec::new();
    for k in 1..=8 {
        let task = format!("multimode-k{k}");
        let g = mean(&per_seed_values(&rows, "gas", &task, "accuracy"));
        let d = mean(&per_seed_values(&rows, "dafl", &task, "accuracy"));
        ok &= g >= 0.90 && (k < 3 || g >= d);
        table.push(format!("k{k} {g:.3}/{d:.3}"));
    }
    within(ok, format!("gas/dafl mean accuracy {}", table.join(" ")), t.elapsed(), 1200)
}

fn c7_cartpole(dir: &Path) -> Verdict {
    let t = Instant::now();
    let rows = run(r#"{"command": "exp-cartpole"}"#, dir);
    let teacher = per_seed_values(&rows, "teacher", "cartpole", "score");
    let students = per_seed_values(&rows, "gas", "cartpole", "score");
    let perfect = students.iter().filter(|&&s| s == 200.0).count();
    within(
        teacher == [200.0] && perfect >= 4,
        format!("teacher {teacher:?}, students {students:?} ({perfect}/5 at 200)"),
        t.elapsed(),
        900,
    )
}

fn c8_mountaincar(dir: &Path) -> Verdict {
    let t = Instant::now();
    let rows = run(r#"{"command": "exp-mountaincar"}"#, dir);
    let teacher = per_seed_values(&rows, "teacher", "mountaincar", "score");
    let ratio = per_seed_values(&rows, "gas", "mountaincar", "score_ratio");
    let students = per_seed_values(&rows, "gas", "mountaincar", "score");
    let good = ratio.iter().filter(|&&r| r >= 0.95).count();
    within(
        teacher.first().is_some_and(|&s| s >= 90.0) && good >= 3,
        format!(
            "teacher {:.2}, students {:?}, {good}/5 at >= 0.95x teacher",
            teacher[0],
            students.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
        t.elapsed(),
        1200,
    )
}

fn c9_mnist(dir: &Path) -> Verdict {
    let Ok(mnist) = std::env::var("GAS_MNIST_DIR") else {
        return Verdict::Blocked("GAS_MNIST_DIR not set; MNIST files are not bundled".into());
    };
    let t = Instant::now();
    let json = format!(r#"{{"command": "exp-mnist", "mnist_dir": {}}}"#, serde_json::to_string(&mnist).unwrap());
    let rows = run(&json, dir);
    let teacher = mean(&per_seed_values(&rows, "gas", "mnist", "teacher_accuracy"));
    let ratio = mean(&per_seed_values(&rows, "gas", "mnist", "accuracy_ratio"));
    let gas = mean(&per_seed_values(&rows, "gas", "mnist", "accuracy"));
    let dafl = mean(&per_seed_values(&rows, "dafl", "mnist", "accuracy"));
    within(
        teacher >= 0.975 && ratio >= 0.97 && gas > dafl,
        format!("teacher {teacher:.4}, gas {gas:.4} (ratio {ratio:.4}), dafl {dafl:.4}"),
        t.elapsed(),
        3600,
    )
}

fn c10_determinism(dir: &Path) -> Verdict {
    let cmds = [
        ("gradcheck", r#"{"command": "gradcheck"}"#.to_string()),
        (
            "exp-fig1",
            r#"{"command": "exp-fig1", "seeds": [3], "gas": {"epochs": 4}}"#.to_string(),
        ),
        (
            "exp-modes",
            r#"{"command": "exp-modes", "seeds": [1], "modes_per_class": [2], "gas": {"epochs": 2}}"#.to_string(),
        ),
        (
            "train-teacher",
            r#"{"command": "train-teacher", "env": "cartpole", "ppo": {"max_transitions": 2048, "hidden": [32]}}"#
                .to_string(),
        ),
    ];
    let mut bad = Vec::new();
    let mut compared = 0;
    let mut compare = |name: &str, json: &str, a: &Path, b: &Path| {
        run(json, a);
        run(json, b);
        let same_metrics =
            metrics_without_wall_clock(&a.join(METRICS_FILE)).unwrap() == metrics_without_wall_clock(&b.join(METRICS_FILE)).unwrap();
        let same_summary = std::fs::read(a.join(SUMMARY_FILE)).unwrap() == std::fs::read(b.join(SUMMARY_FILE)).unwrap();
        compared += 1;
        if !(same_metrics && same_summary) {
            bad.push(name.to_string());
        }
    };
    for (name, json) in &cmds {
        compare(name, json, &dir.join(format!("{name}-a")), &dir.join(format!("{name}-b")));
    }
    // distill and evaluate from the teacher trained above
    let ckpt = dir.join("train-teacher-a/checkpoints/train-teacher-0-0-teacher");
    let path = serde_json::to_string(&ckpt).unwrap();
    for (name, json) in [
        (
            "distill",
            format!(r#"{{"command": "distill", "env": "cartpole", "teacher_checkpoint": {path}, "gas": {{"epochs": 6, "eval_every": 3}}}}"#),
        ),
        (
            "evaluate",
            format!(r#"{{"command": "evaluate", "env": "cartpole", "teacher_checkpoint": {path}, "seeds": [0, 1]}}"#),
        ),
    ] {
        compare(name, &json, &dir.join(format!("{name}-a")), &dir.join(format!("{name}-b")));
    }
    verdict(
        bad.is_empty(),
        format!("{compared} commands rerun, differing metrics: {bad:?}"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("GAS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let work = tempfile::tempdir().expect("tempdir");
    let sub = |n: u32| work.path().join(format!("c{n}"));
    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "gradient correctness", Box::new(c1_gradcheck)),
        (2, "analytic loss values", Box::new(c2_analytic)),
        (3, "entropy lower bound", Box::new(c3_entropy_bound)),
        (4, "GAE oracle", Box::new(c4_gae)),
        (5, "quadrant toy coverage", Box::new(|| c5_fig1(&sub(5)))),
        (6, "mode sweep", Box::new(|| c6_modes(&sub(6)))),
        (7, "CartPole distillation", Box::new(|| c7_cartpole(&sub(7)))),
        (8, "MountainCar distillation", Box::new(|| c8_mountaincar(&sub(8)))),
        (9, "MNIST desk-scale", Box::new(|| c9_mnist(&sub(9)))),
        (10, "determinism", Box::new(|| c10_determinism(&sub(10)))),
    ];
    let mut unexpected = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("SKIP {n:>2} {name}");
            continue;
        }
        let known = KNOWN_RED.iter().find(|(k, _)| *k == n).map(|(_, why)| *why);
        match check() {
            Verdict::Pass(d) => println!("PASS {n:>2} {name}: {d}"),
            Verdict::Blocked(d) => println!("BLOCKED {n:>2} {name}: {d}"),
            Verdict::Fail(d) => match known {
                Some(why) => println!("FAIL {n:>2} {name}: {d} [known: {why}]"),
                None => {
                    println!("FAIL {n:>2} {name}: {d}");
                    unexpected.push(n);
                }
            },
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
