use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gas_core::cli::{parse_config, read_summary, MetricRecord, METRICS_FILE, SUMMARY_FILE};
use gas_core::tasks::{encode_idx_images, encode_idx_labels};

fn gas(args: &[&str], config: &str, dir: &Path) -> Output {
    let cfg = dir.join("input.json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gas"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn records(dir: &Path) -> Vec<MetricRecord> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gradcheck_writes_artifacts_and_rerun_appends() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    ok(&gas(&["gradcheck", "--out", o, "--seed", "4"], "{}", tmp.path()));
    let first = records(&out);
    assert_eq!(first.len(), 20);
    assert!(first.iter().all(|r| r.run_id == "gradcheck-4-0" && r.seed == 4));
    ok(&gas(&["gradcheck", "--out", o, "--seed", "4"], "{}", tmp.path()));
    let all = records(&out);
    assert_eq!(all.len(), 40);
    assert_eq!(&all[..20], &first[..], "earlier lines untouched");
    assert!(all[20..].iter().all(|r| r.run_id == "gradcheck-4-1"));
    // the echoed config reloads to itself
    let echoed = fs::read_to_string(out.join("config.json")).unwrap();
    let c = parse_config(&echoed).unwrap();
    assert_eq!(c.seeds, vec![4]);
    assert_eq!(parse_config(&serde_json::to_string(&c).unwrap()).unwrap(), c);
}

#[test]
fn bad_configs_fail_with_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gas(&["exp-fig1"], r#"{"gas": {"generater_lr": 0.1}}"#, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("generater_lr"));

    let o = gas(&["exp-fig1"], r#"{"command": "exp-modes"}"#, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = gas(&["warp"], "{}", tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = gas(&["distill"], r#"{"env": "cartpole", "teacher_checkpoint": "/no/such/ckpt"}"#, tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fig1_summary_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fig1");
    let cfg = r#"{"seeds": [0, 1], "gas": {"epochs": 2, "student_steps": 3, "generator_steps": 2}, "toy": {"n_per_mode": 40, "teacher": {"steps": 50}}}"#;
    ok(&gas(&["exp-fig1", "--out", out.to_str().unwrap()], cfg, tmp.path()));
    let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    for method in ["gas", "dafl", "reinit_only", "student_kd"] {
        for seed in [0, 1] {
            let cov: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.seed == Some(seed) && r.metric.starts_with("coverage_"))
                .map(|r| r.value)
                .collect();
            assert_eq!(cov.len(), 4, "{method} seed {seed}");
            assert!((cov.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    // aggregate rows are the mean of the per-seed rows
    for r in rows.iter().filter(|r| r.run_id == "mean") {
        let v: Vec<f64> = rows
            .iter()
            .filter(|x| x.seed.is_some() && x.method == r.method && x.task == r.task && x.metric == r.metric)
            .map(|x| x.value)
            .collect();
        assert!((v.iter().sum::<f64>() / v.len() as f64 - r.value).abs() < 1e-12);
    }
    // steps increase within each run
    let recs = records(&out);
    for w in recs.windows(2) {
        if w[0].run_id == w[1].run_id && w[0].phase == w[1].phase {
            assert!(w[1].step > w[0].step);
        }
    }
}

#[test]
fn modes_emits_one_accuracy_per_method_k_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("modes");
    let cfg = r#"{"seeds": [0, 1], "modes_per_class": [1, 3], "dim": 4, "gas": {"epochs": 1, "student_steps": 2, "generator_steps": 1}, "toy": {"n_per_mode": 20, "teacher": {"steps": 30}}}"#;
    ok(&gas(&["exp-modes", "--out", out.to_str().unwrap()], cfg, tmp.path()));
    let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    let acc: Vec<_> = rows.iter().filter(|r| r.seed.is_some() && r.metric == "accuracy").collect();
    assert_eq!(acc.len(), 4 * 2 * 2);
    for m in ["gas", "dafl", "reinit_only", "student_kd"] {
        for k in [1, 3] {
            for s in [0, 1] {
                let task = format!("multimode-k{k}");
                assert_eq!(acc.iter().filter(|r| r.method == m && r.task == task && r.seed == Some(s)).count(), 1);
            }
        }
    }
}

#[test]
fn teacher_distill_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t_out = tmp.path().join("teacher");
    let cfg = r#"{"env": "cartpole", "ppo": {"max_transitions": 1024, "hidden": [16]}}"#;
    ok(&gas(&["train-teacher", "--out", t_out.to_str().unwrap()], cfg, tmp.path()));
    let ckpt = t_out.join("checkpoints/train-teacher-0-0-teacher");
    assert!(ckpt.with_extension("json").exists() && ckpt.with_extension("bin").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.with_extension("json")).unwrap()).unwrap();
    assert_eq!(manifest["meta"]["env_id"], "cartpole");
    assert_eq!(manifest["meta"]["method"], "ppo");
    assert!(manifest["meta"]["eval_score"].is_number());

    let d_out = tmp.path().join("distill");
    let cfg = format!(
        r#"{{"env": "cartpole", "teacher_checkpoint": {}, "gas": {{"epochs": 4, "eval_every": 2, "mode": "dafl"}}}}"#,
        serde_json::to_string(&ckpt).unwrap()
    );
    ok(&gas(&["distill", "--out", d_out.to_str().unwrap()], &cfg, tmp.path()));
    let rows = read_summary(&d_out.join(SUMMARY_FILE)).unwrap();
    assert!(rows.iter().any(|r| r.method == "dafl" && r.metric == "score"));
    let student = d_out.join("checkpoints/distill-0-0-student");

    let e_out = tmp.path().join("eval");
    let cfg = format!(
        r#"{{"env": "cartpole", "teacher_checkpoint": {}, "seeds": [0, 1, 2], "eval_episodes": 2}}"#,
        serde_json::to_string(&student).unwrap()
    );
    ok(&gas(&["evaluate", "--out", e_out.to_str().unwrap()], &cfg, tmp.path()));
    let rows = read_summary(&e_out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(rows.iter().filter(|r| r.seed.is_some() && r.metric == "score").count(), 3);
}

#[test]
fn mnist_preset_on_synthetic_idx_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    // two 4x4 "digits": bright top half or bright bottom half
    let make = |n: usize| {
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (0..16).map(|p| if (p < 8) == (l == 0) { 200 + (i % 50) as u8 } else { (i % 30) as u8 }).collect())
            .collect();
        (encode_idx_images(&images, 4, 4), encode_idx_labels(&labels))
    };
    let (ti, tl) = make(120);
    let (vi, vl) = make(40);
    fs::write(data.join("train-images-idx3-ubyte"), ti).unwrap();
    fs::write(data.join("train-labels-idx1-ubyte"), tl).unwrap();
    fs::write(data.join("t10k-images-idx3-ubyte"), vi).unwrap();
    fs::write(data.join("t10k-labels-idx1-ubyte"), vl).unwrap();
    let out = tmp.path().join("out");
    let cfg = format!(
        r#"{{"mnist_dir": {}, "seeds": [0], "mnist": {{"teacher": {{"hidden": [8], "steps": 60, "batch": 32, "lr": 0.01, "dropout": 0.0}}, "student_hidden": [4], "val_size": 20, "eval_rows": 20}}, "gas": {{"epochs": 2, "student_steps": 3, "generator_steps": 1, "noise_dim": 4, "noise_batch": 16, "generator_hidden": [8]}}}}"#,
        serde_json::to_string(&data).unwrap()
    );
    ok(&gas(&["exp-mnist", "--out", out.to_str().unwrap()], &cfg, tmp.path()));
    let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    let teacher = rows.iter().find(|r| r.method == "gas" && r.metric == "teacher_accuracy").unwrap();
    assert!(teacher.value > 0.9, "{}", teacher.value);
    assert!(rows.iter().any(|r| r.method == "dafl" && r.metric == "accuracy"));
}

#[test]
fn parallel_seeds_match_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"seeds": [2, 0, 1], "methods": ["gas"], "gas": {"epochs": 2, "student_steps": 2, "generator_steps": 1}, "toy": {"n_per_mode": 20, "teacher": {"steps": 20}}}"#;
    let run = |threads: &str, name: &str| {
        let out = tmp.path().join(name);
        let cfg_path = tmp.path().join(format!("{name}.json"));
        fs::write(&cfg_path, cfg).unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_gas"))
            .args(["exp-fig1", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("GAS_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        ok(&o);
        (
            gas_core::cli::metrics_without_wall_clock(&out.join(METRICS_FILE)).unwrap(),
            fs::read(out.join(SUMMARY_FILE)).unwrap(),
        )
    };
    assert_eq!(run("1", "serial"), run("3", "parallel"));
}
