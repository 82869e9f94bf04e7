use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Checkpoint};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Left next to `metrics.jsonl` when a write fails midway.
pub const PARTIAL_MARKER: &str = "metrics.jsonl.partial";

/// One line of `metrics.jsonl`. `wall_ms` is the only field that differs
/// between reruns of the same config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub task: String,
    pub step: u64,
    pub phase: String,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// A record before it is assigned to a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub step: u64,
    pub phase: &'static str,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Output of one (seed, method, task) run, emitted as a unit.
pub struct RunResult {
    pub seed: u64,
    pub method: String,
    pub task: String,
    pub rows: Vec<Row>,
    pub summary: Vec<(String, f64)>,
    pub checkpoints: Vec<(String, Checkpoint)>,
    started: Instant,
}

impl RunResult {
    pub fn new(seed: u64, method: impl Into<String>, task: impl Into<String>) -> Self {
        RunResult {
            seed,
            method: method.into(),
            task: task.into(),
            rows: Vec::new(),
            summary: Vec::new(),
            checkpoints: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn record<'a>(&mut self, step: u64, phase: &'static str, metrics: impl IntoIterator<Item = (&'a str, f64)>) {
        self.rows.push(Row {
            step,
            phase,
            metrics: metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            wall_ms: self.started.elapsed().as_millis() as u64,
        });
    }

    pub fn summarize(&mut self, metric: &str, value: f64) {
        self.summary.push((metric.to_string(), value));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    /// Empty on aggregate rows.
    pub seed: Option<u64>,
    pub method: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Appends runs to `metrics.jsonl` under fresh run ids and collects their
/// summary rows.
pub struct Emitter {
    dir: PathBuf,
    command: String,
    /// Next free run index per seed.
    next: HashMap<u64, usize>,
    pub summary: Vec<SummaryRow>,
}

impl Emitter {
    /// Scans any existing `metrics.jsonl` in `dir` so reruns get new ids.
    pub fn open(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut next = HashMap::new();
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let prefix = format!("{command}-");
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let Ok(rec) = serde_json::from_str::<MetricRecord>(&line) else {
                    continue;
                };
                let Some(rest) = rec.run_id.strip_prefix(&prefix) else {
                    continue;
                };
                if let Some((_, n)) = rest.rsplit_once('-') {
                    if let Ok(n) = n.parse::<usize>() {
                        let slot = next.entry(rec.seed).or_insert(0);
                        *slot = (*slot).max(n + 1);
                    }
                }
            }
        }
        Ok(Emitter {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            next,
            summary: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `run`'s records and checkpoints; returns its run id.
    pub fn emit(&mut self, run: RunResult) -> Result<String> {
        let n = self.next.entry(run.seed).or_insert(0);
        let run_id = format!("{}-{}-{}", self.command, run.seed, *n);
        *n += 1;
        let mut body = String::new();
        for row in &run.rows {
            if let Some((k, v)) = row.metrics.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::invalid("emit_metrics", format!("{run_id}: metric {k} is {v}")));
            }
            let rec = MetricRecord {
                run_id: run_id.clone(),
                seed: run.seed,
                method: run.method.clone(),
                task: run.task.clone(),
                step: row.step,
                phase: row.phase.to_string(),
                metrics: row.metrics.clone(),
                wall_ms: row.wall_ms,
            };
            body.push_str(&serde_json::to_string(&rec)?);
            body.push('\n');
        }
        self.append(&body)?;
        for (name, ckpt) in &run.checkpoints {
            let dir = self.dir.join("checkpoints");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_checkpoint(&dir.join(format!("{run_id}-{name}")), ckpt)?;
        }
        log::info!(
            "{run_id} {} {}: {}",
            run.method,
            run.task,
            run.summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" ")
        );
        for (metric, value) in run.summary {
            self.summary.push(SummaryRow {
                run_id: run_id.clone(),
                seed: Some(run.seed),
                method: run.method.clone(),
                task: run.task.clone(),
                metric,
                value,
            });
        }
        Ok(run_id)
    }

    fn append(&self, body: &str) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let res = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(body.as_bytes()).and_then(|_| f.flush()));
        res.map_err(|e| {
            // best effort: the marker tells readers the file may end mid-run
            let _ = fs::write(self.dir.join(PARTIAL_MARKER), format!("{e}\n"));
            Error::io(path, e)
        })
    }

    /// Writes `summary.csv`: every per-seed row, then mean and std rows per
    /// (method, task, metric) in order of first appearance.
    pub fn finish(&self) -> Result<Vec<SummaryRow>> {
        let rows = with_aggregates(&self.summary);
        let path = self.dir.join(SUMMARY_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for r in &rows {
            w.serialize(r).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(rows)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// `rows` followed by `mean` and `std` (sample, zero for one seed) rows.
pub fn with_aggregates(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        let key = (r.method.clone(), r.task.clone(), r.metric.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.value),
            None => groups.push((key, vec![r.value])),
        }
    }
    let mut out = rows.to_vec();
    for ((method, task, metric), v) in groups {
        let (mean, std) = mean_std(&v);
        for (id, value) in [("mean", mean), ("std", std)] {
            out.push(SummaryRow {
                run_id: id.to_string(),
                seed: None,
                method: method.clone(),
                task: task.clone(),
                metric: metric.clone(),
                value,
            });
        }
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Reads `summary.csv` back.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// `metrics.jsonl` with the wall-clock field removed from every line; equal
/// across reruns of the same config and seed.
pub fn metrics_without_wall_clock(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_ms");
            }
            Ok(serde_json::to_string(&v)?)
        })
        .collect()
}
