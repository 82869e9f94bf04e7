//! Desk-scale experiment presets shared by the command line and the
//! acceptance tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{accuracy, agreement, run_gas, CoverageCounter, EvalRecord, GasConfig, Mode, Trainer};
use crate::error::Result;
use crate::models::{forward, Activation, Head, ModelSpec, Network, OutputActivation};
use crate::numcore::{Adam, Rng, Tape, Tensor};
use crate::objectives::LossWeights;
use crate::tasks::{load_mnist_dir, make_quadrant_toy, Dataset, MultimodeRecipe, Split, MULTIMODE_SIGMA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            hidden: vec![32, 32],
            steps: 600,
            batch: 128,
            lr: 1e-2,
            dropout: 0.0,
        }
    }
}

/// Cross-entropy training of a ReLU classifier on `data`.
pub fn train_classifier(data: &Dataset, cfg: &ClassifierTraining, rng: &Rng) -> Result<Network> {
    let spec = ModelSpec::new(data.dim(), &cfg.hidden, Activation::Relu, Head::Categorical { classes: data.num_classes })
        .with_dropout(cfg.dropout);
    let mut net = Network::new(spec, &mut rng.split("classifier_init", 0))?;
    let mut opt = Adam::new(net.params.len(), cfg.lr);
    let mut batch_rng = rng.split("classifier_batches", 0);
    let mut drop_rng = rng.split("classifier_dropout", 0);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch.min(data.len())).map(|_| batch_rng.below(data.len())).collect();
        let x = data.features.select_rows(&idx);
        let mut onehot = Tensor::zeros([idx.len(), data.num_classes]);
        for (r, &i) in idx.iter().enumerate() {
            onehot.data_mut()[r * data.num_classes + data.labels[i]] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let b = net.params.bind(&mut tape, true);
        let out = forward(&mut tape, &net.spec, &b, xv, Some(&mut drop_rng))?;
        let crate::models::NetOutput::Categorical { log_probs, .. } = out else {
            unreachable!("categorical head")
        };
        let y = tape.constant(onehot);
        let picked = tape.mul(log_probs, y)?;
        let s = tape.sum(picked)?;
        let loss = tape.scale(s, -1.0 / idx.len() as f64)?;
        let grads = tape.backward(loss)?;
        let mut flat = net.params.to_flat();
        opt.step(&mut flat, &b.flat_grad(&grads))?;
        net.params.copy_from_flat(&flat)?;
    }
    Ok(net)
}

/// Data and architecture settings of the quadrant toy and the mode sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_per_mode: usize,
    pub teacher: ClassifierTraining,
    pub student_hidden: Vec<usize>,
}

impl ToyConfig {
    pub fn quadrant() -> Self {
        ToyConfig {
            n_per_mode: 500,
            teacher: ClassifierTraining::default(),
            student_hidden: vec![16],
        }
    }

    pub fn multimode() -> Self {
        ToyConfig {
            n_per_mode: 200,
            teacher: ClassifierTraining {
                hidden: vec![64, 64],
                steps: 800,
                ..ClassifierTraining::default()
            },
            student_hidden: vec![32],
        }
    }
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig::quadrant()
    }
}

/// Distillation schedule for the low-dimensional toys: small generators,
/// short phases, frequent resets.
pub fn toy_gas() -> GasConfig {
    GasConfig {
        epochs: 40,
        student_steps: 20,
        generator_steps: 10,
        reinit_period: Some(4),
        num_generators: 4,
        noise_dim: 16,
        noise_batch: 256,
        generator_hidden: vec![64],
        weights: LossWeights::default(),
        student_lr: 1e-2,
        generator_lr: 1e-2,
        eval_every: 2,
        patience: 1000,
        ..GasConfig::default()
    }
}

/// A trained teacher with its train, validation and test splits and the
/// true mode centers.
pub struct ToyTask {
    pub teacher: Network,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub centers: Vec<Vec<f64>>,
}

impl ToyTask {
    pub fn teacher_accuracy(&self) -> Result<f64> {
        accuracy(&self.teacher, &self.test.features, &self.test.labels)
    }
}

pub fn quadrant_task(cfg: &ToyConfig, seed: u64) -> Result<ToyTask> {
    let rng = Rng::new(seed);
    let train = make_quadrant_toy(&mut rng.split("train", 0), cfg.n_per_mode)?;
    let val = make_quadrant_toy(&mut rng.split("val", 0), cfg.n_per_mode / 2 + 1)?.with_split(Split::Test);
    let test = make_quadrant_toy(&mut rng.split("test", 0), cfg.n_per_mode)?.with_split(Split::Test);
    let teacher = train_classifier(&train, &cfg.teacher, &rng.split("teacher", 0))?;
    let centers = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]];
    Ok(ToyTask {
        teacher,
        train,
        val,
        test,
        centers,
    })
}

pub fn multimode_task(cfg: &ToyConfig, modes_per_class: usize, dim: usize, seed: u64) -> Result<ToyTask> {
    let rng = Rng::new(seed);
    let recipe = MultimodeRecipe::new(&mut rng.split("recipe", 0), modes_per_class, dim, MULTIMODE_SIGMA)?;
    let train = recipe.sample(&mut rng.split("train", 0), cfg.n_per_mode, Split::Train);
    let val = recipe.sample(&mut rng.split("val", 0), cfg.n_per_mode / 2 + 1, Split::Test);
    let test = recipe.sample(&mut rng.split("test", 0), cfg.n_per_mode, Split::Test);
    let teacher = train_classifier(&train, &cfg.teacher, &rng.split("teacher", 0))?;
    Ok(ToyTask {
        teacher,
        train,
        val,
        test,
        centers: recipe.centers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyRun {
    pub method: Mode,
    pub seed: u64,
    /// Share of all student-phase inputs nearest to each true mode.
    pub coverage: Vec<f64>,
    /// Student-teacher agreement on held-out true data.
    pub agreement: f64,
    pub student_accuracy: f64,
    pub teacher_accuracy: f64,
    pub student_updates: usize,
    pub evals: Vec<EvalRecord>,
}

impl ToyRun {
    pub fn modes_covered(&self, min_share: f64) -> usize {
        self.coverage.iter().filter(|&&s| s >= min_share).count()
    }

    pub fn min_share(&self) -> f64 {
        self.coverage.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Distills `task.teacher` with `mode`. The best student is picked by
/// agreement on the validation split and reported on the test split.
pub fn toy_run(task: &ToyTask, cfg: &ToyConfig, gas: &GasConfig, mode: Mode, seed: u64) -> Result<ToyRun> {
    let gas = GasConfig {
        mode,
        seed,
        ..gas.clone()
    };
    let student_spec = ModelSpec::new(
        task.teacher.spec.input_dim,
        &cfg.student_hidden,
        Activation::Relu,
        task.teacher.spec.head,
    );
    let trainer = Trainer::new(&task.teacher, &student_spec, &gas, Some(&task.train.features))?;
    let mut counter = CoverageCounter::new(task.centers.clone());
    let outcome = trainer.run(
        |s| agreement(&task.teacher, s, &task.val.features),
        |x| counter.add(x),
    )?;
    Ok(ToyRun {
        method: mode,
        seed,
        coverage: counter.shares(),
        agreement: agreement(&task.teacher, &outcome.best, &task.test.features)?,
        student_accuracy: accuracy(&outcome.best, &task.test.features, &task.test.labels)?,
        teacher_accuracy: task.teacher_accuracy()?,
        student_updates: outcome.epochs.last().map_or(0, |e| e.student_updates),
        evals: outcome.evals,
    })
}

/// Fully connected MNIST setup: teacher and student widths plus the
/// validation split carved out of the training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    pub teacher: ClassifierTraining,
    pub student_hidden: Vec<usize>,
    /// Training images held out for model selection.
    pub val_size: usize,
    /// Validation rows scored at each evaluation.
    pub eval_rows: usize,
}

impl Default for MnistConfig {
    fn default() -> Self {
        MnistConfig {
            teacher: ClassifierTraining {
                hidden: vec![300, 100],
                steps: 6000,
                batch: 128,
                lr: 1e-3,
                dropout: 0.1,
            },
            student_hidden: vec![150, 50],
            val_size: 5000,
            eval_rows: 2000,
        }
    }
}

/// Image generators: 100-dim noise to sigmoid pixels.
pub fn mnist_gas() -> GasConfig {
    GasConfig {
        epochs: 30,
        student_steps: 50,
        generator_steps: 10,
        reinit_period: Some(5),
        num_generators: 8,
        noise_dim: 100,
        noise_batch: 256,
        generator_hidden: vec![256],
        generator_output: OutputActivation::Sigmoid,
        student_lr: 1e-3,
        generator_lr: 1e-3,
        eval_every: 2,
        patience: 1000,
        ..GasConfig::default()
    }
}

pub struct MnistTask {
    pub teacher: Network,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads the IDX files under `dir` and trains the teacher on all training
/// images except the last `val_size`.
pub fn mnist_task(dir: &Path, cfg: &MnistConfig, seed: u64) -> Result<MnistTask> {
    let (train, test) = load_mnist_dir(dir)?;
    let n = train.len();
    let val_size = cfg.val_size.min(n / 2);
    let fit = train.subset(&(0..n - val_size).collect::<Vec<_>>());
    let val = train.subset(&(n - val_size..n).collect::<Vec<_>>()).with_split(Split::Test);
    drop(train);
    let teacher = train_classifier(&fit, &cfg.teacher, &Rng::new(seed).split("teacher", 0))?;
    Ok(MnistTask {
        teacher,
        train: fit,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MnistRun {
    pub method: Mode,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub student_updates: usize,
    pub evals: Vec<EvalRecord>,
}

pub fn mnist_run(task: &MnistTask, cfg: &MnistConfig, gas: &GasConfig, mode: Mode, seed: u64) -> Result<MnistRun> {
    let gas = GasConfig {
        mode,
        seed,
        ..gas.clone()
    };
    let spec = ModelSpec::new(
        task.teacher.spec.input_dim,
        &cfg.student_hidden,
        Activation::Relu,
        task.teacher.spec.head,
    );
    let rows = cfg.eval_rows.min(task.val.len());
    let probe = task.val.subset(&(0..rows).collect::<Vec<_>>());
    let pool = (mode == Mode::StudentKd).then_some(&task.train.features);
    let outcome = run_gas(&task.teacher, &spec, &gas, pool, |s| {
        accuracy(s, &probe.features, &probe.labels)
    })?;
    Ok(MnistRun {
        method: mode,
        seed,
        teacher_accuracy: accuracy(&task.teacher, &task.test.features, &task.test.labels)?,
        student_accuracy: accuracy(&outcome.best, &task.test.features, &task.test.labels)?,
        student_updates: outcome.epochs.last().map_or(0, |e| e.student_updates),
        evals: outcome.evals,
    })
}
