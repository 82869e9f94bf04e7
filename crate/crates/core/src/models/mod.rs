//! Multilayer perceptrons: teachers, students, value nets and generators.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Axis, Rng, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, Checkpoint, Manifest, ParamSlot, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Row-softmax over `classes` logits.
    Categorical { classes: usize },
    /// Mean vector plus a state-independent learnable log-std.
    DiagGaussian { dim: usize },
    /// Plain vector output: generators and value networks.
    Dense {
        dim: usize,
        activation: OutputActivation,
    },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match *self {
            Head::Categorical { classes } => classes,
            Head::DiagGaussian { dim } | Head::Dense { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, head: Head) -> Self {
        ModelSpec {
            input_dim,
            hidden: hidden.to_vec(),
            activation,
            head,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.head.output_dim() == 0 {
            return Err(Error::invalid("model_spec", "all dimensions must be positive"));
        }
        if let Head::Categorical { classes } = self.head {
            if classes < 2 {
                return Err(Error::invalid("model_spec", "categorical head needs at least 2 classes"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model_spec", format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim());
        dims
    }

    pub fn num_params(&self) -> usize {
        let dims = self.layer_dims();
        let dense: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        dense + self.log_std_len()
    }

    fn log_std_len(&self) -> usize {
        match self.head {
            Head::DiagGaussian { dim } => dim,
            _ => 0,
        }
    }

    /// Parameter tensors in storage order.
    pub fn layout(&self) -> Vec<ParamSlot> {
        let dims = self.layer_dims();
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            slots.push(ParamSlot {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
        };
        for (i, w) in dims.windows(2).enumerate() {
            push(format!("layer{i}.weight"), vec![w[0], w[1]]);
            push(format!("layer{i}.bias"), vec![1, w[1]]);
        }
        if self.log_std_len() > 0 {
            push("log_std".into(), vec![1, self.log_std_len()]);
        }
        slots
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter snapshot. Shapes follow from the [`ModelSpec`] alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
    pub log_std: Option<Tensor>,
}

impl Params {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.log_std.iter())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.log_std.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape {
                op: "copy_from_flat",
                lhs: vec![self.len()],
                rhs: vec![flat.len()],
            });
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Params> {
        let mut p = Params::zeros(spec);
        p.copy_from_flat(flat)?;
        Ok(p)
    }

    pub fn zeros(spec: &ModelSpec) -> Params {
        let dims = spec.layer_dims();
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros([w[0], w[1]]),
                bias: Tensor::zeros([1, w[1]]),
            })
            .collect();
        let log_std = match spec.head {
            Head::DiagGaussian { dim } => Some(Tensor::zeros([1, dim])),
            _ => None,
        };
        Params { layers, log_std }
    }

    pub fn matches(&self, spec: &ModelSpec) -> bool {
        let dims = spec.layer_dims();
        self.layers.len() == dims.len() - 1
            && self
                .layers
                .iter()
                .zip(dims.windows(2))
                .all(|(l, w)| l.weight.shape() == [w[0], w[1]] && l.bias.shape() == [1, w[1]])
            && self.log_std.as_ref().map(Tensor::len) == Some(spec.log_std_len()).filter(|&n| n > 0)
    }

    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect();
        let log_std = self.log_std.as_ref().map(&mut put);
        Bound { layers, log_std }
    }
}

/// Parameters living on a tape, in the same order as [`Params::tensors`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub layers: Vec<(Var, Var)>,
    pub log_std: Option<Var>,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(self.log_std)
            .collect()
    }

    /// Flattened gradient in storage order.
    pub fn flat_grad(&self, grads: &crate::numcore::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.vars() {
            out.extend_from_slice(grads.wrt(v).data());
        }
        out
    }
}

/// What a network emits for a batch.
#[derive(Clone, Copy, Debug)]
pub enum NetOutput {
    Categorical {
        log_probs: Var,
        probs: Var,
        hidden: Option<Var>,
    },
    /// `log_std` is expanded to `[batch, dim]`.
    Gaussian {
        mean: Var,
        log_std: Var,
        hidden: Option<Var>,
    },
    Dense {
        out: Var,
        hidden: Option<Var>,
    },
}

impl NetOutput {
    pub fn hidden(&self) -> Option<Var> {
        match *self {
            NetOutput::Categorical { hidden, .. }
            | NetOutput::Gaussian { hidden, .. }
            | NetOutput::Dense { hidden, .. } => hidden,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NetOutput::Categorical { .. } => "categorical",
            NetOutput::Gaussian { .. } => "diag_gaussian",
            NetOutput::Dense { .. } => "dense",
        }
    }

    /// Categorical output from explicit probability rows. Zero entries get
    /// log-probability `ln(f64::MIN_POSITIVE)`, so `0 * log 0` evaluates to 0.
    pub fn from_probs(tape: &mut Tape, probs: Tensor) -> NetOutput {
        let logp = probs.map(|p| p.max(f64::MIN_POSITIVE).ln());
        NetOutput::Categorical {
            log_probs: tape.constant(logp),
            probs: tape.constant(probs),
            hidden: None,
        }
    }

    /// Gaussian output from explicit mean and std rows of equal shape.
    pub fn from_gaussian(tape: &mut Tape, mean: Tensor, std: Tensor) -> NetOutput {
        let log_std = std.map(f64::ln);
        NetOutput::Gaussian {
            mean: tape.constant(mean),
            log_std: tape.constant(log_std),
            hidden: None,
        }
    }
}

/// Runs the network on `x` (`[batch, input_dim]`). Passing a dropout rng
/// selects train mode; dropout applies to hidden activations only, with
/// inverted scaling.
pub fn forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &Bound,
    x: Var,
    dropout_rng: Option<&mut Rng>,
) -> Result<NetOutput> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != spec.input_dim {
        return Err(Error::Shape {
            op: "forward",
            lhs: xs,
            rhs: vec![0, spec.input_dim],
        });
    }
    let batch = xs[0];
    let mut rng = dropout_rng;
    let mut h = x;
    let n_layers = params.layers.len();
    for (i, &(w, b)) in params.layers.iter().take(n_layers - 1).enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        h = match spec.activation {
            Activation::Relu => tape.relu(z)?,
            Activation::Tanh => tape.tanh(z)?,
        };
        if let Some(r) = rng.as_deref_mut() {
            if spec.dropout > 0.0 {
                let keep = 1.0 - spec.dropout;
                let width = spec.hidden[i];
                let mut mask = Tensor::zeros([batch, width]);
                for m in mask.data_mut() {
                    *m = if r.bernoulli(keep) { 1.0 / keep } else { 0.0 };
                }
                let mask = tape.constant(mask);
                h = tape.mul(h, mask)?;
            }
        }
    }
    let hidden = (n_layers > 1).then_some(h);
    let (w, b) = params.layers[n_layers - 1];
    let z = tape.matmul(h, w)?;
    let z = tape.add(z, b)?;
    Ok(match spec.head {
        Head::Categorical { .. } => NetOutput::Categorical {
            log_probs: tape.log_softmax(z)?,
            probs: tape.softmax(z)?,
            hidden,
        },
        Head::DiagGaussian { dim } => {
            let ls = params
                .log_std
                .ok_or_else(|| Error::invalid("forward", "gaussian head without log_std"))?;
            let zeros = tape.constant(Tensor::zeros([batch, dim]));
            NetOutput::Gaussian {
                mean: z,
                log_std: tape.add(zeros, ls)?,
                hidden,
            }
        }
        Head::Dense { activation, .. } => NetOutput::Dense {
            out: match activation {
                OutputActivation::Identity => z,
                OutputActivation::Tanh => tape.tanh(z)?,
                OutputActivation::Sigmoid => tape.sigmoid(z)?,
            },
            hidden,
        },
    })
}

/// Fresh parameters. ReLU layers draw weights from `N(0, 2 / fan_in)`; tanh
/// and output layers from `U(±sqrt(6 / (fan_in + fan_out)))`. Biases and any
/// Gaussian log-std start at zero.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> Params {
    let dims = spec.layer_dims();
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let relu = i < last && spec.activation == Activation::Relu;
            let weight = if relu {
                rng.normal_tensor([fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut t = Tensor::zeros([fan_in, fan_out]);
                for v in t.data_mut() {
                    *v = limit * (2.0 * rng.uniform() - 1.0);
                }
                t
            };
            Layer {
                weight,
                bias: Tensor::zeros([1, fan_out]),
            }
        })
        .collect();
    let log_std = match spec.head {
        Head::DiagGaussian { dim } => Some(Tensor::zeros([1, dim])),
        _ => None,
    };
    Params { layers, log_std }
}

/// Result of [`reinit_params`]. Optimizer state tied to the old values is
/// stale; callers must reset it.
#[derive(Debug)]
#[must_use]
pub struct Reinitialized {
    pub params: Params,
    pub reset_optimizer: bool,
}

/// Discards `params` and draws new ones from `rng`'s next split.
pub fn reinit_params(params: Params, spec: &ModelSpec, rng: &mut Rng) -> Result<Reinitialized> {
    if !params.matches(spec) {
        return Err(Error::invalid("reinit_params", "parameters do not match spec"));
    }
    let mut child = rng.next_split("reinit");
    Ok(Reinitialized {
        params: init_params(spec, &mut child),
        reset_optimizer: true,
    })
}

/// A spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: Params,
}

/// Plain-tensor view of a [`NetOutput`].
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Probs(Tensor),
    Gaussian { mean: Tensor, std: Tensor },
    Dense(Tensor),
}

impl Network {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, rng);
        Ok(Network { spec, params })
    }

    /// Eval-mode forward pass returning plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = forward(&mut tape, &self.spec, &bound, xv, None)?;
        Ok(match out {
            NetOutput::Categorical { probs, .. } => Prediction::Probs(tape.value(probs).clone()),
            NetOutput::Gaussian { mean, log_std, .. } => Prediction::Gaussian {
                mean: tape.value(mean).clone(),
                std: tape.value(log_std).map(f64::exp),
            },
            NetOutput::Dense { out, .. } => Prediction::Dense(tape.value(out).clone()),
        })
    }

    /// Most likely action per row: argmax for categorical heads, the mean
    /// for Gaussian heads, the raw output for dense heads.
    pub fn mode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self.predict(x)? {
            Prediction::Probs(p) => {
                let data = (0..p.rows())
                    .map(|r| argmax(p.row_slice(r)) as f64)
                    .collect();
                Tensor::from_parts(vec![p.rows(), 1], data)
            }
            Prediction::Gaussian { mean, .. } => mean,
            Prediction::Dense(t) => t,
        })
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Row means of `|h|` for the activation loss; exported for diagnostics.
pub fn mean_abs(tape: &mut Tape, h: Var) -> Result<Var> {
    let a = tape.abs(h)?;
    let per_row = tape.mean_axis(a, Axis::Cols)?;
    tape.mean(per_row)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat_spec() -> ModelSpec {
        ModelSpec::new(2, &[8], Activation::Relu, Head::Categorical { classes: 3 })
    }

    #[test]
    fn shapes_follow_spec() {
        let p = init_params(&cat_spec(), &mut Rng::new(0));
        assert_eq!(p.layers[0].weight.shape(), &[2, 8]);
        assert_eq!(p.layers[1].weight.shape(), &[8, 3]);
        assert_eq!(p.layers[0].bias.shape(), &[1, 8]);
        assert_eq!(p.layers[1].bias.shape(), &[1, 3]);
        assert_eq!(p.len(), cat_spec().num_params());
        assert!(p.matches(&cat_spec()));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&cat_spec(), &mut Rng::new(4));
        let b = init_params(&cat_spec(), &mut Rng::new(4));
        assert_eq!(a, b);
    }

    #[test]
    fn relu_weight_variance() {
        let spec = ModelSpec::new(100, &[100], Activation::Relu, Head::Categorical { classes: 2 });
        let p = init_params(&spec, &mut Rng::new(9));
        let w = p.layers[0].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() / target < 0.1, "{var}");
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let spec = ModelSpec::new(3, &[5], Activation::Tanh, Head::Categorical { classes: 4 });
        let net = Network {
            params: Params::zeros(&spec),
            spec,
        };
        let Prediction::Probs(p) = net.predict(&Tensor::ones([2, 3])).unwrap() else {
            panic!()
        };
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gaussian_head_unit_std() {
        let spec = ModelSpec::new(2, &[4], Activation::Tanh, Head::DiagGaussian { dim: 3 });
        let net = Network::new(spec, &mut Rng::new(1)).unwrap();
        let Prediction::Gaussian { std, .. } = net.predict(&Tensor::ones([5, 2])).unwrap() else {
            panic!()
        };
        assert_eq!(std.shape(), &[5, 3]);
        assert!(std.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn dimension_mismatch() {
        let net = Network::new(cat_spec(), &mut Rng::new(1)).unwrap();
        assert!(net.predict(&Tensor::ones([2, 3])).is_err());
    }

    #[test]
    fn reinit_draws_fresh_values() {
        let spec = cat_spec();
        let mut rng = Rng::new(2);
        let old = init_params(&spec, &mut rng);
        let net_old = Network {
            spec: spec.clone(),
            params: old.clone(),
        };
        let r = reinit_params(old, &spec, &mut rng).unwrap();
        assert!(r.reset_optimizer);
        let net_new = Network {
            spec: spec.clone(),
            params: r.params,
        };
        let x = Rng::new(3).normal_tensor([4, 2], 1.0);
        assert_ne!(net_old.predict(&x).unwrap(), net_new.predict(&x).unwrap());
    }

    #[test]
    fn reinit_is_indexed_by_call() {
        let spec = cat_spec();
        let mut a = Rng::new(8);
        let mut b = Rng::new(8);
        b.uniform();
        let p = Params::zeros(&spec);
        let ra = reinit_params(p.clone(), &spec, &mut a).unwrap();
        let rb = reinit_params(p, &spec, &mut b).unwrap();
        assert_eq!(ra.params, rb.params);
    }

    #[test]
    fn flat_round_trip() {
        let spec = ModelSpec::new(3, &[4, 2], Activation::Relu, Head::DiagGaussian { dim: 2 });
        let p = init_params(&spec, &mut Rng::new(0));
        let q = Params::from_flat(&spec, &p.to_flat()).unwrap();
        assert_eq!(p, q);
        let layout = spec.layout();
        assert_eq!(layout.last().unwrap().name, "log_std");
        assert_eq!(layout.iter().map(|s| s.len).sum::<usize>(), spec.num_params());
    }

    #[test]
    fn dropout_preserves_expected_activation() {
        // Mean of the dropped hidden layer over many masks vs eval mode.
        let spec = ModelSpec::new(2, &[6], Activation::Relu, Head::Categorical { classes: 2 })
            .with_dropout(0.2);
        let params = init_params(&spec, &mut Rng::new(3));
        let x = Tensor::row(&[0.7, -0.3]);
        let hidden_of = |rng: Option<&mut Rng>| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = forward(&mut tape, &spec, &b, xv, rng).unwrap();
            tape.value(out.hidden().unwrap()).clone()
        };
        let eval = hidden_of(None);
        let mut rng = Rng::new(10);
        let n = 10_000;
        let mut sum = [0.0; 6];
        let mut sumsq = [0.0; 6];
        for _ in 0..n {
            let h = hidden_of(Some(&mut rng));
            for j in 0..6 {
                sum[j] += h.data()[j];
                sumsq[j] += h.data()[j].powi(2);
            }
        }
        for j in 0..6 {
            let m = sum[j] / n as f64;
            let sd = (sumsq[j] / n as f64 - m * m).max(0.0).sqrt();
            let se = sd / (n as f64).sqrt();
            assert!((m - eval.data()[j]).abs() <= 3.0 * se + 1e-12, "unit {j}: {m} vs {}", eval.data()[j]);
        }
    }
}
