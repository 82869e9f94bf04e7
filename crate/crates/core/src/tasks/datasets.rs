use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, n]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Generating mode of each row, for coverage metrics. `None` for real data.
    pub mode_ids: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_modes(&self) -> usize {
        self.mode_ids
            .as_ref()
            .and_then(|m| m.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            mode_ids: self.mode_ids.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    /// Writes `mode_id,label,f0..f{n-1}`; rows without a mode get -1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.dim();
        let mut out = String::from("mode_id,label");
        for j in 0..n {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            match &self.mode_ids {
                Some(m) => write!(out, "{}", m[i]).unwrap(),
                None => out.push_str("-1"),
            }
            write!(out, ",{}", self.labels[i]).unwrap();
            for v in self.features.row_slice(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn gaussian_modes(rng: &mut Rng, centers: &[Vec<f64>], classes: &[usize], sigma: f64, n_per_mode: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(centers.len() * n_per_mode * dim);
    let mut labels = Vec::new();
    let mut modes = Vec::new();
    for (m, c) in centers.iter().enumerate() {
        for _ in 0..n_per_mode {
            data.extend(c.iter().map(|x| x + sigma * rng.normal()));
            labels.push(classes[m]);
            modes.push(m);
        }
    }
    let features = Tensor::new([labels.len(), dim], data).expect("consistent shape");
    (features, labels, modes)
}

pub const QUADRANT_SIGMA: f64 = 0.3;

/// Quadrant toy: modes at `(+1,+1), (-1,+1), (-1,-1), (+1,-1)` with classes
/// `0, 1, 2, 2`. Mode ids follow the same order.
pub fn make_quadrant_toy(rng: &mut Rng, n_per_mode: usize) -> Result<Dataset> {
    if n_per_mode == 0 {
        return Err(Error::invalid("make_quadrant_toy", "n_per_mode must be at least 1"));
    }
    let centers = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]];
    let (features, labels, modes) = gaussian_modes(rng, &centers, &[0, 1, 2, 2], QUADRANT_SIGMA, n_per_mode);
    Ok(Dataset {
        features,
        labels,
        mode_ids: Some(modes),
        num_classes: 3,
        split: Split::Train,
    })
}

/// Quadrant index of a 2-D point using the toy's mode order.
pub fn quadrant_of(x: f64, y: f64) -> usize {
    match (x >= 0.0, y >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// Recipe for the mode-multiplicity sweep. Generating the train and test
/// splits from the same recipe and seed gives the same mode centers.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodeRecipe {
    pub centers: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub sigma: f64,
}

pub const MULTIMODE_SIGMA: f64 = 0.25;
const MIN_SEPARATION: f64 = 6.0;
const MAX_TRIES: usize = 10_000;

impl MultimodeRecipe {
    /// `2 * modes_per_class` centers drawn uniformly in `[-h, h]^dim`,
    /// rejection-sampled to be at least `6 sigma` apart; classes alternate.
    pub fn new(rng: &mut Rng, modes_per_class: usize, dim: usize, sigma: f64) -> Result<Self> {
        if !(1..=10).contains(&modes_per_class) {
            return Err(Error::invalid("make_multimode", "modes_per_class must be in 1..=10"));
        }
        if dim < 2 {
            return Err(Error::invalid("make_multimode", "dim must be at least 2"));
        }
        let total = 2 * modes_per_class;
        let min_d = MIN_SEPARATION * sigma;
        let mut half = 1.0;
        'grow: loop {
            let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total);
            let mut tries = 0;
            while centers.len() < total {
                tries += 1;
                if tries > MAX_TRIES {
                    log::warn!("multimode: no room for {total} centers in [-{half}, {half}]^{dim}, doubling");
                    half *= 2.0;
                    continue 'grow;
                }
                let c: Vec<f64> = (0..dim).map(|_| rng.uniform_open(-half, half)).collect();
                let ok = centers.iter().all(|o| {
                    o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_d
                });
                if ok {
                    centers.push(c);
                }
            }
            let classes = (0..total).map(|m| m % 2).collect();
            return Ok(MultimodeRecipe { centers, classes, sigma });
        }
    }

    pub fn sample(&self, rng: &mut Rng, n_per_mode: usize, split: Split) -> Dataset {
        let (features, labels, modes) = gaussian_modes(rng, &self.centers, &self.classes, self.sigma, n_per_mode);
        Dataset {
            features,
            labels,
            mode_ids: Some(modes),
            num_classes: 2,
            split,
        }
    }

    /// Nearest center to `x`.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let d = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.centers.len())
            .min_by(|&a, &b| d(&self.centers[a]).total_cmp(&d(&self.centers[b])))
            .unwrap_or(0)
    }

    pub fn min_center_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                let d: f64 = self.centers[i]
                    .iter()
                    .zip(&self.centers[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

pub fn make_multimode(rng: &mut Rng, modes_per_class: usize, dim: usize, n_per_mode: usize) -> Result<Dataset> {
    if n_per_mode == 0 {
        return Err(Error::invalid("make_multimode", "n_per_mode must be at least 1"));
    }
    let recipe = MultimodeRecipe::new(rng, modes_per_class, dim, MULTIMODE_SIGMA)?;
    Ok(recipe.sample(rng, n_per_mode, Split::Train))
}
