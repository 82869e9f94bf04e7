use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Streaming per-dimension mean and sum of squared deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        RunningMoments {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges the statistics of `batch` rows (parallel update).
    pub fn update(&mut self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(Error::Shape {
                op: "moments_update",
                lhs: vec![self.dim()],
                rhs: batch.shape().to_vec(),
            });
        }
        let n = batch.rows() as f64;
        let d = self.dim();
        let mut bmean = vec![0.0; d];
        for r in 0..batch.rows() {
            for (m, x) in bmean.iter_mut().zip(batch.row_slice(r)) {
                *m += x;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bm2 = vec![0.0; d];
        for r in 0..batch.rows() {
            for ((s, x), m) in bm2.iter_mut().zip(batch.row_slice(r)).zip(&bmean) {
                *s += (x - m) * (x - m);
            }
        }
        self.merge(&RunningMoments {
            count: n,
            mean: bmean,
            m2: bm2,
        });
        Ok(())
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let total = self.count + other.count;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / total;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0.0 {
            return vec![0.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    /// Per-dimension std used for normalization: 1 until two samples exist,
    /// then `max(sqrt(var), 1e-8)`.
    pub fn std(&self) -> Vec<f64> {
        if self.count < 2.0 {
            return vec![1.0; self.dim()];
        }
        self.variance().iter().map(|v| v.sqrt().max(1e-8)).collect()
    }

    pub fn normalize(&self, obs: &Tensor) -> Result<Tensor> {
        if obs.cols() != self.dim() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: vec![self.dim()],
                rhs: obs.shape().to_vec(),
            });
        }
        let std = self.std();
        let d = self.dim();
        let mut out = obs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / std[j];
        }
        Ok(out)
    }

    pub fn normalize_row(&self, obs: &[f64]) -> Vec<f64> {
        let std = self.std();
        obs.iter()
            .zip(&self.mean)
            .zip(&std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn single_observation() {
        let mut m = RunningMoments::new(3);
        let x = Tensor::row(&[1.5, -2.0, 0.25]);
        m.update(&x).unwrap();
        assert_eq!(m.mean, vec![1.5, -2.0, 0.25]);
        assert_eq!(m.normalize(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_equals_sequential() {
        let mut rng = Rng::new(1);
        let data = rng.normal_tensor([40, 3], 2.0);
        let mut batched = RunningMoments::new(3);
        batched.update(&data.slice_rows(0, 25).unwrap()).unwrap();
        batched.update(&data.slice_rows(25, 40).unwrap()).unwrap();

        // brute force over all rows at once
        let n = 40.0;
        for j in 0..3 {
            let col: Vec<f64> = (0..40).map(|r| data.get2(r, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let m2: f64 = col.iter().map(|x| (x - mean).powi(2)).sum();
            assert!((batched.mean[j] - mean).abs() < 1e-12);
            assert!((batched.m2[j] - m2).abs() < 1e-10);
        }

        let mut seq = RunningMoments::new(3);
        for r in 0..40 {
            seq.update(&data.slice_rows(r, r + 1).unwrap()).unwrap();
        }
        for j in 0..3 {
            assert!((seq.mean[j] - batched.mean[j]).abs() < 1e-12);
            assert!((seq.m2[j] - batched.m2[j]).abs() < 1e-10);
        }
        assert_eq!(seq.count, 40.0);
    }

    #[test]
    fn normalize_is_affine() {
        let mut rng = Rng::new(2);
        let mut m = RunningMoments::new(2);
        m.update(&rng.normal_tensor([10, 2], 1.0)).unwrap();
        let x = Tensor::row(&[0.3, -1.2]);
        let y = Tensor::row(&[2.0 * 0.3 + 1.0, 2.0 * -1.2 + 1.0]);
        let nx = m.normalize(&x).unwrap();
        let ny = m.normalize(&y).unwrap();
        let std = m.std();
        for j in 0..2 {
            let expected = 2.0 * nx.data()[j] + (1.0 + m.mean[j]) / std[j];
            assert!((ny.data()[j] - expected).abs() < 1e-12);
        }
    }
}
