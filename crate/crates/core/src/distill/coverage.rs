use crate::numcore::Tensor;

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Running count of generated samples by nearest true mode center.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCounter {
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
}

impl CoverageCounter {
    pub fn new(centers: Vec<Vec<f64>>) -> Self {
        let counts = vec![0; centers.len()];
        CoverageCounter { centers, counts }
    }

    pub fn add(&mut self, x: &Tensor) {
        for r in 0..x.rows() {
            self.counts[nearest(&self.centers, x.row_slice(r))] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of samples per mode; all zeros before any sample arrives.
    pub fn shares(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Share of `x`'s rows nearest to each center.
pub fn mode_coverage(x: &Tensor, centers: &[Vec<f64>]) -> Vec<f64> {
    let mut c = CoverageCounter::new(centers.to_vec());
    c.add(x);
    c.shares()
}
