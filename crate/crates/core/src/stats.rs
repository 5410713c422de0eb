//! Streaming mean / variance accumulation.

use serde::{Deserialize, Serialize};

/// Welford accumulator for the mean and variance of a stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    /// Combines two accumulators (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += delta * nb / total as f64;
        self.m2 += other.m2 + delta * delta * na * nb / total as f64;
        self.count = total;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut stats = RunningStats::new();
        for v in iter {
            stats.push(v);
        }
        stats
    }
}

/// Batch-means estimator for the standard error of a correlated sequence
/// (Markov chain output). Values are grouped into `batches` contiguous
/// blocks; the spread of the block means drives the error estimate.
#[derive(Clone, Debug)]
pub struct BatchMeans {
    batch_len: usize,
    current: RunningStats,
    means: RunningStats,
    overall: RunningStats,
}

impl BatchMeans {
    pub fn new(total: usize, batches: usize) -> Self {
        let batches = batches.max(2);
        Self {
            batch_len: (total / batches).max(1),
            current: RunningStats::new(),
            means: RunningStats::new(),
            overall: RunningStats::new(),
        }
    }

    pub fn push(&mut self, value: f64) {
        self.overall.push(value);
        self.current.push(value);
        if self.current.count() as usize == self.batch_len {
            self.means.push(self.current.mean());
            self.current = RunningStats::new();
        }
    }

    pub fn mean(&self) -> f64 {
        self.overall.mean()
    }

    /// Standard error assuming independent observations.
    pub fn iid_std_error(&self) -> f64 {
        self.overall.std_error()
    }

    /// The larger of the batch-means and the i.i.d. standard errors.
    pub fn std_error(&self) -> f64 {
        let iid = self.overall.std_error();
        if self.means.count() < 2 {
            return iid;
        }
        self.means.std_error().max(iid)
    }
}
