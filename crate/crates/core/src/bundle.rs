use ndarray::{Array1, Array2, Axis};

use crate::error::FomError;

/// `K` synchronized time series (solution and its first `K-1` time
/// derivatives) for one parameter value. Channel `k` is `N_t x N_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub theta: Vec<f64>,
    pub times: Vec<f64>,
    pub channels: Vec<Array2<f64>>,
}

impl TrajectoryBundle {
    pub fn new(theta: Vec<f64>, times: Vec<f64>, channels: Vec<Array2<f64>>) -> Result<Self, FomError> {
        let b = Self {
            theta,
            times,
            channels,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), FomError> {
        if self.channels.is_empty() {
            return Err(FomError::Setup("bundle has no channels".into()));
        }
        if self.times.first().is_some_and(|t| *t != 0.0) {
            return Err(FomError::Setup("times must start at 0".into()));
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(FomError::Setup("times must be non-decreasing".into()));
        }
        let n_u = self.channels[0].ncols();
        for (k, c) in self.channels.iter().enumerate() {
            if c.nrows() != self.times.len() || c.ncols() != n_u {
                return Err(FomError::Setup(format!(
                    "channel {k} has shape {:?}, expected ({}, {n_u})",
                    c.dim(),
                    self.times.len()
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    pub fn n_u(&self) -> usize {
        self.channels[0].ncols()
    }

    /// Number of stored frames (`N_t + 1` in interval terms).
    pub fn frame_count(&self) -> usize {
        self.times.len()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Frame `j` of every channel.
    pub fn initial_channels(&self) -> Vec<Array1<f64>> {
        self.channels.iter().map(|c| c.row(0).to_owned()).collect()
    }

    /// Every `stride`-th frame, always keeping the last one.
    pub fn subsample(&self, stride: usize) -> Self {
        let idx = stride_indices(self.times.len(), stride);
        Self {
            theta: self.theta.clone(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            channels: self.channels.iter().map(|c| c.select(Axis(0), &idx)).collect(),
        }
    }

    /// Piecewise-linear interpolation of channel `k` at time `t` (clamped to
    /// the stored range).
    pub fn interpolate(&self, k: usize, t: f64) -> Array1<f64> {
        let (lo, hi, w) = bracket(&self.times, t);
        let c = &self.channels[k];
        if w == 0.0 {
            return c.row(lo).to_owned();
        }
        &c.row(lo) * (1.0 - w) + &c.row(hi) * w
    }
}

/// Indices `0, s, 2s, ...` plus the final index.
pub fn stride_indices(n: usize, stride: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    idx
}

/// `(lo, hi, w)` with `t ≈ (1-w) times[lo] + w times[hi]`.
pub fn bracket(times: &[f64], t: f64) -> (usize, usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = times.partition_point(|&x| x <= t);
    let lo = hi - 1;
    let span = times[hi] - times[lo];
    let w = if span > 0.0 { (t - times[lo]) / span } else { 0.0 };
    (lo, hi, w)
}

/// Population standard deviation of every entry.
pub fn std_all(a: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = a.sum() / n;
    (a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
