//! Gaussian-process regression with a Matérn ν = 3/2 kernel, one independent
//! model per latent coefficient component.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::GpError;
use crate::latent::LatentCoefficients;

pub const JITTER: f64 = 1e-8;
pub const DEFAULT_SAMPLES: usize = 20;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `(1 + √3 d / l) exp(-√3 d / l)` with `d` the Euclidean distance.
pub fn matern_kernel(x: &[f64], y: &[f64], length_scale: f64) -> f64 {
    let d = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    matern_of_distance(d, length_scale)
}

pub fn matern_of_distance(d: f64, length_scale: f64) -> f64 {
    let r = SQRT3 * d / length_scale;
    (1.0 + r) * (-r).exp()
}

/// The 25 log-spaced candidate length scales from 1e-2 to 1e2.
pub fn length_scale_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / 24.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpOptions {
    /// Standardize inputs per dimension and targets before fitting.
    pub standardize: bool,
    /// Fixed length scale; `None` selects it by marginal likelihood.
    pub length_scale: Option<f64>,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            length_scale: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    x_shift: Vec<f64>,
    x_scale: Vec<f64>,
    y_shift: f64,
    y_scale: f64,
    /// Standardized inputs.
    z: Vec<Vec<f64>>,
    pub length_scale: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    pub log_marginal_likelihood: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

struct Factor {
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
}

fn factor(z: &[Vec<f64>], y: &DVector<f64>, l: f64) -> Option<Factor> {
    let n = z.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern_kernel(&z[i], &z[j], l);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += JITTER;
    }
    let ch = k.cholesky()?;
    let alpha = ch.solve(y);
    let chol = ch.l();
    let log_det: f64 = (0..n).map(|i| chol[(i, i)].ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Some(Factor { chol, alpha, lml })
}

impl GpModel {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Result<Self, GpError> {
        Self::fit_with(inputs, targets, GpOptions::default())
    }

    pub fn fit_with(inputs: &[Vec<f64>], targets: &[f64], opts: GpOptions) -> Result<Self, GpError> {
        if inputs.len() != targets.len() {
            return Err(GpError::Dimension {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(GpError::NonFiniteTarget);
        }
        let dim = inputs.first().map_or(0, Vec::len);
        if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
            return Err(GpError::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        // Collapse exact duplicates; conflicting ones cannot be interpolated.
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for (x, &y) in inputs.iter().zip(targets) {
            match xs.iter().position(|p| p == x) {
                Some(i) if ys[i] != y => return Err(GpError::Conditioning),
                Some(_) => {}
                None => {
                    xs.push(x.clone());
                    ys.push(y);
                }
            }
        }
        if xs.len() < 2 {
            return Err(GpError::TooFewPoints(xs.len()));
        }

        let (x_shift, x_scale, y_shift, y_scale) = if opts.standardize {
            let mut sh = Vec::with_capacity(dim);
            let mut sc = Vec::with_capacity(dim);
            for d in 0..dim {
                let (m, s) = mean_std(xs.iter().map(|x| x[d]));
                sh.push(m);
                sc.push(if s > 0.0 { s } else { 1.0 });
            }
            // Constant targets keep a zero output scale: the posterior is
            // then the constant with no variance.
            let (m, s) = mean_std(ys.iter().copied());
            (sh, sc, m, s)
        } else {
            (vec![0.0; dim], vec![1.0; dim], 0.0, 1.0)
        };
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| (0..dim).map(|d| (x[d] - x_shift[d]) / x_scale[d]).collect())
            .collect();
        let fit_scale = if y_scale > 0.0 { y_scale } else { 1.0 };
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| (v - y_shift) / fit_scale));

        let candidates = match opts.length_scale {
            Some(l) if l > 0.0 => vec![l],
            Some(_) => return Err(GpError::NotPositiveDefinite),
            None => length_scale_grid(),
        };
        let mut best: Option<(f64, Factor)> = None;
        for l in candidates {
            if let Some(f) = factor(&z, &y, l) {
                if best.as_ref().is_none_or(|(_, b)| f.lml > b.lml) {
                    best = Some((l, f));
                }
            }
        }
        let (length_scale, f) = best.ok_or(GpError::NotPositiveDefinite)?;
        Ok(Self {
            inputs: xs,
            targets: ys,
            x_shift,
            x_scale,
            y_shift,
            y_scale,
            z,
            length_scale,
            chol: f.chol,
            alpha: f.alpha,
            log_marginal_likelihood: f.lml,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn cross(&self, theta: &[f64]) -> DVector<f64> {
        let q: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(d, v)| (v - self.x_shift[d]) / self.x_scale[d])
            .collect();
        DVector::from_iterator(self.z.len(), self.z.iter().map(|x| matern_kernel(x, &q, self.length_scale)))
    }

    /// Posterior mean and variance (variance clamped at zero).
    pub fn posterior(&self, theta: &[f64]) -> Result<(f64, f64), GpError> {
        if theta.len() != self.x_shift.len() {
            return Err(GpError::Dimension {
                expected: self.x_shift.len(),
                got: theta.len(),
            });
        }
        let ks = self.cross(theta);
        let mean = self.y_shift + self.y_scale * ks.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        // At a training input the residual is at most the jitter itself.
        let r = 1.0 - v.dot(&v);
        let r = if r <= 2.0 * JITTER { 0.0 } else { r };
        let var = r * self.y_scale * self.y_scale;
        Ok((mean, var))
    }
}

/// Serializable form of a fitted model: refitting with the stored length
/// scale reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub length_scale: f64,
}

/// One GP per coefficient component, in [`LatentCoefficients::to_vec`] order.
#[derive(Debug, Clone)]
pub struct GpEnsemble {
    pub k: usize,
    pub latent_dim: usize,
    pub models: Vec<GpModel>,
}

impl GpEnsemble {
    pub fn fit(inputs: &[Vec<f64>], table: &[LatentCoefficients]) -> Result<Self, GpError> {
        Self::fit_with(inputs, table, GpOptions::default())
    }

    pub fn fit_with(inputs: &[Vec<f64>], table: &[LatentCoefficients], opts: GpOptions) -> Result<Self, GpError> {
        let first = table.first().ok_or(GpError::TooFewPoints(0))?;
        let (k, l) = (first.k(), first.latent_dim());
        let flat: Vec<Vec<f64>> = table.iter().map(LatentCoefficients::to_vec).collect();
        let n = first.component_count();
        let models = (0..n)
            .map(|c| {
                let y: Vec<f64> = flat.iter().map(|v| v[c]).collect();
                GpModel::fit_with(inputs, &y, opts)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            k,
            latent_dim: l,
            models,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    fn assemble(&self, v: &[f64]) -> LatentCoefficients {
        LatentCoefficients::from_slice(self.k, self.latent_dim, v).expect("component count")
    }

    /// Posterior means and variances, each shaped as coefficients.
    pub fn posterior(&self, theta: &[f64]) -> Result<(LatentCoefficients, LatentCoefficients), GpError> {
        let mut means = Vec::with_capacity(self.len());
        let mut vars = Vec::with_capacity(self.len());
        for m in &self.models {
            let (mu, var) = m.posterior(theta)?;
            means.push(mu);
            vars.push(var);
        }
        Ok((self.assemble(&means), self.assemble(&vars)))
    }

    pub fn mean(&self, theta: &[f64]) -> Result<LatentCoefficients, GpError> {
        Ok(self.posterior(theta)?.0)
    }

    /// `n_samples` independent draws of every component.
    pub fn sample(&self, theta: &[f64], n_samples: usize, seed: u64) -> Result<Vec<LatentCoefficients>, GpError> {
        let (mean, var) = self.posterior(theta)?;
        let (mean, var) = (mean.to_vec(), var.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n_samples)
            .map(|_| {
                let v: Vec<f64> = mean
                    .iter()
                    .zip(&var)
                    .map(|(m, s2)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + s2.sqrt() * e
                    })
                    .collect();
                self.assemble(&v)
            })
            .collect())
    }

    pub fn snapshots(&self) -> Vec<GpSnapshot> {
        self.models
            .iter()
            .map(|m| GpSnapshot {
                inputs: m.inputs.clone(),
                targets: m.targets.clone(),
                length_scale: m.length_scale,
            })
            .collect()
    }

    pub fn from_snapshots(k: usize, latent_dim: usize, snaps: &[GpSnapshot]) -> Result<Self, GpError> {
        if snaps.len() != latent_dim * (k * latent_dim + 1) {
            return Err(GpError::Dimension {
                expected: latent_dim * (k * latent_dim + 1),
                got: snaps.len(),
            });
        }
        let models = snaps
            .iter()
            .map(|s| {
                GpModel::fit_with(
                    &s.inputs,
                    &s.targets,
                    GpOptions {
                        standardize: true,
                        length_scale: Some(s.length_scale),
                    },
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            k,
            latent_dim,
            models,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(matern_kernel(&[0.3, 0.4], &[0.3, 0.4], 0.7), 1.0);
        let at_l = matern_of_distance(2.0, 2.0);
        assert!((at_l - (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp()).abs() < 1e-15);
        assert!((at_l - 0.48335).abs() < 1e-5);
        let mut prev = 1.0;
        for i in 1..100 {
            let v = matern_of_distance(i as f64 * 0.2, 1.0);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(matern_of_distance(1e3, 1.0) < 1e-100);
    }

    #[test]
    fn grid_spans_four_decades() {
        let g = length_scale_grid();
        assert_eq!(g.len(), 25);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[24] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let m = GpModel::fit(&[vec![0.0], vec![1.0]], &[0.0, 0.0]).unwrap();
        for q in [-3.0, 0.2, 0.5, 7.0] {
            assert_eq!(m.posterior(&[q]).unwrap().0, 0.0);
        }
    }

    #[test]
    fn interpolates_training_points() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, (i as f64).sin()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * 2.0 - x[1]).collect();
        let m = GpModel::fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (mu, var) = m.posterior(x).unwrap();
            assert!((mu - y).abs() < 1e-6);
            assert!(var <= 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            GpModel::fit(&[vec![1.0], vec![1.0]], &[0.0, 1.0]).unwrap_err(),
            GpError::Conditioning
        );
        assert_eq!(
            GpModel::fit(&[vec![1.0], vec![1.0]], &[2.0, 2.0]).unwrap_err(),
            GpError::TooFewPoints(1)
        );
        assert_eq!(
            GpModel::fit(&[vec![1.0], vec![2.0]], &[f64::NAN, 2.0]).unwrap_err(),
            GpError::NonFiniteTarget
        );
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let m = GpModel::fit(&[vec![0.0], vec![1.0], vec![2.0]], &[1.0, 3.0, 2.0]).unwrap();
        let (mu, var) = m.posterior(&[1e6]).unwrap();
        assert!((mu - 2.0).abs() < 1e-9);
        let prior = 2.0 / 3.0;
        assert!((var - prior).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_samples_equal_mean() {
        let xs = vec![vec![0.0], vec![1.0]];
        let table = vec![LatentCoefficients::zeros(1, 1), LatentCoefficients::zeros(1, 1)];
        let e = GpEnsemble::fit(&xs, &table).unwrap();
        assert_eq!(e.len(), 2);
        let s = e.sample(&[0.0], DEFAULT_SAMPLES, 3).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|c| c.to_vec().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn snapshot_round_trip() {
        let xs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let table: Vec<LatentCoefficients> = (0..4)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|c| ((i * 6 + c) as f64 * 0.37).sin()).collect();
                LatentCoefficients::from_slice(1, 2, &v).unwrap()
            })
            .collect();
        let e = GpEnsemble::fit(&xs, &table).unwrap();
        let r = GpEnsemble::from_snapshots(1, 2, &e.snapshots()).unwrap();
        let q = [1.3, 2.2];
        assert_eq!(e.posterior(&q).unwrap(), r.posterior(&q).unwrap());
    }
}
