#![allow(dead_code)]

use hlasdi::bundle::TrajectoryBundle;
use hlasdi::fom::{ParameterFamily, ParameterRange};
use hlasdi::FomError;
use ndarray::{Array1, Array2};

/// Two damped oscillators `z'' + 2γ z' + κ_m z = 0` (κ_1 = κ, κ_2 = 2.25κ),
/// `θ = (κ, γ)`, observed through a fixed affine lift `u = P z + q` with
/// `u_t = P z'`. The latent coefficients are linear in `θ`.
#[derive(Debug, Clone)]
pub struct LiftedOscillators {
    pub n_u: usize,
    pub frames: usize,
    pub t_final: f64,
    pub range: ParameterRange,
}

impl Default for LiftedOscillators {
    fn default() -> Self {
        Self {
            n_u: 8,
            frames: 81,
            t_final: 2.0,
            range: ParameterRange::new([0.9, 0.05], [1.1, 0.15]),
        }
    }
}

const Z0: [f64; 2] = [1.0, 0.5];
const V0: [f64; 2] = [0.0, 0.3];

/// Position and velocity of `z'' + 2γ z' + ω² z = 0` at `t`.
pub fn damped(omega: f64, gamma: f64, z0: f64, v0: f64, t: f64) -> (f64, f64) {
    let wd = (omega * omega - gamma * gamma).sqrt();
    let a = z0;
    let b = (v0 + gamma * z0) / wd;
    let e = (-gamma * t).exp();
    let (s, c) = (wd * t).sin_cos();
    let z = e * (a * c + b * s);
    let dz = e * (-gamma * (a * c + b * s) + wd * (-a * s + b * c));
    (z, dz)
}

impl LiftedOscillators {
    pub fn lift(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_u, 2), |(i, m)| {
            let x = 0.7 * i as f64;
            if m == 0 { x.cos() } else { x.sin() + 0.3 }
        })
    }

    pub fn offset(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.n_u, |i| 0.1 * i as f64)
    }

    pub fn latent(&self, theta: &[f64], t: f64) -> ([f64; 2], [f64; 2]) {
        let (w, g) = (theta[0].sqrt(), theta[1]);
        let (z1, d1) = damped(w, g, Z0[0], V0[0], t);
        let (z2, d2) = damped(1.5 * w, g, Z0[1], V0[1], t);
        ([z1, z2], [d1, d2])
    }

    fn frame(&self, theta: &[f64], t: f64) -> (Array1<f64>, Array1<f64>) {
        let (z, dz) = self.latent(theta, t);
        let p = self.lift();
        let u = p.dot(&Array1::from(z.to_vec())) + self.offset();
        let v = p.dot(&Array1::from(dz.to_vec()));
        (u, v)
    }
}

impl ParameterFamily for LiftedOscillators {
    fn name(&self) -> &'static str {
        "lifted_oscillators"
    }

    fn range(&self) -> ParameterRange {
        self.range.clone()
    }

    fn k(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn times(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|j| self.t_final * j as f64 / (self.frames - 1) as f64)
            .collect()
    }

    fn initial_channels(&self, theta: &[f64]) -> Result<Vec<Array1<f64>>, FomError> {
        let (u, v) = self.frame(theta, 0.0);
        Ok(vec![u, v])
    }

    fn solve(&self, theta: &[f64]) -> Result<TrajectoryBundle, FomError> {
        let times = self.times();
        let mut u = Array2::zeros((times.len(), self.n_u));
        let mut v = Array2::zeros((times.len(), self.n_u));
        for (j, t) in times.iter().enumerate() {
            let (a, b) = self.frame(theta, *t);
            u.row_mut(j).assign(&a);
            v.row_mut(j).assign(&b);
        }
        TrajectoryBundle::new(theta.to_vec(), times, vec![u, v])
    }
}
