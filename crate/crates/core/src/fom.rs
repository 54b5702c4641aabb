//! Full-order solvers for the benchmark families on structured grids.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TrajectoryBundle;
use crate::error::FomError;

/// Closed rectangle of admissible parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRange {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl ParameterRange {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == 2 && (0..2).all(|d| theta[d] >= self.lower[d] && theta[d] <= self.upper[d])
    }

    /// `n1 x n2` tensor grid, first coordinate varying slowest.
    pub fn grid(&self, n1: usize, n2: usize) -> Vec<Vec<f64>> {
        let axis = |d: usize, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![self.lower[d]];
            }
            (0..n)
                .map(|i| self.lower[d] + (self.upper[d] - self.lower[d]) * i as f64 / (n - 1) as f64)
                .collect()
        };
        let (a, b) = (axis(0, n1), axis(1, n2));
        a.iter().flat_map(|x| b.iter().map(move |y| vec![*x, *y])).collect()
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        self.grid(2, 2)
    }
}

/// A parameterized PDE family whose solutions the reduced model learns.
pub trait ParameterFamily: Send + Sync {
    fn name(&self) -> &'static str;
    /// Nominal parameter rectangle.
    fn range(&self) -> ParameterRange;
    /// Number of stored time-derivative channels.
    fn k(&self) -> usize;
    /// Number of observed spatial components.
    fn n_u(&self) -> usize;
    fn times(&self) -> Vec<f64>;
    /// The initial channels on the observation nodes, evaluated without
    /// running the solver.
    fn initial_channels(&self, theta: &[f64]) -> Result<Vec<Array1<f64>>, FomError>;
    fn solve(&self, theta: &[f64]) -> Result<TrajectoryBundle, FomError>;
}

fn check_theta(theta: &[f64]) -> Result<(), FomError> {
    if theta.len() != 2 || theta.iter().any(|v| !v.is_finite()) {
        return Err(FomError::Setup(format!("expected two finite parameters, got {theta:?}")));
    }
    Ok(())
}

fn warn_range(name: &str, range: &ParameterRange, theta: &[f64]) {
    if !range.contains(theta) {
        log::warn!("{name}: parameter {theta:?} outside nominal range {range:?}");
    }
}

fn uniform_times(t_final: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|j| t_final * j as f64 / steps as f64).collect()
}

/// Fourth-order time derivative of a uniformly sampled series: five-point
/// central differences inside, five-point one-sided near the ends.
pub fn fourth_order_time_derivative(u: &Array2<f64>, dt: f64) -> Result<Array2<f64>, FomError> {
    let n = u.nrows();
    if n < 5 {
        return Err(FomError::Setup(format!("need at least 5 frames, got {n}")));
    }
    let mut v = Array2::zeros(u.dim());
    let comb = |v: &mut Array2<f64>, j: usize, idx: [usize; 5], c: [f64; 5]| {
        let mut row = v.row_mut(j);
        for (i, ci) in idx.iter().zip(c) {
            row.scaled_add(ci / (12.0 * dt), &u.row(*i));
        }
    };
    const START0: [f64; 5] = [-25.0, 48.0, -36.0, 16.0, -3.0];
    const START1: [f64; 5] = [-3.0, -10.0, 18.0, -6.0, 1.0];
    comb(&mut v, 0, [0, 1, 2, 3, 4], START0);
    comb(&mut v, 1, [0, 1, 2, 3, 4], START1);
    for j in 2..n - 2 {
        comb(&mut v, j, [j - 2, j - 1, j + 1, j + 2, j + 2], [1.0, -8.0, 8.0, -1.0, 0.0]);
    }
    let neg = |c: [f64; 5]| [-c[4], -c[3], -c[2], -c[1], -c[0]];
    comb(&mut v, n - 2, [n - 5, n - 4, n - 3, n - 2, n - 1], neg(START1));
    comb(&mut v, n - 1, [n - 5, n - 4, n - 3, n - 2, n - 1], neg(START0));
    Ok(v)
}

/// `u_t = -u u_x` on `[-3, 3]`, forward Euler in time, centered differences
/// in space, edges held at their initial values. `θ = (a, w)`,
/// `u(0, x) = cos(π w x) exp(-a x²)`. The second channel is `u_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burgers1d {
    pub points: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub t_final: f64,
    pub steps: usize,
    pub range: ParameterRange,
}

impl Default for Burgers1d {
    fn default() -> Self {
        Self {
            points: 1001,
            x_min: -3.0,
            x_max: 3.0,
            t_final: 1.0,
            steps: 500,
            range: ParameterRange::new([0.45, 0.18], [0.55, 0.22]),
        }
    }
}

impl Burgers1d {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.points - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn grid(&self) -> Array1<f64> {
        Array1::linspace(self.x_min, self.x_max, self.points)
    }

    pub fn initial(&self, theta: &[f64]) -> Array1<f64> {
        let (a, w) = (theta[0], theta[1]);
        self.grid().mapv(|x| (PI * w * x).cos() * (-a * x * x).exp())
    }

    /// `-u δu` with centered differences; zero at the clamped edges.
    fn rhs(&self, u: &Array1<f64>, out: &mut Array1<f64>) {
        let n = u.len();
        let inv = 1.0 / (2.0 * self.dx());
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for i in 1..n - 1 {
            out[i] = -u[i] * (u[i + 1] - u[i - 1]) * inv;
        }
    }

    /// Displacement series only (`N_t x N_u`).
    pub fn solve_displacement(&self, theta: &[f64]) -> Result<Array2<f64>, FomError> {
        check_theta(theta)?;
        if self.points < 3 || self.steps < 4 {
            return Err(FomError::Setup("grid too small".into()));
        }
        warn_range("burgers1d", &self.range, theta);
        let mut u = self.initial(theta);
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let courant = umax * self.dt() / self.dx();
        if courant > 1.0 {
            return Err(FomError::Stability(format!("advective Courant number {courant:.3} > 1")));
        }
        let mut out = Array2::zeros((self.steps + 1, self.points));
        out.row_mut(0).assign(&u);
        let mut f = Array1::zeros(self.points);
        let dt = self.dt();
        for j in 1..=self.steps {
            self.rhs(&u, &mut f);
            u.scaled_add(dt, &f);
            out.row_mut(j).assign(&u);
        }
        Ok(out)
    }
}

impl ParameterFamily for Burgers1d {
    fn range(&self) -> ParameterRange {
        self.range.clone()
    }

    fn name(&self) -> &'static str {
        "burgers1d"
    }

    fn k(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        self.points
    }

    fn times(&self) -> Vec<f64> {
        uniform_times(self.t_final, self.steps)
    }

    fn initial_channels(&self, theta: &[f64]) -> Result<Vec<Array1<f64>>, FomError> {
        check_theta(theta)?;
        let u = self.initial(theta);
        let mut v = Array1::zeros(self.points);
        self.rhs(&u, &mut v);
        Ok(vec![u, v])
    }

    fn solve(&self, theta: &[f64]) -> Result<TrajectoryBundle, FomError> {
        let u = self.solve_displacement(theta)?;
        let v = fourth_order_time_derivative(&u, self.dt())?;
        TrajectoryBundle::new(theta.to_vec(), self.times(), vec![u, v])
    }
}

/// `u_t = -u u_x + ν Δu` on `[-2, 2]²`, forward Euler, centered
/// differences, Dirichlet boundaries fixed at the initial values.
/// `θ = (k, ν)`, `u(0) = exp(-k r²) sin(π ω x) sin(π ω y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burgers2d {
    /// Points per axis (boundaries included).
    pub points: usize,
    pub half_width: f64,
    pub t_final: f64,
    pub steps: usize,
    pub omega: f64,
    pub range: ParameterRange,
}

impl Default for Burgers2d {
    fn default() -> Self {
        Self {
            points: 31,
            half_width: 2.0,
            t_final: 2.0,
            steps: 500,
            omega: 0.5,
            range: ParameterRange::new([0.45, 0.009], [0.55, 0.011]),
        }
    }
}

impl Burgers2d {
    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn axis(&self) -> Array1<f64> {
        Array1::linspace(-self.half_width, self.half_width, self.points)
    }

    /// Row-major over `(x, y)`: component `i * n + j` is `(x_i, y_j)`.
    pub fn initial(&self, theta: &[f64]) -> Array1<f64> {
        let k = theta[0];
        let ax = self.axis();
        let n = self.points;
        Array1::from_shape_fn(n * n, |p| {
            let (x, y) = (ax[p / n], ax[p % n]);
            (-k * (x * x + y * y)).exp() * (PI * self.omega * x).sin() * (PI * self.omega * y).sin()
        })
    }

    fn rhs(&self, u: &Array1<f64>, nu: f64, out: &mut Array1<f64>) {
        let n = self.points;
        let h = self.dx();
        let (inv2h, invh2) = (1.0 / (2.0 * h), 1.0 / (h * h));
        out.fill(0.0);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let p = i * n + j;
                let ux = (u[p + n] - u[p - n]) * inv2h;
                let lap = (u[p + n] + u[p - n] + u[p + 1] + u[p - 1] - 4.0 * u[p]) * invh2;
                out[p] = -u[p] * ux + nu * lap;
            }
        }
    }
}

impl ParameterFamily for Burgers2d {
    fn range(&self) -> ParameterRange {
        self.range.clone()
    }

    fn name(&self) -> &'static str {
        "burgers2d"
    }

    fn k(&self) -> usize {
        1
    }

    fn n_u(&self) -> usize {
        self.points * self.points
    }

    fn times(&self) -> Vec<f64> {
        uniform_times(self.t_final, self.steps)
    }

    fn initial_channels(&self, theta: &[f64]) -> Result<Vec<Array1<f64>>, FomError> {
        check_theta(theta)?;
        Ok(vec![self.initial(theta)])
    }

    fn solve(&self, theta: &[f64]) -> Result<TrajectoryBundle, FomError> {
        check_theta(theta)?;
        if self.points < 3 || self.steps == 0 {
            return Err(FomError::Setup("grid too small".into()));
        }
        warn_range("burgers2d", &self.range, theta);
        let nu = theta[1];
        let (dt, h) = (self.dt(), self.dx());
        let mut u = self.initial(theta);
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diffusive = if nu > 0.0 { h * h / (4.0 * nu) } else { f64::INFINITY };
        let advective = if umax > 0.0 { h / umax } else { f64::INFINITY };
        if nu < 0.0 || dt > diffusive || dt > advective {
            return Err(FomError::Stability(format!(
                "dt={dt} exceeds diffusive bound {diffusive} or advective bound {advective}"
            )));
        }
        let mut out = Array2::zeros((self.steps + 1, self.n_u()));
        out.row_mut(0).assign(&u);
        let mut f = Array1::zeros(self.n_u());
        for j in 1..=self.steps {
            self.rhs(&u, nu, &mut f);
            u.scaled_add(dt, &f);
            out.row_mut(j).assign(&u);
        }
        TrajectoryBundle::new(theta.to_vec(), self.times(), vec![out])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveKind {
    /// `u_tt = c² Δu`, `θ = (c, k)`, `u(0) = exp(-k r²)`.
    Wave,
    /// `u_tt = c² Δu - 2α u_t`, `θ = (α, k)`, `u(0) = exp(-k r²)`.
    Telegrapher,
    /// `u_tt = c² Δu - m² u`, `θ = (m, w)`,
    /// `u(0) = exp(-k r²) sin(π w x) sin(π w y)`.
    KleinGordon,
}

/// Second-order-in-time family on a cell-centered grid over `[-2, 2]²` with
/// mirrored (homogeneous Neumann) boundaries, integrated with RK4 on
/// `(u, u_t)` and observed at a fixed random subset of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveFamily {
    pub kind: WaveKind,
    /// Cells per axis.
    pub cells: usize,
    pub half_width: f64,
    pub t_final: f64,
    pub steps: usize,
    /// Wave speed for the telegrapher and Klein-Gordon variants.
    pub speed: f64,
    /// Initial-condition width for Klein-Gordon.
    pub width: f64,
    pub range: ParameterRange,
    /// Observed cell indices (row-major), fixed for the whole sweep.
    pub observed: Vec<usize>,
}

impl WaveFamily {
    /// Observation indices are drawn without replacement from `seed`.
    /// Klein-Gordon has no nominal range, so `range` is mandatory for it.
    pub fn new(kind: WaveKind, range: Option<ParameterRange>, n_observed: usize, seed: u64) -> Result<Self, FomError> {
        let cells = 64;
        let range = match (kind, range) {
            (_, Some(r)) => r,
            (WaveKind::Wave, None) => ParameterRange::new([0.5, 2.0], [0.6, 2.2]),
            (WaveKind::Telegrapher, None) => ParameterRange::new([0.09, 0.09], [1.1, 1.1]),
            (WaveKind::KleinGordon, None) => {
                return Err(FomError::Setup("klein-gordon needs an explicit parameter range".into()))
            }
        };
        let observed = sample_indices(cells * cells, n_observed, seed)?;
        Ok(Self {
            kind,
            cells,
            half_width: 2.0,
            t_final: 2.0,
            steps: 500,
            speed: 0.2,
            width: 1.0,
            range,
            observed,
        })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn centers(&self) -> Array1<f64> {
        let h = self.dx();
        Array1::from_shape_fn(self.cells, |i| -self.half_width + (i as f64 + 0.5) * h)
    }

    /// `(c, damping α, mass m)` for parameter `θ`.
    pub fn physics(&self, theta: &[f64]) -> (f64, f64, f64) {
        match self.kind {
            WaveKind::Wave => (theta[0], 0.0, 0.0),
            WaveKind::Telegrapher => (self.speed, theta[0], 0.0),
            WaveKind::KleinGordon => (self.speed, 0.0, theta[0]),
        }
    }

    /// Initial displacement on the full grid (row-major over `(x, y)`).
    pub fn initial_field(&self, theta: &[f64]) -> Array1<f64> {
        let ax = self.centers();
        let n = self.cells;
        Array1::from_shape_fn(n * n, |p| {
            let (x, y) = (ax[p / n], ax[p % n]);
            let r2 = x * x + y * y;
            match self.kind {
                WaveKind::Wave | WaveKind::Telegrapher => (-theta[1] * r2).exp(),
                WaveKind::KleinGordon => {
                    let w = theta[1];
                    (-self.width * r2).exp() * (PI * w * x).sin() * (PI * w * y).sin()
                }
            }
        })
    }

    /// Five-point Laplacian with mirrored ghost cells.
    pub fn laplacian(&self, u: &Array1<f64>, out: &mut Array1<f64>) {
        let n = self.cells;
        let inv = 1.0 / (self.dx() * self.dx());
        for i in 0..n {
            let im = if i == 0 { 0 } else { i - 1 };
            let ip = if i + 1 == n { i } else { i + 1 };
            for j in 0..n {
                let jm = if j == 0 { 0 } else { j - 1 };
                let jp = if j + 1 == n { j } else { j + 1 };
                let c = u[i * n + j];
                out[i * n + j] = (u[im * n + j] + u[ip * n + j] + u[i * n + jm] + u[i * n + jp] - 4.0 * c) * inv;
            }
        }
    }

    /// Discrete energy `Σ (u_t² + c²|∇u|²) dx²` with face differences.
    pub fn energy(&self, u: ndarray::ArrayView1<f64>, ut: ndarray::ArrayView1<f64>, c: f64) -> f64 {
        let n = self.cells;
        let h = self.dx();
        let mut grad = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                if i + 1 < n {
                    grad += (u[p + n] - u[p]).powi(2);
                }
                if j + 1 < n {
                    grad += (u[p + 1] - u[p]).powi(2);
                }
            }
        }
        (ut.iter().map(|v| v * v).sum::<f64>() * h * h) + c * c * grad
    }

    /// Full-grid trajectories of `u` and `u_t`.
    pub fn solve_grid(&self, theta: &[f64]) -> Result<(Array2<f64>, Array2<f64>), FomError> {
        check_theta(theta)?;
        warn_range(self.name(), &self.range, theta);
        let (c, alpha, m) = self.physics(theta);
        let (dt, h) = (self.dt(), self.dx());
        if c * dt / h > std::f64::consts::FRAC_1_SQRT_2 {
            return Err(FomError::Stability(format!("Courant number {} > 1/√2", c * dt / h)));
        }
        let n2 = self.cells * self.cells;
        let mut u = self.initial_field(theta);
        let mut v = Array1::zeros(n2);
        let mut us = Array2::zeros((self.steps + 1, n2));
        let mut vs = Array2::zeros((self.steps + 1, n2));
        us.row_mut(0).assign(&u);
        vs.row_mut(0).assign(&v);
        let c2 = c * c;
        let mut lap = Array1::zeros(n2);
        // (u, v)' = (v, c² Δu - 2α v - m² u)
        let mut deriv = |u: &Array1<f64>, v: &Array1<f64>| -> (Array1<f64>, Array1<f64>) {
            self.laplacian(u, &mut lap);
            let a = Array1::from_shape_fn(n2, |p| c2 * lap[p] - 2.0 * alpha * v[p] - m * m * u[p]);
            (v.clone(), a)
        };
        for j in 1..=self.steps {
            let (k1u, k1v) = deriv(&u, &v);
            let (k2u, k2v) = deriv(&(&u + &(&k1u * (dt / 2.0))), &(&v + &(&k1v * (dt / 2.0))));
            let (k3u, k3v) = deriv(&(&u + &(&k2u * (dt / 2.0))), &(&v + &(&k2v * (dt / 2.0))));
            let (k4u, k4v) = deriv(&(&u + &(&k3u * dt)), &(&v + &(&k3v * dt)));
            u = u + (k1u + &k2u * 2.0 + &k3u * 2.0 + k4u) * (dt / 6.0);
            v = v + (k1v + &k2v * 2.0 + &k3v * 2.0 + k4v) * (dt / 6.0);
            us.row_mut(j).assign(&u);
            vs.row_mut(j).assign(&v);
        }
        Ok((us, vs))
    }
}

impl ParameterFamily for WaveFamily {
    fn range(&self) -> ParameterRange {
        self.range.clone()
    }

    fn name(&self) -> &'static str {
        match self.kind {
            WaveKind::Wave => "wave2d",
            WaveKind::Telegrapher => "telegrapher2d",
            WaveKind::KleinGordon => "kleingordon2d",
        }
    }

    fn k(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        self.observed.len()
    }

    fn times(&self) -> Vec<f64> {
        uniform_times(self.t_final, self.steps)
    }

    fn initial_channels(&self, theta: &[f64]) -> Result<Vec<Array1<f64>>, FomError> {
        check_theta(theta)?;
        let u = self.initial_field(theta).select(Axis(0), &self.observed);
        Ok(vec![u, Array1::zeros(self.observed.len())])
    }

    fn solve(&self, theta: &[f64]) -> Result<TrajectoryBundle, FomError> {
        let (u, v) = self.solve_grid(theta)?;
        sample_points(
            &TrajectoryBundle::new(theta.to_vec(), self.times(), vec![u, v])?,
            &self.observed,
        )
    }
}

/// `count` distinct indices below `len`, sorted, deterministic in `seed`.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Result<Vec<usize>, FomError> {
    if count > len {
        return Err(FomError::IndexOutOfRange { index: count, len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Restricts every channel to the given spatial components.
pub fn sample_points(bundle: &TrajectoryBundle, indices: &[usize]) -> Result<TrajectoryBundle, FomError> {
    let len = bundle.n_u();
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(FomError::IndexOutOfRange { index: bad, len });
    }
    TrajectoryBundle::new(
        bundle.theta.clone(),
        bundle.times.clone(),
        bundle.channels.iter().map(|c| c.select(Axis(1), indices)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_stencil_is_fourth_order_exact() {
        // exact on quartics
        let dt = 0.1;
        let u = Array2::from_shape_fn((9, 1), |(j, _)| {
            let t = j as f64 * dt;
            t.powi(4) - 2.0 * t.powi(3) + t
        });
        let v = fourth_order_time_derivative(&u, dt).unwrap();
        for j in 0..9 {
            let t = j as f64 * dt;
            let exact = 4.0 * t.powi(3) - 6.0 * t * t + 1.0;
            assert!((v[[j, 0]] - exact).abs() < 1e-11, "{j}");
        }
    }

    #[test]
    fn grid_and_corners() {
        let r = ParameterRange::new([0.0, 10.0], [1.0, 20.0]);
        let g = r.grid(3, 2);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![0.0, 10.0]);
        assert_eq!(g[1], vec![0.0, 20.0]);
        assert_eq!(g[2], vec![0.5, 10.0]);
        assert_eq!(r.corners().len(), 4);
    }

    #[test]
    fn burgers1d_frame_zero_is_ic() {
        let p = Burgers1d::default();
        let b = p.solve(&[0.5, 0.0]).unwrap();
        let x = p.grid();
        for (u, x) in b.channels[0].row(0).iter().zip(x.iter()) {
            assert_eq!(*u, (-0.5 * x * x).exp());
        }
        assert_eq!(b.frame_count(), 501);
        assert_eq!(b.n_u(), 1001);
    }

    #[test]
    fn observation_indices() {
        let a = sample_indices(4096, 1000, 9).unwrap();
        assert_eq!(a, sample_indices(4096, 1000, 9).unwrap());
        assert_eq!(a.len(), 1000);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_indices(10, 11, 0).is_err());
    }

    #[test]
    fn klein_gordon_needs_range() {
        assert!(WaveFamily::new(WaveKind::KleinGordon, None, 10, 0).is_err());
        assert!(WaveFamily::new(WaveKind::Wave, None, 10, 0).is_ok());
    }
}
