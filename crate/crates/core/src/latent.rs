//! Order-K linear latent dynamics
//! `z^(K) = C^(K-1) z^(K-1) + ... + C^(0) z + b`, integrated with classical
//! RK4 on the first-order companion system.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AutodiffError, FdError, ModelError};
use crate::fd::SeriesOperator;

/// States with any component above this magnitude count as diverged.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCoefficients {
    /// `C^(0) .. C^(K-1)`, each `L x L`.
    pub c: Vec<Array2<f64>>,
    pub b: Array1<f64>,
}

impl LatentCoefficients {
    pub fn zeros(k: usize, l: usize) -> Self {
        Self {
            c: (0..k).map(|_| Array2::zeros((l, l))).collect(),
            b: Array1::zeros(l),
        }
    }

    pub fn k(&self) -> usize {
        self.c.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.b.len()
    }

    /// Number of scalar components, `L (K L + 1)`.
    pub fn component_count(&self) -> usize {
        let l = self.latent_dim();
        l * (self.k() * l + 1)
    }

    /// Flattens as `C^(0)` row-major, ..., `C^(K-1)`, then `b`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.component_count());
        for c in &self.c {
            out.extend(c.iter());
        }
        out.extend(self.b.iter());
        out
    }

    pub fn from_slice(k: usize, l: usize, v: &[f64]) -> Result<Self, ModelError> {
        if v.len() != l * (k * l + 1) {
            return Err(ModelError::InvalidArgument(format!(
                "expected {} coefficient components, got {}",
                l * (k * l + 1),
                v.len()
            )));
        }
        let c = (0..k)
            .map(|i| Array2::from_shape_vec((l, l), v[i * l * l..(i + 1) * l * l].to_vec()).unwrap())
            .collect();
        let b = Array1::from(v[k * l * l..].to_vec());
        Ok(Self { c, b })
    }

    pub fn is_finite(&self) -> bool {
        self.b.iter().chain(self.c.iter().flat_map(|c| c.iter())).all(|v| v.is_finite())
    }

    /// `sum_k C^(k) z^(k) + b`.
    pub fn rhs(&self, state: &LatentState) -> Result<Array1<f64>, ModelError> {
        self.check_state(state)?;
        let mut out = self.b.clone();
        for (c, z) in self.c.iter().zip(&state.derivatives) {
            out += &c.dot(z);
        }
        Ok(out)
    }

    /// Row-batch form of [`Self::rhs`]: `zs[k]` holds `z^(k)` row-wise.
    pub fn rhs_rows(&self, zs: &[Array2<f64>]) -> Array2<f64> {
        let mut out = zs[0].dot(&self.c[0].t());
        for (c, z) in self.c.iter().zip(zs).skip(1) {
            out += &z.dot(&c.t());
        }
        out + &self.b
    }

    fn check_state(&self, state: &LatentState) -> Result<(), ModelError> {
        if state.derivatives.len() != self.k()
            || state.derivatives.iter().any(|z| z.len() != self.latent_dim())
        {
            return Err(ModelError::InvalidArgument(format!(
                "state does not match K={}, L={}",
                self.k(),
                self.latent_dim()
            )));
        }
        Ok(())
    }
}

/// `z, z', ..., z^(K-1)` at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub derivatives: Vec<Array1<f64>>,
}

impl LatentState {
    pub fn new(derivatives: Vec<Array1<f64>>) -> Self {
        Self { derivatives }
    }

    pub fn max_abs(&self) -> f64 {
        self.derivatives
            .iter()
            .flat_map(|z| z.iter())
            .fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) })
    }

    fn axpy(&self, h: f64, d: &[Array1<f64>]) -> Self {
        Self {
            derivatives: self
                .derivatives
                .iter()
                .zip(d)
                .map(|(z, dz)| z + &(dz * h))
                .collect(),
        }
    }
}

/// Time derivative of the companion system.
fn companion(coeffs: &LatentCoefficients, s: &LatentState) -> Result<Vec<Array1<f64>>, ModelError> {
    let k = coeffs.k();
    let mut d: Vec<Array1<f64>> = s.derivatives[1..].to_vec();
    d.push(coeffs.rhs(s)?);
    debug_assert_eq!(d.len(), k);
    Ok(d)
}

/// Classical RK4 from `t0` to `t1` in `step_count` equal steps. Returns the
/// initial state followed by the state after every step.
pub fn rk4_integrate(
    coeffs: &LatentCoefficients,
    initial: &LatentState,
    t0: f64,
    t1: f64,
    step_count: usize,
) -> Result<Vec<LatentState>, ModelError> {
    if step_count == 0 || !(t1 >= t0) {
        return Err(ModelError::InvalidArgument(format!(
            "need t1 >= t0 and at least one step (t0={t0}, t1={t1}, steps={step_count})"
        )));
    }
    coeffs.check_state(initial)?;
    let mut out = Vec::with_capacity(step_count + 1);
    out.push(initial.clone());
    if t1 == t0 {
        return Ok(out);
    }
    let h = (t1 - t0) / step_count as f64;
    let mut s = initial.clone();
    for step in 0..step_count {
        s = rk4_step(coeffs, &s, h)?;
        if s.max_abs() > DIVERGENCE_GUARD {
            return Err(ModelError::Divergence { step });
        }
        out.push(s.clone());
    }
    Ok(out)
}

fn rk4_step(coeffs: &LatentCoefficients, s: &LatentState, h: f64) -> Result<LatentState, ModelError> {
    let k1 = companion(coeffs, s)?;
    let k2 = companion(coeffs, &s.axpy(h / 2.0, &k1))?;
    let k3 = companion(coeffs, &s.axpy(h / 2.0, &k2))?;
    let k4 = companion(coeffs, &s.axpy(h, &k3))?;
    let incr: Vec<Array1<f64>> = (0..k1.len())
        .map(|i| &k1[i] + &(&k2[i] * 2.0) + &(&k3[i] * 2.0) + &k4[i])
        .collect();
    Ok(s.axpy(h / 6.0, &incr))
}

/// Integrates along an arbitrary increasing time grid with `substeps` RK4
/// steps per interval. Returns one `N_t x L` array per derivative order.
pub fn integrate_on_grid(
    coeffs: &LatentCoefficients,
    initial: &LatentState,
    times: &[f64],
    substeps: usize,
) -> Result<Vec<Array2<f64>>, ModelError> {
    coeffs.check_state(initial)?;
    let (k, l) = (coeffs.k(), coeffs.latent_dim());
    let mut out: Vec<Array2<f64>> = (0..k).map(|_| Array2::zeros((times.len(), l))).collect();
    let mut s = initial.clone();
    let write = |out: &mut Vec<Array2<f64>>, j: usize, s: &LatentState| {
        for (o, z) in out.iter_mut().zip(&s.derivatives) {
            o.row_mut(j).assign(z);
        }
    };
    if times.is_empty() {
        return Ok(out);
    }
    write(&mut out, 0, &s);
    let substeps = substeps.max(1);
    for j in 1..times.len() {
        let h = (times[j] - times[j - 1]) / substeps as f64;
        for sub in 0..substeps {
            s = rk4_step(coeffs, &s, h)?;
            if s.max_abs() > DIVERGENCE_GUARD {
                return Err(ModelError::Divergence {
                    step: (j - 1) * substeps + sub,
                });
            }
        }
        write(&mut out, j, &s);
    }
    Ok(out)
}

/// Tape handles for one parameter's coefficients.
#[derive(Debug, Clone)]
pub struct CoefficientVars {
    pub c: Vec<Var>,
    /// `1 x L`.
    pub b: Var,
}

impl CoefficientVars {
    pub fn register(tape: &mut Tape, coeffs: &LatentCoefficients) -> Self {
        Self {
            c: coeffs.c.iter().map(|c| tape.param(c.clone())).collect(),
            b: tape.param(coeffs.b.clone().insert_axis(ndarray::Axis(0))),
        }
    }

    /// Leaf handles in [`LatentCoefficients::to_vec`] order (C's, then b).
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.c.clone();
        v.push(self.b);
        v
    }
}

/// Recorded `sum_k z_k C_k^T + b` for row batches.
pub fn rhs_taped(tape: &mut Tape, coeffs: &CoefficientVars, zs: &[Var]) -> Result<Var, AutodiffError> {
    let mut terms = Vec::with_capacity(zs.len());
    for (c, z) in coeffs.c.iter().zip(zs) {
        terms.push(tape.matmul_t(*z, *c)?);
    }
    let sum = tape.add_all(&terms)?;
    tape.add_row(sum, coeffs.b)
}

fn companion_taped(tape: &mut Tape, coeffs: &CoefficientVars, zs: &[Var]) -> Result<Vec<Var>, AutodiffError> {
    let mut d: Vec<Var> = zs[1..].to_vec();
    d.push(rhs_taped(tape, coeffs, zs)?);
    Ok(d)
}

fn axpy_taped(tape: &mut Tape, zs: &[Var], h: &Arc<Array1<f64>>, d: &[Var]) -> Result<Vec<Var>, AutodiffError> {
    zs.iter()
        .zip(d)
        .map(|(z, dz)| {
            let s = tape.scale_rows(*dz, h.clone())?;
            tape.add(*z, s)
        })
        .collect()
}

/// Result of a recorded batched integration.
#[derive(Debug, Clone)]
pub struct TapedTrajectory {
    /// `states[s][k]`: derivative `k` after `s` steps (`states[0]` is the
    /// initial state).
    pub states: Vec<Vec<Var>>,
    /// First step at which each row exceeded the divergence guard. Diverged
    /// rows are frozen from then on.
    pub diverged: Vec<Option<usize>>,
}

/// Recorded RK4 over a row batch in which every row may use its own step
/// size. `step_sizes[s][r]` is the step of row `r` at step `s`; a zero leaves
/// the row unchanged. When `keep_all` is false only the initial and final
/// states are retained in the result.
pub fn rk4_taped(
    tape: &mut Tape,
    coeffs: &CoefficientVars,
    initial: Vec<Var>,
    step_sizes: &[Array1<f64>],
    keep_all: bool,
) -> Result<TapedTrajectory, AutodiffError> {
    let rows = tape.shape(initial[0]).0;
    let mut diverged: Vec<Option<usize>> = vec![None; rows];
    let mut states = vec![initial.clone()];
    let mut zs = initial;
    for (step, h) in step_sizes.iter().enumerate() {
        let mut h = h.clone();
        for (r, d) in diverged.iter().enumerate() {
            if d.is_some() {
                h[r] = 0.0;
            }
        }
        if h.iter().all(|v| *v == 0.0) {
            if keep_all {
                states.push(zs.clone());
            }
            continue;
        }
        let half = Arc::new(&h * 0.5);
        let full = Arc::new(h.clone());
        let sixth = Arc::new(&h / 6.0);
        let k1 = companion_taped(tape, coeffs, &zs)?;
        let s2 = axpy_taped(tape, &zs, &half, &k1)?;
        let k2 = companion_taped(tape, coeffs, &s2)?;
        let s3 = axpy_taped(tape, &zs, &half, &k2)?;
        let k3 = companion_taped(tape, coeffs, &s3)?;
        let s4 = axpy_taped(tape, &zs, &full, &k3)?;
        let k4 = companion_taped(tape, coeffs, &s4)?;
        let mut incr = Vec::with_capacity(zs.len());
        for i in 0..zs.len() {
            let a = tape.add(k2[i], k3[i])?;
            let a = tape.scale(a, 2.0);
            let b = tape.add(k1[i], k4[i])?;
            incr.push(tape.add(a, b)?);
        }
        zs = axpy_taped(tape, &zs, &sixth, &incr)?;
        for (r, d) in diverged.iter_mut().enumerate() {
            if d.is_none() {
                let bad = zs.iter().any(|z| {
                    tape.value(*z)
                        .row(r)
                        .iter()
                        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD)
                });
                if bad {
                    *d = Some(step);
                }
            }
        }
        if keep_all {
            states.push(zs.clone());
        }
    }
    if !keep_all && !step_sizes.is_empty() {
        states.push(zs);
    }
    Ok(TapedTrajectory { states, diverged })
}

/// Convex weights of the top-derivative estimate: `w1` on the first
/// derivative of the order `K-1` encodings, `w2` on the second derivative of
/// the order `K-2` encodings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for ConvexWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.0 }
    }
}

impl ConvexWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self, ModelError> {
        if !(w1 >= 0.0 && w2 >= 0.0 && ((w1 + w2) - 1.0).abs() < 1e-12) {
            return Err(ModelError::ConvexWeights(w1, w2));
        }
        Ok(Self { w1, w2 })
    }

    /// For `K = 1` only the first-derivative branch exists.
    pub fn effective(self, k: usize) -> Self {
        if k < 2 {
            Self { w1: 1.0, w2: 0.0 }
        } else {
            self
        }
    }
}

/// Pair of series operators realizing the estimate on one time grid.
#[derive(Debug, Clone)]
pub struct TopDerivativeOperators {
    pub first: Arc<SeriesOperator>,
    pub second: Option<Arc<SeriesOperator>>,
    pub weights: ConvexWeights,
}

impl TopDerivativeOperators {
    pub fn new(times: &[f64], k: usize, weights: ConvexWeights) -> Result<Self, FdError> {
        let weights = weights.effective(k);
        let first = Arc::new(SeriesOperator::derivative(times, 1)?);
        let second = if weights.w2 > 0.0 {
            Some(Arc::new(SeriesOperator::derivative(times, 2)?))
        } else {
            None
        };
        Ok(Self {
            first,
            second,
            weights,
        })
    }

    /// Recorded estimate from encoded series `zs[k]` (`N_t x L` each).
    pub fn apply_taped(&self, tape: &mut Tape, zs: &[Var]) -> Result<Var, AutodiffError> {
        let k = zs.len();
        let d1 = tape.row_operator(zs[k - 1], self.first.clone())?;
        let mut est = if self.weights.w1 != 1.0 {
            tape.scale(d1, self.weights.w1)
        } else {
            d1
        };
        if let Some(second) = &self.second {
            let d2 = tape.row_operator(zs[k - 2], second.clone())?;
            let d2 = tape.scale(d2, self.weights.w2);
            est = tape.add(est, d2)?;
        }
        Ok(est)
    }
}

/// `w1 D_t z^(K-1) + w2 D_t^2 z^(K-2)` from `K` encoded series on shared times.
pub fn estimate_top_derivative(
    times: &[f64],
    encoded: &[ArrayView2<f64>],
    weights: ConvexWeights,
) -> Result<Array2<f64>, ModelError> {
    let weights = ConvexWeights::new(weights.w1, weights.w2)?;
    let k = encoded.len();
    if k == 0 {
        return Err(ModelError::InvalidArgument("no encoded series".into()));
    }
    let ops = TopDerivativeOperators::new(times, k, weights)?;
    for e in encoded {
        if e.nrows() != times.len() {
            return Err(FdError::RowMismatch {
                rows: e.nrows(),
                times: times.len(),
            }
            .into());
        }
    }
    let w = ops.weights;
    let mut est = ops.first.apply(encoded[k - 1]) * w.w1;
    if let Some(second) = &ops.second {
        est = est + second.apply(encoded[k - 2]) * w.w2;
    }
    Ok(est)
}
