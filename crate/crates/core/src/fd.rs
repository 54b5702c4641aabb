//! Second-order finite-difference stencils on nonuniform grids.
//!
//! The closed-form three-point (first derivative) and four-point (second
//! derivative) schemes are used on the production path. [`general_stencil`]
//! solves the Taylor moment system for arbitrary offsets and orders and is
//! kept as a cross-check.
//!
//! [`SeriesOperator`] assembles the per-point stencils for a whole time series
//! once, so applying a derivative to an `N x dim` series is a single linear
//! pass.

use ndarray::{Array2, ArrayView2};

use crate::error::FdError;

/// Max/min adjacent spacing ratio above which the O(h^2) error bounds are
/// no longer meaningful.
pub const SPACING_RATIO_WARN: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstMode {
    Forward,
    Central,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondMode {
    Forward,
    Mixed,
    Backward,
}

/// Finite-difference weights for one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// Signed displacements from the evaluation point.
    pub offsets: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub derivative_order: usize,
    pub accuracy_order: usize,
}

impl Stencil {
    /// Applies the stencil to a scalar function sampled around `x`.
    pub fn apply<F: Fn(f64) -> f64>(&self, x: f64, f: F) -> f64 {
        self.offsets
            .iter()
            .zip(&self.coefficients)
            .map(|(o, c)| c * f(x + o))
            .sum()
    }

    /// `sum_i c_i * o_i^m / m!`; equals 1 for `m == d` and 0 for other `m < k + d`.
    pub fn moment(&self, m: u32) -> f64 {
        let fact: f64 = (1..=m).map(f64::from).product();
        self.offsets
            .iter()
            .zip(&self.coefficients)
            .map(|(o, c)| c * o.powi(m as i32))
            .sum::<f64>()
            / fact
    }
}

fn check_spacing(values: &[f64]) -> Result<(), FdError> {
    for &v in values {
        if !(v > 0.0) || !v.is_finite() {
            return Err(FdError::InvalidSpacing(v));
        }
    }
    Ok(())
}

/// Three-point first-derivative weights.
///
/// Forward uses `x, x+a, x+a+b`; central uses `x-a, x, x+b`; backward uses
/// `x-a-b, x-a, x`.
pub fn stencil_first(a: f64, b: f64, mode: FirstMode) -> Result<Stencil, FdError> {
    check_spacing(&[a, b])?;
    let (offsets, coefficients) = match mode {
        FirstMode::Forward => (vec![0.0, a, a + b], first_forward(a, b).to_vec()),
        FirstMode::Central => (
            vec![-a, 0.0, b],
            vec![-b / (a * (a + b)), (b - a) / (a * b), a / (b * (a + b))],
        ),
        FirstMode::Backward => {
            // Reflection x -> -x negates the first derivative.
            let [c0, c1, c2] = first_forward(a, b);
            (vec![-a - b, -a, 0.0], vec![-c2, -c1, -c0])
        }
    };
    Ok(Stencil {
        offsets,
        coefficients,
        derivative_order: 1,
        accuracy_order: 2,
    })
}

fn first_forward(a: f64, b: f64) -> [f64; 3] {
    [
        -(2.0 * a + b) / (a * (a + b)),
        (a + b) / (a * b),
        -a / (b * (a + b)),
    ]
}

fn second_forward(a: f64, b: f64, c: f64) -> [f64; 4] {
    let abc = a + b + c;
    [
        2.0 * (3.0 * a + 2.0 * b + c) / (a * (a + b) * abc),
        -2.0 * (2.0 * a + 2.0 * b + c) / (a * b * (b + c)),
        2.0 * (2.0 * a + b + c) / (b * c * (a + b)),
        -2.0 * (2.0 * a + b) / (abc * (b + c) * c),
    ]
}

fn second_mixed(a: f64, b: f64, c: f64) -> [f64; 4] {
    let abc = a + b + c;
    [
        2.0 * (2.0 * b + c) / (a * (a + b) * abc),
        -2.0 * (b * (a + 2.0 * b + 3.0 * c) + c * c - a * a) / (b * a * (b + c) * abc),
        2.0 * (b + c - a) / (b * c * (a + b)),
        -2.0 * (b - a) / (c * (b + c) * abc),
    ]
}

/// Four-point second-derivative weights.
///
/// Forward uses `x, x+a, x+a+b, x+a+b+c`; mixed uses `x-a, x, x+b, x+b+c`;
/// backward uses `x-a-b-c, x-a-b, x-a, x` (mirror of forward).
pub fn stencil_second(a: f64, b: f64, c: f64, mode: SecondMode) -> Result<Stencil, FdError> {
    check_spacing(&[a, b, c])?;
    let (offsets, coefficients) = match mode {
        SecondMode::Forward => (
            vec![0.0, a, a + b, a + b + c],
            second_forward(a, b, c).to_vec(),
        ),
        SecondMode::Mixed => (vec![-a, 0.0, b, b + c], second_mixed(a, b, c).to_vec()),
        SecondMode::Backward => {
            // The second derivative is even under reflection: same weights, reversed.
            let [c0, c1, c2, c3] = second_forward(a, b, c);
            (vec![-a - b - c, -a - b, -a, 0.0], vec![c3, c2, c1, c0])
        }
    };
    Ok(Stencil {
        offsets,
        coefficients,
        derivative_order: 2,
        accuracy_order: 2,
    })
}

/// Weights of order `k` for the `d`-th derivative on arbitrary distinct offsets,
/// from the `(k+d) x (k+d)` Taylor moment system.
pub fn general_stencil(offsets: &[f64], d: usize, k: usize) -> Result<Stencil, FdError> {
    let n = k + d;
    if d == 0 || k == 0 || offsets.len() != n {
        return Err(FdError::StencilSize {
            expected: n,
            got: offsets.len(),
        });
    }
    // Row m: sum_i c_i o_i^m / m! = [m == d]
    let mut a = vec![vec![0.0; n + 1]; n];
    let mut fact = 1.0;
    for (m, row) in a.iter_mut().enumerate() {
        if m > 0 {
            fact *= m as f64;
        }
        for (i, &o) in offsets.iter().enumerate() {
            row[i] = o.powi(m as i32) / fact;
        }
        row[n] = if m == d { 1.0 } else { 0.0 };
    }
    let coefficients = solve_dense(a).ok_or(FdError::DegenerateGrid)?;
    Ok(Stencil {
        offsets: offsets.to_vec(),
        coefficients,
        derivative_order: d,
        accuracy_order: k,
    })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let scale = a
        .iter()
        .flat_map(|r| r[..n].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-300 + scale * 1e-15 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for j in col..=n {
                    a[row][j] -= f * a[col][j];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (a[i][n] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// A banded linear operator along the rows of a series: output row `i` is
/// `sum_j w_ij * input[idx_ij]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesOperator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SeriesOperator {
    /// Derivative operator of order `d` (1 or 2) for the given sample times.
    pub fn derivative(times: &[f64], d: usize) -> Result<Self, FdError> {
        let n = times.len();
        if !(1..=2).contains(&d) {
            return Err(FdError::UnsupportedOrder(d));
        }
        // d=2 uses one-sided stencils on the two outermost frames at each end.
        let needed = if d == 1 { 3 } else { 5 };
        if n < needed {
            return Err(FdError::InsufficientPoints { needed, got: n });
        }
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(bad) = h.iter().find(|s| !(**s > 0.0)) {
            return Err(FdError::NotIncreasing(*bad));
        }
        let (lo, hi) = h
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if hi / lo > SPACING_RATIO_WARN {
            log::warn!(
                "time grid spacing ratio {:.1} exceeds {}; O(h^2) error bounds may not hold",
                hi / lo,
                SPACING_RATIO_WARN
            );
        }

        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = if d == 1 {
                if i == 0 {
                    let c = first_forward(h[0], h[1]);
                    vec![(0, c[0]), (1, c[1]), (2, c[2])]
                } else if i == n - 1 {
                    let c = first_forward(h[i - 1], h[i - 2]);
                    vec![(i - 2, -c[2]), (i - 1, -c[1]), (i, -c[0])]
                } else {
                    let (a, b) = (h[i - 1], h[i]);
                    vec![
                        (i - 1, -b / (a * (a + b))),
                        (i, (b - a) / (a * b)),
                        (i + 1, a / (b * (a + b))),
                    ]
                }
            } else if i <= 1 {
                let c = second_forward(h[i], h[i + 1], h[i + 2]);
                vec![(i, c[0]), (i + 1, c[1]), (i + 2, c[2]), (i + 3, c[3])]
            } else if i >= n - 2 {
                let c = second_forward(h[i - 1], h[i - 2], h[i - 3]);
                vec![(i - 3, c[3]), (i - 2, c[2]), (i - 1, c[1]), (i, c[0])]
            } else {
                let c = second_mixed(h[i - 1], h[i], h[i + 1]);
                vec![(i - 1, c[0]), (i, c[1]), (i + 1, c[2]), (i + 2, c[3])]
            };
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn apply(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), values.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, w) in row {
                dst.scaled_add(w, &values.row(j));
            }
        }
        out
    }

    /// Adjoint application, used to back-propagate through `apply`.
    pub fn apply_transpose(&self, grad: ArrayView2<f64>, input_rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((input_rows, grad.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let src = grad.row(i);
            for &(j, w) in row {
                out.row_mut(j).scaled_add(w, &src);
            }
        }
        out
    }
}

/// A derivative of a sampled series, on the same times.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDerivative {
    pub times: Vec<f64>,
    pub values: Array2<f64>,
    pub derivative_order: usize,
}

/// Differentiates every column of `values` (rows indexed by `times`).
pub fn differentiate_series(
    times: &[f64],
    values: ArrayView2<f64>,
    d: usize,
) -> Result<SeriesDerivative, FdError> {
    if values.nrows() != times.len() {
        return Err(FdError::RowMismatch {
            rows: values.nrows(),
            times: times.len(),
        });
    }
    let op = SeriesOperator::derivative(times, d)?;
    Ok(SeriesDerivative {
        times: times.to_vec(),
        values: op.apply(values),
        derivative_order: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn uniform_first_forward_and_central() {
        let h = 0.25;
        let f = stencil_first(h, h, FirstMode::Forward).unwrap();
        let expect = [-3.0 / (2.0 * h), 2.0 / h, -1.0 / (2.0 * h)];
        for (c, e) in f.coefficients.iter().zip(expect) {
            assert!(rel_close(*c, e, 1e-14));
        }
        let c = stencil_first(h, h, FirstMode::Central).unwrap();
        assert!(rel_close(c.coefficients[0], -1.0 / (2.0 * h), 1e-14));
        assert_eq!(c.coefficients[1], 0.0);
        assert!(rel_close(c.coefficients[2], 1.0 / (2.0 * h), 1e-14));
    }

    #[test]
    fn uniform_second_forward_and_mixed() {
        let h = 0.5;
        let h2 = h * h;
        let f = stencil_second(h, h, h, SecondMode::Forward).unwrap();
        for (c, e) in f.coefficients.iter().zip([2.0, -5.0, 4.0, -1.0]) {
            assert!(rel_close(*c, e / h2, 1e-14));
        }
        let m = stencil_second(h, h, h, SecondMode::Mixed).unwrap();
        for (c, e) in m.coefficients[..3].iter().zip([1.0, -2.0, 1.0]) {
            assert!(rel_close(*c, e / h2, 1e-14));
        }
        assert!(m.coefficients[3].abs() < 1e-12 / h2);
    }

    #[test]
    fn first_stencils_exact_on_quadratics() {
        let f = |x: f64| x * x;
        for mode in [FirstMode::Forward, FirstMode::Central, FirstMode::Backward] {
            let s = stencil_first(0.1, 0.2, mode).unwrap();
            let x = 0.7;
            assert!((s.apply(x, f) - 2.0 * x).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn mixed_exact_on_cubic_at_origin() {
        let s = stencil_second(0.1, 0.15, 0.05, SecondMode::Mixed).unwrap();
        assert!(s.apply(0.0, |x| x * x * x).abs() < 1e-12);
    }

    #[test]
    fn non_positive_spacing_rejected() {
        assert!(matches!(
            stencil_first(0.0, 1.0, FirstMode::Forward),
            Err(FdError::InvalidSpacing(_))
        ));
        assert!(matches!(
            stencil_second(1.0, -1.0, 1.0, SecondMode::Mixed),
            Err(FdError::InvalidSpacing(_))
        ));
    }

    #[test]
    fn general_stencil_small_cases() {
        let s = general_stencil(&[0.0, 1.0], 1, 1).unwrap();
        assert!(rel_close(s.coefficients[0], -1.0, 1e-14));
        assert!(rel_close(s.coefficients[1], 1.0, 1e-14));

        let h = 0.3;
        let s = general_stencil(&[-h, 0.0, h], 2, 1).unwrap();
        let e = [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)];
        for (c, e) in s.coefficients.iter().zip(e) {
            assert!(rel_close(*c, e, 1e-12));
        }
    }

    #[test]
    fn general_stencil_rejects_duplicates() {
        assert!(matches!(
            general_stencil(&[0.0, 0.5, 0.5], 1, 2),
            Err(FdError::DegenerateGrid)
        ));
        assert!(matches!(
            general_stencil(&[0.0, 0.5], 1, 2),
            Err(FdError::StencilSize { .. })
        ));
    }

    #[test]
    fn reflection_identity_first() {
        let (a, b) = (0.13, 0.41);
        let f = stencil_first(a, b, FirstMode::Forward).unwrap();
        let bw = stencil_first(a, b, FirstMode::Backward).unwrap();
        let rev: Vec<f64> = f.coefficients.iter().rev().map(|c| -c).collect();
        assert_eq!(bw.coefficients, rev);
    }

    #[test]
    fn constant_series_has_zero_derivative() {
        let times = [0.0, 0.1, 0.35, 0.4, 0.9, 1.3];
        let vals = Array2::from_elem((6, 3), 4.2);
        for d in 1..=2 {
            let out = differentiate_series(&times, vals.view(), d).unwrap();
            assert!(out.values.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn second_derivative_of_square_is_two() {
        let times = [0.0, 0.1, 0.35, 0.4, 0.9, 1.3, 1.32, 2.0];
        let vals = Array2::from_shape_fn((8, 1), |(i, _)| times[i] * times[i]);
        let out = differentiate_series(&times, vals.view(), 2).unwrap();
        for v in out.values.iter() {
            assert!((v - 2.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn minimal_lengths() {
        let t3 = [0.0, 0.4, 1.0];
        let v = Array2::from_shape_fn((3, 1), |(i, _)| 3.0 * t3[i] + 1.0);
        let d1 = differentiate_series(&t3, v.view(), 1).unwrap();
        assert!(d1.values.iter().all(|x| (x - 3.0).abs() < 1e-12));
        assert!(matches!(
            differentiate_series(&t3, v.view(), 2),
            Err(FdError::InsufficientPoints { needed: 5, got: 3 })
        ));
        let t5: [f64; 5] = [0.0, 0.3, 0.5, 1.0, 1.2];
        let v = Array2::from_shape_fn((5, 1), |(i, _)| t5[i].powi(3));
        let d2 = differentiate_series(&t5, v.view(), 2).unwrap();
        for (x, t) in d2.values.iter().zip(t5) {
            assert!((x - 6.0 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let times = [0.0, 0.2, 0.5, 0.55, 0.9, 1.4, 2.0];
        let op = SeriesOperator::derivative(&times, 2).unwrap();
        let x = Array2::from_shape_fn((7, 2), |(i, j)| ((i * 3 + j) as f64).sin());
        let y = Array2::from_shape_fn((7, 2), |(i, j)| ((i + 5 * j) as f64).cos());
        let lhs = (&op.apply(x.view()) * &y).sum();
        let rhs = (&x * &op.apply_transpose(y.view(), 7)).sum();
        assert!(rel_close(lhs, rhs, 1e-12));
    }

    #[test]
    fn rejects_unsorted_times() {
        let v = Array2::<f64>::zeros((4, 1));
        assert!(matches!(
            differentiate_series(&[0.0, 1.0, 1.0, 2.0], v.view(), 1),
            Err(FdError::NotIncreasing(_))
        ));
    }
}
