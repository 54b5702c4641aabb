//! The seven-term training loss and the horizon annealing schedule.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::autoencoder::{AutoencoderStack, Mlp, StackVars};
use crate::bundle::{bracket, std_all, TrajectoryBundle};
use crate::error::LossError;
use crate::fd::SeriesOperator;
use crate::latent::{
    rk4_taped, rhs_taped, CoefficientVars, ConvexWeights, LatentCoefficients,
    TopDerivativeOperators, DIVERGENCE_GUARD,
};

pub const TERM_NAMES: [&str; 7] = [
    "recon",
    "latent_dynamics",
    "rollout",
    "ic_rollout",
    "consistency",
    "chain_rule",
    "coefficient",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub latent_dynamics: f64,
    pub rollout: f64,
    pub ic_rollout: f64,
    pub consistency: f64,
    pub chain_rule: f64,
    pub coefficient: f64,
}

impl LossWeights {
    /// Weights in [`TERM_NAMES`] order.
    pub fn from_array(w: [f64; 7]) -> Result<Self, LossError> {
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::NonFinite {
                term: TERM_NAMES[i],
                value: w[i],
            });
        }
        Ok(Self {
            recon: w[0],
            latent_dynamics: w[1],
            rollout: w[2],
            ic_rollout: w[3],
            consistency: w[4],
            chain_rule: w[5],
            coefficient: w[6],
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.recon,
            self.latent_dynamics,
            self.rollout,
            self.ic_rollout,
            self.consistency,
            self.chain_rule,
            self.coefficient,
        ]
    }

    /// A single term switched on with weight one.
    pub fn only(term: usize) -> Self {
        let mut w = [0.0; 7];
        w[term] = 1.0;
        Self::from_array(w).unwrap()
    }
}

/// Norm used for a data-fit term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// Sum of absolute values, normalized by `sigma`.
    #[default]
    Mae,
    /// Sum of squares, normalized by `sigma^2`.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// One per data-fit term (the first six of [`TERM_NAMES`]).
    pub penalties: [Penalty; 6],
    pub convex: ConvexWeights,
}

impl LossSettings {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            penalties: [Penalty::Mae; 6],
            convex: ConvexWeights::default(),
        }
    }
}

/// Rollout and IC-rollout horizons at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub epoch: usize,
    /// `Δt_max / T`.
    pub rollout_fraction: f64,
    /// `N_ICmax / N_t`.
    pub ic_fraction: f64,
}

impl AnnealState {
    /// `N_ICmax` for a series of `intervals` time steps.
    pub fn ic_intervals(&self, intervals: usize) -> usize {
        ((self.ic_fraction * intervals as f64).round() as usize).min(intervals)
    }
}

/// Both horizons grow by 1% every 100 epochs; the rollout horizon stops at
/// 75% of the final time, the IC horizon at the whole series.
pub fn anneal_horizons(epoch: usize) -> AnnealState {
    let steps = (epoch / 100) as f64;
    AnnealState {
        epoch,
        rollout_fraction: (0.01 * steps).min(0.75),
        ic_fraction: (0.01 * steps).min(1.0),
    }
}

/// One training parameter's series with everything the loss precomputes.
#[derive(Debug, Clone)]
pub struct LossData {
    pub bundle: TrajectoryBundle,
    /// Per-channel standard deviation over all components and frames.
    pub sigma: Vec<f64>,
    pub top: TopDerivativeOperators,
    pub first: Arc<SeriesOperator>,
}

impl LossData {
    pub fn new(bundle: TrajectoryBundle, convex: ConvexWeights, param: usize) -> Result<Self, LossError> {
        let k = bundle.k();
        let sigma: Vec<f64> = bundle.channels.iter().map(std_all).collect();
        for (order, s) in sigma.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(LossError::DegenerateSeries { param, order });
            }
        }
        let top = TopDerivativeOperators::new(&bundle.times, k, convex)?;
        let first = top.first.clone();
        Ok(Self {
            bundle,
            sigma,
            top,
            first,
        })
    }

    fn frames(&self) -> usize {
        self.bundle.frame_count()
    }
}

/// A recorded total loss.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub stack: StackVars,
    pub coeffs: Vec<CoefficientVars>,
    pub total: Var,
    /// Unweighted term values in [`TERM_NAMES`] order (0 for skipped terms).
    pub terms: [f64; 7],
}

impl LossGraph {
    pub fn total_value(&self) -> f64 {
        self.tape.scalar(self.total)
    }

    pub fn gradients(&self) -> Gradients {
        self.tape.backward(self.total).expect("scalar output")
    }
}

/// Accumulates `weight * penalty(x)` into a scalar on the tape.
fn penalize(tape: &mut Tape, x: Var, penalty: Penalty, scale: f64) -> Var {
    let p = match penalty {
        Penalty::Mae => tape.abs(x),
        Penalty::Mse => tape.square(x),
    };
    let s = tape.sum(p);
    tape.scale(s, scale)
}

fn norm_scale(penalty: Penalty, sigma: f64) -> f64 {
    match penalty {
        Penalty::Mae => 1.0 / sigma,
        Penalty::Mse => 1.0 / (sigma * sigma),
    }
}

/// Rollout step counts and sizes: a horizon `dt` from `times[j]` takes one
/// RK4 step per FOM interval it touches.
fn rollout_steps(times: &[f64], j: usize, dt: f64) -> usize {
    let end = times[j] + dt;
    let first_at_or_after = times.partition_point(|&t| t < end);
    first_at_or_after.saturating_sub(j).max(1)
}

/// Records the weighted total loss. `epoch_seed` drives the rollout horizon
/// draws.
pub fn build_loss(
    stack: &AutoencoderStack,
    coeffs: &[LatentCoefficients],
    data: &[LossData],
    settings: &LossSettings,
    anneal: &AnnealState,
    epoch_seed: u64,
) -> Result<LossGraph, LossError> {
    if coeffs.len() != data.len() {
        return Err(crate::error::ModelError::InvalidArgument(format!(
            "{} coefficient sets for {} training parameters",
            coeffs.len(),
            data.len()
        ))
        .into());
    }
    let k = stack.k();
    let w = settings.weights.to_array();
    let pen = settings.penalties;
    let mut tape = Tape::new();
    let sv = stack.register(&mut tape);
    let cv: Vec<CoefficientVars> = coeffs
        .iter()
        .map(|c| CoefficientVars::register(&mut tape, c))
        .collect();

    let n_theta = data.len() as f64;
    let total_frames: usize = data.iter().map(LossData::frames).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);

    let mut parts: [Vec<Var>; 7] = Default::default();
    let mut clamp: [f64; 7] = [0.0; 7];
    let mut rollable_total = 0usize;

    for (i, d) in data.iter().enumerate() {
        let b = &d.bundle;
        if b.k() != k || b.n_u() != stack.frame_dim() {
            return Err(crate::error::ModelError::InvalidArgument(format!(
                "training parameter {i} has K={} N_u={}, model has K={k} N_u={}",
                b.k(),
                b.n_u(),
                stack.frame_dim()
            ))
            .into());
        }
        let frames = d.frames();
        let u: Vec<Var> = b.channels.iter().map(|c| tape.constant(c.clone())).collect();

        // Encodings; the chain-rule term needs Jacobian-vector products, so
        // encoders 0..K-2 run in dual mode when it is active.
        let need_chain = w[5] > 0.0 && k > 1;
        let mut z = Vec::with_capacity(k);
        let mut jz = Vec::with_capacity(k);
        for kk in 0..k {
            if need_chain && kk + 1 < k {
                let (h, t) = Mlp::jvp_taped(&mut tape, &sv.encoders[kk], u[kk], u[kk + 1])?;
                z.push(h);
                jz.push(Some(t));
            } else {
                z.push(Mlp::forward_taped(&mut tape, &sv.encoders[kk], u[kk])?);
                jz.push(None);
            }
        }

        if w[0] > 0.0 {
            for kk in 0..k {
                let rec = Mlp::forward_taped(&mut tape, &sv.decoders[kk], z[kk])?;
                let diff = tape.sub(rec, u[kk])?;
                let s = norm_scale(pen[0], d.sigma[kk]) / total_frames as f64;
                parts[0].push(penalize(&mut tape, diff, pen[0], s));
            }
        }

        if w[1] > 0.0 {
            let est = d.top.apply_taped(&mut tape, &z)?;
            let rhs = rhs_taped(&mut tape, &cv[i], &z)?;
            let diff = tape.sub(est, rhs)?;
            parts[1].push(penalize(&mut tape, diff, pen[1], 1.0));
        }

        if w[2] > 0.0 {
            let t_final = b.final_time();
            let dt_max = anneal.rollout_fraction * t_final;
            let rollable: Vec<usize> = (0..frames)
                .filter(|&j| b.times[j] + dt_max <= t_final + 1e-12 * t_final.max(1.0))
                .collect();
            rollable_total += rollable.len();
            if !rollable.is_empty() {
                let dts: Vec<f64> = rollable
                    .iter()
                    .map(|_| if dt_max > 0.0 { rng.random_range(0.0..dt_max) } else { 0.0 })
                    .collect();
                let counts: Vec<usize> = rollable
                    .iter()
                    .zip(&dts)
                    .map(|(&j, &dt)| rollout_steps(&b.times, j, dt))
                    .collect();
                let max_steps = counts.iter().copied().max().unwrap_or(0);
                let sizes: Vec<Array1<f64>> = (0..max_steps)
                    .map(|s| {
                        Array1::from_shape_fn(rollable.len(), |r| {
                            if s < counts[r] { dts[r] / counts[r] as f64 } else { 0.0 }
                        })
                    })
                    .collect();
                let idx = Arc::new(rollable.clone());
                let init: Vec<Var> = z
                    .iter()
                    .map(|zk| tape.gather_rows(*zk, idx.clone()))
                    .collect::<Result<_, _>>()?;
                let tr = rk4_taped(&mut tape, &cv[i], init, &sizes, false)?;
                let fin = tr.states.last().unwrap().clone();
                let ok: Vec<usize> = (0..rollable.len()).filter(|&r| tr.diverged[r].is_none()).collect();
                let bad = rollable.len() - ok.len();
                if bad > 0 {
                    log::warn!("rollout diverged for {bad} frames of training parameter {i}");
                }
                if !ok.is_empty() {
                    let ok_arc = Arc::new(ok.clone());
                    for kk in 0..k {
                        let zf = tape.gather_rows(fin[kk], ok_arc.clone())?;
                        let pred = Mlp::forward_taped(&mut tape, &sv.decoders[kk], zf)?;
                        let target = Array2::from_shape_fn((ok.len(), b.n_u()), |(r, c)| {
                            let j = rollable[ok[r]];
                            let (lo, hi, wt) = bracket(&b.times, b.times[j] + dts[ok[r]]);
                            let ch = &b.channels[kk];
                            ch[[lo, c]] * (1.0 - wt) + ch[[hi, c]] * wt
                        });
                        let tv = tape.constant(target);
                        let diff = tape.sub(pred, tv)?;
                        parts[2].push(penalize(&mut tape, diff, pen[2], norm_scale(pen[2], d.sigma[kk])));
                    }
                }
                for kk in 0..k {
                    clamp[2] += bad as f64 * DIVERGENCE_GUARD * norm_scale(pen[2], d.sigma[kk]);
                }
            }
        }

        if w[3] > 0.0 {
            let n_ic = anneal.ic_intervals(frames - 1);
            let sizes: Vec<Array1<f64>> = (0..n_ic)
                .map(|s| Array1::from_elem(1, b.times[s + 1] - b.times[s]))
                .collect();
            let init: Vec<Var> = z
                .iter()
                .map(|zk| tape.slice_rows(*zk, 0, 1))
                .collect::<Result<_, _>>()?;
            let tr = rk4_taped(&mut tape, &cv[i], init, &sizes, true)?;
            // States up to (excluding) the divergence step are kept.
            let kept = match tr.diverged[0] {
                Some(step) => step + 1,
                None => n_ic + 1,
            };
            let lost = n_ic + 1 - kept;
            if lost > 0 {
                log::warn!("IC rollout diverged for training parameter {i} after {} steps", kept - 1);
            }
            for kk in 0..k {
                let rows: Vec<Var> = tr.states[..kept].iter().map(|s| s[kk]).collect();
                let traj = tape.concat_rows(&rows)?;
                let pred = Mlp::forward_taped(&mut tape, &sv.decoders[kk], traj)?;
                let target = tape.constant(b.channels[kk].slice(ndarray::s![..kept, ..]).to_owned());
                let diff = tape.sub(pred, target)?;
                let s = norm_scale(pen[3], d.sigma[kk]) / (n_ic + 1) as f64;
                parts[3].push(penalize(&mut tape, diff, pen[3], s));
                clamp[3] += lost as f64 * DIVERGENCE_GUARD * s;
            }
        }

        if w[4] > 0.0 && k > 1 {
            for kk in 0..k - 1 {
                let dz = tape.row_operator(z[kk], d.first.clone())?;
                let diff = tape.sub(dz, z[kk + 1])?;
                let s = 1.0 / (n_theta * frames as f64);
                parts[4].push(penalize(&mut tape, diff, pen[4], s));
            }
        }

        if need_chain {
            for kk in 0..k - 1 {
                let jv = jz[kk].expect("dual encoder output");
                let diff = tape.sub(jv, z[kk + 1])?;
                let s = 1.0 / (n_theta * frames as f64);
                parts[5].push(penalize(&mut tape, diff, pen[5], s));
            }
        }

        if w[6] > 0.0 {
            for v in cv[i].leaves() {
                let sq = tape.square(v);
                parts[6].push(tape.sum(sq));
            }
        }
    }

    let mut terms = [0.0; 7];
    let mut weighted = Vec::new();
    for t in 0..7 {
        if w[t] == 0.0 {
            continue;
        }
        let norm = if t == 2 { 1.0 / rollable_total.max(1) as f64 } else { 1.0 };
        let clamped = clamp[t] * norm;
        let var = if parts[t].is_empty() {
            None
        } else {
            let s = tape.add_all(&parts[t])?;
            Some(if norm != 1.0 { tape.scale(s, norm) } else { s })
        };
        let value = var.map_or(0.0, |v| tape.scalar(v)) + clamped;
        if !value.is_finite() {
            return Err(LossError::NonFinite {
                term: TERM_NAMES[t],
                value,
            });
        }
        terms[t] = value;
        if let Some(v) = var {
            weighted.push(tape.scale(v, w[t]));
        }
        if clamped > 0.0 {
            weighted.push(tape.scalar_constant(w[t] * clamped));
        }
    }
    let total = if weighted.is_empty() {
        tape.scalar_constant(0.0)
    } else {
        tape.add_all(&weighted)?
    };
    let tv = tape.scalar(total);
    if !tv.is_finite() {
        return Err(LossError::NonFinite {
            term: "total",
            value: tv,
        });
    }
    Ok(LossGraph {
        tape,
        stack: sv,
        coeffs: cv,
        total,
        terms,
    })
}

/// Value of a single term (unweighted).
pub fn term_value(
    term: usize,
    stack: &AutoencoderStack,
    coeffs: &[LatentCoefficients],
    data: &[LossData],
    penalties: [Penalty; 6],
    convex: ConvexWeights,
    anneal: &AnnealState,
    epoch_seed: u64,
) -> Result<f64, LossError> {
    let settings = LossSettings {
        weights: LossWeights::only(term),
        penalties,
        convex,
    };
    Ok(build_loss(stack, coeffs, data, &settings, anneal, epoch_seed)?.terms[term])
}

/// `sum_i |b_i|^2 + sum_{i,k} |C_i^(k)|_F^2`.
pub fn loss_coefficient_reg(coeffs: &[LatentCoefficients]) -> f64 {
    coeffs
        .iter()
        .map(|c| {
            c.b.iter().map(|v| v * v).sum::<f64>()
                + c.c.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        })
        .sum()
}

/// Seed of the rollout-horizon stream for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng.random()
}

/// Encodes all frames of `bundle` with encoder `k` (helper for tests and
/// diagnostics).
pub fn encode_series(stack: &AutoencoderStack, bundle: &TrajectoryBundle, k: usize) -> Array2<f64> {
    stack.encoders[k].forward(&bundle.channels[k])
}
