//! Episodic training (train, fit GPs, greedy sample, extend), inference and
//! the relative error metric.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
use crate::autoencoder::{AutoencoderStack, MlpSpec};
use crate::bundle::{std_all, TrajectoryBundle};
use crate::container::{load_bundle, read_container, save_bundle, write_container, DatasetIndex, IndexEntry, NamedArray};
use crate::error::{IoError, ModelError, PipelineError};
use crate::fom::{Burgers1d, Burgers2d, ParameterFamily, ParameterRange, WaveFamily, WaveKind};
use crate::gp::{GpEnsemble, GpSnapshot, DEFAULT_SAMPLES};
use crate::latent::{integrate_on_grid, ConvexWeights, LatentCoefficients, LatentState, DIVERGENCE_GUARD};
use crate::losses::{anneal_horizons, build_loss, epoch_seed, LossData, LossSettings, LossWeights, Penalty, TERM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Burgers1d,
    Burgers2d,
    Wave,
    Telegrapher,
    KleinGordon,
}

/// Which full-order family to run and how to observe it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Overrides the family's nominal parameter rectangle.
    #[serde(default)]
    pub range: Option<ParameterRange>,
    /// Observed grid cells for the wave family.
    #[serde(default = "default_observed")]
    pub observed_points: usize,
    /// Seed of the observation subset.
    #[serde(default)]
    pub observation_seed: u64,
}

fn default_observed() -> usize {
    1000
}

impl ProblemConfig {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            range: None,
            observed_points: default_observed(),
            observation_seed: 0,
        }
    }

    pub fn build(&self) -> Result<Box<dyn ParameterFamily>, PipelineError> {
        let with_range = |nominal: ParameterRange| self.range.clone().unwrap_or(nominal);
        Ok(match self.kind {
            ProblemKind::Burgers1d => {
                let mut p = Burgers1d::default();
                p.range = with_range(p.range.clone());
                Box::new(p)
            }
            ProblemKind::Burgers2d => {
                let mut p = Burgers2d::default();
                p.range = with_range(p.range.clone());
                Box::new(p)
            }
            ProblemKind::Wave | ProblemKind::Telegrapher | ProblemKind::KleinGordon => {
                let kind = match self.kind {
                    ProblemKind::Wave => WaveKind::Wave,
                    ProblemKind::Telegrapher => WaveKind::Telegrapher,
                    _ => WaveKind::KleinGordon,
                };
                Box::new(WaveFamily::new(
                    kind,
                    self.range.clone(),
                    self.observed_points,
                    self.observation_seed,
                )?)
            }
        })
    }

    /// Parameter rectangle in effect.
    pub fn range(&self) -> Result<ParameterRange, PipelineError> {
        Ok(self.build()?.range())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Encoder widths, e.g. `1001-250-100-100-5`.
    pub architecture: String,
    /// In the order recon, latent dynamics, rollout, IC rollout,
    /// consistency, chain rule, coefficient.
    pub loss_weights: [f64; 7],
    #[serde(default)]
    pub penalties: Option<[Penalty; 6]>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub iterations: usize,
    pub sampling_frequency: usize,
    /// Defaults to the corners of the parameter rectangle.
    #[serde(default)]
    pub initial_training: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    pub range: ParameterRange,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_convex")]
    pub convex_weights: [f64; 2],
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Train on every `frame_stride`-th stored frame (the last one is
    /// always kept); inference and evaluation use the full series.
    #[serde(default = "default_stride")]
    pub frame_stride: usize,
}

fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_grid() -> [usize; 2] {
    [11, 11]
}
fn default_convex() -> [f64; 2] {
    [1.0, 0.0]
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_stride() -> usize {
    1
}

impl TrainingConfig {
    pub fn new(architecture: &str, loss_weights: [f64; 7], iterations: usize, sampling_frequency: usize, range: ParameterRange) -> Self {
        Self {
            architecture: architecture.to_string(),
            loss_weights,
            penalties: None,
            learning_rate: DEFAULT_LEARNING_RATE,
            iterations,
            sampling_frequency,
            initial_training: None,
            grid: default_grid(),
            range,
            seed: 0,
            convex_weights: default_convex(),
            n_samples: DEFAULT_SAMPLES,
            frame_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        MlpSpec::parse(&self.architecture).map_err(|e| PipelineError::Config(e.to_string()))?;
        LossWeights::from_array(self.loss_weights).map_err(|e| PipelineError::Config(e.to_string()))?;
        ConvexWeights::new(self.convex_weights[0], self.convex_weights[1])
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.sampling_frequency == 0 || self.iterations % self.sampling_frequency != 0 {
            return cfg(format!(
                "sampling frequency {} must divide iterations {}",
                self.sampling_frequency, self.iterations
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return cfg("parameter grid must be non-empty".into());
        }
        if self.n_samples == 0 {
            return cfg("need at least one posterior sample".into());
        }
        if self.frame_stride == 0 {
            return cfg("frame stride must be at least 1".into());
        }
        Ok(())
    }

    pub fn settings(&self) -> Result<LossSettings, PipelineError> {
        Ok(LossSettings {
            weights: LossWeights::from_array(self.loss_weights)?,
            penalties: self.penalties.unwrap_or([Penalty::Mae; 6]),
            convex: ConvexWeights::new(self.convex_weights[0], self.convex_weights[1])?,
        })
    }

    pub fn spec(&self) -> Result<MlpSpec, PipelineError> {
        Ok(MlpSpec::parse(&self.architecture)?)
    }

    pub fn testing_grid(&self) -> Vec<Vec<f64>> {
        self.range.grid(self.grid[0], self.grid[1])
    }

    pub fn initial_parameters(&self) -> Vec<Vec<f64>> {
        self.initial_training.clone().unwrap_or_else(|| self.range.corners())
    }
}

/// Supplies full-order trajectories by parameter.
pub trait DataProvider {
    fn bundle(&mut self, theta: &[f64]) -> Result<TrajectoryBundle, PipelineError>;
}

/// Solves on demand and caches the results.
pub struct SolveProvider<'a> {
    pub family: &'a dyn ParameterFamily,
    cache: Vec<TrajectoryBundle>,
}

impl<'a> SolveProvider<'a> {
    pub fn new(family: &'a dyn ParameterFamily) -> Self {
        Self {
            family,
            cache: Vec::new(),
        }
    }
}

impl DataProvider for SolveProvider<'_> {
    fn bundle(&mut self, theta: &[f64]) -> Result<TrajectoryBundle, PipelineError> {
        if let Some(b) = self.cache.iter().find(|b| same_theta(&b.theta, theta)) {
            return Ok(b.clone());
        }
        let b = self.family.solve(theta)?;
        self.cache.push(b.clone());
        Ok(b)
    }
}

/// Reads trajectories written by [`generate_datasets`].
pub struct DatasetProvider {
    dir: PathBuf,
    index: DatasetIndex,
}

impl DatasetProvider {
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        let index = DatasetIndex::load(dir).map_err(|e| {
            PipelineError::MissingDataset(format!("{}: {e}", dir.join(DatasetIndex::FILE).display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }
}

impl DataProvider for DatasetProvider {
    fn bundle(&mut self, theta: &[f64]) -> Result<TrajectoryBundle, PipelineError> {
        let path = self
            .index
            .find(&self.dir, theta)
            .ok_or_else(|| PipelineError::MissingDataset(format!("no trajectory for {theta:?} in {}", self.dir.display())))?;
        Ok(load_bundle(&path)?.1)
    }
}

/// Solves the family at every parameter and writes one container per
/// parameter plus an index.
pub fn generate_datasets(
    family: &dyn ParameterFamily,
    params: &[Vec<f64>],
    dir: &Path,
    grid: serde_json::Value,
    seed: u64,
) -> Result<DatasetIndex, PipelineError> {
    std::fs::create_dir_all(dir).map_err(IoError::from)?;
    let mut entries = Vec::with_capacity(params.len());
    for (i, theta) in params.iter().enumerate() {
        let b = family.solve(theta)?;
        let file = format!("{}_{i:04}.bin", family.name());
        save_bundle(&dir.join(&file), &b, family.name(), grid.clone(), seed)?;
        entries.push(IndexEntry {
            theta: theta.clone(),
            file,
        });
    }
    let index = DatasetIndex {
        kind: family.name().to_string(),
        entries,
    };
    index.save(dir)?;
    Ok(index)
}

pub fn same_theta(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub terms: [f64; 7],
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub selected: Option<Vec<f64>>,
    pub max_variance: Option<f64>,
    pub terms: [f64; 7],
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub stack: AutoencoderStack,
    pub coeffs: Vec<LatentCoefficients>,
    pub train_params: Vec<Vec<f64>>,
    pub test_params: Vec<Vec<f64>>,
    pub adam: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub loss_log: Vec<LossRecord>,
}

impl TrainingState {
    /// Fresh stack and zero coefficients for `train_params`; the testing set
    /// is `grid` minus the training parameters.
    pub fn new(spec: MlpSpec, k: usize, learning_rate: f64, train_params: Vec<Vec<f64>>, grid: &[Vec<f64>], seed: u64) -> Result<Self, PipelineError> {
        let stack = AutoencoderStack::init(spec, k, seed)?;
        let l = stack.latent_dim();
        let coeffs = vec![LatentCoefficients::zeros(k, l); train_params.len()];
        let mut sizes: Vec<usize> = stack.buffers().iter().map(|b| b.len()).collect();
        for _ in &train_params {
            sizes.extend(coefficient_sizes(k, l));
        }
        let test_params = grid
            .iter()
            .filter(|g| !train_params.iter().any(|t| same_theta(t, g)))
            .cloned()
            .collect();
        Ok(Self {
            adam: AdamState::new(learning_rate, &sizes),
            stack,
            coeffs,
            train_params,
            test_params,
            epoch: 0,
            seed,
            episodes: Vec::new(),
            loss_log: Vec::new(),
        })
    }

    /// Adds a training parameter with the given starting coefficients.
    pub fn add_parameter(&mut self, theta: Vec<f64>, start: LatentCoefficients) {
        for s in coefficient_sizes(self.stack.k(), self.stack.latent_dim()) {
            self.adam.push_param(s);
        }
        self.test_params.retain(|t| !same_theta(t, &theta));
        self.train_params.push(theta);
        self.coeffs.push(start);
    }

    pub fn fit_gp(&self) -> Result<GpEnsemble, PipelineError> {
        Ok(GpEnsemble::fit(&self.train_params, &self.coeffs)?)
    }

    pub fn is_training(&self, theta: &[f64]) -> bool {
        self.train_params.iter().any(|t| same_theta(t, theta))
    }
}

fn coefficient_sizes(k: usize, l: usize) -> Vec<usize> {
    let mut v = vec![l * l; k];
    v.push(l);
    v
}

/// Loss data for the current training set.
pub fn loss_data(bundles: &[TrajectoryBundle], stride: usize, convex: ConvexWeights) -> Result<Vec<LossData>, PipelineError> {
    bundles
        .iter()
        .enumerate()
        .map(|(i, b)| Ok(LossData::new(b.subsample(stride), convex, i)?))
        .collect()
}

/// Runs `iterations` full-batch Adam steps on the total loss. On failure the
/// state keeps the last successful update.
pub fn train_episode(state: &mut TrainingState, settings: &LossSettings, data: &[LossData], iterations: usize) -> Result<(), PipelineError> {
    for _ in 0..iterations {
        let epoch = state.epoch;
        let anneal = anneal_horizons(epoch);
        let graph = build_loss(
            &state.stack,
            &state.coeffs,
            data,
            settings,
            &anneal,
            epoch_seed(state.seed, epoch),
        )
        .map_err(|source| PipelineError::Training { epoch, source })?;
        let grads = graph.gradients();
        let mut flat: Vec<Array2<f64>> = Vec::new();
        let leaves = graph.stack.leaves();
        for (v, shape) in leaves.iter().zip(state.stack.buffer_shapes()) {
            let s = (shape[0], shape.get(1).copied().unwrap_or(1));
            let s = if shape.len() == 1 { (1, shape[0]) } else { s };
            flat.push(grads.wrt_or_zeros(*v, s));
        }
        for (cv, c) in graph.coeffs.iter().zip(&state.coeffs) {
            for (v, m) in cv.c.iter().zip(&c.c) {
                flat.push(grads.wrt_or_zeros(*v, m.dim()));
            }
            flat.push(grads.wrt_or_zeros(cv.b, (1, c.latent_dim())));
        }
        let grad_slices: Vec<&[f64]> = flat.iter().map(|g| g.as_slice().expect("standard layout")).collect();
        if grad_slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(PipelineError::NonFiniteGradient { epoch });
        }
        let mut params: Vec<&mut [f64]> = state.stack.buffers_mut();
        for c in state.coeffs.iter_mut() {
            for m in c.c.iter_mut() {
                params.push(m.as_slice_mut().expect("standard layout"));
            }
            params.push(c.b.as_slice_mut().expect("standard layout"));
        }
        adam_step(&mut params, &grad_slices, &mut state.adam).map_err(|_| PipelineError::NonFiniteGradient { epoch })?;
        state.loss_log.push(LossRecord {
            epoch,
            terms: graph.terms,
            total: graph.total_value(),
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Encodes initial channels into a latent state.
pub fn encode_initial(stack: &AutoencoderStack, initial: &[Array1<f64>]) -> Result<LatentState, ModelError> {
    if initial.len() != stack.k() {
        return Err(ModelError::InvalidArgument(format!(
            "{} initial channels for K={}",
            initial.len(),
            stack.k()
        )));
    }
    let ders = initial
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let z = stack.encode(k, &u.view().insert_axis(Axis(0)).to_owned())?;
            Ok(z.row(0).to_owned())
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(LatentState::new(ders))
}

/// Decoded trajectory of every channel for given coefficients.
pub fn rollout_from_initial(
    stack: &AutoencoderStack,
    coeffs: &LatentCoefficients,
    initial: &LatentState,
    times: &[f64],
) -> Result<Vec<Array2<f64>>, ModelError> {
    let latent = integrate_on_grid(coeffs, initial, times, 1)?;
    latent.iter().enumerate().map(|(k, z)| stack.decode(k, z)).collect()
}

/// Greedy choice of the next training parameter: the testing parameter
/// whose decoded posterior-sample trajectories have the largest
/// per-component, per-frame variance. Returns `(index, max variance)` per
/// candidate and the selected index (lowest index on ties).
pub fn greedy_sample(
    stack: &AutoencoderStack,
    gp: &GpEnsemble,
    candidates: &[Vec<f64>],
    family: &dyn ParameterFamily,
    times: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(usize, Vec<f64>), PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::Config("no testing parameters left to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(candidates.len());
    for theta in candidates {
        let ic = encode_initial(stack, &family.initial_channels(theta)?)?;
        let samples = gp.sample(theta, n_samples, rng.random())?;
        let mut trajs: Vec<Vec<Array2<f64>>> = Vec::with_capacity(n_samples);
        let mut diverged = false;
        for c in &samples {
            match rollout_from_initial(stack, c, &ic, times) {
                Ok(t) => trajs.push(t),
                Err(ModelError::Divergence { .. }) => diverged = true,
                Err(e) => return Err(e.into()),
            }
        }
        let mut best = if diverged { DIVERGENCE_GUARD } else { 0.0 };
        if trajs.len() > 1 {
            for k in 0..stack.k() {
                let n = trajs.len() as f64;
                let mut mean = Array2::<f64>::zeros(trajs[0][k].dim());
                for t in &trajs {
                    mean += &t[k];
                }
                mean /= n;
                let mut var = Array2::<f64>::zeros(mean.dim());
                for t in &trajs {
                    let d = &t[k] - &mean;
                    var += &(&d * &d);
                }
                var /= n;
                best = var.iter().fold(best, |m, v| m.max(*v));
            }
        }
        scores.push(best);
    }
    let mut sel = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[sel] {
            sel = i;
        }
    }
    Ok((sel, scores))
}

/// Prediction for `theta` from the GP posterior-mean coefficients.
pub fn infer(
    stack: &AutoencoderStack,
    gp: &GpEnsemble,
    theta: &[f64],
    initial: &[Array1<f64>],
    times: &[f64],
) -> Result<TrajectoryBundle, PipelineError> {
    let coeffs = gp.mean(theta)?;
    let ic = encode_initial(stack, initial)?;
    let channels = match rollout_from_initial(stack, &coeffs, &ic, times) {
        Ok(c) => c,
        Err(ModelError::Divergence { step }) => {
            return Err(PipelineError::InferenceDivergence {
                theta: theta.to_vec(),
                step,
            })
        }
        Err(e) => return Err(e.into()),
    };
    TrajectoryBundle::new(theta.to_vec(), times.to_vec(), channels).map_err(PipelineError::Fom)
}

/// `max_t mean_i |truth - pred| / σ(truth)`.
pub fn relative_error(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, PipelineError> {
    if pred.dim() != truth.dim() {
        return Err(PipelineError::Shape(format!("{:?} vs {:?}", pred.dim(), truth.dim())));
    }
    let sigma = std_all(truth);
    if !(sigma > 0.0) {
        return Err(PipelineError::DegenerateTruth);
    }
    let worst = pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
        .fold(0.0, f64::max);
    Ok(worst / sigma)
}

/// Everything a finished run produces.
pub struct TrainingOutcome {
    pub state: TrainingState,
    pub gp: GpEnsemble,
}

/// The full episodic loop.
pub fn run_training(
    family: &dyn ParameterFamily,
    config: &TrainingConfig,
    provider: &mut dyn DataProvider,
) -> Result<TrainingOutcome, PipelineError> {
    config.validate()?;
    let settings = config.settings()?;
    let spec = config.spec()?;
    if spec.input_dim() != family.n_u() {
        return Err(PipelineError::Config(format!(
            "architecture input width {} does not match N_u = {}",
            spec.input_dim(),
            family.n_u()
        )));
    }
    let grid = config.testing_grid();
    let mut state = TrainingState::new(
        spec,
        family.k(),
        config.learning_rate,
        config.initial_parameters(),
        &grid,
        config.seed,
    )?;
    let mut bundles = state
        .train_params
        .iter()
        .map(|t| provider.bundle(t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = loss_data(&bundles, config.frame_stride, settings.convex)?;
    let episodes = config.iterations / config.sampling_frequency;
    let sample_times = bundles[0].subsample(config.frame_stride).times;
    for ep in 0..episodes {
        train_episode(&mut state, &settings, &data, config.sampling_frequency)?;
        let last = state.loss_log.last().cloned();
        let (terms, total) = last.map_or(([0.0; 7], 0.0), |r| (r.terms, r.total));
        let mut record = EpisodeRecord {
            episode: ep,
            selected: None,
            max_variance: None,
            terms,
            total,
        };
        if ep + 1 < episodes && !state.test_params.is_empty() {
            let gp = state.fit_gp()?;
            let seed = greedy_seed(config.seed, ep);
            let (sel, scores) = greedy_sample(
                &state.stack,
                &gp,
                &state.test_params,
                family,
                &sample_times,
                config.n_samples,
                seed,
            )?;
            let theta = state.test_params[sel].clone();
            log::info!("episode {ep}: adding {theta:?} (max variance {:.3e})", scores[sel]);
            record.selected = Some(theta.clone());
            record.max_variance = Some(scores[sel]);
            let start = gp.mean(&theta)?;
            let b = provider.bundle(&theta)?;
            data.push(LossData::new(b.subsample(config.frame_stride), settings.convex, bundles.len())?);
            bundles.push(b);
            state.add_parameter(theta, start);
        }
        state.episodes.push(record);
    }
    let gp = state.fit_gp()?;
    Ok(TrainingOutcome { state, gp })
}

fn greedy_seed(seed: u64, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    rng.set_stream(episode as u64);
    rng.random()
}

/// One row of the error heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub theta: Vec<f64>,
    /// One entry per channel.
    pub errors: Vec<f64>,
    pub is_training: bool,
}

/// Relative errors over `params`, comparing against the provider's
/// trajectories.
pub fn evaluate(
    stack: &AutoencoderStack,
    gp: &GpEnsemble,
    family: &dyn ParameterFamily,
    params: &[Vec<f64>],
    training: &[Vec<f64>],
    provider: &mut dyn DataProvider,
) -> Result<Vec<HeatmapRow>, PipelineError> {
    params
        .iter()
        .map(|theta| {
            let truth = provider.bundle(theta)?;
            let pred = infer(stack, gp, theta, &family.initial_channels(theta)?, &truth.times)?;
            let errors = pred
                .channels
                .iter()
                .zip(&truth.channels)
                .map(|(p, t)| relative_error(p, t))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(HeatmapRow {
                theta: theta.clone(),
                errors,
                is_training: training.iter().any(|t| same_theta(t, theta)),
            })
        })
        .collect()
}

pub fn write_heatmap_csv(path: &Path, rows: &[HeatmapRow]) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let channels = rows.first().map_or(0, |r| r.errors.len());
    let names = ["eps_u", "eps_v"];
    let mut header = vec!["theta1".to_string(), "theta2".to_string()];
    for c in 0..channels {
        header.push(names.get(c).map_or(format!("eps_{c}"), |s| s.to_string()));
    }
    header.push("is_training".into());
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        let mut cols: Vec<String> = r.theta.iter().map(|v| format!("{v}")).collect();
        cols.extend(r.errors.iter().map(|v| format!("{v}")));
        cols.push(if r.is_training { "1".into() } else { "0".into() });
        writeln!(f, "{}", cols.join(","))?;
    }
    Ok(())
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,{},total", TERM_NAMES.join(","))?;
    for r in log {
        let terms: Vec<String> = r.terms.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{},{}", r.epoch, terms.join(","), r.total)?;
    }
    Ok(())
}

pub fn write_episodes_csv(path: &Path, episodes: &[EpisodeRecord]) -> Result<(), IoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "episode,theta1,theta2,max_variance,{},total", TERM_NAMES.join(","))?;
    for e in episodes {
        let (t1, t2) = match &e.selected {
            Some(t) => (format!("{}", t[0]), format!("{}", t.get(1).copied().unwrap_or(f64::NAN))),
            None => (String::new(), String::new()),
        };
        let var = e.max_variance.map_or(String::new(), |v| format!("{v}"));
        let terms: Vec<String> = e.terms.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{t1},{t2},{var},{},{}", e.episode, terms.join(","), e.total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: MlpSpec,
    k: usize,
    latent_dim: usize,
    seed: u64,
    epoch: usize,
    train_params: Vec<Vec<f64>>,
    test_params: Vec<Vec<f64>>,
    learning_rate: f64,
    adam_step: u64,
    adam_sizes: Vec<usize>,
    gp: Vec<GpSnapshot>,
    episodes: Vec<EpisodeRecord>,
}

/// Writes weights, coefficient table, optimizer moments and the fitted GP.
pub fn save_checkpoint(path: &Path, state: &TrainingState, gp: &GpEnsemble) -> Result<(), IoError> {
    let meta = CheckpointMeta {
        spec: state.stack.spec.clone(),
        k: state.stack.k(),
        latent_dim: state.stack.latent_dim(),
        seed: state.seed,
        epoch: state.epoch,
        train_params: state.train_params.clone(),
        test_params: state.test_params.clone(),
        learning_rate: state.adam.learning_rate,
        adam_step: state.adam.step,
        adam_sizes: state.adam.sizes(),
        gp: gp.snapshots(),
        episodes: state.episodes.clone(),
    };
    let mut arrays = Vec::new();
    for (i, (b, shape)) in state.stack.buffers().iter().zip(state.stack.buffer_shapes()).enumerate() {
        arrays.push(NamedArray::new(format!("net{i}"), shape, b.to_vec()));
    }
    for (i, c) in state.coeffs.iter().enumerate() {
        arrays.push(NamedArray::new(format!("coeff{i}"), vec![c.component_count()], c.to_vec()));
    }
    let (m, v) = state.adam.moments();
    for (i, (a, b)) in m.iter().zip(v).enumerate() {
        arrays.push(NamedArray::new(format!("adam_m{i}"), vec![a.len()], a.clone()));
        arrays.push(NamedArray::new(format!("adam_v{i}"), vec![b.len()], b.clone()));
    }
    write_container(path, &meta, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainingState, GpEnsemble), PipelineError> {
    let (meta, arrays): (CheckpointMeta, Vec<NamedArray>) = read_container(path)?;
    let bad = |m: &str| PipelineError::Io(IoError::Format(m.to_string()));
    let mut stack = AutoencoderStack::init(meta.spec.clone(), meta.k, 0)?;
    let n_net = stack.buffer_shapes().len();
    let n_coef = meta.train_params.len();
    if arrays.len() != n_net + n_coef + 2 * meta.adam_sizes.len() {
        return Err(bad("array count does not match header"));
    }
    for (dst, src) in stack.buffers_mut().into_iter().zip(&arrays[..n_net]) {
        if dst.len() != src.data.len() {
            return Err(bad("network buffer size mismatch"));
        }
        dst.copy_from_slice(&src.data);
    }
    let coeffs = arrays[n_net..n_net + n_coef]
        .iter()
        .map(|a| LatentCoefficients::from_slice(meta.k, meta.latent_dim, &a.data))
        .collect::<Result<Vec<_>, _>>()?;
    let mut adam = AdamState::new(meta.learning_rate, &meta.adam_sizes);
    adam.step = meta.adam_step;
    let rest = &arrays[n_net + n_coef..];
    let first = rest.iter().step_by(2).map(|a| a.data.clone()).collect();
    let second = rest.iter().skip(1).step_by(2).map(|a| a.data.clone()).collect();
    adam.set_moments(first, second);
    let gp = GpEnsemble::from_snapshots(meta.k, meta.latent_dim, &meta.gp)?;
    let state = TrainingState {
        stack,
        coeffs,
        train_params: meta.train_params,
        test_params: meta.test_params,
        adam,
        epoch: meta.epoch,
        seed: meta.seed,
        episodes: meta.episodes,
        loss_log: Vec::new(),
    };
    Ok((state, gp))
}
