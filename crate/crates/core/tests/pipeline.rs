mod common;

use common::LiftedOscillators;
use hlasdi::autoencoder::{AutoencoderStack, MlpSpec};
use hlasdi::fom::{ParameterFamily, ParameterRange};
use hlasdi::gp::GpEnsemble;
use hlasdi::latent::LatentCoefficients;
use hlasdi::losses::Penalty;
use hlasdi::pipeline::*;
use hlasdi::PipelineError;
use ndarray::{array, Array2};

fn family() -> LiftedOscillators {
    LiftedOscillators {
        frames: 21,
        ..LiftedOscillators::default()
    }
}

fn config(iterations: usize, frequency: usize) -> TrainingConfig {
    let mut c = TrainingConfig::new(
        "8-4-2",
        [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1e-4],
        iterations,
        frequency,
        family().range(),
    );
    c.grid = [3, 3];
    c.n_samples = 5;
    c.seed = 17;
    c
}

#[test]
fn relative_error_examples() {
    let truth = Array2::from_shape_fn((5, 4), |(j, i)| (j * 4 + i) as f64 * 0.3 - 1.0);
    assert_eq!(relative_error(&truth, &truth).unwrap(), 0.0);
    // Population standard deviation of an arithmetic sequence 0..20 step 0.3.
    let n = 20.0f64;
    let sigma = 0.3 * ((n * n - 1.0) / 12.0).sqrt();
    let shifted = &truth + 0.05;
    assert!((relative_error(&shifted, &truth).unwrap() - 0.05 / sigma).abs() < 1e-12);
    let mut one_frame = truth.clone();
    one_frame.row_mut(2).mapv_inplace(|v| v - 0.2);
    assert!((relative_error(&one_frame, &truth).unwrap() - 0.2 / sigma).abs() < 1e-12);
    let a = relative_error(&(&one_frame * 3.5), &(&truth * 3.5)).unwrap();
    assert!((a - 0.2 / sigma).abs() < 1e-12);
}

#[test]
fn relative_error_rejects_bad_input() {
    let flat = Array2::from_elem((3, 2), 1.5);
    assert!(matches!(relative_error(&flat, &flat), Err(PipelineError::DegenerateTruth)));
    let a = Array2::<f64>::zeros((3, 2));
    let b = Array2::<f64>::zeros((2, 3));
    assert!(matches!(relative_error(&a, &b), Err(PipelineError::Shape(_))));
}

#[test]
fn config_validation() {
    let mut c = config(10, 3);
    assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    c.sampling_frequency = 5;
    c.validate().unwrap();
    c.loss_weights[2] = -1.0;
    assert!(c.validate().is_err());
    let mut c = config(10, 5);
    c.frame_stride = 0;
    assert!(c.validate().is_err());
    let mut c = config(10, 5);
    c.architecture = "8".into();
    assert!(c.validate().is_err());
    assert_eq!(config(10, 5).initial_parameters(), family().range().corners());
}

#[test]
fn zero_iterations_leave_state_unchanged() {
    let fam = family();
    let cfg = config(10, 5);
    let mut state = TrainingState::new(cfg.spec().unwrap(), 2, 1e-3, cfg.initial_parameters(), &cfg.testing_grid(), 1).unwrap();
    let before = state.stack.clone();
    let bundles: Vec<_> = state.train_params.iter().map(|t| fam.solve(t).unwrap()).collect();
    let data = loss_data(&bundles, 1, Default::default()).unwrap();
    train_episode(&mut state, &cfg.settings().unwrap(), &data, 0).unwrap();
    assert_eq!(state.stack, before);
    assert_eq!(state.epoch, 0);
    assert!(state.loss_log.is_empty());
    assert_eq!(state.test_params.len(), 5);
}

#[test]
fn micro_problem_loss_drops_below_one_percent() {
    let fam = family();
    let mut cfg = config(2000, 2000);
    cfg.architecture = "8-2".into();
    cfg.learning_rate = 1e-2;
    cfg.penalties = Some([Penalty::Mse; 6]);
    cfg.initial_training = Some(vec![vec![1.0, 0.1]]);
    let mut state = TrainingState::new(cfg.spec().unwrap(), 2, cfg.learning_rate, cfg.initial_parameters(), &[], 3).unwrap();
    let bundles = vec![fam.solve(&[1.0, 0.1]).unwrap()];
    let data = loss_data(&bundles, 1, Default::default()).unwrap();
    train_episode(&mut state, &cfg.settings().unwrap(), &data, 2000).unwrap();
    let first = state.loss_log.first().unwrap().total;
    let last = state.loss_log.last().unwrap().total;
    assert!(last < 0.01 * first, "{first} -> {last}");
}

#[test]
fn episodes_grow_training_set_and_are_deterministic() {
    let fam = family();
    let cfg = config(60, 20);
    let run = || {
        let mut p = SolveProvider::new(&fam);
        run_training(&fam, &cfg, &mut p).unwrap()
    };
    let a = run();
    assert_eq!(a.state.train_params.len(), 4 + 2);
    assert_eq!(a.state.test_params.len(), 9 - 6);
    assert_eq!(a.state.episodes.len(), 3);
    let grid = cfg.testing_grid();
    for e in &a.state.episodes[..2] {
        let sel = e.selected.as_ref().unwrap();
        assert!(grid.iter().any(|g| same_theta(g, sel)));
        assert!(!cfg.initial_parameters().iter().any(|g| same_theta(g, sel)));
        assert!(!a.state.test_params.iter().any(|g| same_theta(g, sel)));
        assert!(e.max_variance.unwrap() >= 0.0);
    }
    assert!(a.state.episodes[2].selected.is_none());
    assert_eq!(a.state.loss_log.len(), 60);

    let b = run();
    assert_eq!(a.state.stack, b.state.stack);
    assert_eq!(a.state.loss_log.last().unwrap().total, b.state.loss_log.last().unwrap().total);
    assert_eq!(a.state.train_params, b.state.train_params);
}

#[test]
fn inference_at_training_point_uses_trained_coefficients() {
    let fam = family();
    let cfg = config(20, 20);
    let mut p = SolveProvider::new(&fam);
    let out = run_training(&fam, &cfg, &mut p).unwrap();
    for (theta, c) in out.state.train_params.iter().zip(&out.state.coeffs) {
        let m = out.gp.mean(theta).unwrap();
        for (a, b) in m.to_vec().iter().zip(c.to_vec()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
    let theta = &out.state.train_params[0];
    let truth = fam.solve(theta).unwrap();
    let pred = infer(&out.state.stack, &out.gp, theta, &fam.initial_channels(theta).unwrap(), &truth.times).unwrap();
    assert_eq!(pred.frame_count(), truth.frame_count());
    assert_eq!(pred.k(), 2);
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let fam = family();
    let cfg = config(40, 20);
    let mut p = SolveProvider::new(&fam);
    let out = run_training(&fam, &cfg, &mut p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &out.state, &out.gp).unwrap();
    let (state, gp) = load_checkpoint(&path).unwrap();
    assert_eq!(state.stack, out.state.stack);
    assert_eq!(state.coeffs, out.state.coeffs);
    assert_eq!(state.epoch, 40);
    assert_eq!(state.adam.step, out.state.adam.step);
    assert_eq!(state.adam.moments(), out.state.adam.moments());
    assert_eq!(state.episodes, out.state.episodes);
    let theta = [1.02, 0.07];
    let ic = fam.initial_channels(&theta).unwrap();
    let times = fam.times();
    let a = infer(&out.state.stack, &out.gp, &theta, &ic, &times).unwrap();
    let b = infer(&state.stack, &gp, &theta, &ic, &times).unwrap();
    for (x, y) in a.channels.iter().zip(&b.channels) {
        assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() <= 1e-12));
    }
}

fn toy_gp(params: &[Vec<f64>], c_of: impl Fn(&[f64]) -> f64) -> GpEnsemble {
    let table: Vec<LatentCoefficients> = params
        .iter()
        .map(|t| {
            let mut c = LatentCoefficients::zeros(2, 2);
            c.c[0] = array![[-c_of(t), 0.0], [0.0, -1.0]];
            c
        })
        .collect();
    GpEnsemble::fit(params, &table).unwrap()
}

#[test]
fn greedy_single_candidate_is_returned() {
    let fam = family();
    let stack = AutoencoderStack::init(MlpSpec::parse("8-2").unwrap(), 2, 0).unwrap();
    let train = vec![vec![0.9, 0.05], vec![1.1, 0.15], vec![0.9, 0.15]];
    let gp = toy_gp(&train, |t| t[0]);
    let (sel, scores) = greedy_sample(&stack, &gp, &[vec![1.0, 0.1]], &fam, &fam.times(), 5, 0).unwrap();
    assert_eq!(sel, 0);
    assert_eq!(scores.len(), 1);
}

#[test]
fn greedy_zero_variance_ties_pick_lowest_index() {
    let fam = family();
    let stack = AutoencoderStack::init(MlpSpec::parse("8-2").unwrap(), 2, 0).unwrap();
    let train = vec![vec![0.9, 0.05], vec![1.1, 0.15], vec![0.9, 0.15]];
    let gp = toy_gp(&train, |t| 1.0 + t[0]);
    let (sel, scores) = greedy_sample(&stack, &gp, &train, &fam, &fam.times(), 6, 1).unwrap();
    assert_eq!(sel, 0);
    assert!(scores.iter().all(|s| *s < 1e-12), "{scores:?}");
}

#[test]
fn greedy_prefers_parameter_far_from_training_support() {
    let fam = LiftedOscillators {
        frames: 21,
        range: ParameterRange::new([0.5, 0.0], [3.0, 0.5]),
        ..LiftedOscillators::default()
    };
    let stack = AutoencoderStack::init(MlpSpec::parse("8-2").unwrap(), 2, 0).unwrap();
    let train = vec![vec![0.9, 0.05], vec![1.1, 0.05], vec![0.9, 0.15], vec![1.1, 0.15]];
    let gp = toy_gp(&train, |t| t[0] + t[1]);
    // Posterior variance is near zero next to a training point and close to
    // the prior far away.
    let candidates = vec![vec![0.9001, 0.0501], vec![2.5, 0.45]];
    let (sel, scores) = greedy_sample(&stack, &gp, &candidates, &fam, &fam.times(), 20, 2).unwrap();
    assert_eq!(sel, 1, "{scores:?}");
}

#[test]
fn dataset_provider_round_trip_and_missing_entry() {
    let fam = family();
    let dir = tempfile::tempdir().unwrap();
    let params = vec![vec![0.9, 0.05], vec![1.0, 0.1]];
    let index = generate_datasets(&fam, &params, dir.path(), serde_json::json!({"n": [1, 2]}), 5).unwrap();
    assert_eq!(index.entries.len(), 2);
    let mut p = DatasetProvider::open(dir.path()).unwrap();
    assert_eq!(p.bundle(&[1.0, 0.1]).unwrap(), fam.solve(&[1.0, 0.1]).unwrap());
    assert!(matches!(p.bundle(&[1.05, 0.1]), Err(PipelineError::MissingDataset(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(DatasetProvider::open(empty.path()), Err(PipelineError::MissingDataset(_))));
}

#[test]
fn csv_outputs_have_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        HeatmapRow {
            theta: vec![0.5, 0.2],
            errors: vec![0.01, 0.02],
            is_training: true,
        },
        HeatmapRow {
            theta: vec![0.55, 0.2],
            errors: vec![0.03, 0.04],
            is_training: false,
        },
    ];
    let p = dir.path().join("h.csv");
    write_heatmap_csv(&p, &rows).unwrap();
    let s = std::fs::read_to_string(&p).unwrap();
    assert_eq!(s, "theta1,theta2,eps_u,eps_v,is_training\n0.5,0.2,0.01,0.02,1\n0.55,0.2,0.03,0.04,0\n");
    let log = vec![LossRecord {
        epoch: 3,
        terms: [1.0, 2.0, 0.0, 0.0, 0.5, 0.5, 1e-3],
        total: 4.0,
    }];
    let p = dir.path().join("l.csv");
    write_loss_csv(&p, &log).unwrap();
    let s = std::fs::read_to_string(&p).unwrap();
    assert_eq!(
        s,
        "epoch,recon,latent_dynamics,rollout,ic_rollout,consistency,chain_rule,coefficient,total\n3,1,2,0,0,0.5,0.5,0.001,4\n"
    );
}
