use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hlasdi::container::save_bundle;
use hlasdi::fd::{stencil_first, stencil_second, FirstMode, SecondMode};
use hlasdi::pipeline::{
    evaluate, generate_datasets, infer, load_checkpoint, relative_error, run_training, save_checkpoint,
    write_episodes_csv, write_heatmap_csv, write_loss_csv, DataProvider, DatasetProvider, ProblemConfig,
    TrainingConfig,
};
use hlasdi::{FdError, IoError, PipelineError};

#[derive(Parser)]
#[command(name = "hlasdi", version, about = "Reduced-order models with higher-order latent dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full-order model over the parameter grid.
    Fom(Common),
    /// Run every training episode and write a checkpoint.
    Train(Common),
    /// Predict one parameter from a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        theta: Vec<f64>,
        /// Output container; defaults to `<run_dir>/prediction.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the relative-error heatmap over the parameter grid.
    Eval(Common),
    /// Print finite-difference coefficients for the given spacings.
    Stencil {
        #[command(subcommand)]
        kind: StencilKind,
    },
}

#[derive(Subcommand)]
enum StencilKind {
    First {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, allow_negative_numbers = true)]
        b: f64,
        #[arg(long, value_enum, default_value_t = FirstArg::Forward)]
        mode: FirstArg,
    },
    Second {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, allow_negative_numbers = true)]
        b: f64,
        #[arg(long, allow_negative_numbers = true)]
        c: f64,
        #[arg(long, value_enum, default_value_t = SecondArg::Forward)]
        mode: SecondArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FirstArg {
    Forward,
    Central,
    Backward,
}

#[derive(Clone, Copy, ValueEnum)]
enum SecondArg {
    Forward,
    Mixed,
    Backward,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Stencil(#[from] FdError),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => e.category(),
            CliError::Stencil(_) => "stencil",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "dataset" => 3,
            "training" => 4,
            "divergence" => 5,
            "evaluation" => 6,
            "model" => 7,
            "gp" => 8,
            "fom" => 9,
            "io" => 10,
            _ => 11,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Pipeline(e.into())
    }
}

/// Top-level configuration file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    data_dir: PathBuf,
    run_dir: PathBuf,
    problem: ProblemConfig,
    training: toml::Table,
}

struct Run {
    data_dir: PathBuf,
    run_dir: PathBuf,
    problem: ProblemConfig,
    training: TrainingConfig,
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{}: {e}", path.display()))
}

fn load_run(common: &Common) -> Result<Run, PipelineError> {
    let path = &common.config;
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    let file: RunFile = toml::from_str(&text).map_err(|e| config_error(path, e))?;
    let mut table = file.training;
    if !table.contains_key("range") {
        let r = file.problem.range()?;
        let mut rt = toml::Table::new();
        rt.insert("lower".into(), toml::Value::try_from(r.lower).map_err(|e| config_error(path, e))?);
        rt.insert("upper".into(), toml::Value::try_from(r.upper).map_err(|e| config_error(path, e))?);
        table.insert("range".into(), toml::Value::Table(rt));
    }
    let mut training: TrainingConfig = table.try_into().map_err(|e| config_error(path, e))?;
    if let Some(seed) = common.seed {
        training.seed = seed;
    }
    training.validate()?;
    Ok(Run {
        data_dir: file.data_dir,
        run_dir: file.run_dir,
        problem: file.problem,
        training,
    })
}

fn checkpoint_path(run: &Run) -> PathBuf {
    run.run_dir.join("checkpoint.bin")
}

fn cmd_fom(common: &Common) -> Result<(), CliError> {
    let run = load_run(common)?;
    let family = run.problem.build()?;
    let params = run.training.testing_grid();
    let grid = serde_json::json!({ "n": run.training.grid, "range": run.training.range });
    let index = generate_datasets(family.as_ref(), &params, &run.data_dir, grid, run.training.seed)?;
    println!("wrote {} trajectories to {}", index.entries.len(), run.data_dir.display());
    Ok(())
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let run = load_run(common)?;
    let family = run.problem.build()?;
    let mut provider = DatasetProvider::open(&run.data_dir)?;
    let out = run_training(family.as_ref(), &run.training, &mut provider)?;
    std::fs::create_dir_all(&run.run_dir).map_err(IoError::from)?;
    save_checkpoint(&checkpoint_path(&run), &out.state, &out.gp)?;
    write_loss_csv(&run.run_dir.join("loss.csv"), &out.state.loss_log)?;
    write_episodes_csv(&run.run_dir.join("episodes.csv"), &out.state.episodes)?;
    println!(
        "trained {} epochs on {} parameters; checkpoint {}",
        out.state.epoch,
        out.state.train_params.len(),
        checkpoint_path(&run).display()
    );
    Ok(())
}

fn cmd_infer(common: &Common, theta: &[f64], out: Option<PathBuf>) -> Result<(), CliError> {
    let run = load_run(common)?;
    let family = run.problem.build()?;
    let (state, gp) = load_checkpoint(&checkpoint_path(&run))?;
    let truth = DatasetProvider::open(&run.data_dir).and_then(|mut p| p.bundle(theta)).ok();
    let times = truth.as_ref().map_or_else(|| family.times(), |t| t.times.clone());
    let start = std::time::Instant::now();
    let pred = infer(&state.stack, &gp, theta, &family.initial_channels(theta).map_err(PipelineError::from)?, &times)?;
    let elapsed = start.elapsed();
    let out = out.unwrap_or_else(|| run.run_dir.join("prediction.bin"));
    save_bundle(&out, &pred, family.name(), serde_json::Value::Null, state.seed)?;
    println!("wrote {} ({} frames, {:.3} s)", out.display(), pred.frame_count(), elapsed.as_secs_f64());
    match truth {
        Some(t) => {
            for (k, (p, u)) in pred.channels.iter().zip(&t.channels).enumerate() {
                println!("channel {k}: relative error {:.6}", relative_error(p, u)?);
            }
        }
        None => println!("no reference trajectory for {theta:?}"),
    }
    Ok(())
}

fn cmd_eval(common: &Common) -> Result<(), CliError> {
    let run = load_run(common)?;
    let family = run.problem.build()?;
    let (state, gp) = load_checkpoint(&checkpoint_path(&run))?;
    let mut provider = DatasetProvider::open(&run.data_dir)?;
    let rows = evaluate(
        &state.stack,
        &gp,
        family.as_ref(),
        &run.training.testing_grid(),
        &state.train_params,
        &mut provider,
    )?;
    let path = run.run_dir.join("heatmap.csv");
    write_heatmap_csv(&path, &rows)?;
    let worst: Vec<f64> = (0..rows.first().map_or(0, |r| r.errors.len()))
        .map(|c| rows.iter().map(|r| r.errors[c]).fold(0.0, f64::max))
        .collect();
    println!("wrote {} ({} parameters); max error per channel {worst:?}", path.display(), rows.len());
    Ok(())
}

fn cmd_stencil(kind: &StencilKind) -> Result<(), CliError> {
    let s = match *kind {
        StencilKind::First { a, b, mode } => {
            let mode = match mode {
                FirstArg::Forward => FirstMode::Forward,
                FirstArg::Central => FirstMode::Central,
                FirstArg::Backward => FirstMode::Backward,
            };
            stencil_first(a, b, mode)?
        }
        StencilKind::Second { a, b, c, mode } => {
            let mode = match mode {
                SecondArg::Forward => SecondMode::Forward,
                SecondArg::Mixed => SecondMode::Mixed,
                SecondArg::Backward => SecondMode::Backward,
            };
            stencil_second(a, b, c, mode)?
        }
    };
    let c: Vec<String> = s.coefficients.iter().map(|v| format!("{v}")).collect();
    let o: Vec<String> = s.offsets.iter().map(|v| format!("{v}")).collect();
    println!("({})", c.join(", "));
    println!("offsets ({})", o.join(", "));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fom(c) => cmd_fom(c),
        Command::Train(c) => cmd_train(c),
        Command::Infer { common, theta, out } => cmd_infer(common, theta, out.clone()),
        Command::Eval(c) => cmd_eval(c),
        Command::Stencil { kind } => cmd_stencil(kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
