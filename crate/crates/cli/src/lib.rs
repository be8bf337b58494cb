//! The `casil` command line: demonstration generation, training,
//! evaluation, sweeps and plots.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 on bad flags, a bad
//! config file or a missing input. Relative paths resolve under
//! `CASIL_RUN_ROOT` when it is set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use casil::cli_io::{load_checkpoint, resolve_out, save_checkpoint, ExperimentConfig, RunRecord};
use casil::dataset::{read_dataset, write_dataset};
use casil::env::{generate_demos, BoundarySidecar, Difficulty, EnvKind};
use casil::evaluation::{evaluate, DEFAULT_EPISODES};
use casil::experiment::{captions_for, data_drop_sweep, epsilon_sweep, fit, option_count_sweep, SweepSettings, SweepTable};
use casil::model::Mode;
use casil::types::RunConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod plot;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const BOUNDARY_FILE: &str = "boundaries.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Debug, Parser)]
#[command(name = "casil", version, about = "Cognition-action skill imitation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record expert demonstrations and their phase boundaries.
    GenDemos(GenDemosArgs),
    /// Pre-train the encoders and train one model.
    Train(TrainArgs),
    /// Roll out a checkpoint in fresh evaluation worlds.
    Eval(EvalArgs),
    /// Train and evaluate a grid of settings.
    Sweep(SweepArgs),
    /// Draw sweep results as SVG line plots.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDemosArgs {
    #[arg(long)]
    pub env: EnvKind,
    #[arg(long, default_value = "easy")]
    pub difficulty: Difficulty,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by `train` and `sweep`; flags override the config file.
#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub difficulty: Option<Difficulty>,
    /// Demonstrations to generate.
    #[arg(long)]
    pub demos: Option<usize>,
    #[arg(long)]
    pub demo_seed: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Directory written by `gen-demos`; demonstrations are generated when
    /// absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub env: EnvKind,
    #[arg(long, default_value = "easy")]
    pub difficulty: Difficulty,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    DataDrop,
    OptionCount,
    Epsilon,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::DataDrop => "data-drop",
            SweepKind::OptionCount => "option-count",
            SweepKind::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated repetition seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', default_value = "casil,hbc,no-cognition")]
    pub modes: Vec<Mode>,
    /// Retained counts, skill counts or ε values; defaults depend on the sweep.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Sweep output directories.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Why a command stopped.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or config; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The command ran and failed; exit code 1.
    #[error(transparent)]
    Failed(#[from] casil::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot::plot(a),
    }
}

fn gen_demos(a: GenDemosArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let out = resolve_out(&a.out);
    let demos = generate_demos(a.env, a.difficulty, a.n, a.seed)?;
    std::fs::create_dir_all(&out)?;
    write_dataset(&out.join(DATASET_FILE), &demos.dataset)?;
    demos.sidecar().write(&out.join(BOUNDARY_FILE))?;
    let m = &demos.dataset.manifest;
    let steps: usize = demos.dataset.trajectories.iter().map(|t| t.len()).sum();
    println!(
        "{}: {} trajectories, {steps} steps, obs_dim {}, action_dim {}, {} skills -> {}",
        m.task,
        m.trajectory_count,
        m.obs_dim,
        m.action_dim,
        m.prior.len(),
        out.display()
    );
    Ok(())
}

/// Merges a config file with flag overrides and validates the result.
pub fn resolve_experiment(a: &ExperimentArgs, mode: Option<Mode>) -> CliResult<ExperimentConfig> {
    let mut c = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let c: ExperimentConfig = toml_config(&text)?;
            c
        }
        None => {
            let env = a.env.ok_or_else(|| CliError::Usage("either --config or --env is required".into()))?;
            let out = a.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
            ExperimentConfig {
                env,
                difficulty: Difficulty::Easy,
                mode: Mode::Casil,
                demos: 100,
                demo_seed: 1,
                retained: vec![20, 50, 80],
                episodes: DEFAULT_EPISODES,
                out,
                run: RunConfig::default(),
            }
        }
    };
    if let Some(v) = a.env {
        c.env = v;
    }
    if let Some(v) = a.difficulty {
        c.difficulty = v;
    }
    if let Some(v) = a.demos {
        c.demos = v;
        c.retained.retain(|&r| r <= v);
    }
    if let Some(v) = a.demo_seed {
        c.demo_seed = v;
    }
    if let Some(v) = a.seed {
        c.run.seed = v;
    }
    if let Some(v) = a.steps {
        c.run.train_steps = v;
    }
    if let Some(v) = a.epsilon {
        c.run.epsilon = v;
    }
    if let Some(v) = a.episodes {
        c.episodes = v;
    }
    if let Some(v) = &a.out {
        c.out = v.clone();
    }
    if let Some(m) = mode {
        c.mode = m;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    c.out = resolve_out(&c.out);
    Ok(c)
}

fn toml_config(text: &str) -> CliResult<ExperimentConfig> {
    ExperimentConfig::from_toml(text).map_err(|e| CliError::Usage(e.to_string()))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let exp = resolve_experiment(&a.experiment, a.mode)?;
    let spec = exp.task_spec()?;
    let dataset = match &a.data {
        Some(dir) => {
            let path = resolve_out(dir).join(DATASET_FILE);
            if !path.is_file() {
                return Err(CliError::Usage(format!("no dataset at {}", path.display())));
            }
            let d = read_dataset(&path)?;
            if d.manifest.task != spec.task {
                return Err(CliError::Usage(format!(
                    "dataset task {:?} does not match --env {}",
                    d.manifest.task, exp.env
                )));
            }
            d
        }
        None => generate_demos(exp.env, exp.difficulty, exp.demos, exp.demo_seed)?.dataset,
    };
    let captions = captions_for(exp.env, exp.difficulty, &exp.run)?;
    let (bundle, log) = fit(spec, &dataset, &captions, exp.run.clone(), exp.mode)?;
    std::fs::create_dir_all(&exp.out)?;
    save_checkpoint(&exp.out.join(CHECKPOINT_FILE), &bundle)?;
    std::fs::write(exp.out.join(LOG_FILE), log.to_jsonl())?;
    std::fs::write(exp.out.join("experiment.toml"), exp.to_toml()?)?;
    RunRecord::new("train", &exp).write(&exp.out)?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!(
            "{} on {} trajectories: loss {:.4} -> {:.4} after {} steps -> {}",
            exp.mode,
            dataset.trajectories.len(),
            first.total,
            last.total,
            last.step,
            exp.out.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let path = resolve_out(&a.checkpoint);
    if !path.is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", path.display())));
    }
    let bundle = load_checkpoint(&path)?;
    let spec = a.env.task_spec()?;
    if spec.task != bundle.spec.task {
        return Err(CliError::Usage(format!(
            "checkpoint was trained on {:?}, not {}",
            bundle.spec.task, a.env
        )));
    }
    let report = evaluate(&bundle, a.env, a.difficulty, a.episodes, a.seed)?;
    println!(
        "{} {} {}: success {:.3} ± {:.3}, progress {:.2} ± {:.2} over {} episodes",
        report.mode,
        report.env,
        report.difficulty,
        report.success_mean,
        report.success_std,
        report.progress_mean,
        report.progress_std,
        report.episodes
    );
    if let Some(out) = &a.out {
        let out = resolve_out(out);
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(casil::Error::InvalidArgument(e.to_string())))?;
        std::fs::write(out, text + "\n")?;
    }
    Ok(())
}

fn default_values(kind: SweepKind, exp: &ExperimentConfig) -> CliResult<Vec<f64>> {
    Ok(match kind {
        SweepKind::DataDrop => {
            let mut v: Vec<f64> = exp.retained.iter().map(|&r| r as f64).collect();
            if !exp.retained.contains(&exp.demos) {
                v.insert(0, exp.demos as f64);
            }
            v
        }
        SweepKind::OptionCount => {
            let k = exp.task_spec()?.prior.len();
            [k.saturating_sub(2), k, k + 2]
                .into_iter()
                .filter(|&x| x > 0)
                .map(|x| x as f64)
                .collect()
        }
        SweepKind::Epsilon => vec![0.0, 0.5, 1.0, 2.0],
    })
}

fn as_counts(values: &[f64], what: &str) -> CliResult<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Usage(format!("{what} must be positive integers, got {v}")))
            }
        })
        .collect()
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let exp = resolve_experiment(&a.experiment, None)?;
    if a.seeds.is_empty() || a.modes.is_empty() {
        return Err(CliError::Usage("need at least one seed and one mode".into()));
    }
    let values = if a.values.is_empty() {
        default_values(a.kind, &exp)?
    } else {
        a.values.clone()
    };
    let settings = SweepSettings {
        kind: exp.env,
        difficulty: exp.difficulty,
        modes: a.modes.clone(),
        seeds: a.seeds.clone(),
        episodes: exp.episodes,
        demos: exp.demos,
        config: exp.run.clone(),
        cache: Some(exp.out.join("cells")),
    };
    std::fs::create_dir_all(&exp.out)?;
    RunRecord::new(&format!("sweep {}", a.kind.name()), &exp).write(&exp.out)?;
    let table = match a.kind {
        SweepKind::DataDrop => {
            let counts = as_counts(&values, "retained counts")?;
            if let Some(r) = counts.iter().find(|&&r| r > exp.demos) {
                return Err(CliError::Usage(format!("cannot retain {r} of {} demonstrations", exp.demos)));
            }
            data_drop_sweep(&settings, &counts)?
        }
        SweepKind::OptionCount => option_count_sweep(&settings, &as_counts(&values, "skill counts")?)?,
        SweepKind::Epsilon => {
            if let Some(e) = values.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
                return Err(CliError::Usage(format!("epsilon {e} must be finite and non-negative")));
            }
            epsilon_sweep(&settings, &values)?
        }
    };
    write_sweep(&exp.out, &table)?;
    print!("{}", table.to_text());
    Ok(())
}

fn write_sweep(dir: &Path, table: &SweepTable) -> CliResult<()> {
    std::fs::write(dir.join("table.txt"), table.to_text())?;
    std::fs::write(dir.join("cells.jsonl"), table.to_jsonl())?;
    let json = serde_json::to_string(table).map_err(|e| CliError::Failed(casil::Error::InvalidArgument(e.to_string())))?;
    std::fs::write(dir.join(SWEEP_FILE), json + "\n")?;
    Ok(())
}

/// Reads the sweep table a `sweep` run left in `dir`.
pub fn read_sweep(dir: &Path) -> CliResult<SweepTable> {
    let path = dir.join(SWEEP_FILE);
    if !path.is_file() {
        return Err(CliError::Usage(format!("no sweep results at {}", path.display())));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Failed(casil::Error::Parse {
            offset: e.column(),
            message: format!("{}: {e}", path.display()),
        })
    })
}

/// Boundaries written next to a generated dataset.
pub fn read_boundaries(dir: &Path) -> CliResult<BoundarySidecar> {
    Ok(BoundarySidecar::read(&dir.join(BOUNDARY_FILE))?)
}
