//! Command-line front end: `prepare`, `train` and `experiment`.
//!
//! Settings come from built-in defaults, then an optional TOML file given
//! with `--config`, then command-line flags. The effective configuration is
//! written to `config.toml` in every output directory.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datasets::{
    convert_dump, generate_synthetic, load_bundle, write_bundle, DatasetBundle, DumpLayout,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_experiment, evaluate, hyperparameter_sweep, noise_robustness_experiment,
    ExperimentReport, ExperimentSetup, MetricSet, RunReport, SweepAxis, WeightSummary,
    DEFAULT_MAPE_THRESHOLD, NOISE_LEVELS, REPORT_SCHEMA_VERSION,
};
use crate::grid_graph::{GraphOperator, Neighborhood};
use crate::model::{ModelConfig, Variant};
use crate::pipeline::{run_pgasr, train_pn_only, TrainConfig, TrainContext};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Graph(_) | Error::Load { .. } | Error::Dataset(_) => 2,
        _ => 1,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    #[default]
    Pgasr,
    PnDis,
    PnCon,
}

/// Experiment options read from the `[experiment]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentOptions {
    pub levels: Vec<f64>,
    /// Number of seeds, counted up from the master seed.
    pub seeds: usize,
    /// Sweep axis; all three axes when absent.
    pub axis: Option<SweepAxis>,
    /// Sweep values; the axis defaults when empty.
    pub values: Vec<f64>,
    pub mape_threshold: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            levels: NOISE_LEVELS.to_vec(),
            seeds: 4,
            axis: None,
            values: Vec::new(),
            mape_threshold: DEFAULT_MAPE_THRESHOLD,
        }
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodArg,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentOptions,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_SNAPSHOT), self.to_toml()?)?;
        Ok(())
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::config("no dataset given; pass --data"))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("no output directory given; pass --out"))
    }

    fn seeds(&self) -> Result<Vec<u64>> {
        if self.experiment.seeds == 0 {
            return Err(Error::config("--seeds must be at least 1"));
        }
        Ok((0..self.experiment.seeds as u64)
            .map(|i| self.train.seed + i)
            .collect())
    }

    fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            mape_threshold: self.experiment.mape_threshold,
            jobs: self.jobs,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pgasr",
    version,
    about = "Physics-guided urban flow prediction with active sample reweighting"
)]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle or convert a public dump.
    Prepare(PrepareArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Run the noise, ablation or sweep protocol.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file with settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generate synthetic conservation-law data.
    #[arg(long, conflicts_with = "convert")]
    pub synthetic: bool,
    /// Convert a public dump directory.
    #[arg(long, value_name = "DUMP")]
    pub convert: Option<PathBuf>,
    /// Dump layout name (NYCBike1, NYCBike2, NYCTaxi, BJTaxi); detected from the path when absent.
    #[arg(long, requires = "convert")]
    pub layout: Option<String>,
    /// Grid rows.
    #[arg(long = "h")]
    pub height: Option<usize>,
    /// Grid columns.
    #[arg(long = "w")]
    pub width: Option<usize>,
    /// Timeline length.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Input window length.
    #[arg(long)]
    pub input_len: Option<usize>,
    /// Fraction of training samples to corrupt.
    #[arg(long)]
    pub corruption: Option<f64>,
    /// Grid stencil: four or eight.
    #[arg(long, value_parser = parse_neighborhood)]
    pub neighborhood: Option<Neighborhood>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Latent density width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Number of spatio-temporal blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Uncertainty coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Consistency coefficient.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Number of pretraining folds.
    #[arg(long = "d")]
    pub folds: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training batch size and weight normalization chunk.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epoch cap of every training phase.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// MC-dropout passes.
    #[arg(long)]
    pub mc_passes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Method to train.
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Noise,
    Ablation,
    Sweep,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment protocol.
    #[arg(value_enum)]
    pub protocol: Protocol,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Number of seeds, counted up from --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Sweep axis: alpha, beta or folds; all three when absent.
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn parse_neighborhood(s: &str) -> std::result::Result<Neighborhood, String> {
    match s.to_ascii_lowercase().as_str() {
        "four" | "4" => Ok(Neighborhood::Four),
        "eight" | "8" => Ok(Neighborhood::Eight),
        other => Err(format!("unknown neighborhood {other:?}; use four or eight")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.out, common.out.clone().map(Some));
    set(&mut cfg.jobs, common.jobs);
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synthetic.seed = seed;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    set(&mut cfg.model.embed_dim, m.embed_dim);
    set(&mut cfg.model.n_st_blocks, m.blocks);
    set(&mut cfg.model.dropout_rate, m.dropout);
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) {
    set(&mut cfg.train.alpha, t.alpha);
    set(&mut cfg.train.beta, t.beta);
    set(&mut cfg.train.folds, t.folds);
    set(&mut cfg.train.learning_rate, t.lr);
    set(&mut cfg.train.batch_size, t.batch_size);
    set(&mut cfg.train.max_epochs, t.max_epochs);
    set(&mut cfg.train.mc_passes, t.mc_passes);
}

/// Merges defaults, the config file and flags for `prepare`.
pub fn prepare_config(args: &PrepareArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    let s = &mut cfg.synthetic;
    set(&mut s.height, args.height);
    set(&mut s.width, args.width);
    set(&mut s.n_steps, args.steps);
    set(&mut s.input_len, args.input_len);
    set(&mut s.corruption_fraction, args.corruption);
    set(&mut s.neighborhood, args.neighborhood);
    cfg.synthetic.validate()?;
    Ok(cfg)
}

/// Merges defaults, the config file and flags for `train`.
pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    set(&mut cfg.data, args.data.clone().map(Some));
    set(&mut cfg.method, args.method);
    apply_model(&mut cfg, &args.model);
    apply_train(&mut cfg, &args.train);
    match cfg.method {
        MethodArg::PnDis => cfg.model.variant = Variant::PnDis,
        MethodArg::PnCon => cfg.model.variant = Variant::PnCon,
        MethodArg::Pgasr => {}
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Merges defaults, the config file and flags for `experiment`.
pub fn experiment_config(args: &ExperimentArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    set(&mut cfg.data, args.data.clone().map(Some));
    apply_model(&mut cfg, &args.model);
    apply_train(&mut cfg, &args.train);
    set(&mut cfg.experiment.levels, args.levels.clone());
    set(&mut cfg.experiment.seeds, args.seeds);
    set(&mut cfg.experiment.axis, args.axis.map(Some));
    set(&mut cfg.experiment.values, args.values.clone());
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg
        .experiment
        .levels
        .iter()
        .any(|l| !(0.0..=1.0).contains(l))
    {
        return Err(Error::config("noise levels must lie in [0, 1]"));
    }
    if !cfg.experiment.values.is_empty() && cfg.experiment.axis.is_none() {
        return Err(Error::config("--values needs --axis"));
    }
    Ok(cfg)
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::config(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::config(format!("invalid output path {}", out.display())))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    Ok(staging)
}

fn publish(staging: &Path, out: &Path) -> Result<()> {
    if out.exists() {
        fs::remove_dir(out)?;
    }
    fs::rename(staging, out)?;
    Ok(())
}

fn summarize(bundle: &DatasetBundle) -> String {
    format!(
        "{}: {}x{} grid, T_in {}, train/val/test {}/{}/{}, {} corrupted",
        bundle.name,
        bundle.graph.height(),
        bundle.graph.width(),
        bundle.input_len(),
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len(),
        bundle.corrupted_train_ids().len()
    )
}

/// Writes a bundle to `--out`; nothing is left behind on failure.
pub fn cmd_prepare(args: &PrepareArgs) -> Result<PathBuf> {
    let cfg = prepare_config(args)?;
    let out = cfg.out_dir()?.to_path_buf();
    if !args.synthetic && args.convert.is_none() {
        return Err(Error::config("pass --synthetic or --convert <DUMP>"));
    }
    let staging = staging_dir(&out)?;
    let result = (|| {
        if let Some(src) = &args.convert {
            let layout = match &args.layout {
                Some(name) => DumpLayout::known(name)
                    .ok_or_else(|| Error::config(format!("unknown dump layout {name:?}")))?,
                None => DumpLayout::detect(src).ok_or_else(|| {
                    Error::config(format!(
                        "cannot infer the layout of {}; pass --layout",
                        src.display()
                    ))
                })?,
            };
            convert_dump(src, &layout, &staging)?;
        } else {
            write_bundle(&generate_synthetic(&cfg.synthetic)?, &staging)?;
        }
        let bundle = load_bundle(&staging)?;
        cfg.write_snapshot(&staging)?;
        Ok(bundle)
    })();
    match result {
        Ok(bundle) => {
            publish(&staging, &out)?;
            println!("{}", summarize(&bundle));
            println!("wrote {}", out.display());
            Ok(out)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn print_metrics(label: &str, m: &MetricSet) {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
    println!(
        "{label}: MAE in {:.4} out {:.4} | MAPE in {} out {} (targets >= {})",
        m.mae_in,
        m.mae_out,
        pct(m.mape_in),
        pct(m.mape_out),
        m.mape_mask_threshold
    );
}

/// Trains one model into `--out` and writes `report.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunReport> {
    let cfg = train_config(args)?;
    let out = cfg.out_dir()?.to_path_buf();
    let bundle = load_bundle(cfg.data_dir()?)?;
    cfg.write_snapshot(&out)?;
    let outcome = match cfg.method {
        MethodArg::Pgasr => run_pgasr(&bundle, &cfg.model, &cfg.train, Some(&out))?,
        MethodArg::PnDis | MethodArg::PnCon => {
            train_pn_only(&bundle, &cfg.model, &cfg.train, Some(&out))?
        }
    };
    let op = GraphOperator::new(
        &bundle.graph,
        cfg.model.chebyshev_order,
        cfg.model.lambda_max,
    )?;
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    let test = evaluate(
        &outcome.model,
        &bundle.test,
        &ctx,
        cfg.train.eval_batch,
        cfg.experiment.mape_threshold,
    )?;
    let (phases, execution) = RunReport::phases_from(&outcome.records);
    let mut snapshot = serde_json::to_value(&cfg)?;
    if let Some(obj) = snapshot.as_object_mut() {
        for key in ["out", "data", "jobs", "synthetic", "experiment"] {
            obj.remove(key);
        }
    }
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: serde_json::to_value(cfg.method)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        dataset: bundle.name.clone(),
        config: snapshot,
        seed: cfg.train.seed,
        test,
        weights: outcome
            .table
            .as_ref()
            .map(|t| WeightSummary::from_table(t, &bundle)),
        phases,
        execution,
    };
    report.write(&out)?;
    print_metrics("test", &report.test);
    if let Some(w) = &report.weights {
        if let Some(ratio) = w.ratio {
            println!("mean weight corrupted / clean: {ratio:.4}");
        }
    }
    Ok(report)
}

/// Runs a protocol and writes `report.json` plus its figure table.
pub fn cmd_experiment(args: &ExperimentArgs) -> Result<ExperimentReport> {
    let cfg = experiment_config(args)?;
    let out = cfg.out_dir()?.to_path_buf();
    let bundle = load_bundle(cfg.data_dir()?)?;
    let seeds = cfg.seeds()?;
    cfg.write_snapshot(&out)?;
    let setup = cfg.setup();
    let report = match args.protocol {
        Protocol::Noise => {
            noise_robustness_experiment(&bundle, &cfg.experiment.levels, &seeds, &setup)?
        }
        Protocol::Ablation => ablation_experiment(&bundle, &seeds, &setup)?,
        Protocol::Sweep => {
            let axes: Vec<(SweepAxis, Vec<f64>)> = match cfg.experiment.axis {
                Some(axis) if !cfg.experiment.values.is_empty() => {
                    vec![(axis, cfg.experiment.values.clone())]
                }
                Some(axis) => vec![(axis, axis.default_values())],
                None => SweepAxis::ALL
                    .iter()
                    .map(|a| (*a, a.default_values()))
                    .collect(),
            };
            hyperparameter_sweep(&bundle, &axes, &seeds, &setup)?
        }
    };
    for path in report.write(&out)? {
        println!("wrote {}", path.display());
    }
    for a in &report.aggregates {
        let setting = match (a.noise_level, a.axis, a.value) {
            (Some(l), _, _) => format!("level {l}"),
            (_, Some(axis), Some(v)) => format!("{axis} = {v}"),
            _ => String::new(),
        };
        let std = a.mae_std.map_or_else(String::new, |s| format!(" ± {s:.4}"));
        println!(
            "{:<7} {setting:<14} MAE {:.4}{std} over {} seeds",
            a.method.label(),
            a.mae_mean,
            a.n_seeds
        );
    }
    let failed = report.failed_cells();
    if failed > 0 {
        return Err(Error::Pipeline(format!(
            "{failed} of {} cells failed; see report.json",
            report.cells.len()
        )));
    }
    Ok(report)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    let jobs = match &cli.command {
        Command::Prepare(a) => a.common.jobs,
        Command::Train(a) => a.common.jobs,
        Command::Experiment(a) => a.common.jobs,
    };
    if let Some(n) = jobs.filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Experiment(a) => cmd_experiment(a).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
