use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use syndi::data::{format_number, load_dataset, DataError, Dataset, PopulationId, Schema};
use syndi::estimate::{
    bootstrap_variance, fit_direct, run_comparison, run_syndi, ErrorKind, EstimateError, FitResult, Method,
    PipelineConfig, DEFAULT_BOOTSTRAP,
};
use syndi::exec::Parallelism;
use syndi::impute::{ImputationMethod, DEFAULT_CYCLES, DEFAULT_M};
use syndi::model::{ExternalModelSpec, Family, HeterogeneitySelector, SpecError, TargetModelSpec};
use syndi::simulate::{run_replicates, HarnessConfig, Scenario, ScenarioId, SimulateError};

const VERSION: &str = env!("SYNDI_VERSION");

#[derive(Parser)]
#[command(name = "syndi", version = VERSION, about = "Integrate external prediction models into an expanded GLM")]
struct Cli {
    /// Worker threads; 1 runs fully serial. Outputs are identical either way.
    #[arg(long, global = true, env = "SYNDI_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the expanded target model and write a fit JSON.
    Fit(FitArgs),
    /// Fit with bootstrap variance (B defaults to 500).
    Bootstrap(FitArgs),
    /// Run a simulation scenario and write summary.json and replicates.csv.
    Simulate(SimulateArgs),
    /// Predict means for new data in one population.
    Predict(PredictArgs),
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// Internal study CSV.
    #[arg(long)]
    internal: PathBuf,
    /// Column roles JSON: {"name": "y" | "x" | "b" | "pop"}.
    #[arg(long)]
    schema: PathBuf,
    /// External model JSON; repeat per model. Populations default to 1, 2, .. in order.
    #[arg(long = "external")]
    externals: Vec<PathBuf>,
    #[arg(long, default_value = "binomial")]
    family: Family,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_CYCLES)]
    cycles: usize,
    /// Replication factor r_k; one value for all externals or one per external.
    #[arg(long)]
    r: Vec<usize>,
    /// Bootstrap replicates (0 = none).
    #[arg(long)]
    bootstrap: Option<usize>,
    /// syndi, fcs, imb or direct.
    #[arg(long, default_value = "syndi")]
    strategy: String,
    /// "intercepts", "intercepts+slopes" or "k:X1,X2;k:..".
    #[arg(long, default_value = "intercepts")]
    heterogeneity: String,
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// simI, simII, simS1, simS2, simS3, simS4a or simS4b.
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replicates R.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    /// Bootstrap replicates per outer replicate (0 = none).
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Bootstrap only the first this-many outer replicates.
    #[arg(long)]
    bootstrap_replicates: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Draws behind each external summary.
    #[arg(long)]
    n_external: Option<usize>,
    /// Comma-separated subset of SynDI,direct,FCS,IMB.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// R = 500 and M = 100.
    #[arg(long)]
    full_scale: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 0)]
    population: PopulationId,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{path}: {source}")]
    Write { path: String, source: std::io::Error },
}

impl CliError {
    fn kind(&self) -> ErrorKind {
        match self {
            CliError::Estimate(e) => e.kind(),
            CliError::Simulate(SimulateError::Estimate(e)) => e.kind(),
            CliError::Simulate(SimulateError::Glm(_) | SimulateError::Metric(_) | SimulateError::External { .. }) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Validation,
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            ErrorKind::Validation => 1,
            ErrorKind::Numerical => 2,
            ErrorKind::Predictor => 3,
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn run_config(command: &str, args: &impl Serialize) -> Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    v["command"] = json!(command);
    v
}

fn load_externals(args: &FitArgs) -> Result<Vec<ExternalModelSpec>, CliError> {
    let mut externals = args
        .externals
        .iter()
        .enumerate()
        .map(|(i, path)| ExternalModelSpec::from_json_path(path, i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    match args.r.len() {
        0 => {}
        1 => externals.iter_mut().for_each(|e| e.r = Some(args.r[0])),
        n if n == externals.len() => {
            for (e, &r) in externals.iter_mut().zip(&args.r) {
                e.r = Some(r);
            }
        }
        n => {
            return Err(CliError::Usage(format!(
                "--r given {n} times for {} external models",
                externals.len()
            )))
        }
    }
    Ok(externals)
}

fn cmd_fit(args: &FitArgs, default_bootstrap: usize, parallelism: Parallelism, command: &str) -> Result<(), CliError> {
    let schema = Schema::from_json_path(&args.schema)?;
    let internal = load_dataset(&args.internal, &schema, Some(args.family))?;
    let externals = load_externals(args)?;
    let selector: HeterogeneitySelector = args.heterogeneity.parse()?;
    let target = TargetModelSpec::from_selector(args.family, &internal, &externals, &selector)?;
    let method: Method = match args.strategy.to_ascii_lowercase().as_str() {
        "syndi" => Method::SynDi,
        other => other.parse().map_err(CliError::Usage)?,
    };
    let b = args.bootstrap.unwrap_or(default_bootstrap);
    if b > 0 && method != Method::SynDi {
        return Err(CliError::Usage("bootstrap variance is available for the syndi strategy only".into()));
    }
    let config = PipelineConfig {
        seed: args.seed,
        m: args.m,
        cycles: args.cycles,
        parallelism,
        ..Default::default()
    };
    let mut fit: FitResult = match method {
        Method::SynDi => run_syndi(&internal, &externals, &target, &config)?,
        Method::Direct => fit_direct(&internal, &target)?,
        Method::Fcs => run_comparison(&internal, &externals, &target, ImputationMethod::Fcs, &config)?,
        Method::Imb => run_comparison(&internal, &externals, &target, ImputationMethod::Imb, &config)?,
    };
    if b > 0 {
        let boot = bootstrap_variance(&internal, &externals, &target, &config, b)?;
        fit.attach_bootstrap(&boot, b)?;
    }
    fit.provenance.version = VERSION.into();
    fit.provenance.run_config = Some(run_config(command, args));
    write_file(&args.out, fit.to_json_string().as_bytes())
}

fn cmd_simulate(args: &SimulateArgs, parallelism: Parallelism) -> Result<(), CliError> {
    let id: ScenarioId = args.scenario.parse()?;
    let mut config = HarnessConfig {
        seed: args.seed,
        ..Default::default()
    };
    if args.full_scale {
        config = config.full_scale();
    }
    let set = |target: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *target = v;
        }
    };
    set(&mut config.replicates, args.replicates);
    set(&mut config.n, args.n);
    set(&mut config.m, args.m);
    set(&mut config.cycles, args.cycles);
    set(&mut config.r, args.r);
    set(&mut config.bootstrap, args.bootstrap);
    set(&mut config.n_test, args.n_test);
    set(&mut config.n_external, args.n_external);
    config.bootstrap_replicates = args.bootstrap_replicates;
    if !args.methods.is_empty() {
        config.methods = args.methods.clone();
    }
    let mut output = run_replicates(&Scenario::new(id), &config, parallelism)?;
    output.summary.version = VERSION.into();
    output.summary.run_config = Some(run_config("simulate", args));
    fs::create_dir_all(&args.out).map_err(|source| CliError::Write {
        path: args.out.display().to_string(),
        source,
    })?;
    write_file(&args.out.join("summary.json"), output.summary_json().as_bytes())?;
    let mut csv = Vec::new();
    output.write_estimates_csv(&mut csv)?;
    write_file(&args.out.join("replicates.csv"), &csv)
}

/// Read `path` with `schema`, dropping the outcome role when the file has no outcome column.
fn load_new_data(path: &Path, schema: &Schema) -> Result<Dataset, CliError> {
    let has_outcome = match schema.outcome() {
        Some(y) => {
            let mut rdr = csv::Reader::from_path(path).map_err(DataError::from)?;
            rdr.headers().map_err(DataError::from)?.iter().any(|h| h.trim() == y)
        }
        None => false,
    };
    let schema = if has_outcome { schema.clone() } else { schema.without_outcome() };
    Ok(load_dataset(path, &schema, None)?)
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.fit).map_err(|source| DataError::Io {
        path: args.fit.display().to_string(),
        source,
    })?;
    let fit = FitResult::from_json_str(&text)?;
    let schema = Schema::from_json_path(&args.schema)?;
    let data = load_new_data(&args.data, &schema)?;
    let p = fit.predict(&data, args.population)?;
    let mut out = String::from("prediction\n");
    for v in p {
        out.push_str(&format_number(v));
        out.push('\n');
    }
    write_file(&args.out, out.as_bytes())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let parallelism = if threads == 1 {
        Parallelism::Serial
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Parallelism::Rayon
    };
    match &cli.command {
        Command::Fit(args) => cmd_fit(args, 0, parallelism, "fit"),
        Command::Bootstrap(args) => cmd_fit(args, DEFAULT_BOOTSTRAP, parallelism, "bootstrap"),
        Command::Simulate(args) => cmd_simulate(args, parallelism),
        Command::Predict(args) => cmd_predict(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let kind = match e.kind() {
                ErrorKind::Validation => "validation",
                ErrorKind::Numerical => "numerical",
                ErrorKind::Predictor => "predictor",
            };
            eprintln!("{}", json!({"error": {"kind": kind, "exit_code": code, "message": e.to_string()}}));
            ExitCode::from(code)
        }
    }
}
