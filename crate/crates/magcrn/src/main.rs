use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use magcrn::cli::{
    cmd_eval, cmd_forecast, cmd_gradcheck, cmd_sweep, cmd_synth, cmd_train, CliError, RunConfig,
    SweepParam,
};

#[derive(Parser)]
#[command(
    name = "magcrn",
    about = "Station-network NO2 forecasting with past and future covariate conditioning",
    version
)]
struct Args {
    /// Path to a key = value run config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset; writes checkpoint, history, and a
    /// resolved-config echo.
    Train,
    /// Evaluate a checkpoint on the test split across horizon offsets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated horizon offsets in hours (default from config).
        #[arg(long)]
        horizons: Option<String>,
    },
    /// Predict a single window and write it as CSV.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the last observed hour; defaults to the latest feasible.
        #[arg(long)]
        t0_index: Option<usize>,
        /// Horizon offset in hours.
        #[arg(long, default_value_t = 0)]
        delta: usize,
    },
    /// Train/evaluate across a list of values for one hyperparameter.
    Sweep {
        /// 'z' (embedding size) or 'alpha' (mixing coefficient).
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Alpha sweeps only: train once and re-evaluate per value instead
        /// of retraining.
        #[arg(long)]
        frozen: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
    /// Generate a synthetic dataset plus its ground-truth sidecar.
    Synth,
}

fn load_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn parse_usize_list(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("cannot parse '{v}' as an integer")))
        })
        .collect()
}

fn parse_f64_list(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::InvalidSweepValue(format!("cannot parse '{v}' as a number")))
        })
        .collect()
}

fn run(args: &Args) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    match &args.command {
        Command::Train => {
            let artifacts = cmd_train(&cfg)?;
            println!(
                "trained {} epochs, best validation MAE {:.6} (normalized)",
                artifacts.epochs, artifacts.best_val
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("history:    {}", artifacts.history.display());
            println!("config:     {}", artifacts.config_echo.display());
            Ok(0)
        }
        Command::Eval { checkpoint, horizons } => {
            let deltas = horizons.as_deref().map(parse_usize_list).transpose()?;
            let (report, path) = cmd_eval(&cfg, checkpoint, deltas)?;
            print!("{}", magcrn::metrics::format_report(&report));
            println!("report: {}", path.display());
            Ok(0)
        }
        Command::Forecast { checkpoint, t0_index, delta } => {
            let path = cmd_forecast(&cfg, checkpoint, *t0_index, *delta)?;
            println!("forecast: {}", path.display());
            Ok(0)
        }
        Command::Sweep { param, values, frozen } => {
            let param = SweepParam::parse(param)?;
            let values = parse_f64_list(values)?;
            let (rows, path) = cmd_sweep(&cfg, param, &values, *frozen)?;
            for row in &rows {
                let maes: Vec<String> =
                    row.mae_by_delta.iter().map(|(d, m)| format!("delta{d}={m:.4}")).collect();
                println!("value {}: {}", row.value, maes.join(" "));
            }
            println!("table: {}", path.display());
            Ok(0)
        }
        Command::Gradcheck => {
            let (reports, all_pass) = cmd_gradcheck(&cfg)?;
            print!("{}", magcrn::cli::gradcheck_text(&reports));
            if all_pass {
                println!("gradcheck: all {} groups pass", reports.len());
                Ok(0)
            } else {
                println!("gradcheck: FAILED");
                Ok(1)
            }
        }
        Command::Synth => {
            let (csv, truth) = cmd_synth(&cfg)?;
            println!("dataset:      {}", csv.display());
            println!("ground truth: {}", truth.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // MAGCRN_THREADS caps worker parallelism for batch evaluation.
    if let Ok(raw) = std::env::var("MAGCRN_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let args = Args::parse();
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
