use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use neuralm::error::Error;
use neuralm::experiment::{self, ExperimentConfig, FitConfig, FlowGapConfig, NtkCheckConfig};

#[derive(Parser)]
#[command(name = "neuralm", version, about = "Semiparametric estimation with overparameterized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Floating-point precision; only f64 is implemented.
    #[arg(long, value_enum, default_value_t = Precision::F64, global = true)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one dataset (CSV with header y,z1..,x1..).
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
    },
    /// Monte Carlo simulation; writes the MSE table and a JSON archive.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Empirical vs closed-form NTK checks.
    NtkCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Paired network and kernel flows across widths.
    FlowGap {
        #[command(flatten)]
        common: Common,
    },
    /// Simulation with confidence intervals for the proposed method.
    Coverage {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Dimension(_) | Error::Csv(_) => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) => 5,
    }
}

fn read_config(path: Option<&Path>) -> Result<Option<String>, Error> {
    match path {
        None => Ok(None),
        Some(p) => fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display()))),
    }
}

fn require_config(path: Option<&Path>) -> Result<String, Error> {
    read_config(path)?.ok_or_else(|| Error::Config("--config is required".into()))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Error> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn emit(out: Option<&Path>, file: &str, json: &str) -> Result<(), Error> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(file), json)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn set_threads(jobs: Option<usize>) -> Result<(), Error> {
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn simulation_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut c: ExperimentConfig = parse_json(&require_config(common.config.as_deref())?, "experiment config")?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(j) = common.jobs {
        c.jobs = j;
    }
    if let Some(o) = &common.out {
        c.out_dir = Some(o.clone());
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.precision == Precision::F32 {
        return Err(Error::Config("--precision f32 is not supported; use f64".into()));
    }
    match cli.command {
        Command::Fit { common, data } => {
            set_threads(common.jobs)?;
            let mut c: FitConfig = parse_json(&require_config(common.config.as_deref())?, "fit config")?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            let ds = experiment::read_dataset(&data, c.task)?;
            let report = experiment::run_fit(&c, &ds)?;
            emit(common.out.as_deref(), "fit_report.json", &serde_json::to_string_pretty(&report)?)
        }
        Command::Simulate { common } => {
            let c = simulation_config(&common)?;
            let report = experiment::run_simulation(&c)?;
            finish_simulation(&report, common.out.is_none())
        }
        Command::Coverage { common } => {
            let c = simulation_config(&common)?;
            let report = experiment::run_coverage(&c)?;
            finish_simulation(&report, common.out.is_none())
        }
        Command::NtkCheck { common } => {
            set_threads(common.jobs)?;
            let mut c = match read_config(common.config.as_deref())? {
                Some(t) => parse_json::<NtkCheckConfig>(&t, "ntk-check config")?,
                None => NtkCheckConfig::default(),
            };
            if let Some(s) = common.seed {
                c.seed = s;
            }
            let report = experiment::run_ntk_check(&c)?;
            emit(common.out.as_deref(), "ntk_check.json", &serde_json::to_string_pretty(&report)?)?;
            if !report.pass {
                eprintln!("ntk-check: FAIL");
            }
            Ok(())
        }
        Command::FlowGap { common } => {
            set_threads(common.jobs)?;
            let mut c = match read_config(common.config.as_deref())? {
                Some(t) => parse_json::<FlowGapConfig>(&t, "flow-gap config")?,
                None => FlowGapConfig::default(),
            };
            if let Some(s) = common.seed {
                c.seed = s;
            }
            let report = experiment::run_flow_gap(&c)?;
            emit(common.out.as_deref(), "flow_gap.json", &serde_json::to_string_pretty(&report)?)
        }
    }
}

fn finish_simulation(report: &experiment::ExperimentReport, to_stdout: bool) -> Result<(), Error> {
    if to_stdout {
        experiment::write_mse_table(&report.summaries, std::io::stdout())?;
    }
    let failures: usize = report.summaries.iter().map(|s| s.failures).sum();
    if failures > 0 {
        eprintln!("{failures} repetition(s) failed; see report records");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
