use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inverse_uq::model::Mode;
use inverse_uq::pipeline::{Pipeline, PipelineConfig, StageError, StaticsChoice};
use inverse_uq::synthetic::{generate_dataset, SyntheticConfig};
use inverse_uq::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_SOFTWARE: u8 = 70;

/// Inverse estimation of basin characteristics with uncertainty, and
/// forward streamflow models fed by the estimates.
#[derive(Parser)]
#[command(name = "inverse-uq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic bucket-model dataset with known characteristics.
    GenerateSynthetic {
        #[arg(long, default_value_t = 50)]
        basins: usize,
        #[arg(long, default_value_t = 3653)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        distractors: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the inverse-model ensemble.
    TrainInverse {
        #[command(flatten)]
        run: RunArgs,
        /// `bayesian` or `deterministic`.
        #[arg(long)]
        mode: Option<Mode>,
        /// Enables the uncertainty-weighted fine-tuning phase.
        #[arg(long)]
        ubl: bool,
    },
    /// Exports validation-period static estimates for every basin.
    ExportStatics {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Trains forward models on observed, estimated or zeroed statics.
    TrainForward {
        #[command(flatten)]
        run: RunArgs,
        /// `observed`, `estimated`, `zeros` or a path to an estimates CSV.
        #[arg(long)]
        statics: Option<StaticsChoice>,
    },
    /// Scores test-basin estimates and writes report.json and report.csv.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// All stages in order.
    RunAll {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generates a small synthetic dataset and runs every stage on it.
    Demo {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Lib(Error),
    Stage(StageError),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Csv(_) | Error::Json(_) | Error::Schema(_) => EXIT_INPUT,
        Error::Argument(_) => EXIT_USAGE,
        _ => EXIT_SOFTWARE,
    }
}

fn open(run: &RunArgs, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<Pipeline, Error> {
    let mut cfg = PipelineConfig::load(&run.config)?;
    if let Some(out) = &run.out {
        cfg.output_dir = out.clone();
    }
    tweak(&mut cfg);
    Pipeline::open(cfg)
}

fn print_report(p: &Pipeline) {
    println!("report: {}", p.output_dir().join("report.json").display());
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenerateSynthetic {
            basins,
            days,
            seed,
            distractors,
            out,
        } => {
            let ds = generate_dataset(&SyntheticConfig {
                n_basins: basins,
                n_days: days,
                seed,
                n_distractors: distractors,
                ..Default::default()
            })?;
            ds.write(&out)?;
            println!("wrote {basins} basins to {}", out.display());
        }
        Command::TrainInverse { run, mode, ubl } => {
            let p = open(&run, |c| {
                if let Some(m) = mode {
                    c.model.mode = m;
                }
                c.train.ubl.enabled |= ubl;
            })?;
            p.train_inverse()?;
        }
        Command::ExportStatics { run } => {
            open(&run, |_| {})?.export_statics()?;
        }
        Command::TrainForward { run, statics } => {
            let p = open(&run, |_| {})?;
            let choice = statics.unwrap_or_else(|| p.config.forward_statics.clone());
            let s = p.train_forward(&choice)?;
            println!("median test NSE {:?}", s.ensemble.median_nse);
        }
        Command::Evaluate { run } => {
            let p = open(&run, |_| {})?;
            p.evaluate()?;
            print_report(&p);
        }
        Command::RunAll { run } => {
            let p = open(&run, |_| {})?;
            p.run_all()?;
            print_report(&p);
        }
        Command::Demo { out, seed } => {
            let data = out.join("data");
            generate_dataset(&SyntheticConfig {
                n_basins: 20,
                n_days: 6 * 365 + 1,
                seed,
                n_distractors: 8,
                ..Default::default()
            })?
            .write(&data)?;
            let p = Pipeline::open(PipelineConfig::demo(&data, &out.join("run")))?;
            p.run_all()?;
            print_report(&p);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e.error))
        }
    }
}
