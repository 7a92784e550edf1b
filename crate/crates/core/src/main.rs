use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpadv::accountant;
use dpadv::experiment::{self, ExperimentError, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "dpadv", version, about = "Private and adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and audit every regime of a config file.
    Run {
        config: PathBuf,
        /// Train regimes concurrently (same output bytes).
        #[arg(long)]
        parallel: bool,
    },
    /// Membership-inference audit of a saved model.
    Audit { model: PathBuf, config: PathBuf },
    /// Noise multiplier reaching a target ε.
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, parallel } => {
            let mut cfg = experiment::read_config(&config)?;
            if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
                cfg.output_dir = dir.into();
            }
            cfg.parallel |= parallel;
            let bundle = experiment::run(&cfg)?;
            for r in &bundle.regimes {
                let last = r.records.last().expect("at least one epoch");
                let eps = last.epsilon_so_far.map(|e| format!("  eps {e:.3}")).unwrap_or_default();
                println!(
                    "{:<7} test acc {:.4}  adv acc {:.4}  mia {:.4}{eps}",
                    r.kind.name(),
                    last.test_acc,
                    last.adv_acc.unwrap_or(f64::NAN),
                    r.mia.individual.accuracy,
                );
            }
            println!("results written to {}", bundle.config.output_dir.display());
        }
        Command::Audit { model, config } => {
            let cfg = experiment::read_config(&config)?;
            let model = experiment::read_checkpoint(&model)?;
            let (train, test) = experiment::load_datasets(&cfg)?;
            let label = model_label(&config);
            let res = experiment::audit(&model, &cfg, &train, &test, &label)?;
            let all = [res];
            print!("{}", experiment::report::mia_text(&all));
        }
        Command::Calibrate { eps, delta, q, steps } => {
            let sigma = accountant::calibrate_sigma(eps, delta, q, steps)?;
            let spend = accountant::epsilon_for(q, sigma, steps, delta)?;
            println!("sigma = {sigma}");
            println!("epsilon = {}", spend.epsilon);
            println!("order = {}", spend.achieving_order);
        }
    }
    Ok(())
}

fn model_label(config: &std::path::Path) -> String {
    config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
