use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uap_sga::diagnostics::eval_csv;
use uap_sga::experiments::{self, ExperimentConfig};
use uap_sga::{Error, Result};

#[derive(Parser)]
#[command(name = "uap-sga", version, about = "Universal adversarial perturbations: SPGD, SGA and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out=` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured surrogate architectures.
    Train(Common),
    /// Craft perturbations for each variant and seed.
    Attack(Common),
    /// Fooling ratio of a stored perturbation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        uap: PathBuf,
        /// Extra model weights to evaluate (repeatable).
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Hyper-parameter grid over one axis.
    Sweep(Common),
    /// Sign-quantization vanishing example, sequential vs aggregated.
    DemoVanishing {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config, c.seed)?;
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn summarize(m: &experiments::RunManifest, cfg: &ExperimentConfig) {
    for t in &m.trained {
        println!(
            "{} seed {}: train acc {:.4}, held-out acc {:.4} -> {}",
            t.model, t.seed, t.train_accuracy, t.heldout_accuracy, t.weights
        );
    }
    for r in &m.runs {
        let transfer = r.transfer_fr.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}: white-box FR {:.4}, transfer FR {transfer}, outer signs {}",
            r.run_id, r.white_box_fr, r.outer_sign_count
        );
    }
    println!("config {} -> {}", &m.config_hash[..12], cfg.out.join(format!("{}.json", m.command)).display());
}

fn run(cli: Cli) -> Result<()> {
    experiments::init_workers()?;
    match cli.command {
        Command::Train(c) => {
            let cfg = config(&c)?;
            summarize(&experiments::cmd_train(&cfg, c.force)?, &cfg);
        }
        Command::Attack(c) => {
            let cfg = config(&c)?;
            summarize(&experiments::cmd_attack(&cfg, c.force)?, &cfg);
        }
        Command::Sweep(c) => {
            let cfg = config(&c)?;
            summarize(&experiments::cmd_sweep(&cfg, c.force)?, &cfg);
        }
        Command::Eval { common, uap, models } => {
            let cfg = config(&common)?;
            print!("{}", eval_csv(&experiments::cmd_eval(&cfg, &uap, &models, common.force)?));
        }
        Command::DemoVanishing { out } => {
            let r = experiments::cmd_demo_vanishing(out.as_deref())?;
            print!("{}", r.to_csv());
            println!("sequential (units of α): {:?}", r.sequential);
            println!("aggregated (units of α): {:?}", r.aggregated);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
