use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradleak::runner::{self, config::MNIST_DIR_ENV, ExperimentConfig};

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Gradient leakage experiments under standard, DP-SGD and PDP-SGD training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the binary classifier and report test metrics.
    Train(Common),
    /// Intercept one client update and reconstruct its input.
    Attack(Common),
    /// Empirical privacy audit of the toy mechanisms.
    Audit(Common),
    /// Privacy accounting for the configured training horizon.
    Accountant(Common),
    /// Attack every regime over consecutive attack seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Attack seeds per regime.
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides experiment.output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model seed (overrides experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel runs for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory holding the MNIST IDX files.
    #[arg(long, env = MNIST_DIR_ENV)]
    mnist_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> gradleak::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(d) = &self.mnist_dir {
            cfg.data.mnist_dir = Some(d.clone());
        }
        cfg.validate()?;
        let out = self.out.clone().or_else(|| cfg.experiment.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> gradleak::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = c.load()?;
            let r = runner::run_classification_experiment(&cfg, Some(&out))?;
            let m = &r.metrics;
            println!(
                "train {}: {} after {} epochs, accuracy {}, f1 {}, mcc {}",
                r.regime.label(),
                r.training.status.label(),
                r.training.epochs.len(),
                show(m.accuracy),
                show(m.f1),
                show(m.mcc)
            );
            if let Some(e) = r.epsilon {
                println!("  sigma {:.4}, epsilon {e:.3} at delta {}", r.noise_multiplier.unwrap_or(0.0), r.delta);
            }
            done(&out);
        }
        Command::Attack(c) => {
            let (cfg, out) = c.load()?;
            let r = runner::run_attack_experiment(&cfg, Some(&out))?;
            println!(
                "attack {}: {} after {} iterations, final loss {}, final ssim {}, label {} (true {})",
                r.regime.label(),
                r.status().label(),
                r.outcome.trace.rows.last().map_or(0, |row| row.iteration),
                show(r.outcome.trace.final_loss()),
                show(r.final_ssim()),
                r.outcome.label_index(),
                r.true_label
            );
            done(&out);
        }
        Command::Audit(c) => {
            let (cfg, out) = c.load()?;
            for row in runner::run_audit(&cfg, Some(&out))? {
                let warn = if row.warning { "  [wide interval]" } else { "" };
                println!("{}: empirical {:.4} <= accountant {:.4}{warn}", row.mechanism, row.empirical_epsilon, row.accountant_epsilon);
            }
            done(&out);
        }
        Command::Accountant(c) => {
            let (cfg, out) = c.load()?;
            let r = runner::run_accountant(&cfg, Some(&out))?;
            println!(
                "sigma {:.4}, q {:.4}, {} steps: epsilon {:.4} at delta {} (order {})",
                r.noise_multiplier, r.sampling_rate, r.steps, r.epsilon, r.delta, r.order
            );
            done(&out);
        }
        Command::Sweep { common, runs } => {
            let (cfg, out) = common.load()?;
            for row in runner::run_sweep(&cfg, runs, common.jobs, Some(&out))? {
                println!("{} seed {}: {} ssim {}", row.regime.label(), row.attack_seed, row.status.label(), show(row.final_ssim));
            }
            done(&out);
        }
    }
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn done(out: &Path) {
    println!("outputs in {}", out.display());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
