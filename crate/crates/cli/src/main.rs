//! Command-line front end. All real work lives in `adaptac_core::commands`;
//! this binary parses flags, resolves the run configuration (defaults <-
//! config file <- --set overrides <- dedicated flags) and maps errors to
//! stable exit codes: 0 success, 1 usage or internal error, 2 unwritable
//! output path, 3 unusable dataset, 4 unusable checkpoint, 5 missing traces.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use adaptac_core::commands::{
    cmd_ablate, cmd_attn_trace, cmd_eval, cmd_gen_demos, cmd_train, CommandError,
};
use adaptac_core::config::{apply_overrides, read_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "adaptac",
    version,
    about = "Visuo-tactile diffusion policy on a planar flip task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat `key = value`); built-in defaults apply
    /// when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory (created if needed).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override one config key, e.g. --set train.steps=500. Repeatable;
    /// applied after the config file, before --seed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self, default_out: &str) -> Result<(RunConfig, PathBuf), CommandError> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => RunConfig::default(),
        };
        apply_overrides(&mut cfg, &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(default_out));
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations into a binary dataset.
    GenDemos {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on a recorded dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Demo dataset to train on.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Continue from this checkpoint instead of initializing fresh.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Roll out a trained checkpoint and write a report plus attention traces.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained policy checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every fusion wiring with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Demo dataset to train on.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
    },
    /// Summarize tactile attention per task phase from evaluation traces.
    AttnTrace {
        #[command(flatten)]
        common: Common,
        /// Directory of trace_*.csv files written by eval.
        #[arg(long, value_name = "DIR")]
        traces: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CommandError> {
    match command {
        Command::GenDemos { common } => {
            let (cfg, out) = common.resolve("demos")?;
            let s = cmd_gen_demos(&cfg, &out)?;
            println!(
                "wrote {}: {} episodes, {} steps, {} training windows, {} bytes",
                s.dataset.display(),
                s.episodes,
                s.total_steps,
                s.windows,
                s.bytes
            );
            println!(
                "expert success rate {:.3} over {} attempts; mean episode length {:.1}",
                s.expert_success_rate, s.attempts, s.mean_episode_length
            );
        }
        Command::Train {
            common,
            dataset,
            resume,
        } => {
            let (cfg, out) = common.resolve("train")?;
            let s = cmd_train(&cfg, &dataset, resume.as_deref(), &out)?;
            println!(
                "trained {} steps on {} windows; final step {}, final loss {:.6}",
                s.steps, s.samples, s.final_step, s.final_loss
            );
            println!(
                "checkpoint {} ({} snapshots); log {}",
                s.checkpoint.display(),
                s.snapshots,
                s.log.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = common.resolve("eval")?;
            let r = cmd_eval(&cfg, &checkpoint, &out)?;
            println!(
                "{}: success rate {:.3} over {} episodes, avg episode length {:.1}",
                r.actor, r.success_rate, r.episodes, r.avg_episode_length
            );
            println!("report in {}", out.display());
        }
        Command::Ablate { common, dataset } => {
            let (cfg, out) = common.resolve("ablate")?;
            let s = cmd_ablate(&cfg, &dataset, &out)?;
            println!("mode      success_rate  avg_episode_length  mean_alpha_tac");
            for r in &s.rows {
                let alpha = r
                    .mean_alpha_tac
                    .map(|a| format!("{a:.3}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<9} {:>12.3}  {:>18.1}  {:>14}",
                    r.mode, r.success_rate, r.avg_episode_length, alpha
                );
            }
            if let Some(gap) = s.alpha_tac_gap_full_minus_no_ffpg {
                println!("alpha_tac gap (full - no_ffpg): {gap:+.3}");
            }
        }
        Command::AttnTrace { common, traces } => {
            let (cfg, out) = common.resolve("attn")?;
            let s = cmd_attn_trace(&cfg, &traces, &out)?;
            println!(
                "{} trace files, {} attended steps ({} without attention)",
                s.files, s.rows, s.sentinel_rows
            );
            for p in &s.per_phase {
                println!("  {:<8} {:>6} rows  mean alpha_tac {:.3}", p.phase, p.rows, p.mean_alpha_tac);
            }
            if let Some(d) = s.reach_to_flip_delta {
                println!("reach -> flip shift: {d:+.3}");
            }
        }
    }
    Ok(())
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
