use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flexfed_cli::compare::compare_runs;
use flexfed_cli::config::ExperimentConfig;
use flexfed_cli::presets::{preset, PRESETS};
use flexfed_cli::run::{resolve_output_dir, run_experiment_into};
use flexfed_cli::traces::{generate_traces, TracesConfig};

#[derive(Parser)]
#[command(name = "flexfed", version, about = "Desk-scale federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file or a named preset.
    Run {
        /// Path to a TOML config, or a preset name (see `presets list`).
        config: String,
        /// Strategy for preset runs (fedavg|refl|mifa|flexfed).
        #[arg(long, default_value = "flexfed")]
        strategy: String,
        /// Master seed for preset runs.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory for preset runs (configs carry their own).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Aggregate several result directories into comparison tables.
    Compare {
        /// Result directories (each containing rounds.csv and summary.json).
        dirs: Vec<PathBuf>,
        /// Where to write the comparison files.
        #[arg(long, default_value = "compare-out")]
        out: PathBuf,
    },
    /// Generate per-client availability trace files from a profile config.
    GenTraces {
        /// Path to a traces TOML config.
        profile: PathBuf,
    },
    /// Preset utilities.
    Presets {
        #[command(subcommand)]
        action: PresetsAction,
    },
}

#[derive(Subcommand)]
enum PresetsAction {
    /// List available presets.
    List,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            strategy,
            seed,
            output_dir,
        } => run_command(&config, &strategy, seed, output_dir),
        Command::Compare { dirs, out } => match compare_runs(&dirs, &out) {
            Ok(report) => {
                println!(
                    "compared {} runs over {} rounds into {}",
                    dirs.len(),
                    report.rounds,
                    out.display()
                );
                for s in &report.strategies {
                    println!(
                        "  {}: {} run(s), final accuracy {:.4} ± {:.4}, tail |F| {:.5} ± {:.5}",
                        s.strategy,
                        s.runs,
                        s.final_overall_accuracy_mean,
                        s.final_overall_accuracy_std,
                        s.mean_abs_forgetting_tail_mean,
                        s.mean_abs_forgetting_tail_std,
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e.to_string()),
        },
        Command::GenTraces { profile } => match TracesConfig::from_path(&profile)
            .and_then(|cfg| generate_traces(&cfg))
        {
            Ok(paths) => {
                println!("wrote {} trace file(s)", paths.len());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e.to_string()),
        },
        Command::Presets {
            action: PresetsAction::List,
        } => {
            for p in &PRESETS {
                println!("{:<12} {}", p.name, p.description);
            }
            ExitCode::SUCCESS
        }
    }
}

fn run_command(config: &str, strategy: &str, seed: u64, output_dir: Option<PathBuf>) -> ExitCode {
    let path = PathBuf::from(config);
    let cfg: ExperimentConfig = if path.is_file() {
        match ExperimentConfig::from_path(&path) {
            Ok(cfg) => cfg,
            Err(e) => return fail(&e.to_string()),
        }
    } else {
        let out = output_dir
            .unwrap_or_else(|| PathBuf::from(format!("runs/{config}-{strategy}-{seed}")));
        match preset(config, strategy, seed, &out) {
            Some(cfg) => cfg,
            None => {
                return fail(&format!(
                    "{config:?} is neither a config file nor a known preset \
                     (try `flexfed presets list`)"
                ))
            }
        }
    };
    let out_dir = resolve_output_dir(&cfg);
    match run_experiment_into(&cfg, &out_dir) {
        Ok(art) => {
            let s = &art.summary;
            println!(
                "{} seed {}: {} rounds ({} cancelled), final accuracy {:.4}, \
                 tail |F| {:.5}, results in {}",
                s.strategy,
                s.master_seed,
                s.rounds,
                s.cancelled_rounds,
                s.final_overall_accuracy,
                s.mean_abs_forgetting_tail,
                art.output_dir.display()
            );
            if s.partial_failures > 0 {
                eprintln!("warning: {} round-level error(s) recorded", s.partial_failures);
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e.to_string()),
    }
}

fn fail(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::FAILURE
}
