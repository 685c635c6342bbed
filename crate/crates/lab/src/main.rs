use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vard_lab::{run, Overrides, RunConfig, Task};

/// Desk-scale value-guided diffusion fine-tuning experiments.
#[derive(Parser)]
#[command(name = "vard-lab", version)]
struct Cli {
    task: Task,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `paper-eta-<reward>` or `paper-<reward>`.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `trajectories.jsonl` for fine-tuning and eval tasks.
    #[arg(long)]
    dump_trajectories: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = RunConfig::load(&cli.config).and_then(|cfg| {
        let ov = Overrides {
            seed: cli.seed,
            preset: cli.preset,
            out: cli.out,
            dump_trajectories: cli.dump_trajectories,
        };
        run(cli.task, cfg, &ov)
    });
    match result {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
