//! Laboratory harness for `vard-core`: JSON run configurations, checkpoints,
//! metrics files and one task per experiment.
//!
//! Every artifact of a run is a function of its configuration and seed.

pub mod checkpoint;
pub mod config;
pub mod output;
pub mod tasks;

use std::path::PathBuf;

pub use config::{RunConfig, Task};
pub use output::RunDir;
pub use tasks::Summary;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
    #[error("diverged: {0}")]
    Divergence(String),
}

impl From<vard_core::Error> for LabError {
    fn from(e: vard_core::Error) -> Self {
        match e {
            vard_core::Error::Divergence { .. }
            | vard_core::Error::NonFinite(_)
            | vard_core::Error::Sampling { .. } => LabError::Divergence(e.to_string()),
            e => LabError::Runtime(e.to_string()),
        }
    }
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Divergence(_) => 3,
            LabError::Io(_) | LabError::Runtime(_) => 1,
        }
    }
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub dump_trajectories: bool,
}

/// Resolves overrides, runs `task` and writes its artifacts. A divergence
/// also leaves `diagnostics.json` in the run directory.
pub fn run(task: Task, mut cfg: RunConfig, ov: &Overrides) -> Result<Summary, LabError> {
    if let Some(seed) = ov.seed {
        cfg.seed = Some(seed);
    }
    let seed = cfg.seed.ok_or_else(|| {
        LabError::Config("no seed: set `seed` in the config or pass --seed".into())
    })?;
    if let Some(p) = &ov.preset {
        cfg.apply_preset(p)?;
    }
    cfg.check_task(task)?;
    let root = ov
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{seed}", task.name())));
    let dir = RunDir::create(&root)?;
    cfg.task = Some(task);
    dir.write_text("config.json", &(cfg.to_json() + "\n"))?;
    let result = tasks::execute(task, &cfg, seed, &dir, ov.dump_trajectories);
    if let Err(e) = &result {
        let diag = serde_json::json!({
            "task": task.name(),
            "seed": seed,
            "error": e.to_string(),
            "kind": match e {
                LabError::Divergence(_) => "divergence",
                LabError::Config(_) => "config",
                LabError::Io(_) => "io",
                LabError::Runtime(_) => "runtime",
            },
        });
        dir.write_json("diagnostics.json", &diag)?;
    }
    result
}
