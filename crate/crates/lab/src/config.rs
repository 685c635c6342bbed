//! Run configuration: one JSON document per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vard_core::autodiff::Activation;
use vard_core::ddpm::{
    make_schedule, DataConfig, DenoiserArch, NoiseSchedule, PretrainConfig, ScheduleKind,
};
use vard_core::prm::{RefreshConfig, ValueArch, ValueTrainConfig};
use vard_core::rewards::RewardSpec;
use vard_core::so3::{CfmConfig, Rot3, VectorFieldArch};
use vard_core::vard::{last_steps, paper_preset, FinetuneConfig, VardConfig};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    DdpmPretrain,
    ValuePretrain,
    VardFinetune,
    BaselineFinetune,
    So3Train,
    VerifyLemma1,
    Eval,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::DdpmPretrain => "ddpm-pretrain",
            Task::ValuePretrain => "value-pretrain",
            Task::VardFinetune => "vard-finetune",
            Task::BaselineFinetune => "baseline-finetune",
            Task::So3Train => "so3-train",
            Task::VerifyLemma1 => "verify-lemma1",
            Task::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            kind: ScheduleKind::Linear,
            beta_min: 0.001,
            beta_max: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> vard_core::Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_min, self.beta_max)
    }
}

/// Network sizes; input and output widths follow from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub context_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = DenoiserArch::default();
        Self {
            hidden: a.hidden,
            time_dim: a.time_dim,
            context_dim: a.context_dim,
            activation: a.activation,
        }
    }
}

/// Fine-tuning method settings other than the shared optimiser block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VardSection {
    pub eta: f64,
    pub finetune_window: Vec<usize>,
    pub shared_noise: bool,
    pub value_on_mean: bool,
    pub refresh: RefreshConfig,
}

impl Default for VardSection {
    fn default() -> Self {
        Self {
            eta: 1.0,
            finetune_window: last_steps(10),
            shared_noise: true,
            value_on_mean: false,
            refresh: RefreshConfig {
                every: 1,
                steps: 5,
                lr: 1e-3,
                ..RefreshConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Backpropagate through a uniformly drawn number of final steps in
    /// `1..=k`; `k = 1` is final-step-only.
    pub k: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { k: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Denoiser to fine-tune, train a value for, or evaluate.
    pub model: Option<PathBuf>,
    pub value: Option<PathBuf>,
    /// Reference denoiser for `eval` drift; defaults to none (drift to data).
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Terminal samples drawn per model for drift and reward.
    pub samples: usize,
    pub projections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 4096,
            projections: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct So3Section {
    /// Point-mass target, nine entries row-major.
    pub target: [f64; 9],
    pub arch: VectorFieldArch,
    pub train: CfmConfig,
    pub samples: usize,
    pub integration_steps: usize,
    pub radius: f64,
}

impl Default for So3Section {
    fn default() -> Self {
        Self {
            target: Rot3::rot_z(std::f64::consts::FRAC_PI_2).row_major(),
            arch: VectorFieldArch::default(),
            train: CfmConfig::default(),
            samples: 1000,
            integration_steps: 100,
            radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSection {
    pub families: usize,
    pub samples: usize,
    /// Parameter value at which both gradients are taken.
    pub psi: f64,
    pub tolerance: f64,
}

impl Default for LemmaSection {
    fn default() -> Self {
        Self {
            families: 20,
            samples: 100_000,
            psi: 0.3,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub output_dir: Option<PathBuf>,
    pub dataset: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub value_model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub value_train: ValueTrainConfig,
    pub train: FinetuneConfig,
    pub vard: VardSection,
    pub baseline: BaselineSection,
    pub reward: Option<RewardSpec>,
    pub checkpoints: CheckpointPaths,
    pub eval: EvalSection,
    pub so3: So3Section,
    pub lemma: LemmaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            task: None,
            output_dir: None,
            dataset: DataConfig::three_modes(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            value_model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            value_train: ValueTrainConfig::default(),
            train: FinetuneConfig::default(),
            vard: VardSection::default(),
            baseline: BaselineSection::default(),
            reward: None,
            checkpoints: CheckpointPaths::default(),
            eval: EvalSection::default(),
            so3: So3Section::default(),
            lemma: LemmaSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON text; errors carry `origin:line:column`.
    pub fn parse(text: &str, origin: &str) -> Result<Self, LabError> {
        serde_json::from_str(text)
            .map_err(|e| LabError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `paper-eta-<name>` sets only `eta`; `paper-<name>` also copies the
    /// learning rates, accumulation, update count and batch size.
    pub fn apply_preset(&mut self, preset: &str) -> Result<(), LabError> {
        let unknown = || LabError::Config(format!("unknown preset `{preset}`"));
        if let Some(name) = preset.strip_prefix("paper-eta-") {
            self.vard.eta = paper_preset(name).ok_or_else(unknown)?.eta;
        } else if let Some(name) = preset.strip_prefix("paper-") {
            let p = paper_preset(name).ok_or_else(unknown)?;
            self.vard.eta = p.eta;
            self.vard.refresh.lr = p.value_lr;
            self.train.base_lr = p.base_lr;
            self.train.grad_accum = p.grad_accum;
            self.train.steps = p.steps;
            self.train.batch_size = p.batch_size;
        } else {
            return Err(unknown());
        }
        Ok(())
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            data_dim: self.dataset.dim,
            num_contexts: self.dataset.num_contexts(),
            hidden: self.model.hidden.clone(),
            time_dim: self.model.time_dim,
            context_dim: self.model.context_dim,
            activation: self.model.activation,
        }
    }

    pub fn value_arch(&self) -> ValueArch {
        ValueArch {
            data_dim: self.dataset.dim,
            num_contexts: self.dataset.num_contexts(),
            steps: self.schedule.steps,
            hidden: self.value_model.hidden.clone(),
            time_dim: self.value_model.time_dim,
            context_dim: self.value_model.context_dim,
            activation: self.value_model.activation,
        }
    }

    pub fn vard_config(&self) -> VardConfig {
        VardConfig {
            eta: self.vard.eta,
            finetune_window: self.vard.finetune_window.clone(),
            shared_noise: self.vard.shared_noise,
            value_on_mean: self.vard.value_on_mean,
            refresh: self.vard.refresh,
            train: self.train.clone(),
        }
    }

    pub fn so3_target(&self) -> Result<Rot3, LabError> {
        Rot3::from_row_major(&self.so3.target)
            .map_err(|e| LabError::Config(format!("so3.target: {e}")))
    }

    /// Checks that the sections `task` depends on are present.
    pub fn check_task(&self, task: Task) -> Result<(), LabError> {
        if let Some(t) = self.task {
            if t != task {
                return Err(LabError::Config(format!(
                    "config is for task `{}` but `{}` was requested",
                    t.name(),
                    task.name()
                )));
            }
        }
        let needs_reward = matches!(
            task,
            Task::ValuePretrain | Task::VardFinetune | Task::BaselineFinetune | Task::Eval
        );
        if needs_reward && self.reward.is_none() {
            return Err(LabError::Config(format!(
                "task `{}` needs a `reward` section",
                task.name()
            )));
        }
        let needs_model = needs_reward;
        if needs_model && self.checkpoints.model.is_none() {
            return Err(LabError::Config(format!(
                "task `{}` needs `checkpoints.model`; run ddpm-pretrain first",
                task.name()
            )));
        }
        if task == Task::VardFinetune && self.checkpoints.value.is_none() {
            return Err(LabError::Config(
                "vard-finetune requires a pretrained value function (`checkpoints.value`); run value-pretrain first"
                    .into(),
            ));
        }
        if task == Task::So3Train {
            self.so3_target()?;
        }
        Ok(())
    }
}
