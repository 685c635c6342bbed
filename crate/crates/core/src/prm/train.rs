use alloc::vec::Vec;
use rand::Rng;

use super::net::{value_loss, value_step, RunningStats, ValueFunction, ValueNet};
use crate::autodiff::{Adam, AdamConfig};
use crate::ddpm::{sample_batch, EpsModel, NoiseSchedule, RolloutNoise};
use crate::error::{contract, Result};
use crate::mdp::{attach_rewards_batch, minibatch, MdpState, ReplayBuffer, Trajectory};
use crate::rewards::Reward;
use crate::rng::{stream, tag, LabRng};

/// Produces scored trajectories for value regression.
pub trait TrajectorySource {
    fn steps(&self) -> usize;
    fn draw(&mut self, n: usize) -> Result<Vec<Trajectory>>;
}

/// Rollouts of a frozen diffusion model with a uniform context prior. Chain
/// `i` uses the noise and context streams of element `i`, counted across
/// calls.
pub struct DiffusionSource<'a, M: ?Sized> {
    pub model: &'a M,
    pub sched: &'a NoiseSchedule,
    pub reward: &'a dyn Reward,
    pub master: u64,
    pub next_index: u64,
}

impl<'a, M: EpsModel + ?Sized> DiffusionSource<'a, M> {
    pub fn new(
        model: &'a M,
        sched: &'a NoiseSchedule,
        reward: &'a dyn Reward,
        master: u64,
    ) -> Self {
        Self {
            model,
            sched,
            reward,
            master,
            next_index: 0,
        }
    }
}

/// Context of rollout `index`, uniform over `num_contexts`.
pub fn rollout_context(master: u64, index: u64, num_contexts: usize) -> usize {
    stream(master, tag::CONTEXT, index).random_range(0..num_contexts)
}

impl<M: EpsModel + ?Sized> TrajectorySource for DiffusionSource<'_, M> {
    fn steps(&self) -> usize {
        self.sched.steps()
    }

    fn draw(&mut self, n: usize) -> Result<Vec<Trajectory>> {
        let k = self.model.num_contexts();
        let dim = self.model.data_dim();
        let idx: Vec<u64> = (self.next_index..self.next_index + n as u64).collect();
        self.next_index += n as u64;
        let cs: Vec<usize> = idx
            .iter()
            .map(|i| rollout_context(self.master, *i, k))
            .collect();
        let noise: Vec<RolloutNoise> = idx
            .iter()
            .map(|i| RolloutNoise::for_element(self.master, *i, dim, self.sched.steps()))
            .collect();
        let mut trajs = sample_batch(self.model, &cs, self.sched, &noise, false)?;
        attach_rewards_batch(&mut trajs, self.reward)?;
        Ok(trajs)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ValueTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Step budget.
    pub steps: usize,
    /// Stop once the moving-average loss falls by less than this per step.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Rollouts drawn before the first step.
    pub initial_rollouts: usize,
    /// Fresh rollouts added before every step.
    pub rollouts_per_step: usize,
    pub buffer_capacity: usize,
    pub holdout_fraction: f64,
    /// Regress on running-standardised rewards, predicting in reward units.
    pub normalize_targets: bool,
    /// Steps between loss-curve rows.
    pub eval_every: usize,
}

impl Default for ValueTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 256,
            steps: 2000,
            convergence_tol: 1e-4,
            convergence_window: 200,
            initial_rollouts: 256,
            rollouts_per_step: 8,
            buffer_capacity: crate::mdp::DEFAULT_BUFFER_CAPACITY,
            holdout_fraction: 0.1,
            normalize_targets: false,
            eval_every: 50,
        }
    }
}

impl ValueTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || self.batch_size == 0
            || !(self.convergence_tol > 0.0)
            || self.convergence_window == 0
            || self.eval_every == 0
            || !(0.0..1.0).contains(&self.holdout_fraction)
        {
            return Err(contract(
                "value training needs positive sizes and rates, holdout in [0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValueLossRow {
    pub step: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTrainReport {
    pub rows: Vec<ValueLossRow>,
    /// Step at which the moving-average test fired, if it did.
    pub converged_at: Option<usize>,
    pub steps_run: usize,
    /// Trajectories drawn from the source, holdout included.
    pub rollouts: usize,
    pub holdout: Vec<Trajectory>,
}

/// Moving-average slope test over the last two windows of `losses`.
pub fn has_converged(losses: &[f64], window: usize, tol: f64) -> bool {
    let n = losses.len();
    if n < 2 * window {
        return false;
    }
    let now = losses[n - window..].iter().sum::<f64>() / window as f64;
    let before = losses[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (now - before) / window as f64 > -tol
}

fn holdout_pairs(holdout: &[Trajectory]) -> Vec<(MdpState, f64)> {
    holdout
        .iter()
        .rev()
        .take(64)
        .flat_map(|t| {
            let r = t.terminal_reward.unwrap_or(f64::NAN);
            t.states.iter().map(move |s| (s.clone(), r))
        })
        .collect()
}

/// Monte-Carlo value regression on rollouts of a frozen policy: draw and
/// score trajectories, regress `V` on their terminal rewards at uniformly
/// sampled steps, stop at the budget or when the loss curve flattens.
pub fn pretrain_value(
    vnet: &mut ValueNet,
    source: &mut dyn TrajectorySource,
    cfg: &ValueTrainConfig,
    rng: &mut LabRng,
) -> Result<ValueTrainReport> {
    cfg.validate()?;
    if source.steps() != vnet.arch().steps {
        return Err(contract("value net and trajectory source disagree on T"));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut holdout = Vec::new();
    let mut stats = RunningStats::default();
    let mut drawn = 0usize;
    let mut add = |trajs: Vec<Trajectory>,
                   buffer: &mut ReplayBuffer,
                   holdout: &mut Vec<Trajectory>,
                   stats: &mut RunningStats| {
        for t in trajs {
            let f = cfg.holdout_fraction;
            let to_holdout = libm::floor((drawn + 1) as f64 * f) > libm::floor(drawn as f64 * f);
            drawn += 1;
            if to_holdout {
                holdout.push(t);
            } else {
                stats.push(t.terminal_reward.unwrap_or(0.0));
                buffer.push(t);
            }
        }
    };
    add(
        source.draw(cfg.initial_rollouts.max(1))?,
        &mut buffer,
        &mut holdout,
        &mut stats,
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut rows = Vec::new();
    let mut converged_at = None;
    let mut since_row = Vec::new();
    for step in 0..cfg.steps {
        if cfg.rollouts_per_step > 0 && step > 0 {
            add(
                source.draw(cfg.rollouts_per_step)?,
                &mut buffer,
                &mut holdout,
                &mut stats,
            );
        }
        if cfg.normalize_targets {
            vnet.target = stats.as_scale();
        }
        let batch = minibatch(&buffer, cfg.batch_size, rng)?;
        let loss = value_step(vnet, &batch, &mut opt)?;
        losses.push(loss);
        since_row.push(loss);
        let done = has_converged(&losses, cfg.convergence_window, cfg.convergence_tol);
        if (step + 1) % cfg.eval_every == 0 || done || step + 1 == cfg.steps {
            let pairs = holdout_pairs(&holdout);
            let holdout_loss = if pairs.is_empty() {
                0.0
            } else {
                value_loss(vnet, &pairs)?
            };
            rows.push(ValueLossRow {
                step: step + 1,
                train_loss: since_row.iter().sum::<f64>() / since_row.len() as f64,
                holdout_loss,
            });
            since_row.clear();
        }
        if done {
            converged_at = Some(step + 1);
            break;
        }
    }
    Ok(ValueTrainReport {
        rows,
        converged_at,
        steps_run: losses.len(),
        rollouts: drawn,
        holdout,
    })
}

/// Runs `k_steps` value updates on fresh trajectories only.
pub fn refresh_value(
    vnet: &mut ValueNet,
    trajs: &[Trajectory],
    cfg: &super::net::RefreshConfig,
    rng: &mut LabRng,
) -> Result<Vec<f64>> {
    vnet.refresh(trajs, cfg, rng)
}
