use alloc::{format, string::String, vec, vec::Vec};
use rand::Rng;

use super::objective::{vard_terms, PairNoise, PolicyPair};
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::ddpm::{sample_batch, sample_terminals, EpsModel, RolloutNoise};
use crate::error::{contract, Error, Result};
use crate::mdp::{attach_rewards_batch, Trajectory};
use crate::metrics::{random_projections, sliced_wasserstein_with};
use crate::prm::{rollout_context, RefreshConfig, ValueFunction};
use crate::rewards::Reward;
use crate::rng::{derive_seed, normal_vec, stream, tag};

/// Optimisation and evaluation settings shared by every fine-tuning method.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    /// Policy updates.
    pub steps: usize,
    /// Rollouts per micro-batch.
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged into one update.
    pub grad_accum: usize,
    /// Policy learning rate.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Updates between evaluation rows; the first and last rows are always
    /// evaluated.
    pub eval_every: usize,
    /// Fixed-noise rollouts scored for `eval_reward`.
    pub eval_rollouts: usize,
    /// Fixed-noise samples compared with the reference for `prior_drift`.
    pub drift_samples: usize,
    pub drift_projections: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 64,
            grad_accum: 1,
            base_lr: 1e-4,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            eval_every: 10,
            eval_rollouts: 1024,
            drift_samples: 2048,
            drift_projections: 64,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.grad_accum == 0
            || !(self.base_lr > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.max_grad_norm > 0.0)
            || self.eval_every == 0
            || self.drift_projections == 0
        {
            return Err(contract(
                "fine-tuning needs positive batch, accumulation, rates and eval cadence",
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamConfig::with_lr(self.base_lr)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct VardConfig {
    /// Weight of the paired-sample KL surrogate.
    pub eta: f64,
    /// Diffusion steps `s` whose transitions `x_s -> x_{s-1}` receive
    /// gradient.
    pub finetune_window: Vec<usize>,
    /// Draw the reference sample with the policy's noise.
    pub shared_noise: bool,
    /// Score `mu_theta` instead of the sampled `x_{s-1}` with the value.
    pub value_on_mean: bool,
    /// Online value refits; `refresh.lr` is the value learning rate.
    pub refresh: RefreshConfig,
    pub train: FinetuneConfig,
}

impl Default for VardConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            finetune_window: last_steps(10),
            shared_noise: true,
            value_on_mean: false,
            refresh: RefreshConfig::default(),
            train: FinetuneConfig::default(),
        }
    }
}

/// Steps `1..=k`, the last `k` transitions of the chain.
pub fn last_steps(k: usize) -> Vec<usize> {
    (1..=k).collect()
}

impl VardConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.train.validate()?;
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(contract("eta must be finite and non-negative"));
        }
        if self.finetune_window.is_empty() {
            return Err(contract("fine-tuning window is empty"));
        }
        if let Some(s) = self
            .finetune_window
            .iter()
            .find(|s| **s == 0 || **s > steps)
        {
            return Err(Error::StepOutOfRange { t: *s, steps });
        }
        Ok(())
    }

    /// Sets `eta` from a named paper preset.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let p = paper_preset(name).ok_or_else(|| contract(format!("unknown preset `{name}`")))?;
        self.eta = p.eta;
        Ok(self)
    }
}

/// Per-reward settings reported for the large-scale runs. Only `eta` is
/// meaningful at toy scale; the rest is kept for reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperPreset {
    pub name: &'static str,
    pub eta: f64,
    pub base_lr: f64,
    pub value_lr: f64,
    pub grad_accum: usize,
    pub steps: usize,
    pub batch_size: usize,
}

pub const PAPER_PRESETS: [PaperPreset; 5] = [
    PaperPreset {
        name: "aesthetic",
        eta: 100.0,
        base_lr: 1e-6,
        value_lr: 5e-6,
        grad_accum: 2,
        steps: 1000,
        batch_size: 32,
    },
    PaperPreset {
        name: "pickscore",
        eta: 0.5,
        base_lr: 5e-6,
        value_lr: 5e-6,
        grad_accum: 2,
        steps: 1000,
        batch_size: 32,
    },
    PaperPreset {
        name: "imagereward",
        eta: 20.0,
        base_lr: 1e-5,
        value_lr: 5e-6,
        grad_accum: 2,
        steps: 1000,
        batch_size: 32,
    },
    PaperPreset {
        name: "protein",
        eta: 0.1,
        base_lr: 5e-5,
        value_lr: 1e-6,
        grad_accum: 50,
        steps: 30,
        batch_size: 16,
    },
    PaperPreset {
        name: "compressibility",
        eta: 1.0,
        base_lr: 1e-6,
        value_lr: 1e-5,
        grad_accum: 2,
        steps: 200,
        batch_size: 32,
    },
];

pub fn paper_preset(name: &str) -> Option<&'static PaperPreset> {
    PAPER_PRESETS.iter().find(|p| p.name == name)
}

/// One row of the fine-tuning log. Fields a method does not produce, and
/// evaluation fields between evaluation steps, are `None`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FinetuneRow {
    pub step: usize,
    /// Training rollouts scored by the reward so far.
    pub scored_rollouts: usize,
    /// Mean reward of this update's training rollouts.
    pub mean_reward: f64,
    pub mean_value: Option<f64>,
    pub kl_surrogate: Option<f64>,
    pub param_drift: f64,
    /// Sliced Wasserstein distance between fixed-noise samples of the
    /// policy and of the reference.
    pub prior_drift: Option<f64>,
    /// Mean reward of the fixed-noise evaluation rollouts.
    pub eval_reward: Option<f64>,
}

impl FinetuneRow {
    pub const COLUMNS: [&'static str; 8] = [
        "step",
        "scored_rollouts",
        "mean_reward",
        "mean_value",
        "kl_surrogate",
        "param_drift",
        "prior_drift",
        "eval_reward",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub method: String,
    pub rows: Vec<FinetuneRow>,
    pub scored_rollouts: usize,
    /// Losses of every value refresh step, in order.
    pub refresh_losses: Vec<f64>,
}

impl FinetuneReport {
    /// Evaluated rows only.
    pub fn eval_rows(&self) -> impl Iterator<Item = &FinetuneRow> {
        self.rows.iter().filter(|r| r.eval_reward.is_some())
    }

    pub fn final_eval(&self) -> Option<&FinetuneRow> {
        self.eval_rows().last()
    }

    /// Scored rollouts at the first evaluation whose reward reaches
    /// `threshold`.
    pub fn rollouts_to_reach(&self, threshold: f64) -> Option<usize> {
        self.eval_rows()
            .find(|r| r.eval_reward.is_some_and(|v| v >= threshold))
            .map(|r| r.scored_rollouts)
    }
}

/// Fixed-noise evaluation set, shared by every method run from one seed.
struct Evaluator {
    cs: Vec<usize>,
    master: u64,
    eval_rollouts: usize,
    reference: Vec<Vec<f64>>,
    projections: Vec<Vec<f64>>,
}

impl Evaluator {
    fn new(pair: &PolicyPair, cfg: &FinetuneConfig, master: u64) -> Result<Self> {
        let eval_master = derive_seed(master, tag::EVAL, 0);
        let n = cfg.eval_rollouts.max(cfg.drift_samples).max(1);
        let k = pair.theta.num_contexts();
        let cs = (0..n as u64)
            .map(|i| rollout_context(eval_master, i, k))
            .collect();
        let mut proj_rng = stream(master, tag::PROJECTION, 0);
        let projections = random_projections(pair.data_dim(), cfg.drift_projections, &mut proj_rng);
        let mut ev = Self {
            cs,
            master: eval_master,
            eval_rollouts: cfg.eval_rollouts,
            reference: Vec::new(),
            projections,
        };
        ev.reference = sample_terminals(pair.theta0(), &ev.cs, pair.sched(), ev.master)?;
        Ok(ev)
    }

    fn run(
        &self,
        pair: &PolicyPair,
        reward: &dyn Reward,
        drift_samples: usize,
    ) -> Result<(f64, f64)> {
        let xs = sample_terminals(&pair.theta, &self.cs, pair.sched(), self.master)?;
        let n = self.eval_rollouts.max(1).min(xs.len());
        let r = reward.score_batch(&xs[..n], &self.cs[..n])?;
        let mean = r.iter().sum::<f64>() / n as f64;
        let m = drift_samples.max(1).min(xs.len());
        let drift = sliced_wasserstein_with(&xs[..m], &self.reference[..m], &self.projections)?;
        Ok((mean, drift))
    }
}

enum Method<'a> {
    Vard {
        cfg: &'a VardConfig,
        value: &'a mut dyn ValueFunction,
    },
    LastK(usize),
}

struct MicroBatch {
    grads: Vec<Vec<f64>>,
    mean_value: Option<f64>,
    kl: Option<f64>,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = rows.collect();
    Tensor::from_rows(&rows)
}

fn vard_micro(
    pair: &PolicyPair,
    cfg: &VardConfig,
    value: &dyn ValueFunction,
    trajs: &[Trajectory],
    noise: &[RolloutNoise],
    first_index: u64,
    master: u64,
) -> Result<(MicroBatch, Var, Tape)> {
    let steps = pair.sched().steps();
    let dim = pair.data_dim();
    let mut xs = Vec::new();
    let mut ss = Vec::new();
    let mut cs = Vec::new();
    let mut zs = Vec::new();
    let mut z0s = Vec::new();
    for (i, (traj, nz)) in trajs.iter().zip(noise).enumerate() {
        let mut paired =
            (!cfg.shared_noise).then(|| stream(master, tag::PAIRED, first_index + i as u64));
        for s in &cfg.finetune_window {
            xs.push(traj.at_diffusion_index(*s).x.clone());
            ss.push(*s);
            cs.push(traj.context());
            zs.push(
                nz.step(*s, steps)
                    .map_or_else(|| vec![0.0; dim], <[f64]>::to_vec),
            );
            if let Some(r) = paired.as_mut() {
                z0s.push(normal_vec(r, dim));
            }
        }
    }
    let mu0 = pair.reference_mean(&xs, &ss, &cs)?;
    let pn = PairNoise {
        z: zs,
        z0: (!cfg.shared_noise).then_some(z0s),
    };
    let mut tape = Tape::new();
    let params = pair.theta.store().bind(&mut tape, true)?;
    let x = tape.constant(&Tensor::from_rows(&xs)?)?;
    let mu = pair.policy_mean(&mut tape, &params, x, &ss, &cs)?;
    let value_ts: Vec<usize> = ss.iter().map(|s| s - 1).collect();
    let terms = vard_terms(
        &mut tape,
        value,
        mu,
        &mu0,
        &pair.sigmas(&ss),
        &pn,
        &value_ts,
        &cs,
        cfg.eta,
        cfg.value_on_mean,
    )?;
    let grads = tape.backward(terms.loss)?;
    let v = tape.value(terms.value);
    let mb = MicroBatch {
        grads: params.collect(&tape, &grads),
        mean_value: Some(v.iter().sum::<f64>() / v.len() as f64),
        kl: Some(tape.scalar(terms.kl)?),
    };
    Ok((mb, terms.loss, tape))
}

/// Reward backpropagation through the transitions `cut, .., 1` of each
/// rollout, replaying the rollout's own noise; earlier steps are constants.
fn reward_backprop_micro(
    pair: &PolicyPair,
    reward: &dyn Reward,
    trajs: &[Trajectory],
    noise: &[RolloutNoise],
    cut: usize,
) -> Result<(MicroBatch, Var, Tape)> {
    let steps = pair.sched().steps();
    let n = trajs.len();
    let cs: Vec<usize> = trajs.iter().map(Trajectory::context).collect();
    let mut tape = Tape::new();
    let params = pair.theta.store().bind(&mut tape, true)?;
    let mut x = tape.constant(&stack(
        trajs.iter().map(|t| t.at_diffusion_index(cut).x.clone()),
    )?)?;
    for s in (1..=cut).rev() {
        let ss = vec![s; n];
        let mu = pair.policy_mean(&mut tape, &params, x, &ss, &cs)?;
        x = match noise
            .iter()
            .map(|nz| nz.step(s, steps))
            .collect::<Option<Vec<_>>>()
        {
            Some(zs) => {
                let sigma = pair.sched().sampling_sigma(s);
                let sz = stack(
                    zs.into_iter()
                        .map(|z| z.iter().map(|v| sigma * v).collect()),
                )?;
                let sz = tape.constant(&sz)?;
                tape.add(mu, sz)?
            }
            None => mu,
        };
    }
    let r = reward.score_on_tape(&mut tape, x, &cs)?;
    let mean_r = tape.mean(r)?;
    let loss = tape.scale(mean_r, -1.0)?;
    let grads = tape.backward(loss)?;
    let mb = MicroBatch {
        grads: params.collect(&tape, &grads),
        mean_value: None,
        kl: None,
    };
    Ok((mb, loss, tape))
}

fn run(
    pair: &mut PolicyPair,
    reward: &dyn Reward,
    mut method: Method<'_>,
    cfg: &FinetuneConfig,
    master: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let name = match &method {
        Method::Vard { .. } => String::from("vard"),
        Method::LastK(1) => String::from("final_step"),
        Method::LastK(k) => format!("random_last_{k}"),
    };
    let steps = pair.sched().steps();
    let dim = pair.data_dim();
    let k_ctx = pair.theta.num_contexts();
    let evaluator = Evaluator::new(pair, cfg, master)?;
    let mut opt = Adam::new(cfg.adam());
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut refresh_losses = Vec::new();
    let mut recent: Vec<Trajectory> = Vec::new();
    let mut scored = 0usize;
    let mut next_index = 0u64;

    let (r0, d0) = evaluator.run(pair, reward, cfg.drift_samples)?;
    rows.push(FinetuneRow {
        step: 0,
        scored_rollouts: 0,
        mean_reward: r0,
        mean_value: None,
        kl_surrogate: None,
        param_drift: pair.param_drift()?,
        prior_drift: Some(d0),
        eval_reward: Some(r0),
    });

    for update in 0..cfg.steps {
        let mut acc: Vec<Vec<f64>> = Vec::new();
        let mut reward_sum = 0.0;
        let mut values = Vec::new();
        let mut kls = Vec::new();
        for micro in 0..cfg.grad_accum {
            let first = next_index;
            let idx: Vec<u64> = (first..first + cfg.batch_size as u64).collect();
            next_index += cfg.batch_size as u64;
            let cs: Vec<usize> = idx
                .iter()
                .map(|i| rollout_context(master, *i, k_ctx))
                .collect();
            let noise: Vec<RolloutNoise> = idx
                .iter()
                .map(|i| RolloutNoise::for_element(master, *i, dim, steps))
                .collect();
            let mut trajs =
                sample_batch(&pair.theta, &cs, pair.sched(), &noise, false).map_err(|e| {
                    Error::Divergence {
                        step: update,
                        what: format!("rollout failed: {e}"),
                    }
                })?;
            attach_rewards_batch(&mut trajs, reward)?;
            scored += trajs.len();
            reward_sum += trajs.iter().filter_map(|t| t.terminal_reward).sum::<f64>();
            let (mb, loss, tape) = match &mut method {
                Method::Vard { cfg: vc, value } => {
                    vard_micro(pair, vc, &**value, &trajs, &noise, first, master)?
                }
                Method::LastK(k) => {
                    let cut = if *k == 1 {
                        1
                    } else {
                        let draw = (update * cfg.grad_accum + micro) as u64;
                        stream(master, tag::CUT, draw).random_range(1..=*k)
                    };
                    reward_backprop_micro(pair, reward, &trajs, &noise, cut)?
                }
            };
            let l = tape.scalar(loss)?;
            if !l.is_finite() || mb.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step: update,
                    what: format!(
                        "non-finite loss {l} or gradient (param drift {:.3e})",
                        pair.param_drift()?
                    ),
                });
            }
            let w = 1.0 / cfg.grad_accum as f64;
            if acc.is_empty() {
                acc = mb
                    .grads
                    .iter()
                    .map(|g| g.iter().map(|v| v * w).collect())
                    .collect();
            } else {
                for (a, g) in acc.iter_mut().zip(&mb.grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g * w);
                }
            }
            values.extend(mb.mean_value);
            kls.extend(mb.kl);
            if matches!(method, Method::Vard { .. }) {
                recent.extend(trajs);
            }
        }
        opt.step(pair.theta.store_mut(), &acc)?;

        if let Method::Vard { cfg: vc, value } = &mut method {
            let every = vc.refresh.every;
            if every > 0 && (update + 1) % every == 0 {
                let mut rng = stream(master, tag::VALUE, update as u64);
                refresh_losses.extend(value.refresh(&recent, &vc.refresh, &mut rng)?);
                recent.clear();
            }
        }

        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let evaluate = (update + 1) % cfg.eval_every == 0 || update + 1 == cfg.steps;
        let (eval_reward, prior_drift) = if evaluate {
            let (r, d) = evaluator.run(pair, reward, cfg.drift_samples)?;
            (Some(r), Some(d))
        } else {
            (None, None)
        };
        rows.push(FinetuneRow {
            step: update + 1,
            scored_rollouts: scored,
            mean_reward: reward_sum / (cfg.batch_size * cfg.grad_accum) as f64,
            mean_value: mean(&values),
            kl_surrogate: mean(&kls),
            param_drift: pair.param_drift()?,
            prior_drift,
            eval_reward,
        });
    }
    Ok(FinetuneReport {
        method: name,
        rows,
        scored_rollouts: scored,
        refresh_losses,
    })
}

/// Fine-tunes `pair.theta` with the value-guided objective. `value` should
/// already be fitted to the reference policy; it is refit online according
/// to `cfg.refresh`.
pub fn finetune(
    pair: &mut PolicyPair,
    value: &mut dyn ValueFunction,
    reward: &dyn Reward,
    cfg: &VardConfig,
    master: u64,
) -> Result<FinetuneReport> {
    cfg.validate(pair.sched().steps())?;
    run(
        pair,
        reward,
        Method::Vard { cfg, value },
        &cfg.train,
        master,
    )
}

fn require_differentiable(reward: &dyn Reward) -> Result<()> {
    if reward.is_differentiable() {
        Ok(())
    } else {
        Err(Error::NonDifferentiableReward(reward.name().into()))
    }
}

/// Reward backpropagation through the last reverse transition only.
pub fn baseline_final_step(
    pair: &mut PolicyPair,
    reward: &dyn Reward,
    cfg: &FinetuneConfig,
    master: u64,
) -> Result<FinetuneReport> {
    baseline_random_last_k(pair, reward, 1, cfg, master)
}

/// Reward backpropagation from a cut point drawn uniformly from the last `k`
/// transitions of each micro-batch.
pub fn baseline_random_last_k(
    pair: &mut PolicyPair,
    reward: &dyn Reward,
    k: usize,
    cfg: &FinetuneConfig,
    master: u64,
) -> Result<FinetuneReport> {
    require_differentiable(reward)?;
    if k == 0 || k > pair.sched().steps() {
        return Err(Error::StepOutOfRange {
            t: k,
            steps: pair.sched().steps(),
        });
    }
    run(pair, reward, Method::LastK(k), cfg, master)
}
