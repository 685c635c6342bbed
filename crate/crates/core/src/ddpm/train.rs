use alloc::{format, vec::Vec};
use rand::Rng;

use super::data::DataConfig;
use super::denoiser::{Denoiser, EpsModel};
use super::sampling::forward_noising;
use super::schedule::NoiseSchedule;
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::error::{contract, Error, Result};
use crate::rng::normal_vec;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached linearly.
    pub final_lr_fraction: f64,
    /// Probability of replacing the context with the null slot.
    pub p_uncond: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            p_uncond: 0.1,
        }
    }
}

/// One noise-regression batch: clean samples, contexts (already dropped to
/// `None` where unconditional), steps and the noise used.
struct Batch {
    x_t: Vec<Vec<f64>>,
    ts: Vec<usize>,
    cs: Vec<Option<usize>>,
    eps: Vec<Vec<f64>>,
}

fn draw_batch(
    data: &DataConfig,
    sched: &NoiseSchedule,
    n: usize,
    p_uncond: f64,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let (x0, cs) = data.sample(n, rng);
    let mut batch = Batch {
        x_t: Vec::with_capacity(n),
        ts: Vec::with_capacity(n),
        cs: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
    };
    for (x, c) in x0.iter().zip(cs) {
        let t = rng.random_range(1..=sched.steps());
        let eps = normal_vec(rng, data.dim);
        batch.x_t.push(forward_noising(x, t, &eps, sched)?);
        batch.ts.push(t);
        batch.cs.push(if rng.random::<f64>() < p_uncond {
            None
        } else {
            Some(c)
        });
        batch.eps.push(eps);
    }
    Ok(batch)
}

/// Fits `eps_theta` by the noise-prediction regression
/// `E ||eps - eps_theta(x_t, t, c)||^2`, summed over coordinates and averaged
/// over the batch. Returns the per-step losses.
pub fn pretrain(
    model: &mut Denoiser,
    data: &DataConfig,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    data.validate()?;
    if data.dim != model.data_dim() || data.num_contexts() > model.num_contexts() {
        return Err(contract(format!(
            "dataset ({}-D, {} contexts) does not fit the denoiser ({}-D, {} contexts)",
            data.dim,
            data.num_contexts(),
            model.data_dim(),
            model.num_contexts()
        )));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(contract(
            "batch size must be positive and p_uncond in [0, 1]",
        ));
    }
    let mut opt = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::with_lr(cfg.lr)
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let frac = if cfg.steps > 1 {
            step as f64 / (cfg.steps - 1) as f64
        } else {
            0.0
        };
        opt.config.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
        let b = draw_batch(data, sched, cfg.batch_size, cfg.p_uncond, rng)?;
        let mut tape = Tape::new();
        let params = model.store().bind(&mut tape, true)?;
        let x = tape.constant(&Tensor::from_rows(&b.x_t)?)?;
        let eps = tape.constant(&Tensor::from_rows(&b.eps)?)?;
        let pred = model.forward(&mut tape, &params, x, &b.ts, &b.cs)?;
        let diff = tape.sub(pred, eps)?;
        let sq = tape.square(diff)?;
        let per_row = tape.row_sum(sq)?;
        let loss = tape.mean(per_row)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "denoising loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        let g = params.collect(&tape, &grads);
        opt.step(model.store_mut(), &g)
            .map_err(|_| Error::Divergence {
                step,
                what: "denoiser gradient".into(),
            })?;
        losses.push(value);
    }
    Ok(losses)
}

/// Monte-Carlo noise-regression loss of `model` without updating it.
pub fn denoising_loss(
    model: &impl EpsModel,
    data: &DataConfig,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let b = draw_batch(data, sched, n, 0.0, rng)?;
    let mut total = 0.0;
    for i in 0..n {
        let e = model.predict_eps(&b.x_t[i..=i], b.ts[i], &b.cs[i..=i])?;
        total += e[0]
            .iter()
            .zip(&b.eps[i])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

/// The KL terms `sum_{t>=2} beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t))
/// E ||eps - eps_hat||^2` of the variational bound, estimated with `n` draws
/// per step. Kept as a diagnostic; training uses the unweighted regression.
pub fn kl_bound(
    model: &impl EpsModel,
    data: &DataConfig,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 2..=sched.steps() {
        let (x0, cs) = data.sample(n, rng);
        let mut xs = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        for x in &x0 {
            let e = normal_vec(rng, data.dim);
            xs.push(forward_noising(x, t, &e, sched)?);
            eps.push(e);
        }
        let ctx: Vec<Option<usize>> = cs.into_iter().map(Some).collect();
        let pred = model.predict_eps(&xs, t, &ctx)?;
        let mse = pred
            .iter()
            .zip(&eps)
            .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let w = sched.beta(t) * sched.beta(t)
            / (2.0 * sched.sigma2(t) * sched.alpha(t) * (1.0 - sched.alpha_bar(t)));
        total += w * mse;
    }
    Ok(total)
}
