use alloc::{vec, vec::Vec};
use rand::Rng;

use super::denoiser::EpsModel;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::rng::{normal_vec, stream, tag};

fn same_len(context: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`; `t = 0` returns
/// `x0`.
pub fn forward_noising(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len("forward_noising", x0, noise)?;
    if t > sched.steps() {
        return Err(Error::StepOutOfRange {
            t,
            steps: sched.steps(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)`
pub fn posterior_mean(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    same_len("posterior_mean", x_t, eps_hat)?;
    sched.check_step(t)?;
    let k = sched.eps_coef(t);
    let s = libm::sqrt(sched.alpha(t));
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - k * e) / s)
        .collect())
}

/// Initial noise and per-step noise of one reverse chain, drawn up front so a
/// rollout can be replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutNoise {
    pub x_t: Vec<f64>,
    /// `z[T - t]` perturbs step `t`; the last step takes none.
    pub z: Vec<Vec<f64>>,
}

impl RolloutNoise {
    /// Draws `x_T`, then the noise of steps `T, .., 2`, in that order.
    pub fn draw(rng: &mut impl Rng, dim: usize, steps: usize) -> Self {
        let x_t = normal_vec(rng, dim);
        let z = (2..=steps).map(|_| normal_vec(rng, dim)).collect();
        Self { x_t, z }
    }

    /// Noise of element `index` in a batch seeded by `master`.
    pub fn for_element(master: u64, index: u64, dim: usize, steps: usize) -> Self {
        Self::draw(&mut stream(master, tag::ROLLOUT, index), dim, steps)
    }

    pub fn step(&self, t: usize, steps: usize) -> Option<&[f64]> {
        if t < 2 {
            None
        } else {
            self.z.get(steps - t).map(Vec::as_slice)
        }
    }
}

/// One reverse step for a batch sharing `t`, with explicit noise. Returns the
/// next samples and the means they were drawn around. `z = None` rows take the
/// mean.
pub fn reverse_step_batch(
    model: &(impl EpsModel + ?Sized),
    xs: &[Vec<f64>],
    t: usize,
    cs: &[usize],
    sched: &NoiseSchedule,
    zs: &[Option<&[f64]>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    sched.check_step(t)?;
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Sampling { t });
    }
    let ctx: Vec<Option<usize>> = cs.iter().map(|c| Some(*c)).collect();
    let eps = model
        .predict_eps(xs, t, &ctx)
        .map_err(|_| Error::Sampling { t })?;
    let sigma = sched.sampling_sigma(t);
    let mut next = Vec::with_capacity(xs.len());
    let mut means = Vec::with_capacity(xs.len());
    for ((x, e), z) in xs.iter().zip(&eps).zip(zs) {
        let mu = posterior_mean(x, t, e, sched)?;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { t });
        }
        let x_prev = match z {
            Some(z) if sigma > 0.0 => mu.iter().zip(*z).map(|(m, z)| m + sigma * z).collect(),
            _ => mu.clone(),
        };
        next.push(x_prev);
        means.push(mu);
    }
    Ok((next, means))
}

/// `x_{t-1} = mu_theta + sigma_t z`, with the final step returning the mean.
/// Returns `(x_{t-1}, mu_theta)`.
pub fn reverse_step(
    model: &(impl EpsModel + ?Sized),
    x_t: &[f64],
    t: usize,
    c: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = normal_vec(rng, x_t.len());
    let (mut next, mut means) =
        reverse_step_batch(model, &[x_t.to_vec()], t, &[c], sched, &[Some(&z)])?;
    Ok((next.remove(0), means.remove(0)))
}

/// Runs full reverse chains from pre-drawn noise, one per context entry.
pub fn sample_batch(
    model: &(impl EpsModel + ?Sized),
    cs: &[usize],
    sched: &NoiseSchedule,
    noise: &[RolloutNoise],
    record_means: bool,
) -> Result<Vec<Trajectory>> {
    if cs.len() != noise.len() {
        return Err(crate::error::contract(
            "one noise record per chain required",
        ));
    }
    let steps = sched.steps();
    let dim = model.data_dim();
    if let Some(bad) = noise.iter().find(|n| n.x_t.len() != dim) {
        return Err(Error::Dimension {
            context: "initial noise",
            expected: dim,
            got: bad.x_t.len(),
        });
    }
    let mut chains: Vec<Vec<Vec<f64>>> = noise.iter().map(|n| vec![n.x_t.clone()]).collect();
    let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); cs.len()];
    let mut xs: Vec<Vec<f64>> = noise.iter().map(|n| n.x_t.clone()).collect();
    for t in (1..=steps).rev() {
        let zs: Vec<Option<&[f64]>> = noise.iter().map(|n| n.step(t, steps)).collect();
        let (next, mu) = reverse_step_batch(model, &xs, t, cs, sched, &zs)?;
        for (i, x) in next.iter().enumerate() {
            chains[i].push(x.clone());
        }
        if record_means {
            for (m, mu) in means.iter_mut().zip(mu) {
                m.push(mu);
            }
        }
        xs = next;
    }
    Ok(chains
        .into_iter()
        .zip(means)
        .zip(cs)
        .map(|((chain, m), c)| {
            let mut traj = Trajectory::from_chain(chain, *c);
            if record_means {
                traj.pretrained_means = Some(m);
            }
            traj
        })
        .collect())
}

/// Draws `x_T ~ N(0, I)` and runs the reverse chain to `x_0`.
pub fn sample_trajectory(
    model: &(impl EpsModel + ?Sized),
    c: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let noise = RolloutNoise::draw(rng, model.data_dim(), sched.steps());
    Ok(sample_batch(model, &[c], sched, &[noise], false)?.remove(0))
}

/// Terminal samples of `cs.len()` chains seeded per element from `master`.
/// Matches [`sample_batch`] on [`RolloutNoise::for_element`] noise without
/// keeping the chains.
pub fn sample_terminals(
    model: &(impl EpsModel + ?Sized),
    cs: &[usize],
    sched: &NoiseSchedule,
    master: u64,
) -> Result<Vec<Vec<f64>>> {
    let dim = model.data_dim();
    let mut rngs: Vec<_> = (0..cs.len())
        .map(|i| stream(master, tag::ROLLOUT, i as u64))
        .collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| normal_vec(r, dim)).collect();
    for t in (1..=sched.steps()).rev() {
        let z: Vec<Vec<f64>> = if t >= 2 {
            rngs.iter_mut().map(|r| normal_vec(r, dim)).collect()
        } else {
            Vec::new()
        };
        let zs: Vec<Option<&[f64]>> = (0..cs.len()).map(|i| z.get(i).map(Vec::as_slice)).collect();
        xs = reverse_step_batch(model, &xs, t, cs, sched, &zs)?.0;
    }
    Ok(xs)
}
