use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::ddpm::{Denoiser, EpsModel, NoiseSchedule};
use crate::error::{contract, Error, Result};
use crate::prm::ValueFunction;
use crate::rng::normal_vec;

/// The policy being fine-tuned and its frozen pretrained copy.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub theta: Denoiser,
    theta0: Denoiser,
    sched: NoiseSchedule,
}

impl PolicyPair {
    /// Starts fine-tuning from `pretrained`; both members begin identical.
    pub fn new(pretrained: Denoiser, sched: NoiseSchedule) -> Self {
        Self {
            theta: pretrained.clone(),
            theta0: pretrained,
            sched,
        }
    }

    /// Resumes from a fine-tuned policy. Fails if the two disagree in shape.
    pub fn resume(theta: Denoiser, theta0: Denoiser, sched: NoiseSchedule) -> Result<Self> {
        if theta.arch() != theta0.arch() {
            return Err(contract("policy and reference must share an architecture"));
        }
        Ok(Self {
            theta,
            theta0,
            sched,
        })
    }

    pub fn theta0(&self) -> &Denoiser {
        &self.theta0
    }

    pub fn sched(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn data_dim(&self) -> usize {
        self.theta.data_dim()
    }

    /// `||theta - theta0||` over all parameters.
    pub fn param_drift(&self) -> Result<f64> {
        self.theta.store().distance(self.theta0.store())
    }

    pub fn into_theta(self) -> Denoiser {
        self.theta
    }

    fn row_coefs(&self, ss: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
        let d = self.data_dim();
        let mut data = Vec::with_capacity(ss.len() * d);
        for s in ss {
            self.sched.check_step(*s)?;
            data.extend(core::iter::repeat_n(f(*s), d));
        }
        Tensor::matrix(ss.len(), d, data)
    }

    /// `mu_theta(x_s, s, c)` row by row, recorded on `tape`.
    pub fn policy_mean(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        ss: &[usize],
        cs: &[usize],
    ) -> Result<Var> {
        let ctx: Vec<Option<usize>> = cs.iter().map(|c| Some(*c)).collect();
        let eps = self.theta.forward(tape, params, x, ss, &ctx)?;
        let k = tape.constant(&self.row_coefs(ss, |s| self.sched.eps_coef(s))?)?;
        let inv = tape.constant(&self.row_coefs(ss, |s| 1.0 / libm::sqrt(self.sched.alpha(s)))?)?;
        let ke = tape.mul(eps, k)?;
        let diff = tape.sub(x, ke)?;
        tape.mul(diff, inv)
    }

    /// `mu_theta0(x_s, s, c)` row by row, outside any tape.
    pub fn reference_mean(
        &self,
        x: &[Vec<f64>],
        ss: &[usize],
        cs: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let ctx: Vec<Option<usize>> = cs.iter().map(|c| Some(*c)).collect();
        let eps = self.theta0.eval(x, ss, &ctx)?;
        let mut out = Vec::with_capacity(x.len());
        for ((x, e), s) in x.iter().zip(&eps).zip(ss) {
            self.sched.check_step(*s)?;
            // Same operation order as `policy_mean`, so equal parameters give
            // bit-equal means.
            let k = self.sched.eps_coef(*s);
            let inv = 1.0 / libm::sqrt(self.sched.alpha(*s));
            let mu: Vec<f64> = x.iter().zip(e).map(|(x, e)| (x - e * k) * inv).collect();
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("reference mean".into()));
            }
            out.push(mu);
        }
        Ok(out)
    }

    /// Sampling standard deviation of each row's step.
    pub fn sigmas(&self, ss: &[usize]) -> Vec<f64> {
        ss.iter().map(|s| self.sched.sampling_sigma(*s)).collect()
    }
}

/// Standard normal draws for the paired samples `x ~ p_theta`,
/// `x0 ~ p_theta0`. `z0 = None` reuses `z` for the reference draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub z: Vec<Vec<f64>>,
    pub z0: Option<Vec<Vec<f64>>>,
}

impl PairNoise {
    pub fn shared(z: Vec<Vec<f64>>) -> Self {
        Self { z, z0: None }
    }

    pub fn draw(rng: &mut impl Rng, n: usize, dim: usize, shared: bool) -> Self {
        let z = (0..n).map(|_| normal_vec(rng, dim)).collect();
        let z0 = (!shared).then(|| (0..n).map(|_| normal_vec(rng, dim)).collect());
        Self { z, z0 }
    }

    pub fn is_shared(&self) -> bool {
        self.z0.is_none()
    }
}

/// Tape nodes of one evaluation of the objective.
#[derive(Debug, Clone, Copy)]
pub struct VardTerms {
    /// `-mean V + eta * mean ||x - x0||^2`.
    pub loss: Var,
    /// `[n, 1]` values of the new samples.
    pub value: Var,
    /// Batch mean of `||x - x0||^2`.
    pub kl: Var,
}

fn sigma_times(sigma: &[f64], z: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    if z.len() != sigma.len() || z.iter().any(|r| r.len() != dim) {
        return Err(contract(
            "one noise row of the data width per sample required",
        ));
    }
    let data = z
        .iter()
        .zip(sigma)
        .flat_map(|(r, s)| r.iter().map(move |v| s * v))
        .collect();
    Tensor::matrix(sigma.len(), dim, data)
}

/// Paired-sample KL surrogate `mean_i ||x_i - x0_i||^2` with
/// `x = mu + sigma z`, `x0 = mu0 + sigma z0`. With shared noise the noise
/// cancels and the difference is taken between the means directly.
pub fn surrogate_on_tape(
    tape: &mut Tape,
    mu: Var,
    mu0: &[Vec<f64>],
    sigma: &[f64],
    noise: &PairNoise,
) -> Result<Var> {
    let (n, d) = tape.dims(mu);
    if mu0.len() != n {
        return Err(contract("one reference mean per row required"));
    }
    let diff = match &noise.z0 {
        None => {
            let m0 = tape.constant(&Tensor::from_rows(mu0)?)?;
            tape.sub(mu, m0)?
        }
        Some(z0) => {
            let sz = tape.constant(&sigma_times(sigma, &noise.z, d)?)?;
            let x = tape.add(mu, sz)?;
            let sz0 = sigma_times(sigma, z0, d)?;
            let x0: Vec<f64> = mu0
                .iter()
                .flatten()
                .zip(sz0.data())
                .map(|(m, s)| m + s)
                .collect();
            let x0 = tape.constant(&Tensor::matrix(n, d, x0)?)?;
            tape.sub(x, x0)?
        }
    };
    let sq = tape.square(diff)?;
    let per_row = tape.row_sum(sq)?;
    tape.mean(per_row)
}

/// The objective on given means: `x = mu + sigma z` is scored by `value` at
/// the diffusion indices `value_ts`, and the surrogate is weighted by `eta`.
/// Only `mu` carries gradient; `value` is read without its own parameters
/// on the tape and `mu0` is a constant.
#[allow(clippy::too_many_arguments)]
pub fn vard_terms(
    tape: &mut Tape,
    value: &dyn ValueFunction,
    mu: Var,
    mu0: &[Vec<f64>],
    sigma: &[f64],
    noise: &PairNoise,
    value_ts: &[usize],
    cs: &[usize],
    eta: f64,
    value_on_mean: bool,
) -> Result<VardTerms> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(contract("eta must be finite and non-negative"));
    }
    let (_, d) = tape.dims(mu);
    let input = if value_on_mean {
        mu
    } else {
        let sz = tape.constant(&sigma_times(sigma, &noise.z, d)?)?;
        tape.add(mu, sz)?
    };
    let v = value.value_on_tape(tape, input, value_ts, cs)?;
    let kl = surrogate_on_tape(tape, mu, mu0, sigma, noise)?;
    let mean_v = tape.mean(v)?;
    let neg_v = tape.scale(mean_v, -1.0)?;
    let weighted = tape.scale(kl, eta)?;
    let loss = tape.add(neg_v, weighted)?;
    Ok(VardTerms { loss, value: v, kl })
}

/// Scalar results and policy gradient of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct VardLoss {
    pub loss: f64,
    pub mean_value: f64,
    pub kl: f64,
    /// Gradient with respect to each tensor of `pair.theta`.
    pub grads: Vec<Vec<f64>>,
}

fn check_rows(pair: &PolicyPair, x: &[Vec<f64>], cs: &[usize]) -> Result<()> {
    if x.is_empty() || cs.len() != x.len() {
        return Err(contract(
            "one context per state and at least one state required",
        ));
    }
    if let Some(r) = x.iter().find(|r| r.len() != pair.data_dim()) {
        return Err(Error::Dimension {
            context: "state",
            expected: pair.data_dim(),
            got: r.len(),
        });
    }
    Ok(())
}

/// Paired-sample surrogate for the transition out of diffusion step `s`:
/// draws `x ~ p_theta(. | x_s)` and `x0 ~ p_theta0(. | x_s)` and averages
/// `||x - x0||^2` over the rows of `x_s`.
pub fn kl_surrogate(
    pair: &PolicyPair,
    x_s: &[Vec<f64>],
    s: usize,
    cs: &[usize],
    rng: &mut impl Rng,
    shared_noise: bool,
) -> Result<f64> {
    check_rows(pair, x_s, cs)?;
    let ss = vec![s; x_s.len()];
    let mu0 = pair.reference_mean(x_s, &ss, cs)?;
    let noise = PairNoise::draw(rng, x_s.len(), pair.data_dim(), shared_noise);
    let mut tape = Tape::new();
    let params = pair.theta.store().bind(&mut tape, false)?;
    let x = tape.constant(&Tensor::from_rows(x_s)?)?;
    let mu = pair.policy_mean(&mut tape, &params, x, &ss, cs)?;
    let kl = surrogate_on_tape(&mut tape, mu, &mu0, &pair.sigmas(&ss), &noise)?;
    let v = tape.scalar(kl)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("KL surrogate".into()));
    }
    Ok(v)
}

/// `-V(x_{s-1}) + eta ||x_{s-1} - x0_{s-1}||^2` for the transition out of
/// diffusion step `s`, averaged over the rows of `x_s`, with its gradient in
/// the policy parameters.
#[allow(clippy::too_many_arguments)]
pub fn vard_loss(
    pair: &PolicyPair,
    value: &dyn ValueFunction,
    x_s: &[Vec<f64>],
    s: usize,
    cs: &[usize],
    eta: f64,
    rng: &mut impl Rng,
    shared_noise: bool,
) -> Result<VardLoss> {
    check_rows(pair, x_s, cs)?;
    let ss = vec![s; x_s.len()];
    let mu0 = pair.reference_mean(x_s, &ss, cs)?;
    let noise = PairNoise::draw(rng, x_s.len(), pair.data_dim(), shared_noise);
    let mut tape = Tape::new();
    let params = pair.theta.store().bind(&mut tape, true)?;
    let x = tape.constant(&Tensor::from_rows(x_s)?)?;
    let mu = pair.policy_mean(&mut tape, &params, x, &ss, cs)?;
    let value_ts = vec![s - 1; x_s.len()];
    let terms = vard_terms(
        &mut tape,
        value,
        mu,
        &mu0,
        &pair.sigmas(&ss),
        &noise,
        &value_ts,
        cs,
        eta,
        false,
    )?;
    let loss = tape.scalar(terms.loss)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("VARD loss".into()));
    }
    let grads = tape.backward(terms.loss)?;
    let v = tape.value(terms.value);
    Ok(VardLoss {
        loss,
        mean_value: v.iter().sum::<f64>() / v.len() as f64,
        kl: tape.scalar(terms.kl)?,
        grads: params.collect(&tape, &grads),
    })
}
