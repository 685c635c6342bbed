//! Numerical check that the gradient of the paired-sample squared distance
//! equals `2 sigma^2` times the gradient of the Gaussian KL.

use alloc::vec::Vec;
use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{contract, Result};
use crate::rng::normal_vec;

/// Gaussian means `mu(psi) = a + b psi + c psi^2` against a fixed reference
/// `mu0`, both with covariance `sigma^2 I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFamily {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma: f64,
}

impl MeanFamily {
    /// `mu(psi) = psi * 1` against `mu0 = 0`.
    pub fn linear(dim: usize, sigma: f64) -> Self {
        Self {
            a: alloc::vec![0.0; dim],
            b: alloc::vec![1.0; dim],
            c: alloc::vec![0.0; dim],
            mu0: alloc::vec![0.0; dim],
            sigma,
        }
    }

    /// Random family with coefficients in `[-1, 1]` and `sigma` in
    /// `[0.2, 1.5]`, redrawn while the Monte-Carlo gradient at `psi` would be
    /// dominated by noise, i.e. while `|delta . mu'| < sigma |mu'|`.
    pub fn random(dim: usize, psi: f64, rng: &mut impl Rng) -> Self {
        loop {
            let mut coef = || {
                (0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            let fam = Self {
                a: coef(),
                b: coef(),
                c: coef(),
                mu0: coef(),
                sigma: rng.random_range(0.2..1.5),
            };
            let delta = fam.delta(psi);
            let dmu = fam.dmu(psi);
            let proj: f64 = delta.iter().zip(&dmu).map(|(d, m)| d * m).sum();
            let norm = libm::sqrt(dmu.iter().map(|m| m * m).sum::<f64>());
            if proj.abs() >= fam.sigma * norm {
                return fam;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn mean(&self, psi: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.a[i] + self.b[i] * psi + self.c[i] * psi * psi)
            .collect()
    }

    fn delta(&self, psi: f64) -> Vec<f64> {
        self.mean(psi)
            .iter()
            .zip(&self.mu0)
            .map(|(m, r)| m - r)
            .collect()
    }

    fn dmu(&self, psi: f64) -> Vec<f64> {
        self.b
            .iter()
            .zip(&self.c)
            .map(|(b, c)| b + 2.0 * c * psi)
            .collect()
    }

    /// `d/dpsi KL(N(mu(psi), s^2 I) || N(mu0, s^2 I)) = (mu - mu0) . mu' / s^2`.
    pub fn kl_gradient(&self, psi: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.delta(psi)
            .iter()
            .zip(self.dmu(psi))
            .map(|(d, m)| d * m)
            .sum::<f64>()
            / s2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LemmaReport {
    pub psi: f64,
    pub sigma: f64,
    pub samples: usize,
    /// Reparameterised Monte-Carlo estimate of `d/dpsi E ||x - x0||^2`.
    pub mc_gradient: f64,
    /// Closed-form `d/dpsi KL`.
    pub kl_gradient: f64,
    /// `mc_gradient / kl_gradient`; NaN when the KL gradient vanishes.
    pub ratio: f64,
    pub expected_ratio: f64,
}

impl LemmaReport {
    pub fn relative_error(&self) -> f64 {
        (self.ratio - self.expected_ratio).abs() / self.expected_ratio
    }
}

/// Estimates `d/dpsi E ||x - x0||^2` with `x = mu(psi) + sigma z` and
/// `x0 = mu0 + sigma z0` by differentiating the sample mean on a tape, and
/// compares it with the closed-form KL gradient. `shared_noise` sets
/// `z0 = z`.
pub fn check_lemma1(
    family: &MeanFamily,
    psi: f64,
    samples: usize,
    shared_noise: bool,
    rng: &mut impl Rng,
) -> Result<LemmaReport> {
    let d = family.dim();
    if d == 0 || samples == 0 || !(family.sigma > 0.0) {
        return Err(contract(
            "lemma check needs a positive dimension, sample count and sigma",
        ));
    }
    if [&family.b, &family.c, &family.mu0]
        .iter()
        .any(|v| v.len() != d)
    {
        return Err(contract("family coefficients must share one dimension"));
    }
    let s = family.sigma;
    let mut noise = Vec::with_capacity(samples * d);
    let mut reference = Vec::with_capacity(samples * d);
    for _ in 0..samples {
        let z = normal_vec(rng, d);
        let z0 = if shared_noise {
            z.clone()
        } else {
            normal_vec(rng, d)
        };
        noise.extend(z.iter().map(|v| s * v));
        reference.extend(family.mu0.iter().zip(&z0).map(|(m, v)| m + s * v));
    }
    let mut tape = Tape::new();
    let p = tape.variable(&Tensor::scalar(psi))?;
    let row = |v: &[f64]| Tensor::row(v.to_vec());
    let (a, b, c) = (
        tape.constant(&row(&family.a))?,
        tape.constant(&row(&family.b))?,
        tape.constant(&row(&family.c))?,
    );
    let p2 = tape.square(p)?;
    let bp = tape.scalar_mul(b, p)?;
    let cp = tape.scalar_mul(c, p2)?;
    let ab = tape.add(a, bp)?;
    let mu = tape.add(ab, cp)?;
    let mu_rows = tape.broadcast_rows(mu, samples)?;
    let sz = tape.constant(&Tensor::matrix(samples, d, noise)?)?;
    let x = tape.add(mu_rows, sz)?;
    let x0 = tape.constant(&Tensor::matrix(samples, d, reference)?)?;
    let diff = tape.sub(x, x0)?;
    let sq = tape.square(diff)?;
    let per_row = tape.row_sum(sq)?;
    let mse = tape.mean(per_row)?;
    let grads = tape.backward(mse)?;
    let mc_gradient = grads.wrt(&tape, p)[0];
    let kl_gradient = family.kl_gradient(psi);
    Ok(LemmaReport {
        psi,
        sigma: s,
        samples,
        mc_gradient,
        kl_gradient,
        ratio: if kl_gradient == 0.0 {
            f64::NAN
        } else {
            mc_gradient / kl_gradient
        },
        expected_ratio: 2.0 * s * s,
    })
}
