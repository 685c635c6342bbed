use alloc::{format, vec, vec::Vec};
use rand::Rng;

use crate::error::{contract, Result};
use crate::rng::normal;

/// One Gaussian component with a full covariance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl Component {
    pub fn isotropic(weight: f64, mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = std * std;
        }
        Self { weight, mean, cov }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Dataset {
    /// One mixture per context.
    MixtureOfGaussians { contexts: Vec<Vec<Component>> },
    /// Two-armed spiral in the plane, one arm per context when `contexts == 2`.
    Spiral {
        contexts: usize,
        noise: f64,
        turns: f64,
    },
    /// Uniform density on the dark squares of a `cells x cells` board of side
    /// `2 * half_width` centred at the origin.
    Checkerboard { cells: usize, half_width: f64 },
}

/// The data distribution `q0(x0, c)` with a uniform context prior.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DataConfig {
    pub dim: usize,
    pub dataset: Dataset,
}

/// Lower Cholesky factor; fails unless the matrix is positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = libm::sqrt(s);
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

impl DataConfig {
    /// Three well separated modes on a circle of radius 2, one context.
    pub fn three_modes() -> Self {
        let comps = (0..3)
            .map(|k| {
                let a = core::f64::consts::TAU * k as f64 / 3.0 + core::f64::consts::FRAC_PI_2;
                Component::isotropic(
                    1.0 / 3.0,
                    vec![2.0 * libm::cos(a), 2.0 * libm::sin(a)],
                    0.25,
                )
            })
            .collect();
        Self {
            dim: 2,
            dataset: Dataset::MixtureOfGaussians {
                contexts: vec![comps],
            },
        }
    }

    /// Context `k` selects the single mode at `(-2, 0)` or `(2, 0)`.
    pub fn two_mode_conditional() -> Self {
        Self {
            dim: 2,
            dataset: Dataset::MixtureOfGaussians {
                contexts: vec![
                    vec![Component::isotropic(1.0, vec![-2.0, 0.0], 0.3)],
                    vec![Component::isotropic(1.0, vec![2.0, 0.0], 0.3)],
                ],
            },
        }
    }

    /// Degenerate dataset: a point mass at the origin.
    pub fn point_mass(dim: usize) -> Self {
        Self {
            dim,
            dataset: Dataset::MixtureOfGaussians {
                contexts: vec![vec![Component {
                    weight: 1.0,
                    mean: vec![0.0; dim],
                    cov: vec![0.0; dim * dim],
                }]],
            },
        }
    }

    pub fn num_contexts(&self) -> usize {
        match &self.dataset {
            Dataset::MixtureOfGaussians { contexts } => contexts.len(),
            Dataset::Spiral { contexts, .. } => *contexts,
            Dataset::Checkerboard { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(contract("data dimension must be positive"));
        }
        match &self.dataset {
            Dataset::MixtureOfGaussians { contexts } => {
                if contexts.is_empty() {
                    return Err(contract("mixture needs at least one context"));
                }
                for (c, comps) in contexts.iter().enumerate() {
                    let total: f64 = comps.iter().map(|k| k.weight).sum();
                    if comps.is_empty() || (total - 1.0).abs() > 1e-9 {
                        return Err(contract(format!(
                            "mixture weights of context {c} sum to {total}, expected 1"
                        )));
                    }
                    for k in comps {
                        if k.mean.len() != self.dim || k.cov.len() != self.dim * self.dim {
                            return Err(contract(format!(
                                "component of context {c} has wrong dimension"
                            )));
                        }
                        let zero = k.cov.iter().all(|v| *v == 0.0);
                        if !zero && cholesky(&k.cov, self.dim).is_none() {
                            return Err(contract(format!(
                                "covariance in context {c} is not positive definite"
                            )));
                        }
                    }
                }
            }
            Dataset::Spiral { contexts, .. } => {
                if self.dim != 2 || *contexts == 0 {
                    return Err(contract("spiral data is 2-D with at least one context"));
                }
            }
            Dataset::Checkerboard { cells, .. } => {
                if self.dim != 2 || *cells == 0 {
                    return Err(contract("checkerboard data is 2-D with at least one cell"));
                }
            }
        }
        Ok(())
    }

    /// Draws one sample for context `c`.
    pub fn sample_given(&self, c: usize, rng: &mut impl Rng) -> Vec<f64> {
        match &self.dataset {
            Dataset::MixtureOfGaussians { contexts } => {
                let comps = &contexts[c];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = &comps[comps.len() - 1];
                for k in comps {
                    acc += k.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let d = self.dim;
                let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                match cholesky(&pick.cov, d) {
                    Some(l) => (0..d)
                        .map(|i| pick.mean[i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
                        .collect(),
                    None => pick.mean.clone(),
                }
            }
            Dataset::Spiral {
                contexts,
                noise,
                turns,
            } => {
                let s: f64 = rng.random();
                let theta = s * turns * core::f64::consts::TAU
                    + core::f64::consts::TAU * c as f64 / *contexts as f64;
                let r = 0.5 + 2.0 * s;
                vec![
                    r * libm::cos(theta) + noise * normal(rng),
                    r * libm::sin(theta) + noise * normal(rng),
                ]
            }
            Dataset::Checkerboard { cells, half_width } => {
                let n = *cells;
                let side = 2.0 * half_width / n as f64;
                loop {
                    let i = rng.random_range(0..n);
                    let j = rng.random_range(0..n);
                    if (i + j) % 2 == 0 {
                        let x = -half_width + (i as f64 + rng.random::<f64>()) * side;
                        let y = -half_width + (j as f64 + rng.random::<f64>()) * side;
                        return vec![x, y];
                    }
                }
            }
        }
    }

    /// Draws `n` pairs `(x0, c)` with `c` uniform over the contexts.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let k = self.num_contexts();
        let mut xs = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..k);
            xs.push(self.sample_given(c, rng));
            cs.push(c);
        }
        (xs, cs)
    }
}
