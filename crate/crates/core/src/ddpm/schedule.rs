use alloc::{format, vec::Vec};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Which fixed variance the reverse kernel uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VarianceChoice {
    Beta,
    #[default]
    BetaTilde,
}

/// Per-step noise tables. All accessors take the 1-based diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    variance: VarianceChoice,
}

/// Builds a schedule and checks that the chain ends close to pure noise.
pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(contract(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(contract(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                let c =
                    libm::cos((t / steps as f64 + s) / (1.0 + s) * core::f64::consts::FRAC_PI_2);
                c * c
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    let sched = NoiseSchedule::from_betas(beta)?;
    let last = sched.alpha_bar(steps);
    if last >= 0.01 {
        return Err(Error::InsufficientNoise {
            alpha_bar_last: last,
        });
    }
    Ok(sched)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(contract("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            variance: VarianceChoice::default(),
        })
    }

    pub fn with_variance(mut self, variance: VarianceChoice) -> Self {
        self.variance = variance;
        self
    }

    pub fn variance(&self) -> VarianceChoice {
        self.variance
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn sigma2_beta(&self, t: usize) -> f64 {
        self.beta(t)
    }

    pub fn sigma2_beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde(t)
    }

    /// Reverse-kernel variance under the configured choice.
    pub fn sigma2(&self, t: usize) -> f64 {
        match self.variance {
            VarianceChoice::Beta => self.beta(t),
            VarianceChoice::BetaTilde => self.beta_tilde(t),
        }
    }

    /// Standard deviation actually used by the sampler; the last step is
    /// noise-free.
    pub fn sampling_sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            libm::sqrt(self.sigma2(t))
        }
    }

    /// Coefficient on the predicted noise in the posterior mean.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta(t) / libm::sqrt(1.0 - self.alpha_bar(t))
    }
}
