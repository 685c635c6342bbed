use vard_core::autodiff::{Tape, Tensor, Var};
use vard_core::ddpm::*;
use vard_core::error::Error;
use vard_core::prm::{RefreshConfig, RewardAsValue, ValueArch, ValueFunction, ValueNet};
use vard_core::rewards::{ConstantReward, GridOccupancy, ModeDistance};
use vard_core::rng::seeded;
use vard_core::vard::*;

fn sched() -> NoiseSchedule {
    make_schedule(10, ScheduleKind::Linear, 0.2, 0.7).unwrap()
}

fn denoiser(seed: u64) -> Denoiser {
    let arch = DenoiserArch {
        data_dim: 2,
        num_contexts: 1,
        hidden: vec![16, 16],
        ..DenoiserArch::default()
    };
    Denoiser::new(arch, &mut seeded(seed)).unwrap()
}

fn states(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| vard_core::rng::normal_vec(&mut rng, 2))
        .collect()
}

/// `V(x) = w . x`, independent of step and context.
struct LinearValue(Vec<f64>);

impl ValueFunction for LinearValue {
    fn value_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        _ts: &[usize],
        _cs: &[usize],
    ) -> vard_core::Result<Var> {
        let w = tape.constant(&Tensor::matrix(self.0.len(), 1, self.0.clone())?)?;
        tape.matmul(x, w)
    }

    fn predict(&self, x: &[Vec<f64>], _ts: &[usize], _cs: &[usize]) -> vard_core::Result<Vec<f64>> {
        Ok(x.iter()
            .map(|r| r.iter().zip(&self.0).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn quick_train() -> FinetuneConfig {
    FinetuneConfig {
        steps: 4,
        batch_size: 8,
        eval_every: 2,
        eval_rollouts: 16,
        drift_samples: 16,
        drift_projections: 8,
        base_lr: 1e-3,
        ..FinetuneConfig::default()
    }
}

#[test]
fn identical_policies_have_zero_shared_surrogate() {
    let pair = PolicyPair::new(denoiser(1), sched());
    let x = states(32, 2);
    for s in [1, 4, 10] {
        let kl = kl_surrogate(&pair, &x, s, &vec![0; 32], &mut seeded(3), true).unwrap();
        assert_eq!(kl, 0.0);
    }
}

#[test]
fn shifted_output_bias_gives_squared_mean_shift() {
    let sched = sched();
    let mut theta = denoiser(1);
    let bias = theta.store_mut().tensors_mut().last_mut().unwrap();
    assert_eq!(bias.len(), 2);
    let b = [0.3, -0.2];
    bias.data_mut().iter_mut().zip(b).for_each(|(v, d)| *v += d);
    let pair = PolicyPair::resume(theta, denoiser(1), sched.clone()).unwrap();
    let x = states(16, 4);
    for s in [1, 3, 7] {
        // mu = (x - k eps) / sqrt(alpha), so an eps shift b moves mu by -k b / sqrt(alpha).
        let f = sched.eps_coef(s) / sched.alpha(s).sqrt();
        let want = f * f * (b[0] * b[0] + b[1] * b[1]);
        let got = kl_surrogate(&pair, &x, s, &vec![0; 16], &mut seeded(5), true).unwrap();
        assert!(
            (got - want).abs() < 1e-12 * want.max(1.0),
            "s={s}: {got} vs {want}"
        );
    }
}

#[test]
fn shared_surrogate_equals_mean_gap_to_machine_precision() {
    let sched = sched();
    let pair = PolicyPair::resume(denoiser(7), denoiser(8), sched.clone()).unwrap();
    let x = states(64, 9);
    let cs = vec![0; 64];
    let s = 6;
    let eps = pair.theta.eval(&x, &[s; 64], &[Some(0); 64]).unwrap();
    let mu0 = pair.reference_mean(&x, &[s; 64], &cs).unwrap();
    let want: f64 = x
        .iter()
        .zip(&eps)
        .zip(&mu0)
        .map(|((x, e), m0)| {
            let mu = posterior_mean(x, s, e, &sched).unwrap();
            mu.iter()
                .zip(m0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / 64.0;
    let got = kl_surrogate(&pair, &x, s, &cs, &mut seeded(10), true).unwrap();
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
}

#[test]
fn independent_noise_surrogate_has_the_constant_offset() {
    let sched = sched();
    let pair = PolicyPair::new(denoiser(1), sched.clone());
    let n = 100_000;
    let x = vec![vec![0.3, -0.4]; n];
    let s = 5;
    let sigma2 = sched.sampling_sigma(s).powi(2);
    let got = kl_surrogate(&pair, &x, s, &vec![0; n], &mut seeded(11), false).unwrap();
    let want = 2.0 * sigma2 * 2.0;
    // 2 sigma^2 chi^2_2 has standard deviation 4 sigma^2; the mean of 1e5 draws
    // is within 2% with overwhelming probability.
    assert!((got - want).abs() < 0.02 * want, "{got} vs {want}");
}

#[test]
fn lemma_linear_family_example() {
    let fam = MeanFamily::linear(2, 1.0);
    assert_eq!(fam.kl_gradient(0.5), 1.0);
    let rep = check_lemma1(&fam, 0.5, 100_000, false, &mut seeded(12)).unwrap();
    assert!((rep.mc_gradient - 2.0).abs() < 0.03 * 2.0, "{rep:?}");
    assert_eq!(rep.expected_ratio, 2.0);
}

#[test]
fn lemma_at_zero_offset() {
    let fam = MeanFamily::linear(2, 1.0);
    let shared = check_lemma1(&fam, 0.0, 1000, true, &mut seeded(13)).unwrap();
    assert_eq!(shared.kl_gradient, 0.0);
    assert_eq!(shared.mc_gradient, 0.0);
    let indep = check_lemma1(&fam, 0.0, 100_000, false, &mut seeded(13)).unwrap();
    // Pure noise: 2 (z - z0) . 1 averaged over 1e5 draws has sd 2 sqrt(4 / 1e5).
    assert!(indep.mc_gradient.abs() < 0.05, "{indep:?}");
}

#[test]
fn lemma_sigma_scaling() {
    let a = MeanFamily::linear(3, 1.0);
    let b = MeanFamily {
        sigma: 2.0,
        ..a.clone()
    };
    assert_eq!(b.kl_gradient(0.7), a.kl_gradient(0.7) / 4.0);
    let ra = check_lemma1(&a, 0.7, 1000, true, &mut seeded(14)).unwrap();
    let rb = check_lemma1(&b, 0.7, 1000, true, &mut seeded(14)).unwrap();
    assert_eq!(ra.mc_gradient, rb.mc_gradient);
    assert!((ra.ratio - 2.0).abs() < 1e-12 && (rb.ratio - 8.0).abs() < 1e-12);
}

#[test]
fn lemma_ratio_on_random_families() {
    let mut rng = seeded(15);
    for i in 0..20 {
        let fam = MeanFamily::random(1 + i % 4, 0.3, &mut rng);
        let rep = check_lemma1(&fam, 0.3, 100_000, false, &mut rng).unwrap();
        assert!(rep.relative_error() < 0.05, "family {i}: {rep:?}");
    }
}

#[test]
fn constant_value_and_zero_eta_give_zero_gradient() {
    let pair = PolicyPair::resume(denoiser(1), denoiser(2), sched()).unwrap();
    let r = ConstantReward(4.0);
    let v = RewardAsValue { reward: &r };
    let out = vard_loss(
        &pair,
        &v,
        &states(8, 3),
        3,
        &[0; 8],
        0.0,
        &mut seeded(4),
        true,
    )
    .unwrap();
    assert_eq!(out.loss, -4.0);
    assert!(out.grads.iter().flatten().all(|g| *g == 0.0));
}

fn loss_at(
    mu: &[Vec<f64>],
    mu0: &[Vec<f64>],
    noise: &PairNoise,
    eta: f64,
    w: &[f64],
) -> (f64, Vec<f64>) {
    let n = mu.len();
    let mut tape = Tape::new();
    let m = tape.variable(&Tensor::from_rows(mu).unwrap()).unwrap();
    let sigma = vec![0.4; n];
    let terms = vard_terms(
        &mut tape,
        &LinearValue(w.to_vec()),
        m,
        mu0,
        &sigma,
        noise,
        &vec![0; n],
        &vec![0; n],
        eta,
        false,
    )
    .unwrap();
    let g = tape.backward(terms.loss).unwrap().wrt(&tape, m);
    (tape.scalar(terms.loss).unwrap(), g)
}

#[test]
fn linear_value_gradient_on_the_mean() {
    let w = [0.7, -1.3];
    let mu = states(4, 20);
    let mu0 = states(4, 21);
    for (eta, noise) in [
        (0.0, PairNoise::shared(states(4, 22))),
        (2.5, PairNoise::shared(states(4, 22))),
        (
            2.5,
            PairNoise {
                z: states(4, 22),
                z0: Some(states(4, 23)),
            },
        ),
    ] {
        let (_, g) = loss_at(&mu, &mu0, &noise, eta, &w);
        if eta == 0.0 {
            // The loss averages over rows, so each row sees -w / n.
            for row in g.chunks(2) {
                assert!((row[0] + w[0] / 4.0).abs() < 1e-15 && (row[1] + w[1] / 4.0).abs() < 1e-15);
            }
        }
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut up = mu.clone();
                let mut dn = mu.clone();
                up[i][j] += h;
                dn[i][j] -= h;
                let fd = (loss_at(&up, &mu0, &noise, eta, &w).0
                    - loss_at(&dn, &mu0, &noise, eta, &w).0)
                    / (2.0 * h);
                assert!(
                    (fd - g[i * 2 + j]).abs() < 1e-7,
                    "eta {eta} ({i},{j}): {fd} vs {}",
                    g[i * 2 + j]
                );
            }
        }
    }
}

#[test]
fn reference_and_value_are_untouched_by_finetuning() {
    let pair0 = PolicyPair::new(denoiser(1), sched());
    let reference = pair0.theta0().clone();
    let mut pair = pair0;
    let mut vnet = ValueNet::new(
        ValueArch {
            data_dim: 2,
            steps: 10,
            hidden: vec![16],
            ..ValueArch::default()
        },
        &mut seeded(2),
    )
    .unwrap();
    let value_before = vnet.store().clone();
    let cfg = VardConfig {
        eta: 0.5,
        refresh: RefreshConfig {
            every: 0,
            ..RefreshConfig::default()
        },
        train: quick_train(),
        ..VardConfig::default()
    };
    let reward = ModeDistance::new(vec![1.0, 1.0]);
    let rep = finetune(&mut pair, &mut vnet, &reward, &cfg, 3).unwrap();
    assert_eq!(pair.theta0(), &reference);
    assert_eq!(vnet.store(), &value_before);
    assert!(pair.param_drift().unwrap() > 0.0);
    assert_eq!(rep.rows.len(), 5);
    assert_eq!(rep.scored_rollouts, 32);
    assert_eq!(rep.rows[0].prior_drift, Some(0.0));
}

#[test]
fn refresh_changes_only_the_value() {
    let mut pair = PolicyPair::new(denoiser(1), sched());
    let reference = pair.theta0().clone();
    let mut vnet = ValueNet::new(
        ValueArch {
            data_dim: 2,
            steps: 10,
            hidden: vec![16],
            ..ValueArch::default()
        },
        &mut seeded(2),
    )
    .unwrap();
    let before = vnet.store().clone();
    let cfg = VardConfig {
        refresh: RefreshConfig {
            every: 2,
            steps: 3,
            batch_size: 16,
            lr: 1e-3,
        },
        train: quick_train(),
        ..VardConfig::default()
    };
    let rep = finetune(
        &mut pair,
        &mut vnet,
        &ModeDistance::new(vec![1.0, 1.0]),
        &cfg,
        3,
    )
    .unwrap();
    assert_eq!(rep.refresh_losses.len(), 6);
    assert_ne!(vnet.store(), &before);
    assert_eq!(pair.theta0(), &reference);
}

#[test]
fn final_step_baseline_matches_reward_valued_vard() {
    let reward = ModeDistance::new(vec![0.5, -1.0]);
    let train = quick_train();
    let mut a = PolicyPair::new(denoiser(1), sched());
    let base = baseline_final_step(&mut a, &reward, &train, 9).unwrap();
    let mut b = PolicyPair::new(denoiser(1), sched());
    let mut exact = RewardAsValue { reward: &reward };
    let cfg = VardConfig {
        eta: 0.0,
        finetune_window: vec![1],
        train,
        ..VardConfig::default()
    };
    let vard = finetune(&mut b, &mut exact, &reward, &cfg, 9).unwrap();
    let (pa, pb) = (a.theta.store().flatten(), b.theta.store().flatten());
    let gap = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(gap < 1e-12, "parameter gap {gap}");
    for (r, s) in base.rows.iter().zip(&vard.rows) {
        assert!((r.mean_reward - s.mean_reward).abs() < 1e-9);
    }
}

#[test]
fn last_one_is_the_final_step() {
    let reward = ModeDistance::new(vec![0.5, -1.0]);
    let mut a = PolicyPair::new(denoiser(1), sched());
    let mut b = PolicyPair::new(denoiser(1), sched());
    baseline_final_step(&mut a, &reward, &quick_train(), 4).unwrap();
    baseline_random_last_k(&mut b, &reward, 1, &quick_train(), 4).unwrap();
    assert_eq!(a.theta.store(), b.theta.store());
}

#[test]
fn random_cut_baseline_trains() {
    let reward = ModeDistance::new(vec![0.5, -1.0]);
    let mut pair = PolicyPair::new(denoiser(1), sched());
    let rep = baseline_random_last_k(&mut pair, &reward, 10, &quick_train(), 4).unwrap();
    assert_eq!(rep.method, "random_last_10");
    assert!(pair.param_drift().unwrap() > 0.0);
    assert!(baseline_random_last_k(&mut pair, &reward, 11, &quick_train(), 4).is_err());
}

#[test]
fn baselines_reject_non_differentiable_rewards() {
    let grid = GridOccupancy::new(8, [-3.0, 3.0, -3.0, 3.0], 8).unwrap();
    let mut pair = PolicyPair::new(denoiser(1), sched());
    let before = pair.theta.clone();
    assert!(matches!(
        baseline_final_step(&mut pair, &grid, &quick_train(), 1),
        Err(Error::NonDifferentiableReward(_))
    ));
    assert!(matches!(
        baseline_random_last_k(&mut pair, &grid, 10, &quick_train(), 1),
        Err(Error::NonDifferentiableReward(_))
    ));
    assert_eq!(pair.theta, before);
    // The value-guided objective only needs rewards as regression targets.
    let mut vnet = ValueNet::new(
        ValueArch {
            data_dim: 2,
            steps: 10,
            ..ValueArch::default()
        },
        &mut seeded(2),
    )
    .unwrap();
    let cfg = VardConfig {
        train: quick_train(),
        ..VardConfig::default()
    };
    finetune(&mut pair, &mut vnet, &grid, &cfg, 1).unwrap();
}

#[test]
fn eta_presets() {
    for (name, eta) in [
        ("aesthetic", 100.0),
        ("pickscore", 0.5),
        ("imagereward", 20.0),
        ("protein", 0.1),
        ("compressibility", 1.0),
    ] {
        assert_eq!(paper_preset(name).unwrap().eta, eta);
        assert_eq!(VardConfig::default().with_preset(name).unwrap().eta, eta);
    }
    assert!(VardConfig::default().with_preset("nope").is_err());
}

#[test]
fn config_validation() {
    let ok = VardConfig::default();
    assert!(ok.validate(10).is_ok());
    assert!(ok.validate(9).is_err());
    assert!(matches!(
        ok.validate(5),
        Err(Error::StepOutOfRange { t: 6, steps: 5 })
    ));
    let neg = VardConfig {
        eta: -1.0,
        ..VardConfig::default()
    };
    assert!(neg.validate(50).is_err());
    let empty = VardConfig {
        finetune_window: vec![],
        ..VardConfig::default()
    };
    assert!(empty.validate(50).is_err());
    let zero = VardConfig {
        finetune_window: vec![0, 1],
        ..VardConfig::default()
    };
    assert!(zero.validate(50).is_err());
}

#[test]
fn threshold_lookup_uses_evaluated_rows() {
    let mut pair = PolicyPair::new(denoiser(1), sched());
    let rep = baseline_final_step(
        &mut pair,
        &ModeDistance::new(vec![0.0, 0.0]),
        &quick_train(),
        2,
    )
    .unwrap();
    let evals: Vec<_> = rep.eval_rows().map(|r| r.step).collect();
    assert_eq!(evals, vec![0, 2, 4]);
    assert_eq!(rep.rollouts_to_reach(f64::NEG_INFINITY), Some(0));
    assert_eq!(rep.rollouts_to_reach(f64::INFINITY), None);
}
