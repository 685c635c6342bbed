use vard_core::ddpm::*;
use vard_core::mdp::{MdpState, Trajectory};
use vard_core::prm::*;
use vard_core::rewards::{ConstantReward, ModeDistance};
use vard_core::rng::seeded;

fn small_arch(dim: usize, steps: usize) -> ValueArch {
    ValueArch {
        data_dim: dim,
        steps,
        ..ValueArch::default()
    }
}

/// Zeroes the output layer so the net predicts exactly `target.shift`.
fn constant_net(value: f64) -> ValueNet {
    let mut v = ValueNet::new(small_arch(2, 5), &mut seeded(0)).unwrap();
    let n = v.store().len();
    for i in [n - 2, n - 1] {
        v.store_mut().tensors_mut()[i]
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
    }
    v.target = TargetScale {
        shift: value,
        scale: 1.0,
    };
    v
}

fn state(x: f64, t: usize) -> MdpState {
    MdpState {
        x: vec![x, -x],
        c: 0,
        t,
    }
}

#[test]
fn loss_of_exact_predictor_is_zero() {
    let v = constant_net(3.0);
    let batch: Vec<_> = (0..6).map(|i| (state(i as f64, i % 5), 3.0)).collect();
    assert_eq!(value_loss(&v, &batch).unwrap(), 0.0);
}

#[test]
fn constant_predictor_loss_is_quadratic() {
    for m in [0.0, 0.25, 0.5, 0.9] {
        let v = constant_net(m);
        let batch = vec![(state(0.1, 0), 0.0), (state(0.2, 1), 1.0)];
        let want = m * m / 2.0 + (1.0 - m) * (1.0 - m) / 2.0;
        assert!((value_loss(&v, &batch).unwrap() - want).abs() < 1e-15);
    }
}

#[test]
fn shared_state_value_is_mean_of_rewards() {
    // Three paths meet in state 1 at the middle step and end in different
    // states, as in the three-branch picture of the method.
    let mdp = TabularMdp {
        steps: 2,
        n_states: 4,
        init: vec![0.25; 4],
        kernels: vec![
            vec![vec![0.0, 1.0, 0.0, 0.0]; 4],
            vec![vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]; 4],
        ],
        reward: vec![2.0, 0.0, -1.0, 5.0],
    };
    let data = vec![
        (vec![0, 1, 0], 1.0),
        (vec![0, 1, 2], 1.0),
        (vec![0, 1, 3], 1.0),
    ];
    let table = tabular_least_squares(&mdp, &data).unwrap();
    assert!((table[1][1].unwrap() - 2.0).abs() < 1e-12);
}

/// Exact `E[r(x_0) | x_{T-k} = s]` by backward recursion over the kernels.
fn backward_values(mdp: &TabularMdp) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; mdp.n_states]; mdp.steps + 1];
    v[mdp.steps] = mdp.reward.clone();
    for k in (0..mdp.steps).rev() {
        for s in 0..mdp.n_states {
            v[k][s] = (0..mdp.n_states)
                .map(|j| mdp.kernels[k][s][j] * v[k + 1][j])
                .sum();
        }
    }
    v
}

#[test]
fn tabular_least_squares_equals_conditional_expectation() {
    let mdp = TabularMdp::discretized_diffusion(5, 3);
    mdp.validate().unwrap();
    let paths = mdp.paths();
    let total: f64 = paths.iter().map(|p| p.1).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let ls = tabular_least_squares(&mdp, &paths).unwrap();
    let exact = backward_values(&mdp);
    for k in 0..=mdp.steps {
        for s in 0..mdp.n_states {
            if let Some(v) = ls[k][s] {
                assert!(
                    (v - exact[k][s]).abs() < 1e-6,
                    "k={k} s={s}: {v} vs {}",
                    exact[k][s]
                );
            }
        }
    }
}

#[test]
fn residual_variance_shrinks_with_progress() {
    let mdp = TabularMdp::discretized_diffusion(5, 3);
    let exact = backward_values(&mdp);
    let paths = mdp.paths();
    let var_at = |k: usize| -> f64 {
        paths
            .iter()
            .map(|(p, w)| w * (mdp.reward[p[mdp.steps]] - exact[k][p[k]]).powi(2))
            .sum()
    };
    for k in 0..mdp.steps {
        assert!(var_at(k + 1) <= var_at(k) + 1e-12);
    }
    assert_eq!(var_at(mdp.steps), 0.0);
}

#[test]
fn constant_reward_gives_constant_value() {
    let sched = make_schedule(50, ScheduleKind::Linear, 0.001, 0.2).unwrap();
    let model = Denoiser::new(DenoiserArch::default(), &mut seeded(1)).unwrap();
    let reward = ConstantReward(7.0);
    let mut source = DiffusionSource::new(&model, &sched, &reward, 5);
    let mut v = ValueNet::new(small_arch(2, 50), &mut seeded(2)).unwrap();
    let cfg = ValueTrainConfig {
        lr: 1e-3,
        steps: 1000,
        normalize_targets: true,
        initial_rollouts: 64,
        rollouts_per_step: 1,
        batch_size: 128,
        ..ValueTrainConfig::default()
    };
    let report = pretrain_value(&mut v, &mut source, &cfg, &mut seeded(3)).unwrap();
    assert!(!report.holdout.is_empty());
    let mut worst: f64 = 0.0;
    for traj in &report.holdout {
        let xs: Vec<Vec<f64>> = traj.states.iter().map(|s| s.x.clone()).collect();
        let ts: Vec<usize> = traj.states.iter().map(|s| s.diffusion_index(50)).collect();
        let pred = v.predict(&xs, &ts, &vec![0; xs.len()]).unwrap();
        worst = pred.iter().fold(worst, |w, p| w.max((p - 7.0).abs()));
    }
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn two_branch_value_is_one_half() {
    let mut source = TwoBranchSource::new(10, 5, 8);
    let mut v = ValueNet::new(small_arch(1, 10), &mut seeded(2)).unwrap();
    let cfg = ValueTrainConfig {
        steps: 1500,
        ..ValueTrainConfig::default()
    };
    pretrain_value(&mut v, &mut source, &cfg, &mut seeded(3)).unwrap();
    for t in 5..=10 {
        let p = v.predict(&[vec![0.0]], &[t], &[0]).unwrap()[0];
        assert!((p - 0.5).abs() < 0.03, "t={t}: {p}");
    }
    let hi = v.predict(&[vec![1.0]], &[2], &[0]).unwrap()[0];
    let lo = v.predict(&[vec![-1.0]], &[2], &[0]).unwrap()[0];
    assert!(hi > 0.9 && lo < 0.1, "{hi} {lo}");
}

#[test]
fn value_input_gradient_matches_finite_differences() {
    let v = ValueNet::new(small_arch(2, 50), &mut seeded(4)).unwrap();
    let x = vec![vec![0.3, -0.8], vec![1.2, 0.1]];
    let ts = [0, 37];
    let cs = [0, 0];
    let g = v.grad_x(&x, &ts, &cs).unwrap();
    let h = 1e-5;
    for i in 0..2 {
        for j in 0..2 {
            let mut p = x.clone();
            p[i][j] += h;
            let mut m = x.clone();
            m[i][j] -= h;
            let fd = (v.predict(&p, &ts, &cs).unwrap()[i] - v.predict(&m, &ts, &cs).unwrap()[i])
                / (2.0 * h);
            let rel = (fd - g[i][j]).abs() / fd.abs().max(g[i][j].abs()).max(1e-6);
            assert!(rel < 1e-4, "{fd} vs {}", g[i][j]);
        }
    }
}

#[test]
fn value_accepts_every_index_and_rejects_beyond() {
    let v = ValueNet::new(small_arch(2, 50), &mut seeded(4)).unwrap();
    let xs = vec![vec![0.0, 0.0]; 51];
    let ts: Vec<usize> = (0..=50).collect();
    let out = v.predict(&xs, &ts, &[0; 51]).unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!(v.predict(&[vec![0.0, 0.0]], &[51], &[0]).is_err());
}

fn scored(reward: f64, steps: usize, seed: u64) -> Trajectory {
    let chain = (0..=steps)
        .map(|k| vec![(k as f64 + seed as f64) * 0.01, 0.0])
        .collect();
    let mut t = Trajectory::from_chain(chain, 0);
    t.terminal_reward = Some(reward);
    t
}

#[test]
fn refresh_with_zero_steps_is_a_no_op() {
    let mut v = ValueNet::new(small_arch(2, 5), &mut seeded(4)).unwrap();
    let before = v.clone();
    let cfg = RefreshConfig {
        steps: 0,
        ..RefreshConfig::default()
    };
    refresh_value(&mut v, &[scored(1.0, 5, 0)], &cfg, &mut seeded(0)).unwrap();
    assert_eq!(v, before);
}

#[test]
fn refresh_moves_toward_new_rewards() {
    let mut v = constant_net(0.0);
    let trajs: Vec<_> = (0..16).map(|i| scored(1.0, 5, i)).collect();
    let cfg = RefreshConfig {
        steps: 300,
        lr: 1e-2,
        ..RefreshConfig::default()
    };
    refresh_value(&mut v, &trajs, &cfg, &mut seeded(1)).unwrap();
    let p = v
        .predict(&[trajs[3].states[2].x.clone()], &[3], &[0])
        .unwrap()[0];
    assert!((p - 1.0).abs() < 0.05, "{p}");
}

#[test]
fn refresh_rate_is_below_pretraining_rate() {
    assert!(RefreshConfig::default().lr < ValueTrainConfig::default().lr);
}

#[test]
fn convergence_test_uses_window_slope() {
    let flat = vec![1.0; 400];
    assert!(has_converged(&flat, 200, 1e-4));
    let falling: Vec<f64> = (0..400).map(|i| 10.0 - i as f64 * 0.01).collect();
    assert!(!has_converged(&falling, 200, 1e-4));
    assert!(!has_converged(&flat[..399], 200, 1e-4));
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|i, j| v[*i].total_cmp(&v[*j]));
        let mut r = vec![0.0; v.len()];
        for (k, i) in idx.into_iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn learned_value_tracks_reward_on_clean_samples() {
    let sched = make_schedule(50, ScheduleKind::Linear, 0.001, 0.2).unwrap();
    let data = DataConfig::three_modes();
    let mut model = Denoiser::new(DenoiserArch::default(), &mut seeded(1)).unwrap();
    pretrain(
        &mut model,
        &data,
        &sched,
        &PretrainConfig::default(),
        &mut seeded(2),
    )
    .unwrap();
    let reward = ModeDistance::new(vec![0.0, 2.0]);
    let mut source = DiffusionSource::new(&model, &sched, &reward, 11);
    let mut v = ValueNet::new(small_arch(2, 50), &mut seeded(3)).unwrap();
    let cfg = ValueTrainConfig {
        steps: 1500,
        ..ValueTrainConfig::default()
    };
    let report = pretrain_value(&mut v, &mut source, &cfg, &mut seeded(4)).unwrap();
    assert!(report
        .rows
        .iter()
        .all(|r| r.train_loss.is_finite() && r.holdout_loss.is_finite()));

    let rewards: Vec<f64> = report
        .holdout
        .iter()
        .map(|t| t.terminal_reward.unwrap())
        .collect();
    let range = rewards.iter().cloned().fold(f64::MIN, f64::max)
        - rewards.iter().cloned().fold(f64::MAX, f64::min);
    let x0: Vec<Vec<f64>> = report
        .holdout
        .iter()
        .map(|t| t.terminal().to_vec())
        .collect();
    let v0 = v
        .predict(&x0, &vec![0; x0.len()], &vec![0; x0.len()])
        .unwrap();
    let mut err: Vec<f64> = v0
        .iter()
        .zip(&rewards)
        .map(|(v, r)| (v - r).abs())
        .collect();
    err.sort_by(f64::total_cmp);
    let median = err[err.len() / 2];
    assert!(median < 0.1 * range, "median {median}, range {range}");

    // Later states predict the terminal reward better.
    let mut progress = Vec::new();
    let mut resid_var = Vec::new();
    for k in 0..=50 {
        let xs: Vec<Vec<f64>> = report
            .holdout
            .iter()
            .map(|t| t.states[k].x.clone())
            .collect();
        let pred = v
            .predict(&xs, &vec![50 - k; xs.len()], &vec![0; xs.len()])
            .unwrap();
        let var = pred
            .iter()
            .zip(&rewards)
            .map(|(p, r)| (r - p).powi(2))
            .sum::<f64>()
            / xs.len() as f64;
        progress.push(k as f64);
        resid_var.push(var);
    }
    assert!(spearman(&progress, &resid_var) < 0.0);
}
