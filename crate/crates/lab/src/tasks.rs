use std::f64::consts::FRAC_PI_2;

use serde_json::{json, Value};
use vard_core::ddpm::{pretrain, sample_batch, sample_terminals, Denoiser, RolloutNoise};
use vard_core::metrics::{random_projections, sliced_wasserstein_with};
use vard_core::prm::{pretrain_value, rollout_context, DiffusionSource, ValueNet};
use vard_core::rewards::Reward;
use vard_core::rng::{derive_seed, stream, tag};
use vard_core::so3::{
    fraction_within, geodesic, geodesic_velocity_fd, integrate_flow, norm, sample_uniform_so3,
    target_vector_field, train_cfm, FieldConvention, Rot3, So3Target, VectorFieldNet,
};
use vard_core::vard::{
    baseline_random_last_k, check_lemma1, finetune, FinetuneReport, FinetuneRow, MeanFamily,
    PolicyPair,
};

use crate::checkpoint;
use crate::config::{RunConfig, Task};
use crate::output::RunDir;
use crate::LabError;

/// Final metrics of a run, written to `summary.json`.
pub type Summary = Value;

/// Stream tags local to the harness.
mod lab_tag {
    pub const INIT: u64 = 101;
    pub const TRAIN: u64 = 102;
    pub const DATA: u64 = 103;
    pub const SOURCE: u64 = 104;
    pub const DUMP: u64 = 105;
}

const DUMPED_TRAJECTORIES: usize = 64;

pub fn execute(
    task: Task,
    cfg: &RunConfig,
    seed: u64,
    dir: &RunDir,
    dump: bool,
) -> Result<Summary, LabError> {
    let mut summary = match task {
        Task::DdpmPretrain => ddpm_pretrain(cfg, seed, dir)?,
        Task::ValuePretrain => value_pretrain(cfg, seed, dir)?,
        Task::VardFinetune => vard_finetune(cfg, seed, dir, dump)?,
        Task::BaselineFinetune => baseline_finetune(cfg, seed, dir, dump)?,
        Task::So3Train => so3_train(cfg, seed, dir)?,
        Task::VerifyLemma1 => verify_lemma1(cfg, seed, dir)?,
        Task::Eval => eval(cfg, seed, dir, dump)?,
    };
    summary["task"] = json!(task.name());
    summary["seed"] = json!(seed);
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn contexts(master: u64, n: usize, k: usize) -> Vec<usize> {
    (0..n as u64)
        .map(|i| rollout_context(master, i, k))
        .collect()
}

fn load_model(cfg: &RunConfig) -> Result<Denoiser, LabError> {
    let path = cfg
        .checkpoints
        .model
        .as_ref()
        .expect("checked by check_task");
    checkpoint::load_denoiser(path, &cfg.schedule)
}

fn reward(cfg: &RunConfig) -> Result<Box<dyn Reward>, LabError> {
    Ok(cfg
        .reward
        .as_ref()
        .expect("checked by check_task")
        .build()?)
}

fn ddpm_pretrain(cfg: &RunConfig, seed: u64, dir: &RunDir) -> Result<Summary, LabError> {
    let sched = cfg.schedule.build()?;
    let mut model = Denoiser::new(cfg.denoiser_arch(), &mut stream(seed, lab_tag::INIT, 0))?;
    let losses = pretrain(
        &mut model,
        &cfg.dataset,
        &sched,
        &cfg.pretrain,
        &mut stream(seed, lab_tag::TRAIN, 0),
    )?;
    let mut m = dir.metrics(&["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        m.row(&[Some((i + 1) as f64), Some(*l)])?;
    }
    m.finish()?;
    checkpoint::save_denoiser(&dir.path("model.json"), &model, &cfg.schedule)?;

    let n = cfg.eval.samples;
    let master = derive_seed(seed, tag::EVAL, 0);
    let cs = contexts(master, n, cfg.dataset.num_contexts());
    let generated = sample_terminals(&model, &cs, &sched, master)?;
    let (data, _) = cfg.dataset.sample(n, &mut stream(seed, lab_tag::DATA, 0));
    let proj = random_projections(
        cfg.dataset.dim,
        cfg.eval.projections,
        &mut stream(seed, tag::PROJECTION, 0),
    );
    let sw = sliced_wasserstein_with(&generated, &data, &proj)?;
    let tail = losses.len().min(100);
    Ok(json!({
        "final_loss": losses[losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64,
        "sliced_wasserstein_to_data": sw,
        "samples": n,
        "alpha_bar_T": sched.alpha_bar(sched.steps()),
    }))
}

fn value_pretrain(cfg: &RunConfig, seed: u64, dir: &RunDir) -> Result<Summary, LabError> {
    let sched = cfg.schedule.build()?;
    let model = load_model(cfg)?;
    let reward = reward(cfg)?;
    let mut vnet = ValueNet::new(cfg.value_arch(), &mut stream(seed, lab_tag::INIT, 1))?;
    let mut source = DiffusionSource::new(
        &model,
        &sched,
        reward.as_ref(),
        derive_seed(seed, lab_tag::SOURCE, 0),
    );
    let rep = pretrain_value(
        &mut vnet,
        &mut source,
        &cfg.value_train,
        &mut stream(seed, lab_tag::TRAIN, 1),
    )?;
    let mut m = dir.metrics(&["step", "train_loss", "holdout_loss"])?;
    for r in &rep.rows {
        m.row(&[
            Some(r.step as f64),
            Some(r.train_loss),
            Some(r.holdout_loss),
        ])?;
    }
    m.finish()?;
    checkpoint::save_value(&dir.path("value.json"), &vnet)?;
    let last = rep.rows.last();
    Ok(json!({
        "reward": reward.name(),
        "converged_at": rep.converged_at,
        "steps_run": rep.steps_run,
        "rollouts": rep.rollouts,
        "final_train_loss": last.map(|r| r.train_loss),
        "final_holdout_loss": last.map(|r| r.holdout_loss),
    }))
}

fn write_finetune_metrics(dir: &RunDir, rep: &FinetuneReport) -> Result<(), LabError> {
    let mut m = dir.metrics(&FinetuneRow::COLUMNS)?;
    for r in &rep.rows {
        m.row(&[
            Some(r.step as f64),
            Some(r.scored_rollouts as f64),
            Some(r.mean_reward),
            r.mean_value,
            r.kl_surrogate,
            Some(r.param_drift),
            r.prior_drift,
            r.eval_reward,
        ])?;
    }
    m.finish()
}

fn finetune_summary(rep: &FinetuneReport) -> Summary {
    let first = rep.eval_rows().next();
    let last = rep.final_eval();
    json!({
        "method": rep.method,
        "scored_rollouts": rep.scored_rollouts,
        "initial_eval_reward": first.and_then(|r| r.eval_reward),
        "final_eval_reward": last.and_then(|r| r.eval_reward),
        "final_prior_drift": last.and_then(|r| r.prior_drift),
        "final_param_drift": rep.rows.last().map(|r| r.param_drift),
    })
}

#[derive(serde::Serialize)]
struct DumpedTrajectory<'a> {
    index: usize,
    context: usize,
    /// `x_T, ..., x_0`.
    states: Vec<&'a [f64]>,
    terminal_reward: f64,
}

fn dump_trajectories(
    dir: &RunDir,
    model: &Denoiser,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(), LabError> {
    let sched = cfg.schedule.build()?;
    let master = derive_seed(seed, lab_tag::DUMP, 0);
    let cs = contexts(master, DUMPED_TRAJECTORIES, cfg.dataset.num_contexts());
    let noise: Vec<RolloutNoise> = (0..DUMPED_TRAJECTORIES as u64)
        .map(|i| RolloutNoise::for_element(master, i, cfg.dataset.dim, sched.steps()))
        .collect();
    let trajs = sample_batch(model, &cs, &sched, &noise, false)?;
    let reward = reward(cfg)?;
    let terminals: Vec<Vec<f64>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
    let scores = reward.score_batch(&terminals, &cs)?;
    dir.write_jsonl(
        "trajectories.jsonl",
        trajs
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (t, r))| DumpedTrajectory {
                index: i,
                context: t.context(),
                states: t.states.iter().map(|s| s.x.as_slice()).collect(),
                terminal_reward: r,
            }),
    )
}

fn vard_finetune(
    cfg: &RunConfig,
    seed: u64,
    dir: &RunDir,
    dump: bool,
) -> Result<Summary, LabError> {
    let sched = cfg.schedule.build()?;
    let reward = reward(cfg)?;
    let value_path = cfg
        .checkpoints
        .value
        .as_ref()
        .expect("checked by check_task");
    let mut vnet = checkpoint::load_value(value_path)?;
    if vnet.arch().steps != sched.steps() {
        return Err(LabError::Config(
            "value checkpoint was trained for a different step count".into(),
        ));
    }
    let mut pair = PolicyPair::new(load_model(cfg)?, sched);
    let vcfg = cfg.vard_config();
    let rep = finetune(&mut pair, &mut vnet, reward.as_ref(), &vcfg, seed)?;
    write_finetune_metrics(dir, &rep)?;
    checkpoint::save_denoiser(&dir.path("model.json"), &pair.theta, &cfg.schedule)?;
    checkpoint::save_value(&dir.path("value.json"), &vnet)?;
    if dump {
        dump_trajectories(dir, &pair.theta, cfg, seed)?;
    }
    let mut s = finetune_summary(&rep);
    s["eta"] = json!(vcfg.eta);
    s["reward"] = json!(reward.name());
    Ok(s)
}

fn baseline_finetune(
    cfg: &RunConfig,
    seed: u64,
    dir: &RunDir,
    dump: bool,
) -> Result<Summary, LabError> {
    let sched = cfg.schedule.build()?;
    let reward = reward(cfg)?;
    let mut pair = PolicyPair::new(load_model(cfg)?, sched);
    let rep = baseline_random_last_k(&mut pair, reward.as_ref(), cfg.baseline.k, &cfg.train, seed)?;
    write_finetune_metrics(dir, &rep)?;
    checkpoint::save_denoiser(&dir.path("model.json"), &pair.theta, &cfg.schedule)?;
    if dump {
        dump_trajectories(dir, &pair.theta, cfg, seed)?;
    }
    let mut s = finetune_summary(&rep);
    s["k"] = json!(cfg.baseline.k);
    s["reward"] = json!(reward.name());
    Ok(s)
}

fn eval(cfg: &RunConfig, seed: u64, dir: &RunDir, dump: bool) -> Result<Summary, LabError> {
    let sched = cfg.schedule.build()?;
    let model = load_model(cfg)?;
    let reward = reward(cfg)?;
    let n = cfg.eval.samples;
    let master = derive_seed(seed, tag::EVAL, 0);
    let cs = contexts(master, n, cfg.dataset.num_contexts());
    let xs = sample_terminals(&model, &cs, &sched, master)?;
    let scores = reward.score_batch(&xs, &cs)?;
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    let (others, against) = match &cfg.checkpoints.reference {
        Some(p) => {
            let reference = checkpoint::load_denoiser(p, &cfg.schedule)?;
            (
                sample_terminals(&reference, &cs, &sched, master)?,
                "reference",
            )
        }
        None => (
            cfg.dataset.sample(n, &mut stream(seed, lab_tag::DATA, 0)).0,
            "data",
        ),
    };
    let proj = random_projections(
        cfg.dataset.dim,
        cfg.eval.projections,
        &mut stream(seed, tag::PROJECTION, 0),
    );
    let drift = sliced_wasserstein_with(&xs, &others, &proj)?;
    let mut m = dir.metrics(&["step", "mean_reward", "reward_std", "sliced_wasserstein"])?;
    m.row(&[Some(0.0), Some(mean), Some(var.sqrt()), Some(drift)])?;
    m.finish()?;
    if dump {
        dump_trajectories(dir, &model, cfg, seed)?;
    }
    Ok(json!({
        "reward": reward.name(),
        "samples": n,
        "mean_reward": mean,
        "reward_std": var.sqrt(),
        "sliced_wasserstein": drift,
        "drift_against": against,
    }))
}

/// Both field conventions against the finite-difference velocity of the
/// interpolant from `I` to `rot_z(pi/2)` at `t = 0.25`.
fn convention_report() -> Result<Value, LabError> {
    let (r0, r1, t) = (Rot3::identity(), Rot3::rot_z(FRAC_PI_2), 0.25);
    let rt = geodesic(&r0, &r1, t)?;
    let fd = geodesic_velocity_fd(&r0, &r1, t, 1e-6)?;
    let err = |conv| -> Result<f64, LabError> {
        let u = target_vector_field(&rt, &r1, t, conv)?;
        Ok(norm([u[0] - fd[0], u[1] - fd[1], u[2] - fd[2]]))
    };
    Ok(json!({
        "t": t,
        "finite_difference_speed": norm(fd),
        "derivative_convention_error": err(FieldConvention::Derivative)?,
        "paper_convention_error": err(FieldConvention::Paper)?,
    }))
}

#[derive(serde::Serialize)]
struct RotationSample {
    rotation: [f64; 9],
}

fn so3_train(cfg: &RunConfig, seed: u64, dir: &RunDir) -> Result<Summary, LabError> {
    let target = cfg.so3_target()?;
    let mut net = VectorFieldNet::new(cfg.so3.arch.clone(), &mut stream(seed, lab_tag::INIT, 2))?;
    let mut rng = stream(seed, lab_tag::TRAIN, 2);
    let losses = train_cfm(
        &mut net,
        &So3Target::PointMass(target),
        &cfg.so3.train,
        &mut rng,
    )?;
    let mut m = dir.metrics(&["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        m.row(&[Some((i + 1) as f64), Some(*l)])?;
    }
    m.finish()?;
    checkpoint::save_vector_field(&dir.path("field.json"), &net)?;
    let mut rng = stream(seed, lab_tag::DATA, 2);
    let r0: Vec<Rot3> = (0..cfg.so3.samples)
        .map(|_| sample_uniform_so3(&mut rng))
        .collect();
    let r1 = integrate_flow(&net, &r0, cfg.so3.integration_steps)?;
    dir.write_jsonl(
        "samples.jsonl",
        r1.iter().map(|r| RotationSample {
            rotation: r.row_major(),
        }),
    )?;
    let tail = losses.len().min(100);
    Ok(json!({
        "convention": cfg.so3.train.convention,
        "final_loss": losses[losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64,
        "samples": r1.len(),
        "radius": cfg.so3.radius,
        "fraction_within_radius": fraction_within(&r1, &target, cfg.so3.radius),
        "max_orthonormality_error": r1.iter().map(|r| r.orthonormality_error()).fold(0.0, f64::max),
        "convention_check": convention_report()?,
    }))
}

fn verify_lemma1(cfg: &RunConfig, seed: u64, dir: &RunDir) -> Result<Summary, LabError> {
    let l = &cfg.lemma;
    let mut rng = stream(seed, lab_tag::TRAIN, 3);
    let mut m = dir.metrics(&[
        "family",
        "dim",
        "sigma",
        "mc_gradient",
        "kl_gradient",
        "ratio",
        "expected_ratio",
        "relative_error",
    ])?;
    let mut worst: f64 = 0.0;
    for i in 0..l.families {
        let fam = MeanFamily::random(1 + i % 4, l.psi, &mut rng);
        let rep = check_lemma1(&fam, l.psi, l.samples, false, &mut rng)?;
        worst = worst.max(rep.relative_error());
        m.row(&[
            Some(i as f64),
            Some(fam.dim() as f64),
            Some(rep.sigma),
            Some(rep.mc_gradient),
            Some(rep.kl_gradient),
            Some(rep.ratio),
            Some(rep.expected_ratio),
            Some(rep.relative_error()),
        ])?;
    }
    m.finish()?;
    Ok(json!({
        "families": l.families,
        "samples": l.samples,
        "max_relative_error": worst,
        "tolerance": l.tolerance,
        "pass": worst < l.tolerance,
    }))
}
