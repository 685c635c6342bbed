use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::autodiff::{
    embedding_rows, Activation, Adam, AdamConfig, AdamState, Bound, Mlp, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::error::{contract, Error, Result};
use crate::mdp::{minibatch, MdpState, ReplayBuffer, Trajectory};
use crate::rewards::Reward;
use crate::rng::LabRng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ValueArch {
    pub data_dim: usize,
    pub num_contexts: usize,
    /// Diffusion length `T`; the net accepts every index in `0..=T`.
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub context_dim: usize,
    pub activation: Activation,
}

impl Default for ValueArch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            num_contexts: 1,
            steps: 50,
            hidden: vec![64, 64],
            time_dim: 16,
            context_dim: 8,
            activation: Activation::Silu,
        }
    }
}

/// Affine map from the net's output to reward units.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScale {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            libm::sqrt(self.m2 / self.n as f64)
        }
    }

    pub fn as_scale(&self) -> TargetScale {
        let std = self.std();
        TargetScale {
            shift: self.mean,
            scale: if std > 1e-8 { std } else { 1.0 },
        }
    }
}

/// `V_phi(x, t, c)`, expected terminal reward given the state at diffusion
/// index `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    arch: ValueArch,
    store: ParamStore,
    net: Mlp,
    context_table: ParamId,
    pub target: TargetScale,
    refresh_state: AdamState,
}

/// Schedule of the online refits performed during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RefreshConfig {
    /// Policy updates between refreshes; 0 disables refreshing.
    pub every: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        Self {
            every: 10,
            steps: 5,
            batch_size: 256,
            lr: 1e-4,
        }
    }
}

/// Anything usable as the value model inside the fine-tuning objective.
pub trait ValueFunction {
    /// Values of the rows of `x` (at diffusion indices `ts`) as a `[n, 1]`
    /// node, differentiable with respect to `x`.
    fn value_on_tape(&self, tape: &mut Tape, x: Var, ts: &[usize], cs: &[usize]) -> Result<Var>;

    fn predict(&self, x: &[Vec<f64>], ts: &[usize], cs: &[usize]) -> Result<Vec<f64>>;

    /// Refits on trajectories from the current policy. Models without
    /// parameters ignore it.
    fn refresh(
        &mut self,
        _trajs: &[Trajectory],
        _cfg: &RefreshConfig,
        _rng: &mut LabRng,
    ) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

impl ValueNet {
    pub fn new(arch: ValueArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.data_dim == 0 || arch.num_contexts == 0 || arch.context_dim == 0 || arch.steps == 0
        {
            return Err(contract(
                "value net needs positive data, context, embedding and step sizes",
            ));
        }
        embedding_rows(core::iter::once(0.0), arch.time_dim)?;
        let mut store = ParamStore::new();
        let table = (0..arch.num_contexts * arch.context_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let context_table = store.add(
            "context_table",
            Tensor::matrix(arch.num_contexts, arch.context_dim, table)?,
        );
        let mut dims = vec![arch.data_dim + arch.time_dim + arch.context_dim];
        dims.extend(&arch.hidden);
        dims.push(1);
        let net = Mlp::new(&mut store, "value", &dims, arch.activation, rng)?;
        Ok(Self {
            arch,
            store,
            net,
            context_table,
            target: TargetScale::default(),
            refresh_state: AdamState::default(),
        })
    }

    pub fn arch(&self) -> &ValueArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, n: usize, ts: &[usize], cs: &[usize]) -> Result<()> {
        if ts.len() != n || cs.len() != n {
            return Err(contract("one step and one context per row required"));
        }
        if let Some(t) = ts.iter().find(|t| **t > self.arch.steps) {
            return Err(Error::StepOutOfRange {
                t: *t,
                steps: self.arch.steps,
            });
        }
        if let Some(c) = cs.iter().find(|c| **c >= self.arch.num_contexts) {
            return Err(contract(alloc::format!("context {c} out of range")));
        }
        Ok(())
    }

    /// Recorded forward pass in reward units.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        ts: &[usize],
        cs: &[usize],
    ) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if d != self.arch.data_dim {
            return Err(Error::Dimension {
                context: "value input",
                expected: self.arch.data_dim,
                got: d,
            });
        }
        self.check(n, ts, cs)?;
        let temb = tape.constant(&embedding_rows(
            ts.iter().map(|t| *t as f64),
            self.arch.time_dim,
        )?)?;
        let cemb = tape.gather_rows(params.var(self.context_table), cs)?;
        let input = tape.concat_cols(&[x, temb, cemb])?;
        let raw = self.net.forward(tape, params, input)?;
        let scaled = tape.scale(raw, self.target.scale)?;
        tape.add_scalar(scaled, self.target.shift)
    }

    /// Gradient of `sum_i V(x_i)` with respect to each `x_i`.
    pub fn grad_x(&self, x: &[Vec<f64>], ts: &[usize], cs: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let xv = tape.variable(&Tensor::from_rows(x)?)?;
        let v = self.value_on_tape(&mut tape, xv, ts, cs)?;
        let s = tape.sum(v)?;
        let g = tape.backward(s)?.wrt(&tape, xv);
        Ok(g.chunks(self.arch.data_dim).map(<[f64]>::to_vec).collect())
    }
}

impl ValueFunction for ValueNet {
    fn value_on_tape(&self, tape: &mut Tape, x: Var, ts: &[usize], cs: &[usize]) -> Result<Var> {
        let params = self.store.bind(tape, false)?;
        self.forward(tape, &params, x, ts, cs)
    }

    fn predict(&self, x: &[Vec<f64>], ts: &[usize], cs: &[usize]) -> Result<Vec<f64>> {
        self.check(x.len(), ts, cs)?;
        let temb = embedding_rows(ts.iter().map(|t| *t as f64), self.arch.time_dim)?;
        let table = self.store.get(self.context_table);
        let width = self.net.input_dim();
        let mut data = Vec::with_capacity(x.len() * width);
        for (i, row) in x.iter().enumerate() {
            if row.len() != self.arch.data_dim {
                return Err(Error::Dimension {
                    context: "value input",
                    expected: self.arch.data_dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
            data.extend_from_slice(temb.row_slice(i));
            data.extend_from_slice(table.row_slice(cs[i]));
        }
        let out = self
            .net
            .eval(&self.store, &Tensor::matrix(x.len(), width, data)?)?;
        Ok(out
            .data()
            .iter()
            .map(|v| v * self.target.scale + self.target.shift)
            .collect())
    }

    fn refresh(
        &mut self,
        trajs: &[Trajectory],
        cfg: &RefreshConfig,
        rng: &mut LabRng,
    ) -> Result<Vec<f64>> {
        if cfg.steps == 0 || trajs.is_empty() {
            return Ok(Vec::new());
        }
        let mut buffer = ReplayBuffer::new(trajs.len());
        buffer.extend(trajs.iter().cloned());
        let mut opt = Adam {
            config: AdamConfig::with_lr(cfg.lr),
            state: core::mem::take(&mut self.refresh_state),
        };
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let batch = minibatch(&buffer, cfg.batch_size, rng)?;
            losses.push(value_step(self, &batch, &mut opt)?);
        }
        self.refresh_state = opt.state;
        Ok(losses)
    }
}

fn split_batch(
    batch: &[(MdpState, f64)],
    steps: usize,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>, Vec<f64>) {
    let xs = batch.iter().map(|(s, _)| s.x.clone()).collect();
    let ts = batch
        .iter()
        .map(|(s, _)| s.diffusion_index(steps))
        .collect();
    let cs = batch.iter().map(|(s, _)| s.c).collect();
    let rs = batch.iter().map(|(_, r)| *r).collect();
    (xs, ts, cs, rs)
}

/// `mean (r - V(x_{T-t}, c))^2` over `(state, terminal reward)` pairs.
pub fn value_loss(vnet: &ValueNet, batch: &[(MdpState, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("value loss needs a non-empty batch"));
    }
    let (xs, ts, cs, rs) = split_batch(batch, vnet.arch.steps);
    let v = vnet.predict(&xs, &ts, &cs)?;
    if v.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("value prediction".into()));
    }
    Ok(v.iter()
        .zip(&rs)
        .map(|(v, r)| (r - v) * (r - v))
        .sum::<f64>()
        / batch.len() as f64)
}

/// One optimiser step on the value regression; returns the batch loss in
/// reward units.
pub fn value_step(vnet: &mut ValueNet, batch: &[(MdpState, f64)], opt: &mut Adam) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("value loss needs a non-empty batch"));
    }
    let (xs, ts, cs, rs) = split_batch(batch, vnet.arch.steps);
    let mut tape = Tape::new();
    let params = vnet.store.bind(&mut tape, true)?;
    let x = tape.constant(&Tensor::from_rows(&xs)?)?;
    let pred = vnet.forward(&mut tape, &params, x, &ts, &cs)?;
    let target = tape.constant(&Tensor::matrix(rs.len(), 1, rs)?)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean(sq)?;
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("value loss".into()));
    }
    // Optimise in normalised units so the step size does not depend on the
    // reward scale.
    let grads = tape.backward(loss)?;
    let mut g = params.collect(&tape, &grads);
    let k = 1.0 / (vnet.target.scale * vnet.target.scale);
    g.iter_mut().flatten().for_each(|v| *v *= k);
    opt.step(&mut vnet.store, &g)?;
    Ok(value)
}

/// Uses the reward itself as the value. Only meaningful at `t = 0`, where the
/// value of a state is its reward; any other `t` is scored the same way.
pub struct RewardAsValue<'a> {
    pub reward: &'a dyn Reward,
}

impl ValueFunction for RewardAsValue<'_> {
    fn value_on_tape(&self, tape: &mut Tape, x: Var, _ts: &[usize], cs: &[usize]) -> Result<Var> {
        self.reward.score_on_tape(tape, x, cs)
    }

    fn predict(&self, x: &[Vec<f64>], _ts: &[usize], cs: &[usize]) -> Result<Vec<f64>> {
        self.reward.score_batch(x, cs)
    }
}
