use alloc::{vec, vec::Vec};
use rand::Rng;

use super::geometry::{
    exp_map, geodesic, log_at, sample_uniform_so3, target_vector_field, FieldConvention, Rot3,
    Tangent, BRANCH_MARGIN,
};
use crate::autodiff::{
    embedding_rows, Activation, Adam, AdamConfig, Bound, Mlp, ParamStore, Tape, Tensor, Var,
};
use crate::error::{contract, Error, Result};
use crate::rng::{normal, LabRng};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct VectorFieldArch {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// `t in [0, 1]` is multiplied by this before the sinusoidal embedding.
    pub time_scale: f64,
    pub activation: Activation,
}

impl Default for VectorFieldArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_dim: 16,
            time_scale: 1000.0,
            activation: Activation::Silu,
        }
    }
}

/// Anything that maps `(t, R)` to a body-frame tangent vector.
pub trait TangentField {
    fn field(&self, rots: &[Rot3], t: f64) -> Result<Vec<Tangent>>;
}

/// `v_theta(t, R)`: an MLP over the nine matrix entries and an embedding of
/// `t`, returning tangent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    arch: VectorFieldArch,
    store: ParamStore,
    net: Mlp,
}

impl VectorFieldNet {
    pub fn new(arch: VectorFieldArch, rng: &mut impl Rng) -> Result<Self> {
        embedding_rows(core::iter::once(0.0), arch.time_dim)?;
        let mut store = ParamStore::new();
        let mut dims = vec![9 + arch.time_dim];
        dims.extend(&arch.hidden);
        dims.push(3);
        let net = Mlp::new(&mut store, "field", &dims, arch.activation, rng)?;
        Ok(Self { arch, store, net })
    }

    pub fn arch(&self) -> &VectorFieldArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn inputs(&self, rots: &[Rot3], ts: &[f64]) -> Result<Tensor> {
        if rots.len() != ts.len() {
            return Err(contract("one time per rotation required"));
        }
        let temb = embedding_rows(
            ts.iter().map(|t| t * self.arch.time_scale),
            self.arch.time_dim,
        )?;
        let width = 9 + self.arch.time_dim;
        let mut data = Vec::with_capacity(rots.len() * width);
        for (i, r) in rots.iter().enumerate() {
            data.extend_from_slice(&r.row_major());
            data.extend_from_slice(temb.row_slice(i));
        }
        Tensor::matrix(rots.len(), width, data)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        rots: &[Rot3],
        ts: &[f64],
    ) -> Result<Var> {
        let input = tape.constant(&self.inputs(rots, ts)?)?;
        self.net.forward(tape, params, input)
    }

    pub fn eval(&self, rots: &[Rot3], ts: &[f64]) -> Result<Vec<Tangent>> {
        let out = self.net.eval(&self.store, &self.inputs(rots, ts)?)?;
        let v: Vec<Tangent> = out.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        if v.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector field output".into()));
        }
        Ok(v)
    }
}

impl TangentField for VectorFieldNet {
    fn field(&self, rots: &[Rot3], t: f64) -> Result<Vec<Tangent>> {
        self.eval(rots, &vec![t; rots.len()])
    }
}

/// Exact marginal field toward a single rotation under the derivative
/// convention: `log(R^T R1) / (1 - t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassField {
    pub target: Rot3,
}

impl TangentField for PointMassField {
    fn field(&self, rots: &[Rot3], t: f64) -> Result<Vec<Tangent>> {
        rots.iter()
            .map(|r| target_vector_field(r, &self.target, t, FieldConvention::Derivative))
            .collect()
    }
}

/// Target distribution `rho_1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum So3Target {
    PointMass(Rot3),
    /// `center * exp(spread * z)` with `z` standard normal.
    Concentrated {
        center: Rot3,
        spread: f64,
    },
}

impl So3Target {
    pub fn sample(&self, rng: &mut impl Rng) -> Rot3 {
        match self {
            Self::PointMass(r) => *r,
            Self::Concentrated { center, spread } => {
                let z = [normal(rng), normal(rng), normal(rng)];
                center.mul(&exp_map([spread * z[0], spread * z[1], spread * z[2]]))
            }
        }
    }
}

/// Independent coupling of `rho_0 = Haar` and `rho_1`, with times in
/// `[eps_t, 1 - eps_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmBatch {
    pub r0: Vec<Rot3>,
    pub r1: Vec<Rot3>,
    pub t: Vec<f64>,
}

impl CfmBatch {
    /// Pairs whose relative rotation is within the logarithm's branch margin
    /// are redrawn.
    pub fn draw(n: usize, target: &So3Target, eps_t: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..0.5).contains(&eps_t) {
            return Err(contract("eps_t must lie in [0, 0.5)"));
        }
        let mut b = Self {
            r0: Vec::with_capacity(n),
            r1: Vec::with_capacity(n),
            t: Vec::with_capacity(n),
        };
        while b.r0.len() < n {
            let r0 = sample_uniform_so3(rng);
            let r1 = target.sample(rng);
            if r0.transpose().mul(&r1).angle() > core::f64::consts::PI - 10.0 * BRANCH_MARGIN {
                continue;
            }
            b.r0.push(r0);
            b.r1.push(r1);
            b.t.push(rng.random_range(eps_t..=1.0 - eps_t));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.r0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r0.is_empty()
    }

    /// Interpolants `R_t` and conditional targets `u_t`.
    pub fn targets(&self, convention: FieldConvention) -> Result<(Vec<Rot3>, Vec<Tangent>)> {
        let mut rt = Vec::with_capacity(self.len());
        let mut ut = Vec::with_capacity(self.len());
        for ((r0, r1), t) in self.r0.iter().zip(&self.r1).zip(&self.t) {
            let r = geodesic(r0, r1, *t)?;
            ut.push(target_vector_field(&r, r1, *t, convention)?);
            rt.push(r);
        }
        Ok((rt, ut))
    }
}

fn loss_on_tape(
    tape: &mut Tape,
    vnet: &VectorFieldNet,
    params: &Bound,
    batch: &CfmBatch,
    convention: FieldConvention,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(contract("flow-matching batch is empty"));
    }
    let (rt, ut) = batch.targets(convention)?;
    let v = vnet.forward(tape, params, &rt, &batch.t)?;
    let u = tape.constant(&Tensor::matrix(
        ut.len(),
        3,
        ut.into_iter().flatten().collect(),
    )?)?;
    let diff = tape.sub(v, u)?;
    let sq = tape.square(diff)?;
    let per_row = tape.row_sum(sq)?;
    tape.mean(per_row)
}

/// `mean ||v_theta(t, R_t) - u_t(R_t | R0, R1)||^2` in tangent coordinates.
pub fn cfm_loss(
    vnet: &VectorFieldNet,
    batch: &CfmBatch,
    convention: FieldConvention,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = vnet.store.bind(&mut tape, false)?;
    let loss = loss_on_tape(&mut tape, vnet, &params, batch, convention)?;
    tape.scalar(loss)
}

/// The same loss for fixed predictions, one per batch element.
pub fn cfm_loss_of(pred: &[Tangent], batch: &CfmBatch, convention: FieldConvention) -> Result<f64> {
    if batch.is_empty() || pred.len() != batch.len() {
        return Err(contract(
            "one prediction per non-empty batch element required",
        ));
    }
    let (_, ut) = batch.targets(convention)?;
    let total: f64 = pred
        .iter()
        .zip(&ut)
        .map(|(p, u)| (0..3).map(|i| (p[i] - u[i]) * (p[i] - u[i])).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CfmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached linearly.
    pub final_lr_fraction: f64,
    pub eps_t: f64,
    pub convention: FieldConvention,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            lr: 2e-3,
            final_lr_fraction: 0.05,
            eps_t: 1e-3,
            convention: FieldConvention::Derivative,
        }
    }
}

/// Regresses `vnet` on conditional targets; returns per-step losses.
pub fn train_cfm(
    vnet: &mut VectorFieldNet,
    target: &So3Target,
    cfg: &CfmConfig,
    rng: &mut LabRng,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.final_lr_fraction) {
        return Err(contract(
            "flow matching needs a positive batch, a positive rate and a final fraction in [0, 1]",
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
        opt.config.lr = cfg.lr * (1.0 - frac * (1.0 - cfg.final_lr_fraction));
        let batch = CfmBatch::draw(cfg.batch_size, target, cfg.eps_t, rng)?;
        let mut tape = Tape::new();
        let params = vnet.store.bind(&mut tape, true)?;
        let loss = loss_on_tape(&mut tape, vnet, &params, &batch, cfg.convention)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "non-finite flow-matching loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut vnet.store, &params.collect(&tape, &grads))?;
        losses.push(value);
    }
    Ok(losses)
}

/// Explicit manifold Euler from `t = 0` to `t = 1`:
/// `R <- orthonormalize(R exp(dt v(t, R)))`.
pub fn integrate_flow(field: &dyn TangentField, r0: &[Rot3], steps: usize) -> Result<Vec<Rot3>> {
    if steps == 0 {
        return Err(contract("integration needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut rs = r0.to_vec();
    for k in 0..steps {
        let v = field.field(&rs, k as f64 * dt)?;
        for (r, v) in rs.iter_mut().zip(v) {
            *r = r
                .mul(&exp_map([dt * v[0], dt * v[1], dt * v[2]]))
                .orthonormalize();
        }
    }
    Ok(rs)
}

/// Fraction of `rs` within geodesic distance `radius` of `target`.
pub fn fraction_within(rs: &[Rot3], target: &Rot3, radius: f64) -> f64 {
    if rs.is_empty() {
        return 0.0;
    }
    rs.iter()
        .filter(|r| super::geometry::geodesic_distance(r, target) <= radius)
        .count() as f64
        / rs.len() as f64
}

/// Body-frame velocity of the geodesic by central differences.
pub fn geodesic_velocity_fd(r0: &Rot3, r1: &Rot3, t: f64, h: f64) -> Result<Tangent> {
    let rt = geodesic(r0, r1, t)?;
    let up = log_at(&rt, &geodesic(r0, r1, (t + h).min(1.0))?)?;
    let dn = log_at(&rt, &geodesic(r0, r1, (t - h).max(0.0))?)?;
    let span = (t + h).min(1.0) - (t - h).max(0.0);
    Ok([
        (up[0] - dn[0]) / span,
        (up[1] - dn[1]) / span,
        (up[2] - dn[2]) / span,
    ])
}
