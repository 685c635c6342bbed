//! Central finite-difference checks of tape gradients.

use alloc::{boxed::Box, vec::Vec};
use rand::Rng;

use super::{Activation, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::seeded;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(b)), 1e-6)
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Worst relative error between tape and finite-difference gradients with
/// respect to every entry of `inputs`. The op output is contracted with fixed
/// random weights so the scalar depends on every output entry.
pub fn input_gradient_error(
    inputs: &[Tensor],
    weights_seed: u64,
    h: f64,
    build: &Build,
) -> Result<f64> {
    let eval = |ins: &[Tensor], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = ins
            .iter()
            .map(|t| tape.variable(t))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let (r, c) = tape.dims(out);
        let mut wr = seeded(weights_seed);
        let w = (0..r * c).map(|_| wr.random_range(-1.0..1.0)).collect();
        let wv = tape.constant(&Tensor::matrix(r, c, w)?)?;
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod)?;
        let value = tape.scalar(loss)?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| g.wrt(&tape, *v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k][j], fd));
        }
    }
    Ok(worst)
}

/// Worst relative error over every parameter of `store` for the scalar
/// `loss(tape, params)`.
pub fn parameter_gradient_error(
    store: &ParamStore,
    h: f64,
    loss: &dyn Fn(&mut Tape, &super::Bound) -> Result<Var>,
) -> Result<f64> {
    let eval = |s: &ParamStore, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true)?;
        let l = loss(&mut tape, &b)?;
        let v = tape.scalar(l)?;
        let g = if grads {
            b.collect(&tape, &tape.backward(l)?)
        } else {
            Vec::new()
        };
        Ok((v, g))
    };
    let (_, g) = eval(store, true)?;
    let mut worst: f64 = 0.0;
    for p in 0..store.len() {
        for j in 0..store.tensors()[p].len() {
            let mut plus = store.clone();
            plus.tensors_mut()[p].data_mut()[j] += h;
            let mut minus = store.clone();
            minus.tensors_mut()[p].data_mut()[j] -= h;
            let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            worst = worst.max(relative_error(g[p][j], fd));
        }
    }
    Ok(worst)
}

fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Result<Tensor> {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
}

/// Entries bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut impl Rng, r: usize, c: usize) -> Result<Tensor> {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(r, c, data)
}

type Case = fn(&mut crate::rng::LabRng) -> Result<(Vec<Tensor>, Box<Build<'static>>)>;

fn cases() -> Vec<(&'static str, Case)> {
    alloc::vec![
        ("add", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 2)?, rand_matrix(r, 3, 2)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1])) as Box<Build>
        ))),
        ("sub", |r| Ok((
            alloc::vec![rand_matrix(r, 2, 4)?, rand_matrix(r, 2, 4)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1])) as Box<Build>
        ))),
        ("mul", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 3)?, rand_matrix(r, 3, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1])) as Box<Build>
        ))),
        ("scale", |r| {
            let k = r.random_range(-3.0..3.0);
            Ok((
                alloc::vec![rand_matrix(r, 2, 3)?],
                Box::new(move |t: &mut Tape, v: &[Var]| t.scale(v[0], k)) as Box<Build>,
            ))
        }),
        ("add_scalar", |r| {
            let k = r.random_range(-3.0..3.0);
            Ok((
                alloc::vec![rand_matrix(r, 2, 3)?],
                Box::new(move |t: &mut Tape, v: &[Var]| t.add_scalar(v[0], k)) as Box<Build>,
            ))
        }),
        ("scalar_mul", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 2)?, rand_matrix(r, 1, 1)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.scalar_mul(v[0], v[1])) as Box<Build>
        ))),
        ("matmul", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 4)?, rand_matrix(r, 4, 2)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])) as Box<Build>
        ))),
        ("add_bias", |r| Ok((
            alloc::vec![rand_matrix(r, 4, 3)?, rand_matrix(r, 1, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.add_bias(v[0], v[1])) as Box<Build>
        ))),
        ("tanh", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.activation(v[0], Activation::Tanh)) as Box<Build>
        ))),
        ("relu", |r| Ok((
            alloc::vec![rand_away_from_zero(r, 3, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.activation(v[0], Activation::Relu)) as Box<Build>
        ))),
        ("silu", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.activation(v[0], Activation::Silu)) as Box<Build>
        ))),
        ("square", |r| Ok((
            alloc::vec![rand_matrix(r, 2, 5)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.square(v[0])) as Box<Build>
        ))),
        ("sum", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 4)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0])) as Box<Build>
        ))),
        ("mean", |r| Ok((
            alloc::vec![rand_matrix(r, 3, 4)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0])) as Box<Build>
        ))),
        ("row_sum", |r| Ok((
            alloc::vec![rand_matrix(r, 4, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.row_sum(v[0])) as Box<Build>
        ))),
        ("broadcast_rows", |r| Ok((
            alloc::vec![rand_matrix(r, 1, 3)?],
            Box::new(|t: &mut Tape, v: &[Var]| t.broadcast_rows(v[0], 4)) as Box<Build>
        ))),
        ("concat_cols", |r| Ok((
            alloc::vec![
                rand_matrix(r, 3, 2)?,
                rand_matrix(r, 3, 1)?,
                rand_matrix(r, 3, 3)?
            ],
            Box::new(|t: &mut Tape, v: &[Var]| t.concat_cols(v)) as Box<Build>
        ))),
        ("gather_rows", |r| {
            let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
            Ok((
                alloc::vec![rand_matrix(r, 3, 2)?],
                Box::new(move |t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &idx)) as Box<Build>,
            ))
        }),
    ]
}

/// Worst relative error per primitive, and for a 3-5-2 tanh MLP's
/// parameters under an MSE loss, over `trials` random draws each.
pub fn suite(trials: usize, seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = crate::rng::stream(seed, 0x6763, i as u64);
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let (inputs, build) = case(&mut rng)?;
            worst = worst.max(input_gradient_error(
                &inputs,
                trial as u64,
                h,
                build.as_ref(),
            )?);
        }
        out.push((name, worst));
    }
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = crate::rng::stream(seed, 0x6d6c70, trial as u64);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::Tanh, &mut rng)?;
        let x = rand_matrix(&mut rng, 4, 3)?;
        let y = rand_matrix(&mut rng, 4, 2)?;
        let err = parameter_gradient_error(&store, h, &|tape, b| {
            let xv = tape.constant(&x)?;
            let yv = tape.constant(&y)?;
            let out = mlp.forward(tape, b, xv)?;
            let d = tape.sub(out, yv)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        })?;
        worst = worst.max(err);
    }
    out.push(("mlp_2_layer", worst));
    Ok(out)
}
