use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::autodiff::{
    embedding_rows, Activation, Bound, Mlp, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::error::{contract, Error, Result};

/// Anything that predicts the forward noise from `(x_t, t, c)`.
///
/// Context `None` selects the unconditional branch.
pub trait EpsModel {
    fn data_dim(&self) -> usize;
    fn num_contexts(&self) -> usize;
    /// Predicts the noise for a batch of rows sharing the step `t`.
    fn predict_eps(&self, x: &[Vec<f64>], t: usize, cs: &[Option<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DenoiserArch {
    pub data_dim: usize,
    pub num_contexts: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub context_dim: usize,
    pub activation: Activation,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            num_contexts: 1,
            hidden: vec![64, 64],
            time_dim: 16,
            context_dim: 8,
            activation: Activation::Silu,
        }
    }
}

/// `eps_theta(x_t, t, c)`: an MLP over `x_t`, a sinusoidal step embedding and
/// a learned context vector. The context table has one extra row, the null
/// slot, used for the unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: DenoiserArch,
    store: ParamStore,
    net: Mlp,
    context_table: ParamId,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.data_dim == 0 || arch.num_contexts == 0 || arch.context_dim == 0 {
            return Err(contract(
                "denoiser needs positive data, context and embedding sizes",
            ));
        }
        let mut store = ParamStore::new();
        let rows = arch.num_contexts + 1;
        let table = (0..rows * arch.context_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let context_table = store.add(
            "context_table",
            Tensor::matrix(rows, arch.context_dim, table)?,
        );
        let mut dims = vec![arch.data_dim + arch.time_dim + arch.context_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.data_dim);
        let net = Mlp::new(&mut store, "eps", &dims, arch.activation, rng)?;
        // Probe the embedding size once so a bad config fails here.
        embedding_rows(core::iter::once(1.0), arch.time_dim)?;
        Ok(Self {
            arch,
            store,
            net,
            context_table,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn null_context(&self) -> usize {
        self.arch.num_contexts
    }

    fn slot(&self, c: Option<usize>) -> Result<usize> {
        match c {
            None => Ok(self.null_context()),
            Some(c) if c < self.arch.num_contexts => Ok(c),
            Some(c) => Err(contract(alloc::format!(
                "context {c} out of range for {} contexts",
                self.arch.num_contexts
            ))),
        }
    }

    fn features(&self, ts: &[usize]) -> Result<Tensor> {
        embedding_rows(ts.iter().map(|t| *t as f64), self.arch.time_dim)
    }

    /// Recorded forward pass with a per-row step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        ts: &[usize],
        cs: &[Option<usize>],
    ) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if d != self.arch.data_dim {
            return Err(Error::Dimension {
                context: "denoiser input",
                expected: self.arch.data_dim,
                got: d,
            });
        }
        if ts.len() != n || cs.len() != n {
            return Err(contract("one step and one context per row required"));
        }
        let slots = cs
            .iter()
            .map(|c| self.slot(*c))
            .collect::<Result<Vec<_>>>()?;
        let temb = tape.constant(&self.features(ts)?)?;
        let cemb = tape.gather_rows(params.var(self.context_table), &slots)?;
        let input = tape.concat_cols(&[x, temb, cemb])?;
        self.net.forward(tape, params, input)
    }

    /// Tape-free forward pass with a per-row step.
    pub fn eval(
        &self,
        x: &[Vec<f64>],
        ts: &[usize],
        cs: &[Option<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let n = x.len();
        if ts.len() != n || cs.len() != n {
            return Err(contract("one step and one context per row required"));
        }
        let temb = self.features(ts)?;
        let table = self.store.get(self.context_table);
        let width = self.net.input_dim();
        let mut data = Vec::with_capacity(n * width);
        for (i, row) in x.iter().enumerate() {
            if row.len() != self.arch.data_dim {
                return Err(Error::Dimension {
                    context: "denoiser input",
                    expected: self.arch.data_dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
            data.extend_from_slice(temb.row_slice(i));
            data.extend_from_slice(table.row_slice(self.slot(cs[i])?));
        }
        let out = self
            .net
            .eval(&self.store, &Tensor::matrix(n, width, data)?)?;
        Ok(out.to_rows())
    }
}

impl EpsModel for Denoiser {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn num_contexts(&self) -> usize {
        self.arch.num_contexts
    }

    fn predict_eps(&self, x: &[Vec<f64>], t: usize, cs: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        self.eval(x, &vec![t; x.len()], cs)
    }
}

/// Classifier-free guidance: `eps_u + w (eps_c - eps_u)`. With `w = 1` only
/// the conditional branch is evaluated.
pub struct Guided<'a, M: ?Sized> {
    pub model: &'a M,
    pub scale: f64,
}

impl<M: EpsModel + ?Sized> EpsModel for Guided<'_, M> {
    fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn num_contexts(&self) -> usize {
        self.model.num_contexts()
    }

    fn predict_eps(&self, x: &[Vec<f64>], t: usize, cs: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        let cond = self.model.predict_eps(x, t, cs)?;
        if self.scale == 1.0 || cs.iter().all(Option::is_none) {
            return Ok(cond);
        }
        let uncond = self.model.predict_eps(x, t, &vec![None; x.len()])?;
        Ok(cond
            .into_iter()
            .zip(uncond)
            .map(|(c, u)| {
                c.iter()
                    .zip(&u)
                    .map(|(c, u)| u + self.scale * (c - u))
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> Denoiser {
        let arch = DenoiserArch {
            num_contexts: 2,
            hidden: vec![16],
            ..DenoiserArch::default()
        };
        Denoiser::new(arch, &mut seeded(0)).unwrap()
    }

    #[test]
    fn tape_and_eval_agree() {
        let d = small();
        let x = vec![vec![0.1, -0.2], vec![1.0, 2.0], vec![-0.5, 0.3]];
        let ts = [1, 7, 50];
        let cs = [Some(0), None, Some(1)];
        let mut tape = Tape::new();
        let b = d.store().bind(&mut tape, true).unwrap();
        let xv = tape.constant(&Tensor::from_rows(&x).unwrap()).unwrap();
        let y = d.forward(&mut tape, &b, xv, &ts, &cs).unwrap();
        assert_eq!(tape.tensor(y).to_rows(), d.eval(&x, &ts, &cs).unwrap());
    }

    #[test]
    fn output_matches_data_dim_and_null_slot_is_valid() {
        let d = small();
        let out = d.predict_eps(&[vec![0.0, 0.0]], 3, &[None]).unwrap();
        assert_eq!(out[0].len(), 2);
        assert!(d.predict_eps(&[vec![0.0, 0.0]], 3, &[Some(2)]).is_err());
    }

    #[test]
    fn unit_guidance_is_conditional() {
        let d = small();
        let g = Guided {
            model: &d,
            scale: 1.0,
        };
        let x = [vec![0.3, 0.4]];
        assert_eq!(
            g.predict_eps(&x, 5, &[Some(1)]).unwrap(),
            d.predict_eps(&x, 5, &[Some(1)]).unwrap()
        );
        let g0 = Guided {
            model: &d,
            scale: 0.0,
        };
        assert_eq!(
            g0.predict_eps(&x, 5, &[Some(1)]).unwrap(),
            d.predict_eps(&x, 5, &[None]).unwrap()
        );
    }
}
