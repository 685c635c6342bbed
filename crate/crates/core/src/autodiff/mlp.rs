use alloc::{format, vec::Vec};
use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{apply_activation, Activation, Tape, Var};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Stack of affine layers, `y = act(x W + b)`, with weights `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`. Hidden layers use `hidden_act`, the
    /// last layer is linear. Weights and biases are drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden_act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Contract(format!("invalid layer sizes {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let weight = store.add(
                format!("{prefix}.{i}.weight"),
                Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?,
            );
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::row(draw(fan_out)));
            let last = i == dims.len() - 2;
            layers.push(Layer {
                weight,
                bias,
                activation: if last {
                    Activation::Identity
                } else {
                    hidden_act
                },
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(Self {
            layers,
            input_dim: dims[0],
            output_dim: dims[dims.len() - 1],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Recorded forward pass over a `[n, input_dim]` batch.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, input: Var) -> Result<Var> {
        let (_, c) = tape.dims(input);
        if c != self.input_dim {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.input_dim,
                got: c,
            });
        }
        let mut h = input;
        for layer in &self.layers {
            let z = tape.matmul(h, params.var(layer.weight))?;
            let z = tape.add_bias(z, params.var(layer.bias))?;
            h = tape.activation(z, layer.activation)?;
        }
        Ok(h)
    }

    /// Tape-free forward pass; bit-identical to [`Mlp::forward`].
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.input_dim,
                got: input.cols(),
            });
        }
        let n = input.rows();
        let mut h = input.data().to_vec();
        for layer in &self.layers {
            let w = store.get(layer.weight);
            let mut z = kernels::matmul(&h, w.data(), n, layer.in_dim, layer.out_dim);
            kernels::add_bias(&mut z, store.get(layer.bias).data());
            apply_activation(layer.activation, &mut z);
            h = z;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp output".into()));
        }
        Tensor::matrix(n, self.output_dim, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "id", &[3, 3], Activation::Tanh, &mut seeded(0)).unwrap();
        let l = &mlp.layers()[0];
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        store.get_mut(l.weight).data_mut().copy_from_slice(&eye);
        store.get_mut(l.bias).data_mut().fill(0.0);
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        assert_eq!(mlp.eval(&store, &x).unwrap().data(), &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true).unwrap();
        let xv = tape.constant(&x).unwrap();
        let y = mlp.forward(&mut tape, &b, xv).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "z", &[4, 2], Activation::Tanh, &mut seeded(1)).unwrap();
        let l = &mlp.layers()[0];
        store.get_mut(l.weight).data_mut().fill(0.0);
        let bias = store.get(l.bias).data().to_vec();
        let y = mlp
            .eval(&store, &Tensor::row(vec![5.0, -1.0, 2.0, 9.0]))
            .unwrap();
        assert_eq!(y.data(), bias.as_slice());
    }

    #[test]
    fn input_dimension_checked() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            &[2, 4, 1],
            Activation::Tanh,
            &mut seeded(2),
        )
        .unwrap();
        let err = mlp
            .eval(&store, &Tensor::row(vec![1.0, 2.0, 3.0]))
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 2,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "m", &[16, 8], Activation::Tanh, &mut seeded(3)).unwrap();
        assert!(store.flatten().iter().all(|w| w.abs() <= 0.25));
    }
}
