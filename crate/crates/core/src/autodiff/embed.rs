use alloc::{format, vec::Vec};

use super::tensor::Tensor;
use crate::error::{contract, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Interleaved `(sin, cos)` features of a continuous position.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(contract(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::pow(MAX_PERIOD, -(i as f64) / half as f64);
        out.push(libm::sin(t * freq));
        out.push(libm::cos(t * freq));
    }
    Ok(out)
}

/// Embedding of an integer diffusion step as a `[1, dim]` row.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    Ok(Tensor::row(sinusoidal_embedding(t as f64, dim)?))
}

/// `[n, dim]` block with one embedded position per row.
pub(crate) fn embedding_rows(ts: impl Iterator<Item = f64>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in ts {
        data.extend(sinusoidal_embedding(t, dim)?);
        n += 1;
    }
    Tensor::matrix(n, dim, data)
}
