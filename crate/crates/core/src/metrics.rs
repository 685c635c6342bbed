//! Sample-set distances.

use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::rng::normal_vec;

/// Wasserstein-1 distance between two empirical distributions on the line,
/// `integral |F_a(x) - F_b(x)| dx`. Sizes may differ.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("empirical distributions must be non-empty"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// `n` directions drawn uniformly on the unit sphere.
pub fn random_projections(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v = normal_vec(rng, dim);
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("point sets must be non-empty"));
    }
    let d = a[0].len();
    for p in a.iter().chain(b) {
        if p.len() != d {
            return Err(Error::Dimension {
                context: "sliced_wasserstein",
                expected: d,
                got: p.len(),
            });
        }
    }
    Ok(d)
}

/// Mean 1-D Wasserstein-1 distance over the given directions.
pub fn sliced_wasserstein_with(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: &[Vec<f64>],
) -> Result<f64> {
    let d = check_sets(a, b)?;
    if projections.is_empty() || projections.iter().any(|p| p.len() != d) {
        return Err(contract(
            "projections must be non-empty and match the point dimension",
        ));
    }
    let project = |set: &[Vec<f64>], dir: &[f64]| -> Vec<f64> {
        set.iter()
            .map(|p| p.iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect()
    };
    let mut total = 0.0;
    for dir in projections {
        total += wasserstein_1d(&project(a, dir), &project(b, dir))?;
    }
    Ok(total / projections.len() as f64)
}

pub fn sliced_wasserstein(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let d = check_sets(a, b)?;
    let dirs = random_projections(d, n_projections.max(1), rng);
    sliced_wasserstein_with(a, b, &dirs)
}

/// Per-coordinate mean of a point set.
pub fn mean_point(points: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; points.first().map_or(0, Vec::len)];
    for p in points {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = points.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}
