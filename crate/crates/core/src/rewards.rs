//! Terminal reward functions.
//!
//! Rewards score a clean sample `x_0` under its context. Differentiable ones
//! can also be recorded on a tape so reward-backpropagation baselines can
//! differentiate through them; the others raise
//! [`Error::NonDifferentiableReward`] there.

use alloc::{boxed::Box, collections::BTreeSet, format, string::String, vec, vec::Vec};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Category weights `(w_a, w_b, w_c)` for helix / sheet / coil proportions.
pub const PAPER_SECONDARY_STRUCTURE_WEIGHTS: [f64; 3] = [1.0, 5.0, 0.5];

pub trait Reward {
    fn name(&self) -> &str;

    fn score(&self, x0: &[f64], c: usize) -> Result<f64>;

    /// Scores a batch; the default scores each sample on its own.
    fn score_batch(&self, x0: &[Vec<f64>], cs: &[usize]) -> Result<Vec<f64>> {
        x0.iter().zip(cs).map(|(x, c)| self.score(x, *c)).collect()
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Records the reward of each row of `x0` as a `[n, 1]` node.
    fn score_on_tape(&self, _tape: &mut Tape, _x0: Var, _cs: &[usize]) -> Result<Var> {
        Err(Error::NonDifferentiableReward(self.name().into()))
    }
}

/// `r = -||x0 - target||^2`
#[derive(Debug, Clone, PartialEq)]
pub struct ModeDistance {
    pub target: Vec<f64>,
}

impl ModeDistance {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target }
    }

    pub fn gradient(&self, x0: &[f64]) -> Vec<f64> {
        x0.iter()
            .zip(&self.target)
            .map(|(x, t)| -2.0 * (x - t))
            .collect()
    }
}

pub fn mode_distance_reward(x0: &[f64], target: &[f64]) -> Result<f64> {
    if x0.len() != target.len() {
        return Err(Error::Dimension {
            context: "mode_distance_reward",
            expected: target.len(),
            got: x0.len(),
        });
    }
    Ok(-x0
        .iter()
        .zip(target)
        .map(|(x, t)| (x - t) * (x - t))
        .sum::<f64>())
}

impl Reward for ModeDistance {
    fn name(&self) -> &str {
        "mode_distance"
    }

    fn score(&self, x0: &[f64], _c: usize) -> Result<f64> {
        mode_distance_reward(x0, &self.target)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn score_on_tape(&self, tape: &mut Tape, x0: Var, _cs: &[usize]) -> Result<Var> {
        let (n, d) = tape.dims(x0);
        if d != self.target.len() {
            return Err(Error::Dimension {
                context: "mode_distance_reward",
                expected: self.target.len(),
                got: d,
            });
        }
        let target = tape.constant(&Tensor::row(self.target.clone()))?;
        let target = tape.broadcast_rows(target, n)?;
        let diff = tape.sub(x0, target)?;
        let sq = tape.square(diff)?;
        let dist = tape.row_sum(sq)?;
        tape.scale(dist, -1.0)
    }
}

/// Axis-aligned box `[x_min, x_max, y_min, y_max]` split into
/// `resolution x resolution` cells.
fn cell_of(p: &[f64], resolution: usize, bbox: &[f64; 4]) -> (usize, usize) {
    let idx = |v: f64, lo: f64, hi: f64| {
        let u = (v - lo) / (hi - lo) * resolution as f64;
        if u.is_nan() || u < 0.0 {
            0
        } else {
            (libm::floor(u) as usize).min(resolution - 1)
        }
    };
    (idx(p[0], bbox[0], bbox[1]), idx(p[1], bbox[2], bbox[3]))
}

/// Negative number of distinct grid cells occupied by a set of 2-D points.
/// Points outside the box count in the nearest edge cell.
pub fn grid_occupancy_reward(
    points: &[Vec<f64>],
    resolution: usize,
    bbox: [f64; 4],
) -> Result<f64> {
    if resolution == 0 || !(bbox[0] < bbox[1] && bbox[2] < bbox[3]) {
        return Err(contract("grid needs resolution >= 1 and a non-empty box"));
    }
    let mut cells = BTreeSet::new();
    for p in points {
        if p.len() < 2 {
            return Err(Error::Dimension {
                context: "grid_occupancy_reward",
                expected: 2,
                got: p.len(),
            });
        }
        cells.insert(cell_of(p, resolution, &bbox));
    }
    Ok(-(cells.len() as f64))
}

/// Compressibility analog: groups of `group_size` consecutive samples are
/// scored together and every member receives the group's reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOccupancy {
    pub resolution: usize,
    pub bbox: [f64; 4],
    pub group_size: usize,
}

impl GridOccupancy {
    pub fn new(resolution: usize, bbox: [f64; 4], group_size: usize) -> Result<Self> {
        grid_occupancy_reward(&[], resolution, bbox)?;
        if group_size == 0 {
            return Err(contract("group size must be positive"));
        }
        Ok(Self {
            resolution,
            bbox,
            group_size,
        })
    }
}

impl Reward for GridOccupancy {
    fn name(&self) -> &str {
        "grid_occupancy"
    }

    fn score(&self, x0: &[f64], _c: usize) -> Result<f64> {
        grid_occupancy_reward(&[x0.to_vec()], self.resolution, self.bbox)
    }

    fn score_batch(&self, x0: &[Vec<f64>], _cs: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x0.len());
        for group in x0.chunks(self.group_size) {
            let r = grid_occupancy_reward(group, self.resolution, self.bbox)?;
            out.extend(core::iter::repeat_n(r, group.len()));
        }
        Ok(out)
    }
}

/// `R = (sum_d p_d w_d) (1 + sum_d p_d ln p_d)` with `0 ln 0 = 0`.
pub fn weighted_entropy_reward(p: &[f64], w: &[f64]) -> Result<f64> {
    if p.len() != w.len() {
        return Err(Error::Dimension {
            context: "weighted_entropy_reward",
            expected: w.len(),
            got: p.len(),
        });
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(contract(format!(
            "proportions must lie on the simplex (sum {total})"
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(contract("weights must be finite"));
    }
    let mix: f64 = p.iter().zip(w).map(|(p, w)| p * w).sum();
    let neg_entropy: f64 = p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * libm::log(*v))
        .sum();
    Ok(mix * (1.0 + neg_entropy))
}

/// Maps `x0` to category proportions by soft assignment to anchor points,
/// `p_k ∝ exp(-||x0 - a_k||^2 / temperature)`, and scores them with
/// [`weighted_entropy_reward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTarget {
    pub anchors: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl CategoricalTarget {
    pub fn proportions(&self, x0: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .anchors
            .iter()
            .map(|a| {
                -a.iter()
                    .zip(x0)
                    .map(|(a, x)| (a - x) * (a - x))
                    .sum::<f64>()
                    / self.temperature
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
        let z: f64 = e.iter().sum();
        let mut p: Vec<f64> = e.iter().map(|v| v / z).collect();
        // Renormalise so the simplex check holds to rounding.
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }
}

impl Reward for CategoricalTarget {
    fn name(&self) -> &str {
        "weighted_entropy"
    }

    fn score(&self, x0: &[f64], _c: usize) -> Result<f64> {
        weighted_entropy_reward(&self.proportions(x0), &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, _x0: &[f64], _c: usize) -> Result<f64> {
        Ok(self.0)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn score_on_tape(&self, tape: &mut Tape, x0: Var, _cs: &[usize]) -> Result<Var> {
        let (n, _) = tape.dims(x0);
        tape.constant(&Tensor::matrix(n, 1, vec![self.0; n])?)
    }
}

/// Serializable description of a reward. User-defined rewards implement
/// [`Reward`] directly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum RewardSpec {
    ModeDistance {
        target: Vec<f64>,
    },
    GridOccupancy {
        resolution: usize,
        bbox: [f64; 4],
        group_size: usize,
    },
    WeightedEntropy {
        anchors: Vec<Vec<f64>>,
        weights: Vec<f64>,
        temperature: f64,
    },
    Constant {
        value: f64,
    },
}

impl RewardSpec {
    pub fn is_differentiable(&self) -> bool {
        matches!(
            self,
            RewardSpec::ModeDistance { .. } | RewardSpec::Constant { .. }
        )
    }

    /// Three anchors on the unit circle weighted with the secondary-structure
    /// preset.
    pub fn paper_weighted_entropy() -> Self {
        let anchors = (0..3)
            .map(|k| {
                let a = core::f64::consts::TAU * k as f64 / 3.0 + core::f64::consts::FRAC_PI_2;
                vec![2.0 * libm::cos(a), 2.0 * libm::sin(a)]
            })
            .collect();
        RewardSpec::WeightedEntropy {
            anchors,
            weights: PAPER_SECONDARY_STRUCTURE_WEIGHTS.to_vec(),
            temperature: 1.0,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Reward>> {
        Ok(match self {
            RewardSpec::ModeDistance { target } => Box::new(ModeDistance::new(target.clone())),
            RewardSpec::GridOccupancy {
                resolution,
                bbox,
                group_size,
            } => Box::new(GridOccupancy::new(*resolution, *bbox, *group_size)?),
            RewardSpec::WeightedEntropy {
                anchors,
                weights,
                temperature,
            } => {
                if anchors.len() != weights.len() || anchors.is_empty() {
                    return Err(contract("one weight per anchor required"));
                }
                if !(*temperature > 0.0) {
                    return Err(contract("temperature must be positive"));
                }
                Box::new(CategoricalTarget {
                    anchors: anchors.clone(),
                    weights: weights.clone(),
                    temperature: *temperature,
                })
            }
            RewardSpec::Constant { value } => Box::new(ConstantReward(*value)),
        })
    }

    pub fn name(&self) -> String {
        String::from(match self {
            RewardSpec::ModeDistance { .. } => "mode_distance",
            RewardSpec::GridOccupancy { .. } => "grid_occupancy",
            RewardSpec::WeightedEntropy { .. } => "weighted_entropy",
            RewardSpec::Constant { .. } => "constant",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    const W: [f64; 3] = PAPER_SECONDARY_STRUCTURE_WEIGHTS;

    #[test]
    fn mode_distance_examples() {
        assert_eq!(mode_distance_reward(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            mode_distance_reward(&[2.0, 2.0], &[1.0, 2.0]).unwrap(),
            -1.0
        );
        assert!(mode_distance_reward(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mode_distance_gradient_matches_finite_differences() {
        let r = ModeDistance::new(vec![0.3, -1.2]);
        let x = [1.1, 0.4];
        let g = r.gradient(&x);
        let h = 1e-5;
        for j in 0..2 {
            let mut p = x;
            p[j] += h;
            let mut m = x;
            m[j] -= h;
            let fd = (r.score(&p, 0).unwrap() - r.score(&m, 0).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
        }
        // The tape route agrees with the closed form.
        let mut tape = Tape::new();
        let xv = tape.variable(&Tensor::row(x.to_vec())).unwrap();
        let rv = r.score_on_tape(&mut tape, xv, &[0]).unwrap();
        let s = tape.sum(rv).unwrap();
        let tg = tape.backward(s).unwrap().wrt(&tape, xv);
        assert!((tg[0] - g[0]).abs() < 1e-12 && (tg[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn grid_examples() {
        let bbox = [0.0, 4.0, 0.0, 4.0];
        let same = vec![vec![0.1, 0.1], vec![0.2, 0.3], vec![0.9, 0.9]];
        assert_eq!(grid_occupancy_reward(&same, 4, bbox).unwrap(), -1.0);
        let four = vec![
            vec![0.5, 0.5],
            vec![1.5, 0.5],
            vec![2.5, 0.5],
            vec![3.5, 3.5],
        ];
        assert_eq!(grid_occupancy_reward(&four, 4, bbox).unwrap(), -4.0);
    }

    #[test]
    fn grid_matches_brute_force_enumeration() {
        let mut rng = seeded(11);
        let bbox = [-2.0, 2.0, -2.0, 2.0];
        for _ in 0..50 {
            let pts: Vec<Vec<f64>> = (0..40)
                .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            // Brute force: walk every cell and test membership.
            let res = 6;
            let side = 4.0 / res as f64;
            let mut occupied = 0;
            for i in 0..res {
                for j in 0..res {
                    let (x0, y0) = (-2.0 + i as f64 * side, -2.0 + j as f64 * side);
                    if pts
                        .iter()
                        .any(|p| p[0] >= x0 && p[0] < x0 + side && p[1] >= y0 && p[1] < y0 + side)
                    {
                        occupied += 1;
                    }
                }
            }
            assert_eq!(
                grid_occupancy_reward(&pts, res, bbox).unwrap(),
                -(occupied as f64)
            );
        }
    }

    #[test]
    fn grid_is_not_differentiable() {
        let g = GridOccupancy::new(4, [0.0, 1.0, 0.0, 1.0], 8).unwrap();
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::row(vec![0.5, 0.5])).unwrap();
        assert!(matches!(
            g.score_on_tape(&mut tape, x, &[0]),
            Err(Error::NonDifferentiableReward(_))
        ));
        assert!(!g.is_differentiable());
    }

    #[test]
    fn grid_groups_share_reward() {
        let g = GridOccupancy::new(4, [0.0, 4.0, 0.0, 4.0], 2).unwrap();
        let pts = vec![
            vec![0.5, 0.5],
            vec![0.6, 0.6],
            vec![0.5, 0.5],
            vec![3.5, 3.5],
            vec![1.5, 1.5],
        ];
        let r = g.score_batch(&pts, &[0; 5]).unwrap();
        assert_eq!(r, vec![-1.0, -1.0, -2.0, -2.0, -1.0]);
    }

    #[test]
    fn weighted_entropy_examples() {
        assert_eq!(weighted_entropy_reward(&[1.0, 0.0, 0.0], &W).unwrap(), 1.0);
        assert_eq!(weighted_entropy_reward(&[0.0, 1.0, 0.0], &W).unwrap(), 5.0);
        let third = 1.0 / 3.0;
        let r = weighted_entropy_reward(&[third, third, third], &W).unwrap();
        // (6.5 / 3) * (1 + ln(1/3))
        assert!((r - (-0.213_659_6)).abs() < 1e-6, "{r}");
    }

    #[test]
    fn weighted_entropy_rejects_off_simplex() {
        assert!(weighted_entropy_reward(&[0.5, 0.4, 0.0], &W).is_err());
        assert!(weighted_entropy_reward(&[1.2, -0.2, 0.0], &W).is_err());
        assert!(weighted_entropy_reward(&[1.0, 0.0], &W).is_err());
    }

    #[test]
    fn categorical_target_is_runnable() {
        let spec = RewardSpec::paper_weighted_entropy();
        let r = spec.build().unwrap();
        let v = r.score(&[0.0, 2.0], 0).unwrap();
        assert!(v.is_finite());
        assert!(!r.is_differentiable());
    }

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn permutation_equivariant(raw in proptest::collection::vec(0.01f64..1.0, 3), w in proptest::collection::vec(-5.0f64..5.0, 3), perm in 0usize..6) {
            let p = simplex(&raw);
            let orders = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let o = orders[perm];
            let pp: Vec<f64> = o.iter().map(|i| p[*i]).collect();
            let wp: Vec<f64> = o.iter().map(|i| w[*i]).collect();
            let a = weighted_entropy_reward(&p, &w).unwrap();
            let b = weighted_entropy_reward(&pp, &wp).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn one_hot_dominates_under_uniform_weights(raw in proptest::collection::vec(0.0f64..1.0, 3), c in 0.1f64..10.0) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let p = simplex(&raw);
            let w = [c; 3];
            let one_hot = weighted_entropy_reward(&[1.0, 0.0, 0.0], &w).unwrap();
            prop_assert!(one_hot >= weighted_entropy_reward(&p, &w).unwrap() - 1e-12);
        }

        #[test]
        fn grid_ignores_small_within_cell_moves(x in 0usize..8, y in 0usize..8, dx in -0.24f64..0.24, dy in -0.24f64..0.24) {
            // Cell centres of an 8x8 grid over [0,8]^2 moved by < half a cell.
            let centre = vec![x as f64 + 0.5, y as f64 + 0.5];
            let moved = vec![centre[0] + dx, centre[1] + dy];
            let other = vec![vec![3.5, 3.5], vec![6.5, 1.5]];
            let mut a = other.clone();
            a.push(centre);
            let mut b = other;
            b.push(moved);
            let bbox = [0.0, 8.0, 0.0, 8.0];
            prop_assert_eq!(grid_occupancy_reward(&a, 8, bbox).unwrap(), grid_occupancy_reward(&b, 8, bbox).unwrap());
        }
    }
}
