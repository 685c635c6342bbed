//! Small MDPs whose values are known exactly.

use alloc::{format, vec, vec::Vec};
use rand::Rng;

use super::train::TrajectorySource;
use crate::error::{contract, Result};
use crate::mdp::Trajectory;
use crate::rng::{normal, stream, tag};

/// Finite-state reverse chain: `x_T ~ init`, then `T` stochastic transitions
/// to `x_0`, scored by `reward[x_0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub steps: usize,
    pub n_states: usize,
    pub init: Vec<f64>,
    /// `kernels[k][i][j] = P(x_{T-k-1} = j | x_{T-k} = i)`.
    pub kernels: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<f64>,
}

impl TabularMdp {
    /// A discretised 1-D diffusion on `levels` grid points: every step moves
    /// one level down, stays, or moves up, with a drift toward the centre that
    /// strengthens as the chain approaches `x_0`. Reward is asymmetric in the
    /// final position.
    pub fn discretized_diffusion(levels: usize, steps: usize) -> Self {
        let mid = (levels as f64 - 1.0) / 2.0;
        let kernels = (0..steps)
            .map(|k| {
                let pull = 0.1 + 0.2 * k as f64 / steps as f64;
                (0..levels)
                    .map(|i| {
                        let mut row = vec![0.0; levels];
                        let toward = if (i as f64) < mid { 1i64 } else { -1 };
                        let (p_in, p_out) = if (i as f64 - mid).abs() < 0.5 {
                            (0.25, 0.25)
                        } else {
                            (0.25 + pull, 0.25 - pull / 2.0)
                        };
                        let moves = [(toward, p_in), (-toward, p_out), (0, 1.0 - p_in - p_out)];
                        for (d, p) in moves {
                            let j = (i as i64 + d).clamp(0, levels as i64 - 1) as usize;
                            row[j] += p;
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let reward = (0..levels)
            .map(|i| {
                let x = i as f64 - mid;
                -(x - 0.7) * (x - 0.7) + 0.3 * x
            })
            .collect();
        Self {
            steps,
            n_states: levels,
            init: vec![1.0 / levels as f64; levels],
            kernels,
            reward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |row: &[f64]| {
            row.len() == self.n_states && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12
        };
        if !ok(&self.init)
            || self.kernels.len() != self.steps
            || self.reward.len() != self.n_states
            || self.kernels.iter().flatten().any(|r| !ok(r))
        {
            return Err(contract(format!(
                "malformed tabular MDP with {} states",
                self.n_states
            )));
        }
        Ok(())
    }

    /// Every positive-probability path `x_T, .., x_0` with its probability.
    pub fn paths(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out: Vec<(Vec<usize>, f64)> = (0..self.n_states)
            .filter(|s| self.init[*s] > 0.0)
            .map(|s| (vec![s], self.init[s]))
            .collect();
        for k in 0..self.steps {
            out = out
                .into_iter()
                .flat_map(|(path, p)| {
                    let last = path[path.len() - 1];
                    self.kernels[k][last]
                        .iter()
                        .enumerate()
                        .filter(|(_, q)| **q > 0.0)
                        .map(|(j, q)| {
                            let mut next = path.clone();
                            next.push(j);
                            (next, p * q)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        out
    }
}

/// Least-squares fit of a tabular value `V[k][s]` to terminal rewards over
/// weighted paths, by solving the normal equations of
/// `sum_paths w sum_k (r - V[k][path_k])^2`. Cells no path visits are `None`.
pub fn tabular_least_squares(
    mdp: &TabularMdp,
    data: &[(Vec<usize>, f64)],
) -> Result<Vec<Vec<Option<f64>>>> {
    let cells = (mdp.steps + 1) * mdp.n_states;
    let mut ata = vec![0.0; cells * cells];
    let mut atb = vec![0.0; cells];
    for (path, w) in data {
        if path.len() != mdp.steps + 1 {
            return Err(contract("path length must be T + 1"));
        }
        let r = mdp.reward[path[mdp.steps]];
        // One-hot feature per visited (step, state) cell; each path step is
        // its own regression sample.
        for (k, s) in path.iter().enumerate() {
            let f = k * mdp.n_states + s;
            ata[f * cells + f] += w;
            atb[f] += w * r;
        }
    }
    let used: Vec<usize> = (0..cells).filter(|f| ata[f * cells + f] > 0.0).collect();
    let m = used.len();
    let mut a: Vec<f64> = used
        .iter()
        .flat_map(|i| used.iter().map(move |j| (*i, *j)))
        .map(|(i, j)| ata[i * cells + j])
        .collect();
    let mut b: Vec<f64> = used.iter().map(|f| atb[*f]).collect();
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m)
            .max_by(|x, y| a[x * m + col].abs().total_cmp(&a[y * m + col].abs()))
            .unwrap_or(col);
        if a[piv * m + col].abs() < 1e-300 {
            return Err(contract("singular normal equations"));
        }
        if piv != col {
            for j in 0..m {
                a.swap(piv * m + j, col * m + j);
            }
            b.swap(piv, col);
        }
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            if f != 0.0 {
                for j in col..m {
                    a[row * m + j] -= f * a[col * m + j];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let s: f64 = (row + 1..m).map(|j| a[row * m + j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row * m + row];
    }
    let mut table = vec![vec![None; mdp.n_states]; mdp.steps + 1];
    for (f, v) in used.iter().zip(x) {
        table[f / mdp.n_states][f % mdp.n_states] = Some(v);
    }
    Ok(table)
}

/// 1-D chain that sits at the origin until diffusion index `branch_at`, then
/// jumps to `+1` or `-1` with equal probability and drifts slightly. Reward is
/// 1 on the positive side, 0 otherwise, so the value of every pre-branch
/// state is exactly 1/2.
#[derive(Debug, Clone)]
pub struct TwoBranchSource {
    pub steps: usize,
    pub branch_at: usize,
    pub master: u64,
    pub next_index: u64,
}

impl TwoBranchSource {
    pub fn new(steps: usize, branch_at: usize, master: u64) -> Self {
        Self {
            steps,
            branch_at: branch_at.clamp(1, steps),
            master,
            next_index: 0,
        }
    }
}

impl TrajectorySource for TwoBranchSource {
    fn steps(&self) -> usize {
        self.steps
    }

    fn draw(&mut self, n: usize) -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut rng = stream(self.master, tag::ROLLOUT, self.next_index);
            self.next_index += 1;
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut x = 0.0;
            let chain: Vec<Vec<f64>> = (0..=self.steps)
                .rev()
                .map(|t| {
                    if t < self.branch_at {
                        x = if x == 0.0 {
                            side
                        } else {
                            x + 0.05 * normal(&mut rng)
                        };
                    }
                    vec![x]
                })
                .collect();
            let mut traj = Trajectory::from_chain(chain, 0);
            traj.terminal_reward = Some(if side > 0.0 { 1.0 } else { 0.0 });
            out.push(traj);
        }
        Ok(out)
    }
}
