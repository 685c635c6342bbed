//! The reverse diffusion chain as a Markov decision process.
//!
//! MDP step `k` holds the sample at diffusion index `T - k`; the action at step
//! `k` is the next sample `x_{T-k-1}`, and transitions are deterministic. The
//! only reward is attached once the chain reaches `x_0`, and it lives on the
//! trajectory rather than on a step.

use alloc::{collections::VecDeque, format, vec::Vec};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rewards::Reward;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MdpState {
    pub x: Vec<f64>,
    pub c: usize,
    /// MDP step index in `0..=T`.
    pub t: usize,
}

impl MdpState {
    /// Diffusion index `T - t` of this state.
    pub fn diffusion_index(&self, steps: usize) -> usize {
        steps - self.t
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub states: Vec<MdpState>,
    pub actions: Vec<Vec<f64>>,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub pretrained_means: Option<Vec<Vec<f64>>>,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub terminal_reward: Option<f64>,
}

impl Trajectory {
    /// Builds a trajectory from the samples `x_T, x_{T-1}, .., x_0`.
    pub fn from_chain(chain: Vec<Vec<f64>>, c: usize) -> Self {
        let actions = chain.iter().skip(1).cloned().collect();
        let states = chain
            .into_iter()
            .enumerate()
            .map(|(t, x)| MdpState { x, c, t })
            .collect();
        Self {
            states,
            actions,
            pretrained_means: None,
            terminal_reward: None,
        }
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn context(&self) -> usize {
        self.states[0].c
    }

    /// The clean sample `x_0`.
    pub fn terminal(&self) -> &[f64] {
        &self.states[self.states.len() - 1].x
    }

    /// The state holding diffusion index `t`.
    pub fn at_diffusion_index(&self, t: usize) -> &MdpState {
        &self.states[self.steps() - t]
    }

    pub fn is_complete(&self) -> bool {
        !self.states.is_empty()
            && self.states.len() == self.actions.len() + 1
            && self
                .actions
                .iter()
                .zip(self.states.iter().skip(1))
                .all(|(a, s)| *a == s.x)
    }
}

/// Scores the terminal sample and stores the reward on the trajectory.
pub fn attach_sparse_reward(mut traj: Trajectory, reward: &dyn Reward) -> Result<Trajectory> {
    if !traj.is_complete() {
        return Err(Error::Contract("trajectory is incomplete".into()));
    }
    let r = reward.score(traj.terminal(), traj.context())?;
    if !r.is_finite() {
        return Err(Error::Scoring(format!("{} gave {r}", reward.name())));
    }
    traj.terminal_reward = Some(r);
    Ok(traj)
}

/// Scores a batch jointly, for rewards defined on sample groups.
pub fn attach_rewards_batch(trajs: &mut [Trajectory], reward: &dyn Reward) -> Result<()> {
    let x0: Vec<Vec<f64>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
    let cs: Vec<usize> = trajs.iter().map(Trajectory::context).collect();
    let rs = reward.score_batch(&x0, &cs)?;
    for (t, r) in trajs.iter_mut().zip(rs) {
        if !r.is_finite() {
            return Err(Error::Scoring(format!("{} gave {r}", reward.name())));
        }
        t.terminal_reward = Some(r);
    }
    Ok(())
}

/// Bounded FIFO of scored trajectories.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    trajectories: VecDeque<Trajectory>,
    capacity: usize,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 2048;

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_BUFFER_CAPACITY)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            trajectories: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, traj: Trajectory) {
        if self.trajectories.len() == self.capacity {
            self.trajectories.pop_front();
        }
        self.trajectories.push_back(traj);
    }

    pub fn extend(&mut self, trajs: impl IntoIterator<Item = Trajectory>) {
        for t in trajs {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter()
    }

    pub fn clear(&mut self) {
        self.trajectories.clear();
    }
}

/// Uniform trajectory, then a uniform step of it; every pair carries the
/// trajectory's terminal reward as its regression target.
pub fn minibatch(
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(MdpState, f64)>> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let traj = &buffer.trajectories[rng.random_range(0..buffer.len())];
        let r = traj
            .terminal_reward
            .ok_or_else(|| Error::Contract("buffer holds an unscored trajectory".into()))?;
        let k = rng.random_range(0..traj.states.len());
        out.push((traj.states[k].clone(), r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{GridOccupancy, ModeDistance};
    use crate::rng::seeded;
    use alloc::vec;

    fn toy(c: usize, steps: usize) -> Trajectory {
        let chain: Vec<Vec<f64>> = (0..=steps).map(|k| vec![k as f64, -(k as f64)]).collect();
        Trajectory::from_chain(chain, c)
    }

    #[test]
    fn shape_and_aliasing() {
        let t = toy(1, 5);
        assert_eq!(t.states.len(), 6);
        assert_eq!(t.actions.len(), 5);
        assert!(t.is_complete());
        assert_eq!(t.at_diffusion_index(5).t, 0);
        assert_eq!(t.at_diffusion_index(0).x, t.terminal().to_vec());
    }

    #[test]
    fn zero_reward_at_origin() {
        let mut t = Trajectory::from_chain(vec![vec![3.0, 1.0], vec![0.0, 0.0]], 0);
        t = attach_sparse_reward(t, &ModeDistance::new(vec![0.0, 0.0])).unwrap();
        assert_eq!(t.terminal_reward, Some(0.0));
    }

    #[test]
    fn grid_reward_matches_direct_count() {
        let grid = GridOccupancy::new(4, [-2.0, 2.0, -2.0, 2.0], 4).unwrap();
        let mut ts: Vec<_> = [[-1.5, -1.5], [-1.4, -1.6], [1.5, 1.5], [0.5, -0.5]]
            .iter()
            .map(|p| Trajectory::from_chain(vec![vec![0.0, 0.0], p.to_vec()], 0))
            .collect();
        attach_rewards_batch(&mut ts, &grid).unwrap();
        // cells: (0,0) twice, (3,3), (2,1) => 3 occupied
        assert!(ts.iter().all(|t| t.terminal_reward == Some(-3.0)));
    }

    #[test]
    fn single_trajectory_buffer_targets() {
        let mut buf = ReplayBuffer::new(4);
        let mut t = toy(0, 3);
        t.terminal_reward = Some(2.5);
        buf.push(t);
        let mb = minibatch(&buf, 32, &mut seeded(0)).unwrap();
        assert!(mb.iter().all(|(_, r)| *r == 2.5));
    }

    #[test]
    fn empty_buffer_errors() {
        let buf = ReplayBuffer::new(4);
        assert_eq!(
            minibatch(&buf, 1, &mut seeded(0)).unwrap_err(),
            Error::EmptyBuffer
        );
    }

    #[test]
    fn eviction_is_oldest_first() {
        let mut buf = ReplayBuffer::new(2);
        for c in 0..3 {
            buf.push(toy(c, 1));
        }
        let cs: Vec<usize> = buf.iter().map(Trajectory::context).collect();
        assert_eq!(cs, vec![1, 2]);
    }

    #[test]
    fn step_frequencies_are_uniform() {
        let mut buf = ReplayBuffer::new(8);
        for c in 0..4 {
            let mut t = toy(c, 50);
            t.terminal_reward = Some(0.0);
            buf.push(t);
        }
        let n = 100_000;
        let mb = minibatch(&buf, n, &mut seeded(9)).unwrap();
        let mut counts = [0usize; 51];
        for (s, _) in &mb {
            counts[s.t] += 1;
        }
        let p = 1.0 / 51.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "{c}");
        }
    }

    #[test]
    fn minibatch_is_reproducible() {
        let mut buf = ReplayBuffer::new(8);
        for c in 0..3 {
            let mut t = toy(c, 10);
            t.terminal_reward = Some(c as f64);
            buf.push(t);
        }
        let a = minibatch(&buf, 20, &mut seeded(4)).unwrap();
        let b = minibatch(&buf, 20, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }
}
