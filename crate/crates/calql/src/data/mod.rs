//! Offline datasets: generation, return-to-go annotation, CSV storage and
//! reference-value fitting.

mod csv_io;
mod reference;

pub use csv_io::{load_dataset_csv, save_dataset_csv, DATASET_HEADER};
pub use reference::{fit_reference_q, FittedReference, ReferenceFamily};

use crate::env::{Action, ActionSpace, EnvError, EpisodeStep, EpisodicEnv, State, TabularPolicy, MAZE_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trajectory {traj_id}: {msg}")]
    BadTrajectory { traj_id: usize, msg: String },
    #[error("trajectory {traj_id} step {step_idx}: stored mc_return {stored} differs from recomputed {expected} (discount mismatch?)")]
    McMismatch { traj_id: usize, step_idx: usize, stored: f64, expected: f64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    Narrow,
    Diverse,
    Mixed,
}

impl Composition {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "narrow" => Some(Composition::Narrow),
            "diverse" => Some(Composition::Diverse),
            "mixed" => Some(Composition::Mixed),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Composition::Narrow => "narrow",
            Composition::Diverse => "diverse",
            Composition::Mixed => "mixed",
        }
    }
}

/// One stored transition with its return-to-go annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: State,
    pub a: Action,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
    pub truncated: bool,
    pub mc_return: f64,
    /// Set when the trajectory did not end in a terminal, so `mc_return`
    /// bootstraps with 0 at the cut.
    pub mc_unreliable: bool,
    pub traj_id: usize,
    pub step_idx: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<EpisodeStep>,
    pub behavior_tag: String,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn ends_in_terminal(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for w in self.steps.windows(2) {
            if w[0].next_state != w[1].state {
                return Err("consecutive steps do not chain".into());
            }
            if w[0].done {
                return Err("done flag before the final step".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub composition: Composition,
    pub gamma_used: f64,
}

impl OfflineDataset {
    pub fn from_trajectories(trajs: &[Trajectory], gamma: f64, composition: Composition) -> Self {
        let mut transitions = Vec::new();
        for (traj_id, traj) in trajs.iter().enumerate() {
            let (returns, unreliable) = compute_mc_returns(traj, gamma);
            for (step_idx, (st, g)) in traj.steps.iter().zip(returns).enumerate() {
                transitions.push(Transition {
                    s: st.state.clone(),
                    a: st.action.clone(),
                    r: st.reward,
                    s_next: st.next_state.clone(),
                    done: st.done,
                    truncated: st.truncated,
                    mc_return: g,
                    mc_unreliable: unreliable,
                    traj_id,
                    step_idx,
                });
            }
        }
        OfflineDataset { transitions, composition, gamma_used: gamma }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Mean return-to-go over all transitions (the dataset's value scale).
    pub fn mean_mc_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.mc_return).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn n_trajectories(&self) -> usize {
        self.transitions.iter().map(|t| t.traj_id + 1).max().unwrap_or(0)
    }

    /// Rebuilds trajectories grouped by `traj_id`, ordered by `step_idx`.
    pub fn trajectories(&self) -> Vec<Vec<&Transition>> {
        let mut groups: Vec<Vec<&Transition>> = vec![Vec::new(); self.n_trajectories()];
        for t in &self.transitions {
            groups[t.traj_id].push(t);
        }
        for g in &mut groups {
            g.sort_by_key(|t| t.step_idx);
        }
        groups.retain(|g| !g.is_empty());
        groups
    }

    pub fn success_fraction(&self) -> f64 {
        let trajs = self.trajectories();
        let ok = trajs.iter().filter(|g| g.last().is_some_and(|t| t.done && t.r > 0.0)).count();
        ok as f64 / trajs.len().max(1) as f64
    }
}

/// Backward recursion `G(t) = r(t) + gamma * G(t+1)`, starting from 0 after the
/// last step. Returns the flag `mc_unreliable` when the trajectory was cut
/// without reaching a terminal.
pub fn compute_mc_returns(traj: &Trajectory, gamma: f64) -> (Vec<f64>, bool) {
    let rewards = traj.rewards();
    (mc_from_rewards(&rewards, gamma), !traj.ends_in_terminal())
}

pub fn mc_from_rewards(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[i] = g;
    }
    out
}

/// Cuts the trajectory at (and including) the first positive reward, marking
/// that step as terminal.
pub fn truncate_positive_segments(traj: &Trajectory) -> Trajectory {
    match traj.steps.iter().position(|s| s.reward > 0.0) {
        Some(i) => {
            let mut steps = traj.steps[..=i].to_vec();
            let last = steps.last_mut().unwrap();
            last.done = true;
            last.truncated = false;
            Trajectory { steps, behavior_tag: traj.behavior_tag.clone() }
        }
        None => traj.clone(),
    }
}

/// Data-collection policy.
pub trait Behavior {
    fn act(&mut self, state: &State, rng: &mut ChaCha8Rng) -> Action;
    fn tag(&self) -> String;
}

/// Table policy over state ids, optionally mixed with uniform random actions.
/// In continuous mode the chosen move is emitted as its direction vector.
#[derive(Clone, Debug)]
pub struct TabularBehavior {
    pub policy: TabularPolicy,
    pub epsilon: f64,
    pub continuous: bool,
    pub tag: String,
}

impl TabularBehavior {
    pub fn new(policy: TabularPolicy, epsilon: f64, continuous: bool, tag: &str) -> Self {
        TabularBehavior { policy, epsilon, continuous, tag: tag.to_string() }
    }
}

pub fn maze_action_vector(a: usize) -> Vec<f64> {
    let (dr, dc) = MAZE_ACTIONS[a];
    vec![dr as f64, dc as f64]
}

impl Behavior for TabularBehavior {
    fn act(&mut self, state: &State, rng: &mut ChaCha8Rng) -> Action {
        let s = state.id().expect("tabular behavior needs state ids");
        let n = self.policy[s].len();
        let a = if self.epsilon > 0.0 && rng.gen::<f64>() < self.epsilon {
            rng.gen_range(0..n)
        } else {
            crate::env::sample_policy_action(&self.policy[s], rng)
        };
        if self.continuous {
            Action::Vector(maze_action_vector(a))
        } else {
            Action::Id(a)
        }
    }

    fn tag(&self) -> String {
        self.tag.clone()
    }
}

#[derive(Clone, Debug)]
pub struct UniformRandom {
    pub space: ActionSpace,
}

impl Behavior for UniformRandom {
    fn act(&mut self, _state: &State, rng: &mut ChaCha8Rng) -> Action {
        match self.space {
            ActionSpace::Discrete(n) => Action::Id(rng.gen_range(0..n)),
            ActionSpace::Continuous(d) => Action::Vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }
    }

    fn tag(&self) -> String {
        "random".into()
    }
}

/// Runs one episode to termination or truncation.
pub fn rollout(env: &mut dyn EpisodicEnv, behavior: &mut dyn Behavior, seed: u64, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
    let mut s = env.reset(seed);
    let mut steps = Vec::new();
    loop {
        let a = behavior.act(&s, rng);
        let st = env.step(&a)?;
        s = st.next_state.clone();
        let end = st.done || st.truncated;
        steps.push(st);
        if end {
            return Ok(Trajectory { steps, behavior_tag: behavior.tag() });
        }
    }
}

/// Records `n_trajectories` rollouts of `behavior`; deterministic given `seed`.
pub fn generate_trajectories(
    env: &mut dyn EpisodicEnv,
    behavior: &mut dyn Behavior,
    n_trajectories: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DataError> {
    if n_trajectories == 0 {
        return Err(DataError::Precondition("n_trajectories must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_trajectories)
        .map(|_| {
            let ep_seed = rng.gen();
            rollout(env, behavior, ep_seed, &mut rng).map_err(DataError::from)
        })
        .collect()
}

pub fn generate_dataset(
    env: &mut dyn EpisodicEnv,
    behavior: &mut dyn Behavior,
    n_trajectories: usize,
    seed: u64,
    gamma: f64,
    composition: Composition,
) -> Result<OfflineDataset, DataError> {
    let trajs = generate_trajectories(env, behavior, n_trajectories, seed)?;
    Ok(OfflineDataset::from_trajectories(&trajs, gamma, composition))
}
