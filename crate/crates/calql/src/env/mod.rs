//! Finite MDPs, grid mazes and the step/reset simulation interface.

mod maze;
mod mdp;

pub use maze::{
    maze_action_from_vector, scripted_controller, Cell, FeatureKind, GridMaze, MazeEnv, StartSpec,
    MAZE_ACTIONS,
};
pub use mdp::{MdpEnv, PolicyValues, TabularMdp, TabularPolicy};

/// Draws an index from a probability vector.
pub fn sample_policy_action(probs: &[f64], rng: &mut impl rand::Rng) -> usize {
    mdp::sample_index(rng, probs)
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid maze: {0}")]
    InvalidMaze(String),
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("linear system for policy evaluation is singular")]
    SingularSystem,
    #[error("no path from start to goal")]
    Unsolvable,
    #[error("action {0:?} is not valid for this environment")]
    BadAction(Action),
}

/// Observation handed to agents. Every environment here has enumerable states,
/// so `Id` is the common case; `Features` is used when a dataset stores raw
/// feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    Id(usize),
    Features(Vec<f64>),
}

impl State {
    pub fn id(&self) -> Option<usize> {
        match self {
            State::Id(i) => Some(*i),
            State::Features(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Id(usize),
    Vector(Vec<f64>),
}

impl Action {
    pub fn id(&self) -> Option<usize> {
        match self {
            Action::Id(i) => Some(*i),
            Action::Vector(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box [-1, 1]^d.
    Continuous(usize),
}

impl ActionSpace {
    /// Dimension used for the default entropy target: 1 for discrete sets.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous(d) => *d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    /// Environment terminal: no bootstrapping past this step.
    pub done: bool,
    /// Time-limit cut: bootstrapping continues through it.
    pub truncated: bool,
}

pub trait EpisodicEnv {
    /// Starts a new episode; the whole episode is a deterministic function of `seed`
    /// and the actions taken.
    fn reset(&mut self, seed: u64) -> State;
    fn step(&mut self, action: &Action) -> Result<EpisodeStep, EnvError>;
    fn action_space(&self) -> ActionSpace;
    fn n_states(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn features(&self, state: usize) -> Vec<f64>;
    /// Whether `state` counts as reaching the goal (used for scoring).
    fn is_success(&self, step: &EpisodeStep) -> bool {
        step.done && step.reward > 0.0
    }
}
