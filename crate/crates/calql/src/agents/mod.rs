//! SAC, CQL and Cal-QL agents over exact tables and small networks.

mod neural;
mod tabular;

pub use neural::NeuralAgent;
pub use tabular::{
    actor_step, calibrated_regularizer, cql_regularizer, critic_step, expected_max_of_draws, td_targets, Backup,
    RegularizerOut, TabularAgent, TabularCritic, TabularSoftmaxActor,
};

use crate::data::{FittedReference, Transition};
use crate::env::{Action, State};
use crate::nn::NnError;
use crate::replay::Batch;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("no reference value for state {0:?}")]
    MissingReference(State),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch item does not fit this agent: {0}")]
    BadItem(String),
    #[error("non-finite value after update: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Sac,
    /// SAC trained on the pooled offline and online buffers.
    SacOffline,
    Cql,
    CalQl,
}

impl AgentKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sac" => Some(AgentKind::Sac),
            "sac+offline" => Some(AgentKind::SacOffline),
            "cql" => Some(AgentKind::Cql),
            "calql" => Some(AgentKind::CalQl),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Sac => "sac",
            AgentKind::SacOffline => "sac+offline",
            AgentKind::Cql => "cql",
            AgentKind::CalQl => "calql",
        }
    }

    pub fn conservative(&self) -> bool {
        matches!(self, AgentKind::Cql | AgentKind::CalQl)
    }

    pub fn calibrated(&self) -> bool {
        matches!(self, AgentKind::CalQl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// Conservatism weight, optionally different in the two phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaConfig {
    pub offline: f64,
    pub online: f64,
}

impl AlphaConfig {
    pub fn single(alpha: f64) -> Result<Self, AgentError> {
        Self::pair(alpha, alpha)
    }

    pub fn pair(offline: f64, online: f64) -> Result<Self, AgentError> {
        if !(offline >= 0.0 && online >= 0.0 && offline.is_finite() && online.is_finite()) {
            return Err(AgentError::Config(format!("alpha must be finite and nonnegative, got ({offline}, {online})")));
        }
        Ok(AlphaConfig { offline, online })
    }
}

pub fn phase_alpha(cfg: &AlphaConfig, phase: Phase) -> f64 {
    match phase {
        Phase::Offline => cfg.offline,
        Phase::Online => cfg.online,
    }
}

pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CqlMode {
    Direct,
    /// Lagrangian form: `log alpha` follows the sign of `observed_gap - target_action_gap`.
    Dual { target_action_gap: f64, lr: f64 },
}

/// One dual ascent step on `log alpha`; the result is clipped to `[1e-6, 1e6]`.
pub fn dual_alpha_update(log_alpha: f64, observed_gap: f64, target_action_gap: f64, lr: f64) -> f64 {
    let next = log_alpha + lr * (observed_gap - target_action_gap);
    next.clamp(ALPHA_MIN.ln(), ALPHA_MAX.ln())
}

/// Source of the calibration reference used by Cal-QL's mask.
#[derive(Clone, Debug)]
pub enum ReferenceValues {
    /// No mask: every lookup is `-inf`, which makes `max(Q, ref) = Q`.
    Disabled,
    /// Return-to-go of the batch transition, broadcast over actions.
    /// With `skip_unreliable`, transitions whose return was cut short are not masked.
    McReturn { skip_unreliable: bool },
    /// Fitted behavior-policy estimate: per pair when known, else the state value.
    Fitted(Arc<FittedReference>),
}

impl ReferenceValues {
    pub fn is_disabled(&self) -> bool {
        matches!(self, ReferenceValues::Disabled)
    }

    pub fn source(&self) -> &'static str {
        match self {
            ReferenceValues::Disabled => "disabled",
            ReferenceValues::McReturn { .. } => "mc",
            ReferenceValues::Fitted(_) => "fitted",
        }
    }

    pub fn lookup(&self, t: &Transition, a: &Action) -> Result<f64, AgentError> {
        match self {
            ReferenceValues::Disabled => Ok(f64::NEG_INFINITY),
            ReferenceValues::McReturn { skip_unreliable } => {
                if *skip_unreliable && t.mc_unreliable {
                    Ok(f64::NEG_INFINITY)
                } else {
                    Ok(t.mc_return)
                }
            }
            ReferenceValues::Fitted(f) => f
                .value(&t.s, a)
                .or_else(|| t.s.id().and_then(|s| f.state_value(s)))
                .ok_or_else(|| AgentError::MissingReference(t.s.clone())),
        }
    }
}

/// Shared hyperparameters. Table-only and network-only knobs are ignored by the other form.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    pub alpha: AlphaConfig,
    pub cql_mode: CqlMode,
    /// Sampled actions for the regularizer and the max-backup.
    pub n_sampled_actions: usize,
    pub max_backup: bool,
    /// Adds the entropy bonus to the bootstrapped value.
    pub backup_entropy: bool,
    pub tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub temperature_lr: f64,
    pub init_temperature: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub hidden: Vec<usize>,
}

impl AgentConfig {
    pub fn new(kind: AgentKind, alpha: AlphaConfig) -> Self {
        AgentConfig {
            kind,
            gamma: 0.99,
            alpha,
            cql_mode: CqlMode::Direct,
            n_sampled_actions: 10,
            max_backup: false,
            backup_entropy: false,
            tau: 5e-3,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            temperature_lr: 3e-4,
            init_temperature: 1.0,
            target_entropy: None,
            hidden: vec![64, 64],
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        AlphaConfig::pair(self.alpha.offline, self.alpha.online)?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AgentError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(AgentError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.n_sampled_actions == 0 {
            return Err(AgentError::Config("n_sampled_actions must be at least 1".into()));
        }
        if self.init_temperature <= 0.0 {
            return Err(AgentError::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Effective conservatism weight for a phase: zero for the SAC kinds.
    pub fn alpha_for(&self, phase: Phase) -> f64 {
        if self.kind.conservative() {
            phase_alpha(&self.alpha, phase)
        } else {
            0.0
        }
    }

    pub fn manifest(&self, step: u64, extra: &[(&str, String)]) -> String {
        let mut lines = vec![
            format!("kind {}", self.kind.as_str()),
            format!("gamma {:?}", self.gamma),
            format!("alpha_offline {:?}", self.alpha.offline),
            format!("alpha_online {:?}", self.alpha.online),
            match self.cql_mode {
                CqlMode::Direct => "cql_mode direct".to_string(),
                CqlMode::Dual { target_action_gap, lr } => format!("cql_mode dual {target_action_gap:?} {lr:?}"),
            },
            format!("n_sampled_actions {}", self.n_sampled_actions),
            format!("max_backup {}", self.max_backup),
            format!("backup_entropy {}", self.backup_entropy),
            format!("tau {:?}", self.tau),
            format!("step {step}"),
        ];
        for (k, v) in extra {
            lines.push(format!("{k} {v}"));
        }
        lines.join("\n") + "\n"
    }
}

/// Reads `key value` lines written by [`AgentConfig::manifest`].
pub fn read_manifest(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub td_loss: f64,
    pub regularizer: f64,
    pub bounding_rate: f64,
    pub alpha: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub temperature: f64,
}

pub trait Agent {
    fn config(&self) -> &AgentConfig;
    fn act(&self, s: &State, greedy: bool, rng: &mut ChaCha8Rng) -> Action;
    /// One critic step followed by one actor step.
    fn update(&mut self, batch: &Batch, phase: Phase, reference: &ReferenceValues, rng: &mut ChaCha8Rng) -> Result<UpdateStats, AgentError>;
    fn q_value(&self, s: &State, a: &Action) -> f64;
    /// `E_{a ~ pi}[Q(s, a)]`; sampled for continuous actions.
    fn policy_value(&self, s: &State, rng: &mut ChaCha8Rng) -> f64;
    fn steps(&self) -> u64;
    fn is_finite(&self) -> bool;
    fn save(&self, dir: &Path) -> Result<(), AgentError>;
}
