//! Evaluation diagnostics: scores, regret, dataset Q-values and dip detection.

use crate::agents::Phase;
use crate::data::OfflineDataset;
use crate::env::{Action, State};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub phase: String,
    pub normalized_score: f64,
    pub avg_dataset_q: f64,
    pub bounding_rate: f64,
    pub cum_regret_metric: f64,
    /// Mean over reliable dataset transitions of `E_{a~pi}[Q(s, a)]`.
    pub dataset_policy_value: f64,
    /// Mean return-to-go over the same transitions.
    pub dataset_reference_value: f64,
}

impl RunRecord {
    pub fn phase(&self) -> Phase {
        if self.phase == "online" {
            Phase::Online
        } else {
            Phase::Offline
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    /// Sparse goal-reaching tasks.
    Goals { reached: usize, episodes: usize },
    /// Tasks made of several subtasks.
    Subtasks { solved: usize, total: usize },
}

pub fn normalized_score(outcome: Outcome) -> f64 {
    let (num, den) = match outcome {
        Outcome::Goals { reached, episodes } => (reached, episodes),
        Outcome::Subtasks { solved, total } => (solved, total),
    };
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean of `1 - score` over evaluation points: 1.0 is the worst value.
pub fn cumulative_regret_metric(scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Precondition("score series is empty".into()));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(MetricsError::Precondition("scores must lie in [0, 1]".into()));
    }
    Ok(scores.iter().map(|s| 1.0 - s).sum::<f64>() / scores.len() as f64)
}

/// Mean `Q(s, a)` over a seeded subsample of dataset pairs (all pairs when
/// `sample_size >= len`).
pub fn avg_dataset_q(q: &dyn Fn(&State, &Action) -> f64, ds: &OfflineDataset, sample_size: usize, seed: u64) -> Result<f64, MetricsError> {
    if ds.is_empty() {
        return Err(MetricsError::Precondition("dataset is empty".into()));
    }
    let n = ds.len();
    let total: f64 = if sample_size >= n {
        ds.transitions.iter().map(|t| q(&t.s, &t.a)).sum::<f64>() / n as f64
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, n, sample_size.max(1));
        let k = idx.len();
        idx.into_iter().map(|i| q(&ds.transitions[i].s, &ds.transitions[i].a)).sum::<f64>() / k as f64
    };
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dip {
    pub dip: bool,
    /// `offline_final_score - min(first window)`, floored at 0.
    pub depth: f64,
    /// Step of the first evaluation that regains the offline score after the minimum.
    pub recovery_step: Option<u64>,
}

/// Flags a dip when the minimum over the first `window` online evaluations
/// falls below `offline_final_score - tolerance`.
pub fn detect_unlearning_dip(series: &[(u64, f64)], offline_final_score: f64, window: usize, tolerance: f64) -> Result<Dip, MetricsError> {
    if window == 0 || series.len() < window {
        return Err(MetricsError::Precondition(format!("need at least {window} online evaluations, got {}", series.len())));
    }
    let (argmin, min) = series[..window]
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, (_, v))| if *v < bv { (i, *v) } else { (bi, bv) });
    let depth = (offline_final_score - min).max(0.0);
    let recovery_step = series[argmin..].iter().find(|(_, v)| *v >= offline_final_score).map(|(s, _)| *s);
    Ok(Dip { dip: min < offline_final_score - tolerance, depth, recovery_step })
}
