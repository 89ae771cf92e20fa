//! Exact-expectation agent over `Q(s, a)` tables.
//!
//! The critic minimises, per batch state `s` with total weight `c(s)`,
//! `(1/c(s)) sum_i w_i [alpha (sum_a pi(a|s) max(Q(s,a), ref_i) - Q(s,a_i)) + 0.5 (Q(s,a_i) - y_i)^2]`
//! by one gradient step of size `critic_lr`. When every state carries a
//! single dataset action this is the damped update
//! `Q <- (1 - eta) Q + eta (y - alpha * dR/dQ)`.

use super::{
    dual_alpha_update, Agent, AgentConfig, AgentError, CqlMode, Phase, ReferenceValues, UpdateStats,
};
use crate::data::Transition;
use crate::env::{sample_policy_action, Action, State, TabularPolicy};
use crate::nn::{read_tensors, softmax, write_tensors, Tensor};
use crate::replay::Batch;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LOG_TEMP_MIN: f64 = -18.42; // ~1e-8
const LOG_TEMP_MAX: f64 = 9.21; // ~1e4

#[derive(Clone, Debug, PartialEq)]
pub struct TabularCritic {
    pub q: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl TabularCritic {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        TabularCritic { q: vec![vec![0.0; n_actions]; n_states], target: vec![vec![0.0; n_actions]; n_states] }
    }

    /// `target <- (1 - tau) target + tau q`.
    pub fn polyak(&mut self, tau: f64) {
        for (t, q) in self.target.iter_mut().zip(&self.q) {
            for (a, b) in t.iter_mut().zip(q) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }
}

/// Softmax policy over table logits with a learned temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularSoftmaxActor {
    pub logits: Vec<Vec<f64>>,
    pub log_temperature: f64,
}

impl TabularSoftmaxActor {
    pub fn uniform(n_states: usize, n_actions: usize, temperature: f64) -> Self {
        TabularSoftmaxActor { logits: vec![vec![0.0; n_actions]; n_states], log_temperature: temperature.ln() }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        softmax(&self.logits[s])
    }

    pub fn policy(&self) -> TabularPolicy {
        (0..self.logits.len()).map(|s| self.probs(s)).collect()
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn ids(t: &Transition) -> Result<(usize, usize, usize), AgentError> {
    match (t.s.id(), t.a.id(), t.s_next.id()) {
        (Some(s), Some(a), Some(s2)) => Ok((s, a, s2)),
        _ => Err(AgentError::BadItem("tabular agents need integer states and actions".into())),
    }
}

/// `E[max of k iid draws]` of `values` under `probs`, via the CDF of the sorted values.
pub fn expected_max_of_draws(values: &[f64], probs: &[f64], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut cdf = 0.0f64;
    let mut prev = 0.0f64;
    let mut out = 0.0;
    for i in order {
        if probs[i] == 0.0 {
            continue;
        }
        cdf = (cdf + probs[i]).min(1.0);
        let now = cdf.powi(k as i32);
        out += values[i] * (now - prev);
        prev = now;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backup {
    /// `sum_a pi(a|s') Qbar(s', a)`, plus `temperature * H(pi(s'))` when given.
    Expected { entropy_temperature: Option<f64> },
    /// Expected maximum over `k` policy draws.
    MaxOfDraws(usize),
}

/// `y = r + gamma (1 - done) T(s')` for every batch item. Truncated items bootstrap.
pub fn td_targets(target_q: &[Vec<f64>], policy: &TabularPolicy, batch: &Batch, gamma: f64, backup: Backup) -> Result<Vec<f64>, AgentError> {
    batch
        .items
        .iter()
        .map(|t| {
            let (_, _, s2) = ids(t)?;
            if t.done {
                return Ok(t.r);
            }
            let (qn, pn) = (&target_q[s2], &policy[s2]);
            let next = match backup {
                Backup::Expected { entropy_temperature } => {
                    let v: f64 = pn.iter().zip(qn).map(|(p, q)| p * q).sum();
                    v + entropy_temperature.map_or(0.0, |temp| temp * entropy(pn))
                }
                Backup::MaxOfDraws(k) => expected_max_of_draws(qn, pn, k),
            };
            Ok(t.r + gamma * next)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerOut {
    /// `policy_term - data_term`.
    pub value: f64,
    /// Weighted mean of `sum_a pi(a|s) max(Q(s,a), ref)`.
    pub policy_term: f64,
    /// Weighted mean of `Q(s, a_data)`.
    pub data_term: f64,
    /// pi-weighted fraction of evaluations where the reference exceeded `Q`.
    pub bounding_rate: f64,
}

/// Exact regularizer with per-item, per-action references `refs[i][a]`.
pub fn calibrated_regularizer(q: &[Vec<f64>], policy: &TabularPolicy, batch: &Batch, refs: &[Vec<f64>]) -> Result<RegularizerOut, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut out = RegularizerOut::default();
    let mut wsum = 0.0;
    for (i, t) in batch.items.iter().enumerate() {
        let (s, a, _) = ids(t)?;
        let w = batch.weight(i);
        let mut pol = 0.0;
        let mut bound = 0.0;
        for (b, p) in policy[s].iter().enumerate() {
            let r = refs[i][b];
            pol += p * q[s][b].max(r);
            if r > q[s][b] {
                bound += p;
            }
        }
        out.policy_term += w * pol;
        out.data_term += w * q[s][a];
        out.bounding_rate += w * bound;
        wsum += w;
    }
    out.policy_term /= wsum;
    out.data_term /= wsum;
    out.bounding_rate /= wsum;
    out.value = out.policy_term - out.data_term;
    Ok(out)
}

pub fn cql_regularizer(q: &[Vec<f64>], policy: &TabularPolicy, batch: &Batch) -> Result<RegularizerOut, AgentError> {
    let n_actions = q.first().map_or(0, Vec::len);
    calibrated_regularizer(q, policy, batch, &vec![vec![f64::NEG_INFINITY; n_actions]; batch.len()])
}

/// Reference lookups for every batch item and action.
pub fn reference_table(batch: &Batch, reference: &ReferenceValues, n_actions: usize) -> Result<Vec<Vec<f64>>, AgentError> {
    batch
        .items
        .iter()
        .map(|t| (0..n_actions).map(|a| reference.lookup(t, &Action::Id(a))).collect())
        .collect()
}

/// One step on the per-state normalised objective described in the module
/// docs, then a polyak move of the target table. Returns the TD loss.
#[allow(clippy::too_many_arguments)]
pub fn critic_step(
    critic: &mut TabularCritic,
    policy: &TabularPolicy,
    batch: &Batch,
    targets: &[f64],
    alpha: f64,
    refs: Option<&[Vec<f64>]>,
    step: f64,
    tau: f64,
) -> Result<f64, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let n_states = critic.q.len();
    let n_actions = critic.q[0].len();
    let mut weight = vec![0.0; n_states];
    for (i, t) in batch.items.iter().enumerate() {
        weight[ids(t)?.0] += batch.weight(i);
    }
    let mut grad = vec![vec![0.0; n_actions]; n_states];
    let mut td = 0.0;
    let mut wsum = 0.0;
    for (i, t) in batch.items.iter().enumerate() {
        let (s, a, _) = ids(t)?;
        let w = batch.weight(i);
        let c = w / weight[s];
        let err = critic.q[s][a] - targets[i];
        td += w * 0.5 * err * err;
        wsum += w;
        grad[s][a] += c * err;
        if alpha > 0.0 {
            for b in 0..n_actions {
                let unmasked = refs.is_none_or(|r| critic.q[s][b] >= r[i][b]);
                if unmasked {
                    grad[s][b] += alpha * c * policy[s][b];
                }
            }
            grad[s][a] -= alpha * c;
        }
    }
    for s in 0..n_states {
        if weight[s] > 0.0 {
            for b in 0..n_actions {
                critic.q[s][b] -= step * grad[s][b];
            }
        }
    }
    critic.polyak(tau);
    Ok(td / wsum)
}

/// Mirror-descent step toward the soft-greedy policy at every batch state,
/// `logits <- (1 - step) logits + step Q / temperature`, then a dual step on
/// the temperature toward `target_entropy`. Returns (actor loss, mean entropy).
pub fn actor_step(
    actor: &mut TabularSoftmaxActor,
    q: &[Vec<f64>],
    batch: &Batch,
    step: f64,
    target_entropy: f64,
    temperature_lr: f64,
) -> Result<(f64, f64), AgentError> {
    let mut seen = vec![false; q.len()];
    for t in &batch.items {
        seen[ids(t)?.0] = true;
    }
    let temp = actor.temperature();
    for (s, _) in seen.iter().enumerate().filter(|(_, v)| **v) {
        for (l, qv) in actor.logits[s].iter_mut().zip(&q[s]) {
            *l = (1.0 - step) * *l + step * qv / temp;
        }
    }
    let mut ent = 0.0;
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for t in &batch.items {
        let s = t.s.id().unwrap();
        let p = actor.probs(s);
        ent += entropy(&p) / n;
        loss += p.iter().zip(&q[s]).filter(|(x, _)| **x > 0.0).map(|(x, qv)| x * (temp * x.ln() - qv)).sum::<f64>() / n;
    }
    actor.log_temperature = (actor.log_temperature - temperature_lr * (ent - target_entropy)).clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);
    Ok((loss, ent))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularAgent {
    pub cfg: AgentConfig,
    pub critic: TabularCritic,
    pub actor: TabularSoftmaxActor,
    pub log_alpha: f64,
    pub n_states: usize,
    pub n_actions: usize,
    steps: u64,
}

impl TabularAgent {
    pub fn new(cfg: AgentConfig, n_states: usize, n_actions: usize) -> Result<Self, AgentError> {
        cfg.validate()?;
        if n_states == 0 || n_actions == 0 {
            return Err(AgentError::Config("tabular agent needs at least one state and action".into()));
        }
        let log_alpha = cfg.alpha.offline.max(super::ALPHA_MIN).ln();
        Ok(TabularAgent {
            critic: TabularCritic::zeros(n_states, n_actions),
            actor: TabularSoftmaxActor::uniform(n_states, n_actions, cfg.init_temperature),
            cfg,
            log_alpha,
            n_states,
            n_actions,
            steps: 0,
        })
    }

    pub fn policy(&self) -> TabularPolicy {
        self.actor.policy()
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-1.0)
    }

    pub fn current_alpha(&self, phase: Phase) -> f64 {
        match self.cfg.cql_mode {
            CqlMode::Dual { .. } if self.cfg.kind.conservative() => self.log_alpha.exp(),
            _ => self.cfg.alpha_for(phase),
        }
    }

    fn backup(&self) -> Backup {
        if self.cfg.max_backup {
            Backup::MaxOfDraws(self.cfg.n_sampled_actions)
        } else {
            Backup::Expected { entropy_temperature: self.cfg.backup_entropy.then(|| self.actor.temperature()) }
        }
    }

    pub fn load(dir: &Path, cfg: AgentConfig) -> Result<Self, AgentError> {
        let manifest = super::read_manifest(&std::fs::read_to_string(dir.join("agent.manifest"))?);
        let t = read_tensors(&dir.join("tables.bin"))?;
        if t.len() != 3 {
            return Err(AgentError::Config("tabular checkpoint must hold three tables".into()));
        }
        let (ns, na) = (t[0].rows(), t[0].cols());
        let table = |x: &Tensor| (0..ns).map(|r| x.row(r).to_vec()).collect::<Vec<_>>();
        let num = |k: &str| -> Result<f64, AgentError> {
            manifest
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AgentError::Config(format!("checkpoint manifest lacks {k}")))
        };
        let mut agent = TabularAgent::new(cfg, ns, na)?;
        agent.critic = TabularCritic { q: table(&t[0]), target: table(&t[1]) };
        agent.actor.logits = table(&t[2]);
        agent.actor.log_temperature = num("log_temperature")?;
        agent.log_alpha = num("log_alpha")?;
        agent.steps = num("step")? as u64;
        Ok(agent)
    }
}

fn to_tensor(t: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(t)
}

impl Agent for TabularAgent {
    fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    fn act(&self, s: &State, greedy: bool, rng: &mut ChaCha8Rng) -> Action {
        let p = self.actor.probs(s.id().expect("tabular agent needs state ids"));
        if greedy {
            let best = p.iter().enumerate().fold(0, |b, (i, x)| if *x > p[b] { i } else { b });
            Action::Id(best)
        } else {
            Action::Id(sample_policy_action(&p, rng))
        }
    }

    fn update(&mut self, batch: &Batch, phase: Phase, reference: &ReferenceValues, _rng: &mut ChaCha8Rng) -> Result<UpdateStats, AgentError> {
        let policy = self.policy();
        let alpha = self.current_alpha(phase);
        let refs = if self.cfg.kind.calibrated() { Some(reference_table(batch, reference, self.n_actions)?) } else { None };
        let targets = td_targets(&self.critic.target, &policy, batch, self.cfg.gamma, self.backup())?;
        let reg = match &refs {
            Some(r) => calibrated_regularizer(&self.critic.q, &policy, batch, r)?,
            None => cql_regularizer(&self.critic.q, &policy, batch)?,
        };
        let td_loss = critic_step(&mut self.critic, &policy, batch, &targets, alpha, refs.as_deref(), self.cfg.critic_lr, self.cfg.tau)?;
        if let CqlMode::Dual { target_action_gap, lr } = self.cfg.cql_mode {
            if self.cfg.kind.conservative() {
                self.log_alpha = dual_alpha_update(self.log_alpha, reg.value, target_action_gap, lr);
            }
        }
        let target_entropy = self.target_entropy();
        let (actor_loss, ent) = actor_step(&mut self.actor, &self.critic.q, batch, self.cfg.actor_lr, target_entropy, self.cfg.temperature_lr)?;
        self.steps += 1;
        if !self.is_finite() {
            return Err(AgentError::NonFinite(format!("tabular agent at step {}", self.steps)));
        }
        Ok(UpdateStats {
            td_loss,
            regularizer: reg.value,
            bounding_rate: if refs.is_some() { reg.bounding_rate } else { 0.0 },
            alpha,
            actor_loss,
            entropy: ent,
            temperature: self.actor.temperature(),
        })
    }

    fn q_value(&self, s: &State, a: &Action) -> f64 {
        self.critic.q[s.id().expect("state id")][a.id().expect("action id")]
    }

    fn policy_value(&self, s: &State, _rng: &mut ChaCha8Rng) -> f64 {
        let s = s.id().expect("state id");
        self.actor.probs(s).iter().zip(&self.critic.q[s]).map(|(p, q)| p * q).sum()
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn is_finite(&self) -> bool {
        let ok = |t: &Vec<Vec<f64>>| t.iter().flatten().all(|x| x.is_finite());
        ok(&self.critic.q) && ok(&self.critic.target) && ok(&self.actor.logits) && self.log_alpha.is_finite()
    }

    fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir)?;
        write_tensors(&dir.join("tables.bin"), &[&to_tensor(&self.critic.q), &to_tensor(&self.critic.target), &to_tensor(&self.actor.logits)])?;
        let extra = [
            ("form", "tabular".to_string()),
            ("log_temperature", format!("{:?}", self.actor.log_temperature)),
            ("log_alpha", format!("{:?}", self.log_alpha)),
        ];
        std::fs::write(dir.join("agent.manifest"), self.cfg.manifest(self.steps, &extra))?;
        Ok(())
    }
}
