//! Experiment driver: offline pre-training, online fine-tuning, seeded RNG
//! streams, JSON-lines run logs and plot-data export.

mod config;
mod plot;

pub use config::{
    parse_pairs, parse_seeds, AgentForm, BehaviorKind, ConfigError, DataSource, EnvSpec, ExperimentConfig, ReferenceMode,
};
pub use plot::{emit_plot_data, emit_regret_plot_data, write_plot_data, PlotBundle, PlotRow};

use crate::agents::{Agent, AgentError, NeuralAgent, Phase, ReferenceValues, TabularAgent, UpdateStats};
use crate::data::{
    fit_reference_q, generate_dataset, load_dataset_csv, mc_from_rewards, DataError, OfflineDataset, ReferenceFamily,
    TabularBehavior, Transition, UniformRandom,
};
use crate::env::{scripted_controller, EnvError, EpisodicEnv, MazeEnv, State};
use crate::metrics::{avg_dataset_q, cumulative_regret_metric, normalized_score, MetricsError, Outcome, RunRecord};
use crate::replay::{MixedReplayBuffer, MixingRatio, ReplayError, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("run log: {0}")]
    Log(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Independent random streams split from one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    AgentInit = 2,
    Sampling = 3,
    Eval = 4,
    Data = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Loss scalars averaged over the updates since the previous train record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub update: u64,
    pub phase: String,
    pub td_loss: f64,
    pub regularizer: f64,
    pub alpha: f64,
    pub bounding_rate: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub offline_updates: u64,
    pub online_updates: u64,
    pub online_env_steps: u64,
    pub online_episodes: u64,
    pub utd: usize,
    pub offline_samples: u64,
    pub online_samples: u64,
    pub dataset_size: usize,
    pub dataset_mean_mc_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Header { config_hash: String, seed: u64, code_version: String, config: String },
    Eval(RunRecord),
    Train(TrainRecord),
    Summary(RunSummary),
}

impl LogEntry {
    fn step(&self) -> Option<u64> {
        match self {
            LogEntry::Eval(r) => Some(r.step),
            LogEntry::Train(t) => Some(t.step),
            _ => None,
        }
    }
}

/// Append-only JSON-lines log; the header is always the first line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    entries: Vec<LogEntry>,
    text: String,
}

impl RunLog {
    pub fn new(config_hash: &str, seed: u64, config: &str) -> Self {
        let mut log = RunLog { entries: Vec::new(), text: String::new() };
        log.append(LogEntry::Header {
            config_hash: config_hash.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.to_string(),
        });
        log
    }

    fn append(&mut self, e: LogEntry) {
        self.text.push_str(&serde_json::to_string(&e).expect("log entries serialize"));
        self.text.push('\n');
        self.entries.push(e);
    }

    fn last_step(&self) -> Option<u64> {
        self.entries.iter().rev().find_map(LogEntry::step)
    }

    /// Appends a record; steps never decrease and evaluation steps strictly increase.
    pub fn push(&mut self, e: LogEntry) -> Result<(), HarnessError> {
        if matches!(e, LogEntry::Header { .. }) {
            return Err(HarnessError::Log("header already written".into()));
        }
        if let (Some(s), Some(last)) = (e.step(), self.last_step()) {
            if s < last {
                return Err(HarnessError::Log(format!("step {s} after {last}")));
            }
        }
        if let LogEntry::Eval(r) = &e {
            if let Some(prev) = self.records().last() {
                if r.step <= prev.step {
                    return Err(HarnessError::Log(format!("evaluation step {} does not increase", r.step)));
                }
            }
        }
        self.append(e);
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn seed(&self) -> u64 {
        match &self.entries[0] {
            LogEntry::Header { seed, .. } => *seed,
            _ => unreachable!("first entry is the header"),
        }
    }

    pub fn records(&self) -> Vec<&RunRecord> {
        self.entries.iter().filter_map(|e| if let LogEntry::Eval(r) = e { Some(r) } else { None }).collect()
    }

    pub fn train_records(&self) -> Vec<&TrainRecord> {
        self.entries.iter().filter_map(|e| if let LogEntry::Train(r) = e { Some(r) } else { None }).collect()
    }

    pub fn summary(&self) -> Option<&RunSummary> {
        self.entries.iter().find_map(|e| if let LogEntry::Summary(s) = e { Some(s) } else { None })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Hex SHA-256 of the serialized log.
    pub fn hash(&self) -> String {
        config::hex(&Sha256::digest(self.text.as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            entries.push(serde_json::from_str::<LogEntry>(line)?);
        }
        if !matches!(entries.first(), Some(LogEntry::Header { .. })) {
            return Err(HarnessError::Log("missing header".into()));
        }
        let mut log = RunLog { entries: vec![entries[0].clone()], text: String::new() };
        log.text = text.lines().next().unwrap_or_default().to_string() + "\n";
        for e in entries.into_iter().skip(1) {
            log.push(e)?;
        }
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

#[derive(Default)]
struct StatsWindow {
    sum: UpdateStats,
    n: u64,
    bounding_sum: f64,
    bounding_n: u64,
}

impl StatsWindow {
    fn add(&mut self, s: &UpdateStats) {
        self.sum.td_loss += s.td_loss;
        self.sum.regularizer += s.regularizer;
        self.sum.bounding_rate += s.bounding_rate;
        self.sum.alpha += s.alpha;
        self.sum.actor_loss += s.actor_loss;
        self.sum.entropy += s.entropy;
        self.sum.temperature += s.temperature;
        self.n += 1;
        self.bounding_sum += s.bounding_rate;
        self.bounding_n += 1;
    }

    fn take_train(&mut self, step: u64, update: u64, phase: Phase) -> TrainRecord {
        let n = self.n.max(1) as f64;
        let s = std::mem::take(&mut self.sum);
        self.n = 0;
        TrainRecord {
            step,
            update,
            phase: phase.as_str().into(),
            td_loss: s.td_loss / n,
            regularizer: s.regularizer / n,
            alpha: s.alpha / n,
            bounding_rate: s.bounding_rate / n,
            actor_loss: s.actor_loss / n,
            entropy: s.entropy / n,
            temperature: s.temperature / n,
        }
    }

    fn take_bounding(&mut self) -> f64 {
        let r = if self.bounding_n == 0 { 0.0 } else { self.bounding_sum / self.bounding_n as f64 };
        self.bounding_sum = 0.0;
        self.bounding_n = 0;
        r
    }
}

/// State of one (config, seed) run.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub env: MazeEnv,
    pub dataset: Arc<OfflineDataset>,
    pub agent: Box<dyn Agent>,
    pub reference: ReferenceValues,
    pub buffer: MixedReplayBuffer,
    pub log: RunLog,
    pub summary: RunSummary,
    sampling: ChaCha8Rng,
    env_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    window: StatsWindow,
    phase_scores: Vec<f64>,
    updates: u64,
}

/// Builds or loads the offline dataset for `seed` from the data stream.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<OfflineDataset, HarnessError> {
    let gamma = cfg.agent.gamma;
    match &cfg.data {
        DataSource::Path(p) => Ok(load_dataset_csv(p, gamma, cfg.composition)?),
        DataSource::Generate { behavior, epsilon, trajectories, uniform_start } => {
            let maze = if *uniform_start { cfg.env.maze_with_uniform_start()? } else { cfg.env.maze()? };
            let mut env = MazeEnv::new(maze, cfg.env.continuous, cfg.env.features)?;
            let data_seed = stream_rng(seed, Stream::Data).gen();
            let ds = match behavior {
                BehaviorKind::Scripted => {
                    let mut b = TabularBehavior::new(scripted_controller(&env.maze)?, *epsilon, cfg.env.continuous, "scripted");
                    generate_dataset(&mut env, &mut b, *trajectories, data_seed, gamma, cfg.composition)?
                }
                BehaviorKind::Random => {
                    let mut b = UniformRandom { space: env.action_space() };
                    generate_dataset(&mut env, &mut b, *trajectories, data_seed, gamma, cfg.composition)?
                }
            };
            Ok(ds)
        }
    }
}

fn make_agent(cfg: &ExperimentConfig, env: &MazeEnv, seed: u64) -> Result<Box<dyn Agent>, HarnessError> {
    let space = env.action_space();
    Ok(match cfg.form {
        AgentForm::Tabular => {
            let n_actions = match space {
                crate::env::ActionSpace::Discrete(n) => n,
                crate::env::ActionSpace::Continuous(_) => {
                    return Err(ConfigError::Invalid("tabular agents need discrete actions".into()).into())
                }
            };
            Box::new(TabularAgent::new(cfg.agent.clone(), env.n_states(), n_actions)?)
        }
        AgentForm::Network => {
            let features: Vec<Vec<f64>> = (0..env.n_states()).map(|s| env.features(s)).collect();
            let mut rng = stream_rng(seed, Stream::AgentInit);
            Box::new(NeuralAgent::new(cfg.agent.clone(), space, Arc::new(features), &mut rng)?)
        }
    })
}

fn make_reference(cfg: &ExperimentConfig, ds: &OfflineDataset, env: &MazeEnv, seed: u64) -> Result<ReferenceValues, HarnessError> {
    Ok(match &cfg.reference {
        ReferenceMode::Disabled => ReferenceValues::Disabled,
        ReferenceMode::Mc { skip_unreliable } => ReferenceValues::McReturn { skip_unreliable: *skip_unreliable },
        ReferenceMode::Fitted(family) => {
            let family = match family.clone() {
                ReferenceFamily::NetworkRegression { hidden, steps, lr, .. } => ReferenceFamily::NetworkRegression { hidden, steps, lr, seed },
                ReferenceFamily::NetworkSarsa { hidden, steps, lr, .. } => ReferenceFamily::NetworkSarsa { hidden, steps, lr, seed },
                f => f,
            };
            let n_actions = match env.action_space() {
                crate::env::ActionSpace::Discrete(n) => n,
                crate::env::ActionSpace::Continuous(d) => d,
            };
            ReferenceValues::Fitted(Arc::new(fit_reference_q(ds, &family, env.n_states(), n_actions)?))
        }
    })
}

impl Run {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let env = MazeEnv::new(cfg.env.maze()?, cfg.env.continuous, cfg.env.features)?;
        let dataset = Arc::new(build_dataset(cfg, seed)?);
        let agent = make_agent(cfg, &env, seed)?;
        let reference = make_reference(cfg, &dataset, &env, seed)?;
        let buffer = MixedReplayBuffer::new(dataset.clone(), cfg.online_capacity, cfg.mixing_ratio)?;
        let summary = RunSummary {
            utd: cfg.utd,
            dataset_size: dataset.len(),
            dataset_mean_mc_return: if dataset.is_empty() { 0.0 } else { dataset.mean_mc_return() },
            ..Default::default()
        };
        Ok(Run {
            log: RunLog::new(&cfg.hash(), seed, &cfg.canonical),
            cfg: cfg.clone(),
            seed,
            env,
            dataset,
            agent,
            reference,
            buffer,
            summary,
            sampling: stream_rng(seed, Stream::Sampling),
            env_rng: stream_rng(seed, Stream::Env),
            eval_rng: stream_rng(seed, Stream::Eval),
            window: StatsWindow::default(),
            phase_scores: Vec::new(),
            updates: 0,
        })
    }

    /// Greedy (or sampled) rollouts from the task's start distribution.
    pub fn evaluate_score(&mut self) -> Result<f64, HarnessError> {
        let mut env = self.env.clone();
        let mut reached = 0;
        for _ in 0..self.cfg.eval_episodes {
            let mut s = env.reset(self.eval_rng.gen());
            loop {
                let a = self.agent.act(&s, self.cfg.eval_greedy, &mut self.eval_rng);
                let st = env.step(&a)?;
                if env.is_success(&st) {
                    reached += 1;
                }
                if st.done || st.truncated {
                    break;
                }
                s = st.next_state;
            }
        }
        Ok(normalized_score(Outcome::Goals { reached, episodes: self.cfg.eval_episodes }))
    }

    /// Mean `E_pi[Q]` and mean return-to-go over dataset transitions with reliable returns.
    pub fn dataset_calibration(&mut self) -> (f64, f64) {
        let mut cache: HashMap<usize, f64> = HashMap::new();
        let (mut pv, mut mc, mut n) = (0.0, 0.0, 0usize);
        for t in self.dataset.transitions.iter().filter(|t| !t.mc_unreliable) {
            let v = match &t.s {
                State::Id(i) => *cache.entry(*i).or_insert_with(|| self.agent.policy_value(&t.s, &mut self.eval_rng)),
                s => self.agent.policy_value(s, &mut self.eval_rng),
            };
            pv += v;
            mc += t.mc_return;
            n += 1;
        }
        if n == 0 {
            (0.0, 0.0)
        } else {
            (pv / n as f64, mc / n as f64)
        }
    }

    fn record_eval(&mut self, step: u64, phase: Phase) -> Result<RunRecord, HarnessError> {
        let score = self.evaluate_score()?;
        self.phase_scores.push(score);
        let q = {
            let agent = &self.agent;
            avg_dataset_q(&|s, a| agent.q_value(s, a), &self.dataset, self.cfg.q_sample_size, self.seed)?
        };
        let (pv, mc) = self.dataset_calibration();
        let rec = RunRecord {
            step,
            phase: phase.as_str().into(),
            normalized_score: score,
            avg_dataset_q: q,
            bounding_rate: self.window.take_bounding(),
            cum_regret_metric: cumulative_regret_metric(&self.phase_scores)?,
            dataset_policy_value: pv,
            dataset_reference_value: mc,
        };
        self.log.push(LogEntry::Eval(rec.clone()))?;
        Ok(rec)
    }

    fn update(&mut self, batch: &crate::replay::Batch, phase: Phase, step: u64) -> Result<(), HarnessError> {
        let stats = self.agent.update(batch, phase, &self.reference, &mut self.sampling)?;
        self.window.add(&stats);
        self.updates += 1;
        let (off, on) = (batch.count(Source::Offline) as u64, batch.count(Source::Online) as u64);
        self.summary.offline_samples += off;
        self.summary.online_samples += on;
        match phase {
            Phase::Offline => self.summary.offline_updates += 1,
            Phase::Online => self.summary.online_updates += 1,
        }
        if self.updates % self.cfg.log_every == 0 {
            let rec = self.window.take_train(step, self.updates, phase);
            self.log.push(LogEntry::Train(rec))?;
        }
        Ok(())
    }

    /// Pre-training on the offline store alone; a baseline evaluation is
    /// recorded at step 0.
    pub fn offline_phase(&mut self) -> Result<(), HarnessError> {
        self.phase_scores.clear();
        self.record_eval(0, Phase::Offline)?;
        let n = self.cfg.offline_steps;
        for t in 1..=n {
            let batch = self.buffer.sample_with(MixingRatio::Fraction(1.0), self.cfg.batch_size, &mut self.sampling)?;
            self.update(&batch, Phase::Offline, t)?;
            if t % self.cfg.eval_offline_every == 0 || t == n {
                self.record_eval(t, Phase::Offline)?;
            }
        }
        Ok(())
    }

    /// Fine-tuning: one environment step, then `utd` updates on mixed batches.
    /// Online returns-to-go are filled in when each episode ends.
    pub fn online_phase(&mut self) -> Result<(), HarnessError> {
        self.phase_scores.clear();
        let base = self.cfg.offline_steps;
        let n = self.cfg.online_env_steps;
        let gamma = self.cfg.agent.gamma;
        let mut env = self.env.clone();
        let mut s = env.reset(self.env_rng.gen());
        let mut rewards: Vec<f64> = Vec::new();
        let mut traj_id = self.dataset.n_trajectories();
        for t in 1..=n {
            let a = self.agent.act(&s, false, &mut self.sampling);
            let st = env.step(&a)?;
            self.buffer.push_online(Transition {
                s: st.state.clone(),
                a: st.action.clone(),
                r: st.reward,
                s_next: st.next_state.clone(),
                done: st.done,
                truncated: st.truncated,
                mc_return: f64::NEG_INFINITY,
                mc_unreliable: true,
                traj_id,
                step_idx: rewards.len(),
            });
            rewards.push(st.reward);
            self.summary.online_env_steps += 1;
            if st.done || st.truncated {
                self.buffer.backfill_online_returns(&mc_from_rewards(&rewards, gamma), !st.done);
                rewards.clear();
                traj_id += 1;
                self.summary.online_episodes += 1;
                s = env.reset(self.env_rng.gen());
            } else {
                s = st.next_state;
            }
            for _ in 0..self.cfg.utd {
                let batch = self.buffer.sample_batch_cold_start(self.cfg.batch_size, &mut self.sampling)?;
                self.update(&batch, Phase::Online, base + t)?;
            }
            if t % self.cfg.eval_every == 0 || t == n {
                self.record_eval(base + t, Phase::Online)?;
            }
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<(), HarnessError> {
        let s = self.summary.clone();
        self.log.push(LogEntry::Summary(s))
    }
}

pub fn run_offline_phase(cfg: &ExperimentConfig, seed: u64) -> Result<Run, HarnessError> {
    let mut run = Run::new(cfg, seed)?;
    run.offline_phase()?;
    Ok(run)
}

pub fn run_online_phase(run: &mut Run) -> Result<(), HarnessError> {
    run.online_phase()
}

/// Both phases plus the summary record.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Run, HarnessError> {
    let mut run = run_offline_phase(cfg, seed)?;
    run_online_phase(&mut run)?;
    run.finish()?;
    Ok(run)
}

/// Runs every seed on its own thread.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<(u64, Result<RunLog, HarnessError>)> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| (seed, scope.spawn(move || run_experiment(cfg, seed).map(|r| r.log))))
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| (seed, h.join().unwrap_or_else(|_| Err(HarnessError::Log("run panicked".into())))))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        let text = format!(
            "[env]\nlayout = S...|.##.|...G\n[agent]\nkind = calql\nalpha = 5\ngamma = 0.9\ncritic_lr = 0.5\nactor_lr = 0.1\ntemperature_lr = 0.01\ntarget_entropy = 0.05\ntau = 0.05\n[data]\ntrajectories = 5\n[train]\noffline_steps = 300\nonline_env_steps = 100\n[eval]\nevery = 50\noffline_every = 100\nepisodes = 3\n{extra}"
        );
        ExperimentConfig::parse(&text, None).unwrap()
    }

    #[test]
    fn zero_offline_steps_gives_one_baseline_record() {
        let c = cfg("[train]\noffline_steps = 0\n");
        let run = run_offline_phase(&c, 0).unwrap();
        assert_eq!(run.log.records().len(), 1);
        assert_eq!(run.log.records()[0].step, 0);
        assert_eq!(run.agent.steps(), 0);
    }

    #[test]
    fn repeated_runs_hash_identically() {
        let c = cfg("");
        let a = run_experiment(&c, 4).unwrap().log;
        let b = run_experiment(&c, 4).unwrap().log;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), run_experiment(&c, 5).unwrap().log.hash());
        let steps: Vec<u64> = a.records().iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(RunLog::parse(a.text()).unwrap(), a);
    }

    #[test]
    fn utd_scales_update_counts() {
        let one = run_experiment(&cfg("[train]\nutd = 1\n"), 0).unwrap();
        let five = run_experiment(&cfg("[train]\nutd = 5\n"), 0).unwrap();
        let (s1, s5) = (one.log.summary().unwrap(), five.log.summary().unwrap());
        assert_eq!(s5.online_updates, 5 * s1.online_updates);
        assert_eq!(s1.online_env_steps, s5.online_env_steps);
    }

    #[test]
    fn pooled_sac_logs_source_counts() {
        let c = cfg("[agent]\nkind = sac+offline\n[train]\noffline_steps = 0\nmixing_ratio = -1\n");
        let log = run_experiment(&c, 1).unwrap().log;
        let s = log.summary().unwrap();
        assert_eq!(s.offline_samples + s.online_samples, s.online_updates * c.batch_size as u64);
        assert!(s.offline_samples > 0 && s.online_samples > 0);
        let pure = run_experiment(&cfg("[agent]\nkind = sac\n[train]\noffline_steps = 0\nmixing_ratio = 0\n"), 1).unwrap().log;
        assert_eq!(pure.summary().unwrap().offline_samples, 0);
    }

    #[test]
    fn log_rejects_decreasing_steps() {
        let mut log = RunLog::new("h", 0, "");
        let rec = |step| {
            LogEntry::Eval(RunRecord {
                step,
                phase: "offline".into(),
                normalized_score: 0.0,
                avg_dataset_q: 0.0,
                bounding_rate: 0.0,
                cum_regret_metric: 1.0,
                dataset_policy_value: 0.0,
                dataset_reference_value: 0.0,
            })
        };
        log.push(rec(5)).unwrap();
        assert!(log.push(rec(5)).is_err());
        assert!(log.push(rec(3)).is_err());
    }
}
