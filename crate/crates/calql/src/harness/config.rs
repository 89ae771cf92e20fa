use crate::agents::{AgentConfig, AgentKind, AlphaConfig, CqlMode};
use crate::data::{Composition, ReferenceFamily};
use crate::env::{FeatureKind, GridMaze, StartSpec};
use crate::replay::MixingRatio;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentForm {
    Tabular,
    Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub layout: String,
    pub continuous: bool,
    pub features: FeatureKind,
    pub slip_prob: f64,
    pub max_episode_len: Option<usize>,
    pub goal_radius: usize,
}

impl EnvSpec {
    pub fn maze(&self) -> Result<GridMaze, ConfigError> {
        let mut m = GridMaze::parse(&self.layout).map_err(|e| ConfigError::Invalid(format!("env.layout: {e}")))?;
        m.slip_prob = self.slip_prob;
        m.goal_radius = self.goal_radius;
        if let Some(n) = self.max_episode_len {
            m.max_episode_len = n;
        }
        if !m.is_solvable() {
            return Err(ConfigError::Invalid("env.layout: goal is unreachable from the start".into()));
        }
        Ok(m)
    }

    /// Same maze but starting uniformly from every free cell outside the goal region.
    pub fn maze_with_uniform_start(&self) -> Result<GridMaze, ConfigError> {
        let mut m = self.maze()?;
        let starts: Vec<_> = (0..m.n_cells()).map(|i| m.cell(i)).filter(|c| !m.in_goal(*c)).collect();
        m.start = StartSpec::Uniform(starts);
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BehaviorKind {
    Scripted,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Path(PathBuf),
    Generate { behavior: BehaviorKind, epsilon: f64, trajectories: usize, uniform_start: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceMode {
    Mc { skip_unreliable: bool },
    Fitted(ReferenceFamily),
    Disabled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub data: DataSource,
    pub composition: Composition,
    pub agent: AgentConfig,
    pub form: AgentForm,
    pub reference: ReferenceMode,
    pub mixing_ratio: MixingRatio,
    pub utd: usize,
    pub batch_size: usize,
    pub offline_steps: u64,
    pub online_env_steps: u64,
    pub online_capacity: usize,
    /// Evaluation cadence in environment steps during fine-tuning.
    pub eval_every: u64,
    /// Evaluation cadence in gradient steps during pre-training.
    pub eval_offline_every: u64,
    pub eval_episodes: usize,
    pub eval_greedy: bool,
    pub q_sample_size: usize,
    pub log_every: u64,
    pub seeds: Vec<u64>,
    /// Canonical `key = value` listing of every setting, used for hashing.
    pub canonical: String,
}

const KEYS: &[&str] = &[
    "env.layout",
    "env.layout_file",
    "env.continuous",
    "env.features",
    "env.slip_prob",
    "env.max_episode_len",
    "env.goal_radius",
    "data.path",
    "data.policy",
    "data.epsilon",
    "data.trajectories",
    "data.start",
    "data.composition",
    "agent.kind",
    "agent.form",
    "agent.alpha",
    "agent.alpha_offline",
    "agent.alpha_online",
    "agent.cql_mode",
    "agent.target_action_gap",
    "agent.alpha_lr",
    "agent.n_sampled_actions",
    "agent.max_backup",
    "agent.backup_entropy",
    "agent.gamma",
    "agent.tau",
    "agent.critic_lr",
    "agent.actor_lr",
    "agent.temperature_lr",
    "agent.init_temperature",
    "agent.target_entropy",
    "agent.hidden",
    "reference.mode",
    "reference.family",
    "reference.skip_unreliable",
    "reference.hidden",
    "reference.steps",
    "reference.lr",
    "train.offline_steps",
    "train.online_env_steps",
    "train.batch_size",
    "train.mixing_ratio",
    "train.utd",
    "train.online_capacity",
    "train.log_every",
    "eval.every",
    "eval.offline_every",
    "eval.episodes",
    "eval.greedy",
    "eval.q_sample_size",
    "run.seeds",
];

/// Reads `key = value` lines. `[section]` lines prefix the keys that follow;
/// Lines starting with `#` are comments (mid-line `#` is a maze wall). Later assignments override earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: "unterminated section header".into() })?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key = value, got `{line}`") })?;
        let k = k.trim();
        let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

struct Reader<'a> {
    pairs: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), msg: e.to_string() }),
        }
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), msg: e.to_string() }),
        }
    }

    fn bad(&self, key: &str, msg: &str) -> ConfigError {
        ConfigError::BadValue { key: key.into(), msg: msg.into() }
    }
}

/// `a..b` (inclusive) or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if b < a {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse::<u64>().map_err(|e| format!("{e}"))).collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| e.to_string())).collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text, path.parent())
    }

    /// `base_dir` resolves relative `env.layout_file` and `data.path` entries.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let r = Reader { pairs: &pairs };
        let resolve = |p: &str| match base_dir {
            Some(d) if Path::new(p).is_relative() => d.join(p),
            _ => PathBuf::from(p),
        };

        let layout = match (r.raw("env.layout"), r.raw("env.layout_file")) {
            (Some(_), Some(_)) => return Err(ConfigError::Invalid("give env.layout or env.layout_file, not both".into())),
            (Some(l), None) => l.replace('|', "\n"),
            (None, Some(f)) => {
                let p = resolve(f);
                std::fs::read_to_string(&p).map_err(|e| ConfigError::Io { path: p.display().to_string(), msg: e.to_string() })?
            }
            (None, None) => return Err(ConfigError::Invalid("env.layout is required".into())),
        };
        let features = match r.raw("env.features").unwrap_or("coords") {
            "coords" => FeatureKind::Coords,
            "onehot" => FeatureKind::OneHot,
            _ => return Err(r.bad("env.features", "expected coords or onehot")),
        };
        let env = EnvSpec {
            layout,
            continuous: r.parse("env.continuous", false)?,
            features,
            slip_prob: r.parse("env.slip_prob", 0.0)?,
            max_episode_len: r.opt("env.max_episode_len")?,
            goal_radius: r.parse("env.goal_radius", 0)?,
        };
        if !(0.0..=1.0).contains(&env.slip_prob) {
            return Err(r.bad("env.slip_prob", "must lie in [0, 1]"));
        }

        let data = match r.raw("data.path") {
            Some(p) => DataSource::Path(resolve(p)),
            None => DataSource::Generate {
                behavior: match r.raw("data.policy").unwrap_or("scripted") {
                    "scripted" => BehaviorKind::Scripted,
                    "random" => BehaviorKind::Random,
                    _ => return Err(r.bad("data.policy", "expected scripted or random")),
                },
                epsilon: r.parse("data.epsilon", 0.0)?,
                trajectories: r.parse("data.trajectories", 25)?,
                uniform_start: match r.raw("data.start").unwrap_or("fixed") {
                    "fixed" => false,
                    "uniform" => true,
                    _ => return Err(r.bad("data.start", "expected fixed or uniform")),
                },
            },
        };
        let composition = Composition::parse(r.raw("data.composition").unwrap_or("narrow"))
            .ok_or_else(|| r.bad("data.composition", "expected narrow, diverse or mixed"))?;

        let kind_s = r.raw("agent.kind").ok_or_else(|| ConfigError::Invalid("agent.kind is required".into()))?;
        let kind = AgentKind::parse(kind_s).ok_or_else(|| r.bad("agent.kind", "expected sac, sac+offline, cql or calql"))?;
        let alpha = match (r.opt::<f64>("agent.alpha")?, r.opt::<f64>("agent.alpha_offline")?, r.opt::<f64>("agent.alpha_online")?) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(ConfigError::Invalid("give agent.alpha or the offline/online pair, not both".into()))
            }
            (Some(a), None, None) => AlphaConfig::single(a),
            (None, off, on) => AlphaConfig::pair(off.unwrap_or(5.0), on.or(off).unwrap_or(5.0)),
        }
        .map_err(|e| r.bad("agent.alpha", &e.to_string()))?;
        let mut agent = AgentConfig::new(kind, alpha);
        agent.cql_mode = match r.raw("agent.cql_mode").unwrap_or("direct") {
            "direct" => CqlMode::Direct,
            "dual" => CqlMode::Dual { target_action_gap: r.parse("agent.target_action_gap", 0.8)?, lr: r.parse("agent.alpha_lr", 3e-4)? },
            _ => return Err(r.bad("agent.cql_mode", "expected direct or dual")),
        };
        agent.n_sampled_actions = r.parse("agent.n_sampled_actions", agent.n_sampled_actions)?;
        agent.max_backup = r.parse("agent.max_backup", agent.max_backup)?;
        agent.backup_entropy = r.parse("agent.backup_entropy", agent.backup_entropy)?;
        agent.gamma = r.parse("agent.gamma", agent.gamma)?;
        agent.tau = r.parse("agent.tau", agent.tau)?;
        agent.critic_lr = r.parse("agent.critic_lr", agent.critic_lr)?;
        agent.actor_lr = r.parse("agent.actor_lr", agent.actor_lr)?;
        agent.temperature_lr = r.parse("agent.temperature_lr", agent.temperature_lr)?;
        agent.init_temperature = r.parse("agent.init_temperature", agent.init_temperature)?;
        agent.target_entropy = r.opt("agent.target_entropy")?;
        if let Some(h) = r.raw("agent.hidden") {
            agent.hidden = parse_usize_list(h).map_err(|e| r.bad("agent.hidden", &e))?;
        }
        agent.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let form = match r.raw("agent.form").unwrap_or("tabular") {
            "tabular" => AgentForm::Tabular,
            "network" => AgentForm::Network,
            _ => return Err(r.bad("agent.form", "expected tabular or network")),
        };
        if form == AgentForm::Tabular && env.continuous {
            return Err(ConfigError::Invalid("tabular agents need discrete actions (env.continuous = false)".into()));
        }

        let reference = match r.raw("reference.mode").unwrap_or("mc") {
            "mc" => ReferenceMode::Mc { skip_unreliable: r.parse("reference.skip_unreliable", false)? },
            "disabled" => ReferenceMode::Disabled,
            "fitted" => {
                let hidden = match r.raw("reference.hidden") {
                    Some(h) => parse_usize_list(h).map_err(|e| r.bad("reference.hidden", &e))?,
                    None => vec![64, 64],
                };
                let steps = r.parse("reference.steps", 2000)?;
                let lr = r.parse("reference.lr", 1e-3)?;
                let family = match r.raw("reference.family").unwrap_or("tabular_sarsa") {
                    "tabular_regression" => ReferenceFamily::TabularRegression,
                    "tabular_sarsa" => ReferenceFamily::TabularSarsa,
                    "network_regression" => ReferenceFamily::NetworkRegression { hidden, steps, lr, seed: 0 },
                    "network_sarsa" => ReferenceFamily::NetworkSarsa { hidden, steps, lr, seed: 0 },
                    _ => return Err(r.bad("reference.family", "unknown family")),
                };
                ReferenceMode::Fitted(family)
            }
            _ => return Err(r.bad("reference.mode", "expected mc, fitted or disabled")),
        };
        if kind == AgentKind::CalQl && reference == ReferenceMode::Disabled {
            return Err(ConfigError::Invalid("calql needs a reference (reference.mode = mc or fitted)".into()));
        }

        let mixing_ratio = MixingRatio::new(r.parse("train.mixing_ratio", 0.5)?).map_err(|e| r.bad("train.mixing_ratio", &e.to_string()))?;
        let utd: usize = r.parse("train.utd", 1)?;
        if utd == 0 {
            return Err(r.bad("train.utd", "must be at least 1"));
        }
        let batch_size: usize = r.parse("train.batch_size", 32)?;
        if batch_size == 0 {
            return Err(r.bad("train.batch_size", "must be at least 1"));
        }
        let seeds = match r.raw("run.seeds") {
            Some(s) => parse_seeds(s).map_err(|e| r.bad("run.seeds", &e))?,
            None => vec![0],
        };
        let cfg = ExperimentConfig {
            env,
            data,
            composition,
            agent,
            form,
            reference,
            mixing_ratio,
            utd,
            batch_size,
            offline_steps: r.parse("train.offline_steps", 0)?,
            online_env_steps: r.parse("train.online_env_steps", 0)?,
            online_capacity: r.parse("train.online_capacity", 100_000)?,
            eval_every: r.parse("eval.every", 100)?,
            eval_offline_every: r.parse("eval.offline_every", 1000)?,
            eval_episodes: r.parse("eval.episodes", 10)?,
            eval_greedy: r.parse("eval.greedy", true)?,
            q_sample_size: r.parse("eval.q_sample_size", 10_000)?,
            log_every: r.parse("train.log_every", 100)?,
            seeds,
            canonical: canonical_text(&pairs),
        };
        if cfg.eval_every == 0 || cfg.eval_offline_every == 0 || cfg.log_every == 0 {
            return Err(ConfigError::Invalid("evaluation and logging cadences must be positive".into()));
        }
        if cfg.eval_episodes == 0 {
            return Err(r.bad("eval.episodes", "must be at least 1"));
        }
        if cfg.online_capacity == 0 {
            return Err(r.bad("train.online_capacity", "must be at least 1"));
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical.as_bytes()))
    }
}

fn canonical_text(pairs: &BTreeMap<String, String>) -> String {
    pairs.iter().filter(|(k, _)| k.as_str() != "run.seeds").map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
