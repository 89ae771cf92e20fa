//! Network agent: two Q-networks with min-of-two targets and a softmax
//! (discrete) or tanh-squashed Gaussian (continuous) actor.

use super::{dual_alpha_update, Agent, AgentConfig, AgentError, CqlMode, Phase, ReferenceValues, UpdateStats};
use crate::env::{sample_policy_action, Action, ActionSpace, State};
use crate::nn::{softmax, softplus, Activation, Graph, Mlp, Tensor, Trainable, Var};
use crate::replay::Batch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use std::sync::Arc;

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const LOG_TEMP_MIN: f64 = -18.42;
const LOG_TEMP_MAX: f64 = 9.21;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug)]
pub struct NeuralAgent {
    pub cfg: AgentConfig,
    pub space: ActionSpace,
    /// Feature vector of every state id.
    pub features: Arc<Vec<Vec<f64>>>,
    pub critics: [Trainable; 2],
    pub targets: [Mlp; 2],
    pub actor: Trainable,
    pub log_temperature: f64,
    pub log_alpha: f64,
    steps: u64,
}

/// Samples drawn for one continuous-policy evaluation.
struct Squashed {
    actions: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

impl NeuralAgent {
    pub fn new(cfg: AgentConfig, space: ActionSpace, features: Arc<Vec<Vec<f64>>>, rng: &mut ChaCha8Rng) -> Result<Self, AgentError> {
        cfg.validate()?;
        let fdim = features.first().map_or(0, Vec::len);
        if fdim == 0 {
            return Err(AgentError::Config("state features must be non-empty".into()));
        }
        let (q_in, q_out, pi_out) = match space {
            ActionSpace::Discrete(n) => (fdim, n, n),
            ActionSpace::Continuous(d) => (fdim + d, 1, 2 * d),
        };
        let widths = |i: usize, o: usize| {
            let mut w = vec![i];
            w.extend_from_slice(&cfg.hidden);
            w.push(o);
            w
        };
        let q1 = Mlp::new(&widths(q_in, q_out), Activation::Relu, rng);
        let q2 = Mlp::new(&widths(q_in, q_out), Activation::Relu, rng);
        let pi = Mlp::new(&widths(fdim, pi_out), Activation::Relu, rng);
        Ok(NeuralAgent {
            targets: [q1.clone(), q2.clone()],
            critics: [Trainable::new(q1, cfg.critic_lr), Trainable::new(q2, cfg.critic_lr)],
            actor: Trainable::new(pi, cfg.actor_lr),
            log_temperature: cfg.init_temperature.ln(),
            log_alpha: cfg.alpha.offline.max(super::ALPHA_MIN).ln(),
            cfg,
            space,
            features,
            steps: 0,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.space.dim() as f64))
    }

    pub fn current_alpha(&self, phase: Phase) -> f64 {
        match self.cfg.cql_mode {
            CqlMode::Dual { .. } if self.cfg.kind.conservative() => self.log_alpha.exp(),
            _ => self.cfg.alpha_for(phase),
        }
    }

    fn state_row(&self, s: &State) -> Vec<f64> {
        match s {
            State::Id(i) => self.features[*i].clone(),
            State::Features(f) => f.clone(),
        }
    }

    fn states(&self, ss: impl Iterator<Item = State>) -> Tensor {
        Tensor::from_rows(&ss.map(|s| self.state_row(&s)).collect::<Vec<_>>())
    }

    fn action_index(&self, a: &Action) -> Result<usize, AgentError> {
        match (self.space, a) {
            (ActionSpace::Discrete(n), Action::Id(i)) if *i < n => Ok(*i),
            _ => Err(AgentError::BadItem(format!("action {a:?} for space {:?}", self.space))),
        }
    }

    fn action_vec(&self, a: &Action) -> Result<Vec<f64>, AgentError> {
        match (self.space, a) {
            (ActionSpace::Continuous(d), Action::Vector(v)) if v.len() == d => Ok(v.clone()),
            _ => Err(AgentError::BadItem(format!("action {a:?} for space {:?}", self.space))),
        }
    }

    fn discrete_probs(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let logits = self.actor.net.forward(x).expect("actor input width");
        (0..logits.rows()).map(|r| softmax(logits.row(r))).collect()
    }

    /// Tanh-Gaussian samples (or the squashed mean when `greedy`) for every row of `x`.
    fn sample_squashed(&self, x: &Tensor, greedy: bool, rng: &mut ChaCha8Rng) -> Squashed {
        let d = self.space.dim();
        let out = self.actor.net.forward(x).expect("actor input width");
        let mut actions = Vec::with_capacity(out.rows());
        let mut log_probs = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row(r);
            let mut a = Vec::with_capacity(d);
            let mut lp = 0.0;
            for j in 0..d {
                let log_std = row[d + j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let eps: f64 = if greedy { 0.0 } else { rng.sample(StandardNormal) };
                let u = row[j] + log_std.exp() * eps;
                a.push(u.tanh());
                lp += -0.5 * eps * eps - log_std - HALF_LOG_2PI;
                lp -= 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u));
            }
            actions.push(a);
            log_probs.push(lp);
        }
        Squashed { actions, log_probs }
    }

    /// `Q(x_r, a_r)` for a continuous critic.
    fn q_pairs(net: &Mlp, x: &Tensor, actions: &[Vec<f64>]) -> Vec<f64> {
        let input = x.hcat(&Tensor::from_rows(actions));
        net.forward(&input).expect("critic input width").data
    }

    fn min_q_pairs(nets: [&Mlp; 2], x: &Tensor, actions: &[Vec<f64>]) -> Vec<f64> {
        let a = Self::q_pairs(nets[0], x, actions);
        let b = Self::q_pairs(nets[1], x, actions);
        a.iter().zip(&b).map(|(p, q)| p.min(*q)).collect()
    }

    fn min_q_all(nets: [&Mlp; 2], x: &Tensor) -> Tensor {
        let a = nets[0].forward(x).expect("critic input width");
        let b = nets[1].forward(x).expect("critic input width");
        a.zip(&b, f64::min)
    }

    /// Bootstrapped values `T(s')` for every batch item.
    fn next_values(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let xn = self.states(batch.items.iter().map(|t| t.s_next.clone()));
        let k = self.cfg.n_sampled_actions;
        let temp = self.temperature();
        let tg = [&self.targets[0], &self.targets[1]];
        match self.space {
            ActionSpace::Discrete(_) => {
                let probs = self.discrete_probs(&xn);
                let q = Self::min_q_all(tg, &xn);
                probs
                    .iter()
                    .enumerate()
                    .map(|(r, p)| {
                        let qr = q.row(r);
                        if self.cfg.max_backup {
                            (0..k).map(|_| qr[sample_policy_action(p, rng)]).fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            let v: f64 = p.iter().zip(qr).map(|(a, b)| a * b).sum();
                            let h: f64 = -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
                            v + if self.cfg.backup_entropy { temp * h } else { 0.0 }
                        }
                    })
                    .collect()
            }
            ActionSpace::Continuous(_) => {
                if self.cfg.max_backup {
                    let mut best = vec![f64::NEG_INFINITY; batch.len()];
                    for _ in 0..k {
                        let s = self.sample_squashed(&xn, false, rng);
                        for (b, q) in best.iter_mut().zip(Self::min_q_pairs(tg, &xn, &s.actions)) {
                            *b = b.max(q);
                        }
                    }
                    best
                } else {
                    let s = self.sample_squashed(&xn, false, rng);
                    let q = Self::min_q_pairs(tg, &xn, &s.actions);
                    q.iter()
                        .zip(&s.log_probs)
                        .map(|(q, lp)| q - if self.cfg.backup_entropy { temp * lp } else { 0.0 })
                        .collect()
                }
            }
        }
    }

    /// Per-item TD targets `r + gamma (1 - done) T(s')`.
    pub fn td_targets(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let next = self.next_values(batch, rng);
        batch
            .items
            .iter()
            .zip(next)
            .map(|(t, v)| t.r + if t.done { 0.0 } else { self.cfg.gamma * v })
            .collect()
    }

    /// Samples shared by both critics' regularizers.
    fn regularizer_samples(&self, batch: &Batch, x: &Tensor, reference: &ReferenceValues, rng: &mut ChaCha8Rng) -> Result<RegSamples, AgentError> {
        let n = batch.len();
        let k = self.cfg.n_sampled_actions;
        match self.space {
            ActionSpace::Discrete(na) => {
                let probs = self.discrete_probs(x);
                let mut rand = vec![vec![0usize; k]; n];
                let mut pi = vec![vec![0usize; k]; n];
                let mut logp = vec![0.0; n * k];
                let mut refs = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        rand[i][j] = rng.gen_range(0..na);
                    }
                    for j in 0..k {
                        let a = sample_policy_action(&probs[i], rng);
                        pi[i][j] = a;
                        logp[i * k + j] = probs[i][a].ln();
                        refs[i * k + j] = reference.lookup(&batch.items[i], &Action::Id(a))?;
                    }
                }
                Ok(RegSamples {
                    rand_ids: rand,
                    pi_ids: pi,
                    rand_vecs: vec![],
                    pi_vecs: vec![],
                    log_pi: Tensor::matrix(n, k, logp),
                    refs: Tensor::matrix(n, k, refs),
                    log_rand_density: (1.0 / na as f64).ln(),
                })
            }
            ActionSpace::Continuous(d) => {
                let mut rand_vecs = Vec::with_capacity(n * k);
                for _ in 0..n * k {
                    rand_vecs.push((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
                }
                let xr = x.repeat_rows(k);
                let s = self.sample_squashed(&xr, false, rng);
                let mut refs = Vec::with_capacity(n * k);
                for (r, a) in s.actions.iter().enumerate() {
                    refs.push(reference.lookup(&batch.items[r / k], &Action::Vector(a.clone()))?);
                }
                Ok(RegSamples {
                    rand_ids: vec![],
                    pi_ids: vec![],
                    rand_vecs,
                    pi_vecs: s.actions,
                    log_pi: Tensor::matrix(n, k, s.log_probs),
                    refs: Tensor::matrix(n, k, refs),
                    log_rand_density: 0.5f64.powi(d as i32).ln(),
                })
            }
        }
    }

    /// `Q(s_i, a_ij)` as an `n x k` node.
    fn q_samples(&self, g: &mut Graph, net: &Mlp, leaves: &[Var], x: &Tensor, qall: Option<Var>, ids: &[Vec<usize>], vecs: &[Vec<f64>]) -> Result<Var, AgentError> {
        let n = x.rows();
        let k = self.cfg.n_sampled_actions;
        match qall {
            Some(q) => {
                let mut cols = g.gather(q, ids.iter().map(|r| r[0]).collect());
                for j in 1..k {
                    let c = g.gather(q, ids.iter().map(|r| r[j]).collect());
                    cols = g.concat(cols, c);
                }
                Ok(cols)
            }
            None => {
                let input = g.leaf(x.repeat_rows(k).hcat(&Tensor::from_rows(vecs)));
                let out = net.forward_with(g, input, leaves)?;
                Ok(g.reshape(out, n, k))
            }
        }
    }

    fn critic_updates(&mut self, batch: &Batch, alpha: f64, reference: &ReferenceValues, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64), AgentError> {
        let n = batch.len();
        let x = self.states(batch.items.iter().map(|t| t.s.clone()));
        let y = Tensor::column(self.td_targets(batch, rng));
        let calibrate = self.cfg.kind.calibrated();
        let masked = if calibrate { reference.clone() } else { ReferenceValues::Disabled };
        let samples = if alpha > 0.0 || self.cfg.kind.conservative() { Some(self.regularizer_samples(batch, &x, &masked, rng)?) } else { None };
        let data_ids: Vec<usize> = match self.space {
            ActionSpace::Discrete(_) => batch.items.iter().map(|t| self.action_index(&t.a)).collect::<Result<_, _>>()?,
            ActionSpace::Continuous(_) => vec![],
        };
        let data_vecs: Vec<Vec<f64>> = match self.space {
            ActionSpace::Continuous(_) => batch.items.iter().map(|t| self.action_vec(&t.a)).collect::<Result<_, _>>()?,
            ActionSpace::Discrete(_) => vec![],
        };
        let (mut td_sum, mut gap_sum, mut bound) = (0.0, 0.0, 0.0);
        for c in 0..2 {
            let net = self.critics[c].net.clone();
            let mut g = Graph::new();
            let leaves = net.param_leaves(&mut g);
            let (q_data, qall) = match self.space {
                ActionSpace::Discrete(_) => {
                    let xv = g.leaf(x.clone());
                    let qall = net.forward_with(&mut g, xv, &leaves)?;
                    (g.gather(qall, data_ids.clone()), Some(qall))
                }
                ActionSpace::Continuous(_) => {
                    let xv = g.leaf(x.hcat(&Tensor::from_rows(&data_vecs)));
                    (net.forward_with(&mut g, xv, &leaves)?, None)
                }
            };
            let yv = g.leaf(y.clone());
            let diff = g.sub(q_data, yv);
            let sq = g.square(diff);
            let mse = g.mean(sq);
            let td = g.scale(mse, 0.5);
            td_sum += g.value(td).item();
            let loss = match &samples {
                Some(sm) => {
                    let q_rand = self.q_samples(&mut g, &net, &leaves, &x, qall, &sm.rand_ids, &sm.rand_vecs)?;
                    let q_rand_is = g.add_scalar(q_rand, -sm.log_rand_density);
                    let q_pi = self.q_samples(&mut g, &net, &leaves, &x, qall, &sm.pi_ids, &sm.pi_vecs)?;
                    let q_pi = if calibrate {
                        let rv = g.leaf(sm.refs.clone());
                        let qv = g.value(q_pi).clone();
                        bound += sm.refs.data.iter().zip(&qv.data).filter(|(r, q)| r > q).count() as f64 / (n * qv.cols()) as f64;
                        g.max(q_pi, rv)
                    } else {
                        q_pi
                    };
                    let lp = g.leaf(sm.log_pi.clone());
                    let q_pi_is = g.sub(q_pi, lp);
                    let cat = g.concat(q_rand_is, q_pi_is);
                    let lse = g.logsumexp_rows(cat);
                    let gap = g.sub(lse, q_data);
                    let gap = g.mean(gap);
                    gap_sum += g.value(gap).item();
                    let reg = g.scale(gap, alpha);
                    g.add(td, reg)
                }
                None => td,
            };
            let grads = g.backward(loss, None)?;
            self.critics[c].apply(&grads, &leaves)?;
        }
        for c in 0..2 {
            let online = self.critics[c].net.clone();
            self.targets[c].polyak_from(&online, self.cfg.tau);
        }
        Ok((td_sum / 2.0, gap_sum / 2.0, bound / 2.0))
    }

    fn actor_update(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(f64, f64), AgentError> {
        let n = batch.len();
        let x = self.states(batch.items.iter().map(|t| t.s.clone()));
        let temp = self.temperature();
        let net = self.actor.net.clone();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (out, leaves) = net.forward_on(&mut g, xv)?;
        let (loss, entropy) = match self.space {
            ActionSpace::Discrete(_) => {
                let q = g.leaf(Self::min_q_all([&self.critics[0].net, &self.critics[1].net], &x));
                let logp = g.log_softmax_rows(out);
                let p = g.exp(logp);
                let h = -g.value(p).data.iter().zip(&g.value(logp).data).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let tl = g.scale(logp, temp);
                let inner = g.sub(tl, q);
                let prod = g.mul(p, inner);
                let total = g.sum(prod);
                (g.scale(total, 1.0 / n as f64), h)
            }
            ActionSpace::Continuous(d) => {
                let mean = g.slice_cols(out, 0, d);
                let raw = g.slice_cols(out, d, 2 * d);
                let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
                let eps = Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect());
                let std = g.exp(log_std);
                let ev = g.leaf(eps.clone());
                let noise = g.mul(std, ev);
                let u = g.add(mean, noise);
                let a = g.tanh(u);
                let gauss_const = g.leaf(eps.map(|e| -0.5 * e * e - HALF_LOG_2PI));
                let gauss = g.sub(gauss_const, log_std);
                let m2u = g.scale(u, -2.0);
                let sp = g.softplus(m2u);
                let sp2 = g.scale(sp, 2.0);
                let corr = g.sub(m2u, sp2);
                let corr = g.add_scalar(corr, 2.0 * std::f64::consts::LN_2);
                let per = g.sub(gauss, corr);
                let logp = g.sum_cols(per);
                let h = -g.value(logp).mean();
                let qin = g.concat(xv, a);
                let (q1, _) = self.critics[0].net.forward_on(&mut g, qin)?;
                let (q2, _) = self.critics[1].net.forward_on(&mut g, qin)?;
                let qmin = g.min(q1, q2);
                let tl = g.scale(logp, temp);
                let diff = g.sub(tl, qmin);
                (g.mean(diff), h)
            }
        };
        let actor_loss = g.value(loss).item();
        let grads = g.backward(loss, None)?;
        self.actor.apply(&grads, &leaves)?;
        self.log_temperature =
            (self.log_temperature - self.cfg.temperature_lr * (entropy - self.target_entropy())).clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);
        Ok((actor_loss, entropy))
    }

    pub fn load(dir: &Path, cfg: AgentConfig, space: ActionSpace, features: Arc<Vec<Vec<f64>>>) -> Result<Self, AgentError> {
        let manifest = super::read_manifest(&std::fs::read_to_string(dir.join("agent.manifest"))?);
        let num = |k: &str| -> Result<f64, AgentError> {
            manifest
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AgentError::Config(format!("checkpoint manifest lacks {k}")))
        };
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut agent = NeuralAgent::new(cfg, space, features, &mut rng)?;
        for c in 0..2 {
            agent.critics[c].net = Mlp::load(dir, &format!("critic{c}"))?;
            agent.targets[c] = Mlp::load(dir, &format!("target{c}"))?;
        }
        agent.actor.net = Mlp::load(dir, "actor")?;
        agent.log_temperature = num("log_temperature")?;
        agent.log_alpha = num("log_alpha")?;
        agent.steps = num("step")? as u64;
        Ok(agent)
    }
}

struct RegSamples {
    rand_ids: Vec<Vec<usize>>,
    pi_ids: Vec<Vec<usize>>,
    rand_vecs: Vec<Vec<f64>>,
    pi_vecs: Vec<Vec<f64>>,
    log_pi: Tensor,
    refs: Tensor,
    log_rand_density: f64,
}

impl Agent for NeuralAgent {
    fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    fn act(&self, s: &State, greedy: bool, rng: &mut ChaCha8Rng) -> Action {
        let x = self.states(std::iter::once(s.clone()));
        match self.space {
            ActionSpace::Discrete(_) => {
                let p = &self.discrete_probs(&x)[0];
                if greedy {
                    Action::Id(p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b }))
                } else {
                    Action::Id(sample_policy_action(p, rng))
                }
            }
            ActionSpace::Continuous(_) => Action::Vector(self.sample_squashed(&x, greedy, rng).actions.remove(0)),
        }
    }

    fn update(&mut self, batch: &Batch, phase: Phase, reference: &ReferenceValues, rng: &mut ChaCha8Rng) -> Result<UpdateStats, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let alpha = self.current_alpha(phase);
        let (td_loss, gap, bounding_rate) = self.critic_updates(batch, alpha, reference, rng)?;
        if let CqlMode::Dual { target_action_gap, lr } = self.cfg.cql_mode {
            if self.cfg.kind.conservative() {
                self.log_alpha = dual_alpha_update(self.log_alpha, gap, target_action_gap, lr);
            }
        }
        let (actor_loss, entropy) = self.actor_update(batch, rng)?;
        self.steps += 1;
        if !self.is_finite() {
            return Err(AgentError::NonFinite(format!("network agent at step {}", self.steps)));
        }
        Ok(UpdateStats { td_loss, regularizer: gap, bounding_rate, alpha, actor_loss, entropy, temperature: self.temperature() })
    }

    fn q_value(&self, s: &State, a: &Action) -> f64 {
        let x = self.states(std::iter::once(s.clone()));
        let nets = [&self.critics[0].net, &self.critics[1].net];
        match a {
            Action::Id(i) => Self::min_q_all(nets, &x).data[*i],
            Action::Vector(v) => Self::min_q_pairs(nets, &x, std::slice::from_ref(v))[0],
        }
    }

    fn policy_value(&self, s: &State, rng: &mut ChaCha8Rng) -> f64 {
        let x = self.states(std::iter::once(s.clone()));
        let nets = [&self.critics[0].net, &self.critics[1].net];
        match self.space {
            ActionSpace::Discrete(_) => {
                let p = &self.discrete_probs(&x)[0];
                p.iter().zip(&Self::min_q_all(nets, &x).data).map(|(a, b)| a * b).sum()
            }
            ActionSpace::Continuous(_) => {
                let k = self.cfg.n_sampled_actions;
                let xr = x.repeat_rows(k);
                let smp = self.sample_squashed(&xr, false, rng);
                Self::min_q_pairs(nets, &xr, &smp.actions).iter().sum::<f64>() / k as f64
            }
        }
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn is_finite(&self) -> bool {
        self.critics.iter().all(|c| c.net.is_finite())
            && self.targets.iter().all(Mlp::is_finite)
            && self.actor.net.is_finite()
            && self.log_temperature.is_finite()
            && self.log_alpha.is_finite()
    }

    fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir)?;
        for c in 0..2 {
            self.critics[c].net.save(dir, &format!("critic{c}"))?;
            self.targets[c].save(dir, &format!("target{c}"))?;
        }
        self.actor.net.save(dir, "actor")?;
        let space = match self.space {
            ActionSpace::Discrete(n) => format!("discrete {n}"),
            ActionSpace::Continuous(d) => format!("continuous {d}"),
        };
        let extra = [
            ("form", "network".to_string()),
            ("action_space", space),
            ("log_temperature", format!("{:?}", self.log_temperature)),
            ("log_alpha", format!("{:?}", self.log_alpha)),
        ];
        std::fs::write(dir.join("agent.manifest"), self.cfg.manifest(self.steps, &extra))?;
        Ok(())
    }
}
