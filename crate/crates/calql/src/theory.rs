//! Calibrated fitted Q-iteration on finite-horizon tabular MDPs, with regret
//! accounting and Bellman-error transfer coefficients.

use crate::env::{sample_policy_action, TabularMdp, TabularPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use thiserror::Error;

/// Per-step value tables indexed `[h][s][a]`.
pub type StepTables = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("offline data is empty")]
    EmptyOfflineData,
    #[error("function grid is empty")]
    EmptyGrid,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One logged step `(s, a, r, s')` at horizon step `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTuple {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// `s` is terminal: the target does not bootstrap.
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct FqiConfig {
    pub iterations: usize,
    /// Online episodes collected with the current greedy policy per iteration.
    pub online_per_iteration: usize,
    pub calibrate: bool,
    /// Upper clamp realizing the pessimistic class; `None` disables it.
    pub pessimistic_bound: Option<StepTables>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FqiIterate {
    pub k: usize,
    /// `f^k`, with `H + 1` tables; the last one is identically zero.
    pub f: StepTables,
    /// Greedy with respect to `f^k`.
    pub policy: Vec<TabularPolicy>,
}

#[derive(Clone, Debug)]
pub struct FqiHistory {
    pub iterates: Vec<FqiIterate>,
    /// Estimate after the last iteration.
    pub final_f: StepTables,
    pub reference: StepTables,
    pub calibrate: bool,
}

fn horizon_of(mdp: &TabularMdp) -> Result<usize, TheoryError> {
    mdp.horizon.ok_or_else(|| TheoryError::Invalid("finite-horizon MDP required".into()))
}

fn zeros(h: usize, s: usize, a: usize) -> StepTables {
    vec![vec![vec![0.0; a]; s]; h]
}

fn check_tables(t: &StepTables, h: usize, s: usize, a: usize, what: &str) -> Result<(), TheoryError> {
    let ok = t.len() == h && t.iter().all(|x| x.len() == s && x.iter().all(|r| r.len() == a && r.iter().all(|v| v.is_finite())));
    if ok {
        Ok(())
    } else {
        Err(TheoryError::Invalid(format!("{what} tables must be {h}x{s}x{a} and finite")))
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Deterministic greedy policy; ties go to the lowest action index.
pub fn greedy_policy(f: &StepTables) -> Vec<TabularPolicy> {
    f.iter()
        .map(|step| {
            step.iter()
                .map(|row| {
                    let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                    let mut p = vec![0.0; row.len()];
                    p[best] = 1.0;
                    p
                })
                .collect()
        })
        .collect()
}

/// One episode of per-step tuples under `policies`.
pub fn rollout_steps(mdp: &TabularMdp, policies: &[TabularPolicy], rng: &mut ChaCha8Rng) -> Vec<StepTuple> {
    let mut out = Vec::new();
    let mut s = sample_policy_action(&mdp.initial_dist, rng);
    for (h, pi) in policies.iter().enumerate() {
        let a = sample_policy_action(&pi[s], rng);
        let s_next = sample_policy_action(mdp.p_row(s, a), rng);
        let terminal = mdp.terminal[s];
        out.push(StepTuple { h, s, a, r: mdp.r(s, a), s_next, terminal });
        if terminal {
            break;
        }
        s = s_next;
    }
    out
}

/// `n_per_step` tuples at every step with `(s, a)` drawn from `dist[h]`
/// (flattened `s * A + a`).
pub fn sample_from_distribution(mdp: &TabularMdp, dist: &[Vec<f64>], n_per_step: usize, rng: &mut ChaCha8Rng) -> Vec<StepTuple> {
    let na = mdp.n_actions;
    let mut out = Vec::new();
    for (h, d) in dist.iter().enumerate() {
        for _ in 0..n_per_step {
            let idx = sample_policy_action(d, rng);
            let (s, a) = (idx / na, idx % na);
            let s_next = sample_policy_action(mdp.p_row(s, a), rng);
            out.push(StepTuple { h, s, a, r: mdp.r(s, a), s_next, terminal: mdp.terminal[s] });
        }
    }
    out
}

/// Backward least-squares pass. In tabular form the regression solution is the
/// per-pair mean target; unvisited pairs stay at 0. The pessimistic clamp and
/// then the calibration clip are applied at each step before it is used as
/// the next bootstrap.
fn regress(
    mdp: &TabularMdp,
    data: &[StepTuple],
    reference: &StepTables,
    calibrate: bool,
    bound: Option<&StepTables>,
    h_total: usize,
) -> StepTables {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut by_step: Vec<Vec<&StepTuple>> = vec![Vec::new(); h_total];
    for t in data {
        by_step[t.h].push(t);
    }
    let mut f = zeros(h_total + 1, ns, na);
    for h in (0..h_total).rev() {
        let mut sum = vec![vec![0.0; na]; ns];
        let mut cnt = vec![vec![0usize; na]; ns];
        for t in &by_step[h] {
            let boot = if t.terminal { 0.0 } else { row_max(&f[h + 1][t.s_next]) };
            sum[t.s][t.a] += t.r + boot;
            cnt[t.s][t.a] += 1;
        }
        for s in 0..ns {
            for a in 0..na {
                let mut v = if cnt[s][a] > 0 { sum[s][a] / cnt[s][a] as f64 } else { 0.0 };
                if let Some(b) = bound {
                    v = v.min(b[h][s][a]);
                }
                if calibrate {
                    v = v.max(reference[h][s][a]);
                }
                f[h][s][a] = v;
            }
        }
    }
    f
}

fn initial_estimate(mdp: &TabularMdp, reference: &StepTables, calibrate: bool, h_total: usize) -> StepTables {
    let mut f = zeros(h_total + 1, mdp.n_states, mdp.n_actions);
    if calibrate {
        for h in 0..h_total {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    f[h][s][a] = f[h][s][a].max(reference[h][s][a]);
                }
            }
        }
    }
    f
}

/// Runs `K` rounds of: act greedily on `f^k`, collect online episodes,
/// refit `f^{k+1}` on offline plus all online data, clip by the reference.
pub fn run_calibrated_fqi(mdp: &TabularMdp, offline_data: &[StepTuple], reference: &StepTables, cfg: &FqiConfig) -> Result<FqiHistory, TheoryError> {
    let h_total = horizon_of(mdp)?;
    if offline_data.is_empty() {
        return Err(TheoryError::EmptyOfflineData);
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    check_tables(reference, h_total, ns, na, "reference")?;
    if let Some(b) = &cfg.pessimistic_bound {
        check_tables(b, h_total, ns, na, "pessimistic bound")?;
    }
    if let Some(t) = offline_data.iter().find(|t| t.h >= h_total || t.s >= ns || t.a >= na || t.s_next >= ns) {
        return Err(TheoryError::Invalid(format!("tuple out of range: {t:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = offline_data.to_vec();
    let mut f = initial_estimate(mdp, reference, cfg.calibrate, h_total);
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let policy = greedy_policy(&f[..h_total].to_vec());
        for _ in 0..cfg.online_per_iteration {
            data.extend(rollout_steps(mdp, &policy, &mut rng));
        }
        let next = regress(mdp, &data, reference, cfg.calibrate, cfg.pessimistic_bound.as_ref(), h_total);
        iterates.push(FqiIterate { k, f, policy });
        f = next;
    }
    Ok(FqiHistory { iterates, final_f: f, reference: reference.clone(), calibrate: cfg.calibrate })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegretRow {
    pub k: usize,
    /// `E_rho[V* - max_a f^k_0]`.
    pub miscalibration: f64,
    /// `E_rho[max_a f^k_0 - V^{pi^k}]`.
    pub overestimation: f64,
    pub regret: f64,
    pub cum_regret: f64,
}

pub fn regret_decomposition(mdp: &TabularMdp, history: &FqiHistory) -> Result<Vec<RegretRow>, TheoryError> {
    horizon_of(mdp)?;
    let v_star = mdp.optimal_values().v[0].clone();
    let e_star = mdp.initial_value(&v_star);
    let mut cum = 0.0;
    let mut rows = Vec::with_capacity(history.iterates.len());
    for it in &history.iterates {
        let v_pi = mdp.finite_horizon_values(&it.policy).map_err(|e| TheoryError::Invalid(e.to_string()))?.v[0].clone();
        let max_f: Vec<f64> = it.f[0].iter().map(|r| row_max(r)).collect();
        let e_f = mdp.initial_value(&max_f);
        let e_pi = mdp.initial_value(&v_pi);
        let regret = e_star - e_pi;
        cum += regret;
        rows.push(RegretRow { k: it.k, miscalibration: e_star - e_f, overestimation: e_f - e_pi, regret, cum_regret: cum });
    }
    Ok(rows)
}

pub fn write_regret_csv<W: Write>(out: W, rows: &[RegretRow], calibrate: bool, seed: u64) -> Result<(), TheoryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "term_i", "term_ii", "regret", "cum_regret", "calibrate_flag", "seed"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.miscalibration.to_string(),
            r.overestimation.to_string(),
            r.regret.to_string(),
            r.cum_regret.to_string(),
            (calibrate as u8).to_string(),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_regret_csv`]; the flag and seed columns are dropped.
pub fn read_regret_csv<R: std::io::Read>(input: R) -> Result<Vec<RegretRow>, TheoryError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("k") || header.len() < 5 {
        return Err(TheoryError::Invalid("not a regret table".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| TheoryError::Invalid(format!("column {i}: {e}")));
        let k = rec[0].parse::<usize>().map_err(|e| TheoryError::Invalid(format!("k: {e}")))?;
        rows.push(RegretRow { k, miscalibration: num(1)?, overestimation: num(2)?, regret: num(3)?, cum_regret: num(4)? });
    }
    Ok(rows)
}

/// State-action occupancy `d_h^pi` for each step, flattened `s * A + a`.
pub fn occupancy(mdp: &TabularMdp, policies: &[TabularPolicy]) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut state = mdp.initial_dist.clone();
    let mut out = Vec::with_capacity(policies.len());
    for pi in policies {
        let mut d = vec![0.0; ns * na];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = state[s] * pi[s][a];
                d[s * na + a] = w;
                if !mdp.terminal[s] {
                    for (s2, p) in mdp.p_row(s, a).iter().enumerate() {
                        next[s2] += w * p;
                    }
                }
            }
        }
        out.push(d);
        state = next;
    }
    out
}

/// `T f_{h+1} - f_h` for every step and pair.
pub fn bellman_errors(mdp: &TabularMdp, f: &StepTables) -> StepTables {
    let h_total = f.len() - 1;
    (0..h_total)
        .map(|h| {
            let vmax: Vec<f64> = f[h + 1].iter().map(|r| row_max(r)).collect();
            (0..mdp.n_states)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| {
                            let boot = if mdp.terminal[s] { 0.0 } else { mdp.p_row(s, a).iter().zip(&vmax).map(|(p, v)| p * v).sum() };
                            mdp.r(s, a) + boot - f[h][s][a]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Ratio of on-policy Bellman error to its offline root-mean-square, maximized
/// over `grid`. Each candidate has `H + 1` tables (the last one zero).
///
/// With `reference`, candidates below it anywhere are dropped and no floor is
/// applied; without, the result is floored at 0. Candidates with zero
/// numerator and denominator are skipped, and a zero denominator with a
/// nonzero numerator gives `+inf`. When every candidate is skipped the result is 0.
pub fn transfer_coefficient<I>(
    mdp: &TabularMdp,
    policy: &[TabularPolicy],
    offline_dist: &[Vec<f64>],
    grid: I,
    reference: Option<&StepTables>,
) -> Result<f64, TheoryError>
where
    I: IntoIterator<Item = StepTables>,
{
    let h_total = horizon_of(mdp)?;
    if policy.len() != h_total || offline_dist.len() != h_total {
        return Err(TheoryError::Invalid("policy and offline distribution need one entry per step".into()));
    }
    let d_pi = occupancy(mdp, policy);
    let na = mdp.n_actions;
    let mut best = f64::NEG_INFINITY;
    let mut seen = false;
    for f in grid {
        if let Some(r) = reference {
            let above = (0..h_total).all(|h| f[h].iter().zip(&r[h]).all(|(fr, rr)| fr.iter().zip(rr).all(|(x, y)| x >= y)));
            if !above {
                continue;
            }
        }
        seen = true;
        let err = bellman_errors(mdp, &f);
        let mut num = 0.0;
        let mut den = 0.0;
        for h in 0..h_total {
            for (s, row) in err[h].iter().enumerate() {
                for (a, e) in row.iter().enumerate() {
                    num += d_pi[h][s * na + a] * e;
                    den += offline_dist[h][s * na + a] * e * e;
                }
            }
        }
        let ratio = if den > 0.0 {
            num / den.sqrt()
        } else if num == 0.0 {
            continue;
        } else {
            num.signum() * f64::INFINITY
        };
        best = best.max(ratio);
    }
    if !seen {
        return Err(TheoryError::EmptyGrid);
    }
    if best == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(if reference.is_some() { best } else { best.max(0.0) })
}

/// Every table of `H` steps whose entries are drawn from `levels`, with a zero
/// terminal table appended. Enumerates `levels.len()^(H*S*A)` candidates.
pub fn value_lattice(levels: &[f64], n_states: usize, n_actions: usize, horizon: usize) -> impl Iterator<Item = StepTables> + '_ {
    let n = horizon * n_states * n_actions;
    let mut digits = vec![0usize; n];
    let mut done = levels.is_empty();
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let mut f = zeros(horizon + 1, n_states, n_actions);
        for (i, d) in digits.iter().enumerate() {
            let h = i / (n_states * n_actions);
            let s = (i / n_actions) % n_states;
            f[h][s][i % n_actions] = levels[*d];
        }
        done = true;
        for d in digits.iter_mut() {
            *d += 1;
            if *d < levels.len() {
                done = false;
                break;
            }
            *d = 0;
        }
        Some(f)
    })
}

/// Evenly spaced levels `0, eps, 2 eps, ..., v_max`.
pub fn lattice_levels(v_max: f64, resolution: usize) -> Vec<f64> {
    let n = resolution.max(1);
    (0..=n).map(|i| v_max * i as f64 / n as f64).collect()
}

/// A member of the 4-state, 3-step family in which the reference policy is
/// close to optimal and the offline data covers only what it visits.
pub struct NearOptimalInstance {
    pub mdp: TabularMdp,
    pub reference_policy: Vec<TabularPolicy>,
    pub reference: StepTables,
    pub offline: Vec<StepTuple>,
}

pub const FAMILY_STATES: usize = 4;
pub const FAMILY_ACTIONS: usize = 3;
pub const FAMILY_HORIZON: usize = 3;

/// Builds a family member: a random MDP with rewards in `[0, 1]`, a reference
/// that plays the optimal action with probability `1 - eps` (uniform
/// otherwise), and `offline_episodes` reference rollouts.
pub fn near_optimal_instance(seed: u64, eps: f64, offline_episodes: usize) -> Result<NearOptimalInstance, TheoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp::random(&mut rng, FAMILY_STATES, FAMILY_ACTIONS, 1.0, Some(FAMILY_HORIZON));
    let opt = mdp.optimal_values();
    let reference_policy: Vec<TabularPolicy> = greedy_policy(&opt.q)
        .into_iter()
        .map(|step| step.into_iter().map(|row| row.iter().map(|p| (1.0 - eps) * p + eps / FAMILY_ACTIONS as f64).collect()).collect())
        .collect();
    let reference = mdp.finite_horizon_values(&reference_policy).map_err(|e| TheoryError::Invalid(e.to_string()))?.q;
    let mut offline = Vec::new();
    for _ in 0..offline_episodes.max(1) {
        offline.extend(rollout_steps(&mdp, &reference_policy, &mut rng));
    }
    Ok(NearOptimalInstance { mdp, reference_policy, reference, offline })
}
