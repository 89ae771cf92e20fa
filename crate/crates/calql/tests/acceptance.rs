//! Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
//! Exits non-zero when any criterion fails.

use calql::agents::{calibrated_regularizer, cql_regularizer, critic_step, td_targets, Backup, ReferenceValues, TabularCritic};
use calql::data::{Composition, OfflineDataset, Transition};
use calql::env::{Action, State, TabularMdp, TabularPolicy};
use calql::harness::{sweep, ExperimentConfig, RunLog};
use calql::metrics::{cumulative_regret_metric, detect_unlearning_dip, normalized_score, Outcome};
use calql::nn::{Activation, Graph, Mlp, Tensor, Var};
use calql::replay::{Batch, MixedReplayBuffer, MixingRatio, Source};
use calql::theory::{
    lattice_levels, near_optimal_instance, occupancy, regret_decomposition, run_calibrated_fqi, transfer_coefficient, value_lattice,
    FqiConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn transition(s: usize, a: usize, r: f64, s2: usize, done: bool) -> Transition {
    Transition {
        s: State::Id(s),
        a: Action::Id(a),
        r,
        s_next: State::Id(s2),
        done,
        truncated: false,
        mc_return: 0.0,
        mc_unreliable: false,
        traj_id: 0,
        step_idx: 0,
    }
}

fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
    (0..ns)
        .map(|_| {
            let w: Vec<f64> = (0..na).map(|_| rng.gen::<f64>() + 0.05).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        })
        .collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

// 1. Without the regularizer the critic is a damped expected SARSA backup, so
// on the expected batch (every (s, a, s') weighted by P) it must reach Q^pi.
fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng, 6, 3, 0.9, None);
        let policy = random_policy(&mut rng, 6, 3);
        let (_, q_exact) = mdp.exact_policy_values(&policy).map_err(|e| e.to_string())?;
        let mut items = Vec::new();
        let mut weights = Vec::new();
        for s in 0..6 {
            for a in 0..3 {
                for s2 in 0..6 {
                    items.push(transition(s, a, mdp.r(s, a), s2, false));
                    weights.push(mdp.p(s, a, s2));
                }
            }
        }
        let n = items.len();
        let batch = Batch { items, sources: vec![Source::Offline; n], weights: Some(weights) };
        let mut critic = TabularCritic::zeros(6, 3);
        let backup = Backup::Expected { entropy_temperature: None };
        for _ in 0..5000 {
            let y = td_targets(&critic.target, &policy, &batch, mdp.gamma, backup).map_err(|e| e.to_string())?;
            // Per-state weight is the action count, so step 3 gives a full move.
            critic_step(&mut critic, &policy, &batch, &y, 0.0, None, 3.0, 0.5).map_err(|e| e.to_string())?;
        }
        worst = worst.max(max_abs_diff(&critic.q, &q_exact));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-4 && secs < 10.0, format!("max |Q - Q^pi| = {worst:.2e} over 20 MDPs in {secs:.2}s"))
}

// 2. A disabled reference masks nothing, so the calibrated regularizer and its
// gradient step must match plain CQL.
fn regularizer_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut step_mismatch = 0;
    for _ in 0..1000 {
        let ns = rng.gen_range(1..8);
        let na = rng.gen_range(1..6);
        let q: Vec<Vec<f64>> = (0..ns).map(|_| (0..na).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let policy = random_policy(&mut rng, ns, na);
        let b = rng.gen_range(1..40);
        let items: Vec<Transition> =
            (0..b).map(|_| transition(rng.gen_range(0..ns), rng.gen_range(0..na), rng.gen(), rng.gen_range(0..ns), false)).collect();
        let batch = Batch { items, sources: vec![Source::Offline; b], weights: None };
        let disabled = ReferenceValues::Disabled;
        let refs: Vec<Vec<f64>> = batch
            .items
            .iter()
            .map(|t| (0..na).map(|a| disabled.lookup(t, &Action::Id(a))).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let cal = calibrated_regularizer(&q, &policy, &batch, &refs).map_err(|e| e.to_string())?;
        let cql = cql_regularizer(&q, &policy, &batch).map_err(|e| e.to_string())?;
        let direct: f64 = batch
            .items
            .iter()
            .map(|t| {
                let (s, a) = (t.s.id().unwrap(), t.a.id().unwrap());
                policy[s].iter().zip(&q[s]).map(|(p, v)| p * v).sum::<f64>() - q[s][a]
            })
            .sum::<f64>()
            / b as f64;
        worst = worst.max((cal.value - cql.value).abs()).max((cal.value - direct).abs());

        let y: Vec<f64> = (0..b).map(|_| rng.gen()).collect();
        let mut c1 = TabularCritic { q: q.clone(), target: q.clone() };
        let mut c2 = c1.clone();
        critic_step(&mut c1, &policy, &batch, &y, 5.0, Some(&refs), 0.3, 0.05).map_err(|e| e.to_string())?;
        critic_step(&mut c2, &policy, &batch, &y, 5.0, None, 0.3, 0.05).map_err(|e| e.to_string())?;
        if c1 != c2 {
            step_mismatch += 1;
        }
    }
    ensure(
        worst <= 1e-12 && step_mismatch == 0,
        format!("max regularizer gap {worst:.1e}, critic-step mismatches {step_mismatch} over 1000 batches"),
    )
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct SweepResult {
    logs: Vec<RunLog>,
    secs: f64,
}

fn run_sweep(name: &str) -> Result<SweepResult, String> {
    let cfg = ExperimentConfig::from_file(&config_path(name)).map_err(|e| format!("{name}: {e}"))?;
    let start = Instant::now();
    let mut logs = Vec::new();
    for (seed, res) in sweep(&cfg, &cfg.seeds) {
        logs.push(res.map_err(|e| format!("{name} seed {seed}: {e}"))?);
    }
    Ok(SweepResult { logs, secs: start.elapsed().as_secs_f64() })
}

fn offline_final(log: &RunLog) -> Option<&calql::metrics::RunRecord> {
    log.records().into_iter().filter(|r| r.phase == "offline").last()
}

fn online(log: &RunLog) -> Vec<&calql::metrics::RunRecord> {
    log.records().into_iter().filter(|r| r.phase == "online").collect()
}

fn dataset_mc(log: &RunLog) -> f64 {
    log.summary().map_or(f64::NAN, |s| s.dataset_mean_mc_return)
}

// 3. Expected policy value over dataset states stays above the dataset return.
fn calibration_property(narrow_calql: &SweepResult) -> Check {
    let per_seed = narrow_calql.secs / narrow_calql.logs.len() as f64;
    let mut lines = Vec::new();
    let mut ok = per_seed < 120.0;
    for log in &narrow_calql.logs {
        let r = offline_final(log).ok_or("no offline record")?;
        let pass = r.dataset_policy_value >= r.dataset_reference_value - 1e-3;
        ok &= pass;
        lines.push(format!("s{}: {:.3}>={:.3}", log.seed(), r.dataset_policy_value, r.dataset_reference_value));
    }
    ensure(ok, format!("{} ({per_seed:.1}s/seed)", lines.join(", ")))
}

fn dip_depths(log: &RunLog) -> Result<f64, String> {
    let off = offline_final(log).ok_or("no offline record")?.normalized_score;
    let series: Vec<(u64, f64)> = online(log).iter().map(|r| (r.step, r.normalized_score)).collect();
    let dip = detect_unlearning_dip(&series, off, 10, 0.05).map_err(|e| e.to_string())?;
    // Depth relative to the offline score.
    Ok(if off > 0.0 { dip.depth / off } else { 0.0 })
}

fn mean_online_bounding_rate(log: &RunLog) -> f64 {
    let on = online(log);
    on.iter().map(|r| r.bounding_rate).sum::<f64>() / on.len().max(1) as f64
}

// 4. Narrow data: CQL unlearns then recovers, Cal-QL does not. Diverse data:
// neither dips and the reference rarely binds.
fn unlearning_dip(runs: &BTreeMap<&str, SweepResult>) -> Check {
    let depths = |name: &str| runs[name].logs.iter().map(dip_depths).collect::<Result<Vec<f64>, String>>();
    let cql = depths("narrow_dip_cql.conf")?;
    let calql = depths("narrow_dip_calql.conf")?;
    let div_cql = depths("diverse_cql.conf")?;
    let div_calql = depths("diverse_calql.conf")?;
    let cql_dips = cql.iter().filter(|d| **d >= 0.2).count();
    let calql_flat = calql.iter().filter(|d| **d <= 0.05).count();
    let div_flat = div_cql.iter().chain(&div_calql).all(|d| *d <= 0.05);
    let br: Vec<f64> = runs["diverse_calql.conf"].logs.iter().map(mean_online_bounding_rate).collect();
    let br_mean = br.iter().sum::<f64>() / br.len() as f64;
    let br_cql: f64 = runs["diverse_cql.conf"].logs.iter().map(mean_online_bounding_rate).sum::<f64>() / div_cql.len() as f64;
    let slowest = runs.values().map(|r| r.secs / r.logs.len() as f64).fold(0.0, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join(" ");
    ensure(
        cql_dips >= 4 && calql_flat >= 4 && div_flat && br_mean < 0.05 && br_cql < 0.05 && slowest < 300.0,
        format!(
            "narrow depth cql [{}] calql [{}]; diverse depth cql [{}] calql [{}]; diverse bounding rate {br_mean:.3} ({slowest:.1}s/seed max)",
            fmt(&cql),
            fmt(&calql),
            fmt(&div_cql),
            fmt(&div_calql)
        ),
    )
}

// 5. CQL starts well below the dataset return and climbs back during
// fine-tuning; Cal-QL starts on scale.
fn q_scale(runs: &BTreeMap<&str, SweepResult>) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for log in &runs["narrow_cql.conf"].logs {
        let mc = dataset_mc(log);
        let q_off = offline_final(log).ok_or("no offline record")?.avg_dataset_q;
        let closest = online(log).iter().map(|r| (r.avg_dataset_q - mc).abs()).fold(f64::INFINITY, f64::min);
        let pass = q_off <= 0.75 * mc && closest <= 0.1 * mc;
        ok &= pass;
        parts.push(format!("cql s{}: off {q_off:.2} mc {mc:.2} best-gap {closest:.3}", log.seed()));
    }
    for log in &runs["narrow_calql.conf"].logs {
        let mc = dataset_mc(log);
        let q_off = offline_final(log).ok_or("no offline record")?.avg_dataset_q;
        let pass = (q_off - mc).abs() <= 0.1 * mc;
        ok &= pass;
        parts.push(format!("calql s{}: off {q_off:.3}", log.seed()));
    }
    ensure(ok, parts.join("; "))
}

fn tagged(source_id: usize, i: usize) -> Transition {
    let mut t = transition(i, 0, 0.0, i, true);
    t.traj_id = source_id;
    t.step_idx = i;
    t
}

// 6. Offline counts follow round-half-up of m*B; pooled draws are uniform.
fn mixing_ratio() -> Check {
    let n_off = 12;
    let n_on = 8;
    let ds = OfflineDataset { transitions: (0..n_off).map(|i| tagged(0, i)).collect(), composition: Composition::Narrow, gamma_used: 0.9 };
    let mut buf = MixedReplayBuffer::new(Arc::new(ds), 100, MixingRatio::Fraction(0.5)).map_err(|e| e.to_string())?;
    for i in 0..n_on {
        buf.push_online(tagged(1, i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for quarters in [0usize, 1, 2, 4] {
        let m = MixingRatio::new(quarters as f64 / 4.0).map_err(|e| e.to_string())?;
        for b in 1..=64usize {
            let expected_off = (quarters * b + 2) / 4;
            let batch = buf.sample_with(m, b, &mut rng).map_err(|e| e.to_string())?;
            let from_tags = batch.items.iter().filter(|t| t.traj_id == 0).count();
            if batch.len() != b || batch.count(Source::Offline) != expected_off || from_tags != expected_off {
                bad += 1;
            }
        }
    }
    let draws = 100_000;
    let mut counts = vec![0u64; n_off + n_on];
    let pooled = buf.sample_with(MixingRatio::Pooled, draws, &mut rng).map_err(|e| e.to_string())?;
    for t in &pooled.items {
        counts[t.traj_id * n_off + t.step_idx] += 1;
    }
    let expected = draws as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| e.to_string())?.inverse_cdf(0.99);
    ensure(bad == 0 && chi2 < crit, format!("{bad} count mismatches over 256 cases; chi2 {chi2:.1} < {crit:.1}"))
}

type Loss = fn(&mut Graph, Var, &[usize], &Tensor) -> Var;

fn loss_mse(g: &mut Graph, q: Var, _: &[usize], y: &Tensor) -> Var {
    let t = g.leaf(y.clone());
    let d = g.sub(q, t);
    let s = g.square(d);
    g.mean(s)
}

fn loss_cql(g: &mut Graph, q: Var, a: &[usize], _: &Tensor) -> Var {
    let lse = g.logsumexp_rows(q);
    let data = g.gather(q, a.to_vec());
    let gap = g.sub(lse, data);
    g.mean(gap)
}

fn loss_soft_policy(g: &mut Graph, q: Var, _: &[usize], y: &Tensor) -> Var {
    let logp = g.log_softmax_rows(q);
    let p = g.exp(logp);
    let t = g.leaf(y.clone());
    let adv = g.sub(logp, t);
    let w = g.mul(p, adv);
    let s = g.sum_cols(w);
    g.mean(s)
}

fn loss_softplus_tanh(g: &mut Graph, q: Var, a: &[usize], _: &Tensor) -> Var {
    let sp = g.softplus(q);
    let th = g.tanh(sp);
    let picked = g.gather(th, a.to_vec());
    let e = g.exp(picked);
    g.sum(e)
}

fn loss_value(net: &Mlp, x: &Tensor, a: &[usize], y: &Tensor, loss: Loss) -> f64 {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let (q, _) = net.forward_on(&mut g, xv).unwrap();
    let l = loss(&mut g, q, a, y);
    g.value(l).item()
}

// 7. Reverse-mode gradients against central differences.
fn gradient_check() -> Check {
    let losses: [Loss; 4] = [loss_mse, loss_cql, loss_soft_policy, loss_softplus_tanh];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for case in 0..20 {
        let n_in = rng.gen_range(1..5);
        let n_out = rng.gen_range(2..5);
        let depth = rng.gen_range(1..3);
        let mut widths = vec![n_in];
        widths.extend((0..depth).map(|_| rng.gen_range(2..7)));
        widths.push(n_out);
        let mut net = Mlp::new(&widths, Activation::Tanh, &mut rng);
        let rows = rng.gen_range(1..6);
        let x = Tensor::matrix(rows, n_in, (0..rows * n_in).map(|_| rng.gen_range(-1.5..1.5)).collect());
        let a: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..n_out)).collect();
        let y = Tensor::matrix(rows, n_out, (0..rows * n_out).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let loss = losses[case % losses.len()];

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (q, leaves) = net.forward_on(&mut g, xv).map_err(|e| e.to_string())?;
        let l = loss(&mut g, q, &a, &y);
        let grads = g.backward(l, None).map_err(|e| e.to_string())?;
        let analytic: Vec<Tensor> = leaves.iter().zip(net.params()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();

        for (pi, an) in analytic.iter().enumerate() {
            for j in 0..an.data.len() {
                let orig = net.params()[pi].data[j];
                net.params_mut()[pi].data[j] = orig + h;
                let up = loss_value(&net, &x, &a, &y, loss);
                net.params_mut()[pi].data[j] = orig - h;
                let down = loss_value(&net, &x, &a, &y, loss);
                net.params_mut()[pi].data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (an.data[j] - fd).abs() / an.data[j].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e} over 20 network/loss pairs"))
}

// 8. Decomposition identity, clipping invariant, transfer-coefficient order and
// the directional regret comparison.
fn theory_suite() -> Check {
    let start = Instant::now();
    let mut identity_gap = 0.0f64;
    let mut clip_violations = 0usize;
    for seed in 0..50 {
        let inst = near_optimal_instance(seed, 0.3, 2).map_err(|e| e.to_string())?;
        let mdp = &inst.mdp;
        for calibrate in [false, true] {
            let cfg = FqiConfig { iterations: 6, online_per_iteration: 1, calibrate, pessimistic_bound: None, seed };
            let hist = run_calibrated_fqi(mdp, &inst.offline, &inst.reference, &cfg).map_err(|e| e.to_string())?;
            let rows = regret_decomposition(mdp, &hist).map_err(|e| e.to_string())?;
            let v_star = mdp.optimal_values().v[0].clone();
            for (row, it) in rows.iter().zip(&hist.iterates) {
                let v_pi = mdp.finite_horizon_values(&it.policy).map_err(|e| e.to_string())?.v[0].clone();
                let exact: f64 = (0..mdp.n_states).map(|s| mdp.initial_dist[s] * (v_star[s] - v_pi[s])).sum();
                identity_gap = identity_gap.max((row.miscalibration + row.overestimation - row.regret).abs()).max((row.regret - exact).abs());
            }
            if calibrate {
                let tables = hist.iterates.iter().skip(1).map(|it| &it.f).chain(std::iter::once(&hist.final_f));
                for f in tables {
                    for (fh, rh) in f.iter().zip(&inst.reference) {
                        clip_violations += fh.iter().zip(rh).flat_map(|(a, b)| a.iter().zip(b)).filter(|(x, r)| x < r).count();
                    }
                }
            }
        }
    }

    let (horizon, ns, na) = (2, 3, 2);
    let levels = lattice_levels(horizon as f64, 2);
    let mut order_violations = 0;
    let mut coeffs = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mdp = TabularMdp::random(&mut rng, ns, na, 1.0, Some(horizon));
        let behavior: Vec<TabularPolicy> = (0..horizon).map(|_| random_policy(&mut rng, ns, na)).collect();
        let reference = mdp.finite_horizon_values(&behavior).map_err(|e| e.to_string())?.q;
        let target = calql::theory::greedy_policy(&mdp.optimal_values().q);
        let nu = occupancy(&mdp, &behavior);
        let full = transfer_coefficient(&mdp, &target, &nu, value_lattice(&levels, ns, na, horizon), None).map_err(|e| e.to_string())?;
        let cal = transfer_coefficient(&mdp, &target, &nu, value_lattice(&levels, ns, na, horizon), Some(&reference))
            .map_err(|e| e.to_string())?;
        if cal > full + 1e-9 {
            order_violations += 1;
        }
        coeffs.push((cal, full));
    }

    let mut sums = [0.0f64; 2];
    for seed in 0..20 {
        let inst = near_optimal_instance(seed, 0.1, 2).map_err(|e| e.to_string())?;
        for (i, calibrate) in [false, true].into_iter().enumerate() {
            let cfg = FqiConfig { iterations: 50, online_per_iteration: 1, calibrate, pessimistic_bound: None, seed };
            let hist = run_calibrated_fqi(&inst.mdp, &inst.offline, &inst.reference, &cfg).map_err(|e| e.to_string())?;
            let rows = regret_decomposition(&inst.mdp, &hist).map_err(|e| e.to_string())?;
            sums[i] += rows.last().map_or(0.0, |r| r.cum_regret);
        }
    }
    let (plain, calibrated) = (sums[0] / 20.0, sums[1] / 20.0);
    let secs = start.elapsed().as_secs_f64();
    let mean_ratio = coeffs.iter().map(|(c, f)| if *f > 0.0 { c / f } else { 1.0 }).sum::<f64>() / coeffs.len() as f64;
    ensure(
        identity_gap <= 1e-9 && clip_violations == 0 && order_violations == 0 && calibrated <= plain && secs < 300.0,
        format!(
            "identity gap {identity_gap:.1e}; clip violations {clip_violations}; coefficient order violations {order_violations} (mean calibrated/full {mean_ratio:.2}); Reg(50) calibrated {calibrated:.3} vs plain {plain:.3}; {secs:.1}s"
        ),
    )
}

// 9. Metric boundary values.
fn metric_definitions() -> Check {
    let zero = cumulative_regret_metric(&[0.0; 8]).map_err(|e| e.to_string())?;
    let one = cumulative_regret_metric(&[1.0; 8]).map_err(|e| e.to_string())?;
    let frac = normalized_score(Outcome::Subtasks { solved: 3, total: 4 });
    ensure(zero == 1.0 && one == 0.0 && frac == 0.75, format!("all-zero {zero}, all-one {one}, 3/4 subtasks {frac}"))
}

// 10. Every seed of every experiment reproduces its run-log hash.
fn determinism(runs: &BTreeMap<&str, SweepResult>) -> Check {
    let mut mismatches = Vec::new();
    let mut n = 0;
    for (name, first) in runs {
        let again = run_sweep(name)?;
        for (a, b) in first.logs.iter().zip(&again.logs) {
            n += 1;
            if a.hash() != b.hash() {
                mismatches.push(format!("{name} s{}", a.seed()));
            }
        }
    }
    ensure(mismatches.is_empty(), format!("{n} runs repeated, mismatches: [{}]", mismatches.join(", ")))
}

fn report(id: usize, name: &str, res: Check, failed: &mut usize) {
    match res {
        Ok(detail) => println!("criterion {id:>2} {name}: PASS  {detail}"),
        Err(detail) => {
            *failed += 1;
            println!("criterion {id:>2} {name}: FAIL  {detail}");
        }
    }
}

fn main() {
    let mut failed = 0;
    report(1, "oracle equivalence", oracle_equivalence(), &mut failed);
    report(2, "cql/cal-ql identity", regularizer_identity(), &mut failed);

    let names = ["narrow_calql.conf", "narrow_cql.conf", "narrow_dip_calql.conf", "narrow_dip_cql.conf", "diverse_calql.conf", "diverse_cql.conf"];
    let mut runs = BTreeMap::new();
    let mut sweep_error = None;
    for name in names {
        match run_sweep(name) {
            Ok(r) => {
                runs.insert(name, r);
            }
            Err(e) => sweep_error = Some(e),
        }
    }
    let experiments = |f: &dyn Fn(&BTreeMap<&str, SweepResult>) -> Check| match &sweep_error {
        Some(e) => Err(e.clone()),
        None => f(&runs),
    };
    report(3, "calibration property", experiments(&|r| calibration_property(&r["narrow_calql.conf"])), &mut failed);
    report(4, "unlearning dip", experiments(&unlearning_dip), &mut failed);
    report(5, "q-scale correction", experiments(&q_scale), &mut failed);
    report(6, "mixing ratio", mixing_ratio(), &mut failed);
    report(7, "gradient correctness", gradient_check(), &mut failed);
    report(8, "theory suite", theory_suite(), &mut failed);
    report(9, "metric definitions", metric_definitions(), &mut failed);
    report(10, "determinism", experiments(&determinism), &mut failed);

    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
