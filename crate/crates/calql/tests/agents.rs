use calql::agents::{
    actor_step, dual_alpha_update, expected_max_of_draws, phase_alpha, td_targets, AlphaConfig, Backup, Phase, TabularSoftmaxActor,
    ALPHA_MAX,
};
use calql::data::Transition;
use calql::env::{Action, State};
use calql::harness::{run_offline_phase, ExperimentConfig};
use calql::replay::{Batch, Source};
use proptest::prelude::*;

fn item(s: usize, a: usize, r: f64, s2: usize, done: bool) -> Transition {
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

fn batch(items: Vec<Transition>) -> Batch {
    let n = items.len();
    Batch { items, sources: vec![Source::Offline; n], weights: None }
}

#[test]
fn expected_backup_on_deterministic_chain() {
    // 0 -> 1 -> 2 (terminal step), two actions everywhere.
    let q = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![1.0, 1.0]];
    let pi = vec![vec![0.5, 0.5], vec![0.25, 0.75], vec![1.0, 0.0]];
    let b = batch(vec![item(0, 1, 0.5, 1, false), item(1, 0, 0.0, 2, false), item(2, 0, 1.0, 2, true)]);
    let y = td_targets(&q, &pi, &b, 0.9, Backup::Expected { entropy_temperature: None }).unwrap();
    let hand = [0.5 + 0.9 * 3.5, 0.9, 1.0];
    for (a, b) in y.iter().zip(hand) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn phase_alpha_uses_online_weight_online() {
    let cfg = AlphaConfig::pair(5.0, 0.5).unwrap();
    assert_eq!(phase_alpha(&cfg, Phase::Online), 0.5);
    assert_eq!(phase_alpha(&cfg, Phase::Offline), 5.0);
}

#[test]
fn dual_alpha_climbs_to_ceiling() {
    let mut log_alpha = 0.0;
    for _ in 0..10_000 {
        let next = dual_alpha_update(log_alpha, 2.0, 0.5, 0.01);
        assert!(next >= log_alpha);
        log_alpha = next;
    }
    assert!((log_alpha - ALPHA_MAX.ln()).abs() < 1e-12);
}

#[test]
fn policy_concentrates_on_unique_argmax() {
    let q = vec![vec![0.2, 1.0, 0.5]];
    let mut actor = TabularSoftmaxActor::uniform(1, 3, 1.0);
    let b = batch(vec![item(0, 0, 0.0, 0, true)]);
    for _ in 0..3000 {
        actor_step(&mut actor, &q, &b, 0.1, 0.0, 0.05).unwrap();
    }
    assert!(actor.probs(0)[1] > 0.999, "{:?}", actor.probs(0));
}

fn narrow_run(kind: &str, alpha: f64) -> ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/narrow_cql.conf");
    let text = std::fs::read_to_string(path)
        .unwrap()
        .replace("kind = cql", &format!("kind = {kind}"))
        .replace("alpha = 5", &format!("alpha = {alpha}"))
        .replace("critic_lr = 0.5", "critic_lr = 0.025")
        .replace("offline_every = 5000", "offline_every = 50000");
    ExperimentConfig::parse(&text, None).unwrap()
}

#[test]
fn heavy_conservatism_underestimates_and_calibration_fixes_it() {
    let cql = run_offline_phase(&narrow_run("cql", 100.0), 0).unwrap();
    let r = cql.log.records().last().copied().cloned().unwrap();
    assert!(r.dataset_policy_value < r.dataset_reference_value, "{} vs {}", r.dataset_policy_value, r.dataset_reference_value);
    let calql = run_offline_phase(&narrow_run("calql", 100.0), 0).unwrap();
    let r = calql.log.records().last().copied().cloned().unwrap();
    assert!(r.dataset_policy_value >= r.dataset_reference_value - 1e-6, "{} vs {}", r.dataset_policy_value, r.dataset_reference_value);
}

proptest! {
    #[test]
    fn max_of_draws_dominates_expectation(
        q in prop::collection::vec(-5.0f64..5.0, 1..6),
        w in prop::collection::vec(0.01f64..1.0, 6),
        k in 1usize..12,
    ) {
        let w = &w[..q.len()];
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / z).collect();
        let mean: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let one = expected_max_of_draws(&q, &p, 1);
        let many = expected_max_of_draws(&q, &p, k);
        let top = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((one - mean).abs() < 1e-9);
        prop_assert!(many >= mean - 1e-9);
        prop_assert!(many <= top + 1e-9);
        prop_assert!(expected_max_of_draws(&q, &p, 10) >= one - 1e-9);
    }
}
