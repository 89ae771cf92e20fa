use calql::data::{
    compute_mc_returns, fit_reference_q, generate_dataset, mc_from_rewards, truncate_positive_segments, Composition, OfflineDataset,
    ReferenceFamily, Trajectory, Transition, UniformRandom,
};
use calql::env::{Action, ActionSpace, EpisodeStep, FeatureKind, GridMaze, MazeEnv, State, TabularMdp};
use proptest::prelude::*;

fn tr(s: usize, a: usize, r: f64, s2: usize, traj: usize, step: usize) -> Transition {
    Transition {
        s: State::Id(s),
        a: Action::Id(a),
        r,
        s_next: State::Id(s2),
        done: false,
        truncated: false,
        mc_return: 0.0,
        mc_unreliable: false,
        traj_id: traj,
        step_idx: step,
    }
}

// Dataset whose empirical behavior and transition frequencies equal the exact
// ones, so the fitted SARSA table must equal Q^mu of the uniform policy.
#[test]
fn sarsa_reference_matches_exact_values() {
    let (ns, na) = (3, 2);
    // Transition rows in quarters.
    let quarters: [[[usize; 3]; 2]; 3] = [[[4, 0, 0], [1, 2, 1]], [[0, 2, 2], [3, 0, 1]], [[1, 1, 2], [0, 0, 4]]];
    let reward = vec![0.1, 0.7, 0.0, 0.4, 1.0, 0.25];
    let mut transition = Vec::new();
    let mut items = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            for (s2, &q) in quarters[s][a].iter().enumerate() {
                transition.push(q as f64 / 4.0);
                for _ in 0..q {
                    items.push(tr(s, a, reward[s * na + a], s2, items.len(), 0));
                }
            }
        }
    }
    let gamma = 0.8;
    let mdp = TabularMdp::new(ns, na, transition, reward, vec![1.0, 0.0, 0.0], gamma, None).unwrap();
    let (_, q_exact) = mdp.exact_policy_values(&vec![vec![0.5, 0.5]; ns]).unwrap();
    let ds = OfflineDataset { transitions: items, composition: Composition::Diverse, gamma_used: gamma };
    let fitted = fit_reference_q(&ds, &ReferenceFamily::TabularSarsa, ns, na).unwrap();
    let table = fitted.table(f64::NAN);
    for s in 0..ns {
        for a in 0..na {
            assert!((table[s][a] - q_exact[s][a]).abs() < 1e-4, "({s},{a}): {} vs {}", table[s][a], q_exact[s][a]);
        }
    }
}

#[test]
fn network_regression_fits_hundred_points() {
    let (ns, na) = (10, 2);
    let transitions: Vec<Transition> = (0..100)
        .map(|i| {
            let (s, a) = (i % ns, (i / ns) % na);
            let mut t = tr(s, a, 0.0, s, i, 0);
            t.mc_return = 0.1 * s as f64 - 0.3 * a as f64;
            t
        })
        .collect();
    let ds = OfflineDataset { transitions, composition: Composition::Diverse, gamma_used: 0.9 };
    let family = ReferenceFamily::NetworkRegression { hidden: vec![32], steps: 1500, lr: 1e-2, seed: 0 };
    let fitted = fit_reference_q(&ds, &family, ns, na).unwrap();
    // Golden value recorded at seed 0.
    assert!(fitted.rmse < 0.05, "rmse {}", fitted.rmse);
}

#[test]
fn random_policy_on_open_maze_golden_success_rate() {
    let maze = GridMaze::open(5, 5, (0, 0), (4, 4)).unwrap();
    let mut env = MazeEnv::new(maze, false, FeatureKind::Coords).unwrap();
    let mut b = UniformRandom { space: ActionSpace::Discrete(5) };
    let ds = generate_dataset(&mut env, &mut b, 100, 0, 0.9, Composition::Diverse).unwrap();
    let frac = ds.success_fraction();
    // Golden value recorded at seed 0.
    assert_eq!(frac, 0.12);
    assert_eq!(ds.n_trajectories(), 100);
}

fn steps_from(rewards: &[f64], done: bool) -> Trajectory {
    let n = rewards.len();
    let steps = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| EpisodeStep {
            state: State::Id(i),
            action: Action::Id(0),
            reward: r,
            next_state: State::Id(i + 1),
            done: done && i + 1 == n,
            truncated: !done && i + 1 == n,
        })
        .collect();
    Trajectory { steps, behavior_tag: "test".into() }
}

proptest! {
    #[test]
    fn mc_returns_satisfy_the_backward_recursion(rewards in prop::collection::vec(0.0f64..1.0, 1..40), gamma in 0.0f64..1.0) {
        let g = mc_from_rewards(&rewards, gamma);
        let n = rewards.len();
        prop_assert!((g[n - 1] - rewards[n - 1]).abs() < 1e-12);
        for i in 0..n - 1 {
            prop_assert!((g[i] - (rewards[i] + gamma * g[i + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_is_idempotent_and_flags_cut_returns(rewards in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 1..20), done in any::<bool>()) {
        let t = steps_from(&rewards, done);
        let once = truncate_positive_segments(&t);
        let twice = truncate_positive_segments(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.steps.iter().filter(|s| s.reward > 0.0).count() <= 1);
        let (_, unreliable) = compute_mc_returns(&once, 0.9);
        prop_assert_eq!(unreliable, !once.ends_in_terminal());
    }
}
