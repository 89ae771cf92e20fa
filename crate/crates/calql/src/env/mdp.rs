use super::{Action, ActionSpace, EnvError, EpisodeStep, EpisodicEnv, State};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `policy[s][a]` = probability of action `a` in state `s`.
pub type TabularPolicy = Vec<Vec<f64>>;

/// Exact finite MDP.
///
/// Terminal states end the episode after one more action: acting in a terminal
/// state `s` collects `r(s, a)` and stops, so `V(s) = sum_a pi(a|s) r(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Flattened `(s, a, s')`.
    pub transition: Vec<f64>,
    /// Flattened `(s, a)`.
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub gamma: f64,
    pub horizon: Option<usize>,
    pub terminal: Vec<bool>,
}

/// Per-step value tables. Infinite-horizon results have a single step.
/// Finite-horizon results have `v.len() == H + 1` (with `v[H] == 0`) and `q.len() == H`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValues {
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<Vec<f64>>>,
}

const TOL: f64 = 1e-9;

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
        horizon: Option<usize>,
    ) -> Result<Self, EnvError> {
        let terminal = vec![false; n_states];
        Self::with_terminals(n_states, n_actions, transition, reward, initial_dist, gamma, horizon, terminal)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_terminals(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
        horizon: Option<usize>,
        terminal: Vec<bool>,
    ) -> Result<Self, EnvError> {
        let bad = |m: String| Err(EnvError::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return bad("empty state or action set".into());
        }
        if transition.len() != n_states * n_actions * n_states {
            return bad(format!("transition has {} entries", transition.len()));
        }
        if reward.len() != n_states * n_actions || initial_dist.len() != n_states || terminal.len() != n_states {
            return bad("table size mismatch".into());
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return bad(format!("negative transition probability in row {i}"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > TOL {
                return bad(format!("transition row {i} sums to {sum}"));
            }
        }
        if initial_dist.iter().any(|&p| !(p >= 0.0)) || (initial_dist.iter().sum::<f64>() - 1.0).abs() > TOL {
            return bad("initial distribution is not a probability vector".into());
        }
        if reward.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return bad("rewards must lie in [0, 1]".into());
        }
        match horizon {
            Some(0) => return bad("horizon must be positive".into()),
            Some(_) => {}
            None => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return bad(format!("gamma {gamma} outside (0, 1)"));
                }
            }
        }
        Ok(TabularMdp { n_states, n_actions, transition, reward, initial_dist, gamma, horizon, terminal })
    }

    /// Random MDP with dense transitions and uniform rewards.
    pub fn random(rng: &mut impl Rng, n_states: usize, n_actions: usize, gamma: f64, horizon: Option<usize>) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let z: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / z));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
        let rho: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let z: f64 = rho.iter().sum();
        let initial_dist = rho.iter().map(|p| p / z).collect();
        Self::new(n_states, n_actions, transition, reward, initial_dist, gamma, horizon)
            .expect("random MDP construction is valid by design")
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<(), EnvError> {
        if policy.len() != self.n_states || policy.iter().any(|row| row.len() != self.n_actions) {
            return Err(EnvError::InvalidMdp("policy shape does not match MDP".into()));
        }
        Ok(())
    }

    /// Exact `V^pi`, `Q^pi`. Infinite-horizon mode solves `(I - gamma P_pi) V = r_pi`;
    /// finite-horizon mode runs backward induction and returns the step-0 tables.
    pub fn exact_policy_values(&self, policy: &TabularPolicy) -> Result<(Vec<f64>, Vec<Vec<f64>>), EnvError> {
        self.check_policy(policy)?;
        match self.horizon {
            Some(h) => {
                let pols = vec![policy.clone(); h];
                let pv = self.finite_horizon_values(&pols)?;
                Ok((pv.v[0].clone(), pv.q[0].clone()))
            }
            None => {
                let n = self.n_states;
                let mut m = DMatrix::<f64>::identity(n, n);
                let mut rhs = DVector::<f64>::zeros(n);
                for s in 0..n {
                    for a in 0..self.n_actions {
                        let w = policy[s][a];
                        rhs[s] += w * self.r(s, a);
                        if !self.terminal[s] {
                            for s2 in 0..n {
                                m[(s, s2)] -= self.gamma * w * self.p(s, a, s2);
                            }
                        }
                    }
                }
                let v = m.lu().solve(&rhs).ok_or(EnvError::SingularSystem)?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EnvError::SingularSystem);
                }
                let v: Vec<f64> = v.iter().copied().collect();
                let q = self.q_from_v(&v);
                Ok((v, q))
            }
        }
    }

    /// `Q(s,a) = r(s,a) + gamma * E[V(s')]` (no bootstrap from terminal states).
    pub fn q_from_v(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| {
                        let cont = if self.terminal[s] {
                            0.0
                        } else {
                            self.p_row(s, a).iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
                        };
                        self.r(s, a) + self.gamma * cont
                    })
                    .collect()
            })
            .collect()
    }

    /// Backward induction with one policy per step (undiscounted, as in the
    /// finite-horizon analysis setting).
    pub fn finite_horizon_values(&self, policies: &[TabularPolicy]) -> Result<PolicyValues, EnvError> {
        let h = self
            .horizon
            .ok_or_else(|| EnvError::InvalidMdp("finite-horizon evaluation needs a horizon".into()))?;
        if policies.len() != h {
            return Err(EnvError::InvalidMdp(format!("expected {h} per-step policies, got {}", policies.len())));
        }
        for p in policies {
            self.check_policy(p)?;
        }
        let mut v = vec![vec![0.0; self.n_states]; h + 1];
        let mut q = vec![vec![vec![0.0; self.n_actions]; self.n_states]; h];
        for step in (0..h).rev() {
            for s in 0..self.n_states {
                let mut vs = 0.0;
                for a in 0..self.n_actions {
                    let qa = self.r(s, a) + self.expected_next(s, a, &v[step + 1]);
                    q[step][s][a] = qa;
                    vs += policies[step][s][a] * qa;
                }
                v[step][s] = vs;
            }
        }
        Ok(PolicyValues { v, q })
    }

    /// Optimal values: backward induction (finite horizon) or value iteration to
    /// 1e-12 (infinite horizon).
    pub fn optimal_values(&self) -> PolicyValues {
        match self.horizon {
            Some(h) => {
                let mut v = vec![vec![0.0; self.n_states]; h + 1];
                let mut q = vec![vec![vec![0.0; self.n_actions]; self.n_states]; h];
                for step in (0..h).rev() {
                    for s in 0..self.n_states {
                        for a in 0..self.n_actions {
                            q[step][s][a] = self.r(s, a) + self.expected_next(s, a, &v[step + 1]);
                        }
                        v[step][s] = q[step][s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                PolicyValues { v, q }
            }
            None => {
                let mut v = vec![0.0; self.n_states];
                loop {
                    let q = self.q_from_v(&v);
                    let nv: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
                    let diff = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    v = nv;
                    if diff < 1e-13 {
                        return PolicyValues { v: vec![v.clone()], q: vec![self.q_from_v(&v)] };
                    }
                }
            }
        }
    }

    fn expected_next(&self, s: usize, a: usize, v_next: &[f64]) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        self.p_row(s, a).iter().zip(v_next).map(|(p, x)| p * x).sum()
    }

    /// Largest elementwise violation of `Q = r + gamma P V`, `V = sum pi Q`.
    pub fn bellman_residual(&self, policy: &TabularPolicy, v: &[f64], q: &[Vec<f64>]) -> f64 {
        let qq = self.q_from_v(v);
        let mut worst: f64 = 0.0;
        for s in 0..self.n_states {
            let mut vs = 0.0;
            for a in 0..self.n_actions {
                worst = worst.max((qq[s][a] - q[s][a]).abs());
                vs += policy[s][a] * q[s][a];
            }
            worst = worst.max((vs - v[s]).abs());
        }
        worst
    }

    /// Expected initial-state value `E_rho[v]`.
    pub fn initial_value(&self, v: &[f64]) -> f64 {
        self.initial_dist.iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

/// Simulator over a [`TabularMdp`]; rewards are the mean table values.
#[derive(Clone, Debug)]
pub struct MdpEnv {
    pub mdp: TabularMdp,
    pub max_episode_len: usize,
    rng: ChaCha8Rng,
    state: Option<usize>,
    t: usize,
    finished: bool,
}

impl MdpEnv {
    pub fn new(mdp: TabularMdp, max_episode_len: usize) -> Self {
        MdpEnv { mdp, max_episode_len, rng: ChaCha8Rng::seed_from_u64(0), state: None, t: 0, finished: false }
    }
}

pub(crate) fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl EpisodicEnv for MdpEnv {
    fn reset(&mut self, seed: u64) -> State {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_index(&mut self.rng, &self.mdp.initial_dist);
        self.state = Some(s);
        self.t = 0;
        self.finished = false;
        State::Id(s)
    }

    fn step(&mut self, action: &Action) -> Result<EpisodeStep, EnvError> {
        if self.finished {
            return Err(EnvError::StepAfterDone);
        }
        let s = self.state.ok_or(EnvError::NotReset)?;
        let a = match action {
            Action::Id(a) if *a < self.mdp.n_actions => *a,
            other => return Err(EnvError::BadAction(other.clone())),
        };
        let reward = self.mdp.r(s, a);
        let done = self.mdp.terminal[s];
        let next = if done { s } else { sample_index(&mut self.rng, self.mdp.p_row(s, a)) };
        self.t += 1;
        let limit = self.mdp.horizon.unwrap_or(self.max_episode_len).min(self.max_episode_len);
        let truncated = !done && self.t >= limit;
        self.finished = done || truncated;
        self.state = Some(next);
        Ok(EpisodeStep { state: State::Id(s), action: action.clone(), reward, next_state: State::Id(next), done, truncated })
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions)
    }

    fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    fn feature_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn features(&self, state: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.mdp.n_states];
        f[state] = 1.0;
        f
    }

    fn is_success(&self, _step: &EpisodeStep) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], gamma, None).unwrap()
    }

    #[test]
    fn single_state_geometric_value() {
        let (v, q) = single_state(0.9).exact_policy_values(&vec![vec![1.0]]).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12);
        assert!((q[0][0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn chain_into_terminal() {
        // s0 -> s1 with reward 0; s1 is terminal and pays 1.
        let mdp = TabularMdp::with_terminals(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            0.5,
            None,
            vec![false, true],
        )
        .unwrap();
        let (v, _) = mdp.exact_policy_values(&vec![vec![1.0]; 2]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularMdp::new(1, 1, vec![0.5], vec![0.0], vec![1.0], 0.9, None).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![2.0], vec![1.0], 0.9, None).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![0.7], 0.9, None).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0, None).is_err());
    }

    #[test]
    fn values_are_deterministic_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = TabularMdp::random(&mut rng, 5, 3, 0.95, None);
        let pol: TabularPolicy = (0..5).map(|s| (0..3).map(|a| if a == s % 3 { 0.6 } else { 0.2 }).collect()).collect();
        let (v1, q1) = mdp.exact_policy_values(&pol).unwrap();
        let (v2, q2) = mdp.exact_policy_values(&pol).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(q1, q2);
        assert!(mdp.bellman_residual(&pol, &v1, &q1) <= 1e-8);
    }

    #[test]
    fn finite_horizon_optimal_dominates_any_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = TabularMdp::random(&mut rng, 4, 2, 0.0, Some(3));
        let opt = mdp.optimal_values();
        let uni = vec![vec![vec![0.5, 0.5]; 4]; 3];
        let pv = mdp.finite_horizon_values(&uni).unwrap();
        for s in 0..4 {
            assert!(opt.v[0][s] >= pv.v[0][s] - 1e-12);
        }
        assert_eq!(opt.v[3], vec![0.0; 4]);
    }

    #[test]
    fn point_mass_reset_and_deterministic_chain() {
        let mdp = TabularMdp::new(3, 1, vec![0., 1., 0., 0., 1., 0., 0., 0., 1.], vec![0.; 3], vec![0., 0., 1.], 0.9, None).unwrap();
        let mut env = MdpEnv::new(mdp, 10);
        assert_eq!(env.reset(17), State::Id(2));
        env.reset(1);
        for _ in 0..100 {
            let st = env.reset(5);
            assert_eq!(st, State::Id(2));
        }
        let mdp = TabularMdp::new(2, 1, vec![0., 1., 0., 1.], vec![0.; 2], vec![1., 0.], 0.9, None).unwrap();
        let mut env = MdpEnv::new(mdp, 10);
        for seed in 0..100 {
            env.reset(seed);
            let st = env.step(&Action::Id(0)).unwrap();
            assert_eq!(st.next_state, State::Id(1));
        }
    }

    #[test]
    fn truncation_and_step_after_done() {
        let mut env = MdpEnv::new(single_state(0.9), 2);
        env.reset(0);
        assert!(!env.step(&Action::Id(0)).unwrap().truncated);
        let last = env.step(&Action::Id(0)).unwrap();
        assert!(last.truncated && !last.done);
        assert_eq!(env.step(&Action::Id(0)), Err(EnvError::StepAfterDone));
    }
}
