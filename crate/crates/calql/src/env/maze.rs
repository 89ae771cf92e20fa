use super::mdp::sample_index;
use super::{Action, ActionSpace, EnvError, EpisodeStep, EpisodicEnv, State, TabularMdp, TabularPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// `(row, col)`.
pub type Cell = (usize, usize);

/// Row/column deltas for up, down, left, right, stay.
pub const MAZE_ACTIONS: [(isize, isize); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];
const STAY: usize = 4;
/// Continuous actions with all components below this magnitude mean "stay".
const DEAD_ZONE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum StartSpec {
    Fixed(Cell),
    Uniform(Vec<Cell>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Row and column scaled to [-1, 1].
    Coords,
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMaze {
    pub width: usize,
    pub height: usize,
    /// Row-major wall mask.
    pub walls: Vec<bool>,
    pub start: StartSpec,
    pub goal: Cell,
    /// Manhattan radius around the goal that counts as reached.
    pub goal_radius: usize,
    pub max_episode_len: usize,
    pub slip_prob: f64,
    free: Vec<Cell>,
    index: Vec<Option<usize>>,
}

impl GridMaze {
    pub fn new(width: usize, height: usize, walls: Vec<bool>, start: StartSpec, goal: Cell) -> Result<Self, EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidMaze(m.to_string()));
        if width == 0 || height == 0 || walls.len() != width * height {
            return bad("wall mask does not match dimensions");
        }
        let mut free = Vec::new();
        let mut index = vec![None; width * height];
        for r in 0..height {
            for c in 0..width {
                if !walls[r * width + c] {
                    index[r * width + c] = Some(free.len());
                    free.push((r, c));
                }
            }
        }
        let open = |cell: &Cell| cell.0 < height && cell.1 < width && !walls[cell.0 * width + cell.1];
        let starts: Vec<Cell> = match &start {
            StartSpec::Fixed(c) => vec![*c],
            StartSpec::Uniform(v) => v.clone(),
        };
        if starts.is_empty() || !starts.iter().all(open) {
            return bad("start cells must be free");
        }
        if !open(&goal) {
            return bad("goal cell must be free");
        }
        Ok(GridMaze {
            width,
            height,
            walls,
            start,
            goal,
            goal_radius: 0,
            max_episode_len: 4 * (width + height),
            slip_prob: 0.0,
            free,
            index,
        })
    }

    /// Parses `#` wall, `.` free, `S` start, `G` goal; one row per line.
    /// Several `S` cells give a uniform start distribution.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text.lines().map(|l| l.trim_end()).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(EnvError::InvalidMaze("empty layout".into()));
        }
        let width = rows[0].chars().count();
        let mut walls = Vec::new();
        let mut starts = Vec::new();
        let mut goal = None;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::InvalidMaze(format!("row {r} has length {} (expected {width})", row.chars().count())));
            }
            for (c, ch) in row.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        starts.push((r, c));
                        walls.push(false)
                    }
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(EnvError::InvalidMaze("more than one goal".into()));
                        }
                        walls.push(false)
                    }
                    other => return Err(EnvError::InvalidMaze(format!("unexpected character {other:?}"))),
                }
            }
        }
        let goal = goal.ok_or_else(|| EnvError::InvalidMaze("no goal".into()))?;
        let start = match starts.len() {
            0 => return Err(EnvError::InvalidMaze("no start".into())),
            1 => StartSpec::Fixed(starts[0]),
            _ => StartSpec::Uniform(starts),
        };
        GridMaze::new(width, rows.len(), walls, start, goal)
    }

    /// Fully open rectangle.
    pub fn open(width: usize, height: usize, start: Cell, goal: Cell) -> Result<Self, EnvError> {
        GridMaze::new(width, height, vec![false; width * height], StartSpec::Fixed(start), goal)
    }

    pub fn n_cells(&self) -> usize {
        self.free.len()
    }

    pub fn cell(&self, id: usize) -> Cell {
        self.free[id]
    }

    pub fn cell_id(&self, cell: Cell) -> Option<usize> {
        if cell.0 < self.height && cell.1 < self.width {
            self.index[cell.0 * self.width + cell.1]
        } else {
            None
        }
    }

    pub fn start_cells(&self) -> Vec<Cell> {
        match &self.start {
            StartSpec::Fixed(c) => vec![*c],
            StartSpec::Uniform(v) => v.clone(),
        }
    }

    pub fn in_goal(&self, cell: Cell) -> bool {
        cell.0.abs_diff(self.goal.0) + cell.1.abs_diff(self.goal.1) <= self.goal_radius
    }

    /// Deterministic move; walls and borders leave the agent in place.
    pub fn move_cell(&self, cell: Cell, action: usize) -> Cell {
        let (dr, dc) = MAZE_ACTIONS[action];
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        if r < 0 || c < 0 {
            return cell;
        }
        let next = (r as usize, c as usize);
        if self.cell_id(next).is_some() {
            next
        } else {
            cell
        }
    }

    /// BFS step counts to the goal region; `None` for cells that cannot reach it.
    pub fn goal_distances(&self) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_cells()];
        let mut queue = VecDeque::new();
        for (i, &c) in self.free.iter().enumerate() {
            if self.in_goal(c) {
                dist[i] = Some(0);
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            let d = dist[i].unwrap();
            for a in 0..4 {
                let n = self.move_cell(self.free[i], a);
                let j = self.cell_id(n).unwrap();
                if dist[j].is_none() {
                    dist[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }

    /// Flood-fill check that every start cell can reach the goal.
    pub fn is_solvable(&self) -> bool {
        let dist = self.goal_distances();
        self.start_cells().iter().all(|&c| dist[self.cell_id(c).unwrap()].is_some())
    }

    pub fn features(&self, id: usize, kind: FeatureKind) -> Vec<f64> {
        match kind {
            FeatureKind::Coords => {
                let (r, c) = self.free[id];
                let scale = |x: usize, n: usize| if n > 1 { 2.0 * x as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
                vec![scale(r, self.height), scale(c, self.width)]
            }
            FeatureKind::OneHot => {
                let mut f = vec![0.0; self.n_cells()];
                f[id] = 1.0;
                f
            }
        }
    }

    /// Exact MDP over free cells. Goal-region cells are terminal with zero reward;
    /// `r(s, a)` is the probability of entering the goal region.
    pub fn to_mdp(&self, gamma: f64) -> Result<TabularMdp, EnvError> {
        let n = self.n_cells();
        let na = MAZE_ACTIONS.len();
        let mut transition = vec![0.0; n * na * n];
        let mut reward = vec![0.0; n * na];
        let mut terminal = vec![false; n];
        for s in 0..n {
            let cell = self.free[s];
            terminal[s] = self.in_goal(cell);
            for a in 0..na {
                let row = &mut transition[(s * na + a) * n..(s * na + a + 1) * n];
                if terminal[s] {
                    row[s] = 1.0;
                    continue;
                }
                let mut add = |b: usize, w: f64| {
                    let j = self.cell_id(self.move_cell(cell, b)).unwrap();
                    row[j] += w;
                };
                add(a, 1.0 - self.slip_prob);
                for b in 0..na {
                    add(b, self.slip_prob / na as f64);
                }
                reward[s * na + a] = (0..n).filter(|&j| self.in_goal(self.free[j])).map(|j| row[j]).sum();
            }
        }
        let starts = self.start_cells();
        let mut rho = vec![0.0; n];
        for c in &starts {
            rho[self.cell_id(*c).unwrap()] += 1.0 / starts.len() as f64;
        }
        TabularMdp::with_terminals(n, na, transition, reward, rho, gamma, None, terminal)
    }
}

/// Maps a continuous action in [-1, 1]^2 (row, col components) to a maze move:
/// the dominant axis decides the direction, small vectors mean "stay".
pub fn maze_action_from_vector(v: &[f64]) -> usize {
    let (dr, dc) = (v[0], v[1]);
    if dr.abs().max(dc.abs()) < DEAD_ZONE {
        STAY
    } else if dr.abs() >= dc.abs() {
        if dr < 0.0 {
            0
        } else {
            1
        }
    } else if dc < 0.0 {
        2
    } else {
        3
    }
}

/// Deterministic shortest-path policy over cell ids (first improving action in
/// up/down/left/right order; "stay" inside the goal region).
pub fn scripted_controller(maze: &GridMaze) -> Result<TabularPolicy, EnvError> {
    if !maze.is_solvable() {
        return Err(EnvError::Unsolvable);
    }
    let dist = maze.goal_distances();
    let mut policy = vec![vec![0.0; MAZE_ACTIONS.len()]; maze.n_cells()];
    for s in 0..maze.n_cells() {
        let best = match dist[s] {
            Some(d) if d > 0 => (0..4)
                .find(|&a| dist[maze.cell_id(maze.move_cell(maze.cell(s), a)).unwrap()] == Some(d - 1))
                .unwrap_or(STAY),
            _ => STAY,
        };
        policy[s][best] = 1.0;
    }
    Ok(policy)
}

#[derive(Clone, Debug)]
pub struct MazeEnv {
    pub maze: GridMaze,
    pub continuous: bool,
    pub feature_kind: FeatureKind,
    rng: ChaCha8Rng,
    cell: Option<Cell>,
    t: usize,
    finished: bool,
}

impl MazeEnv {
    pub fn new(maze: GridMaze, continuous: bool, feature_kind: FeatureKind) -> Result<Self, EnvError> {
        if !maze.is_solvable() {
            return Err(EnvError::Unsolvable);
        }
        Ok(MazeEnv { maze, continuous, feature_kind, rng: ChaCha8Rng::seed_from_u64(0), cell: None, t: 0, finished: false })
    }

    pub fn current_cell(&self) -> Option<Cell> {
        self.cell
    }
}

impl EpisodicEnv for MazeEnv {
    fn reset(&mut self, seed: u64) -> State {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = match &self.maze.start {
            StartSpec::Fixed(c) => *c,
            StartSpec::Uniform(v) => v[sample_index(&mut self.rng, &vec![1.0 / v.len() as f64; v.len()])],
        };
        self.cell = Some(cell);
        self.t = 0;
        self.finished = false;
        State::Id(self.maze.cell_id(cell).unwrap())
    }

    fn step(&mut self, action: &Action) -> Result<EpisodeStep, EnvError> {
        if self.finished {
            return Err(EnvError::StepAfterDone);
        }
        let cell = self.cell.ok_or(EnvError::NotReset)?;
        let mut a = match (action, self.continuous) {
            (Action::Id(a), false) if *a < MAZE_ACTIONS.len() => *a,
            (Action::Vector(v), true) if v.len() == 2 => maze_action_from_vector(v),
            _ => return Err(EnvError::BadAction(action.clone())),
        };
        if self.maze.slip_prob > 0.0 && self.rng.gen::<f64>() < self.maze.slip_prob {
            a = self.rng.gen_range(0..MAZE_ACTIONS.len());
        }
        let next = self.maze.move_cell(cell, a);
        let done = self.maze.in_goal(next);
        let reward = if done { 1.0 } else { 0.0 };
        self.t += 1;
        let truncated = !done && self.t >= self.maze.max_episode_len;
        self.finished = done || truncated;
        self.cell = Some(next);
        Ok(EpisodeStep {
            state: State::Id(self.maze.cell_id(cell).unwrap()),
            action: action.clone(),
            reward,
            next_state: State::Id(self.maze.cell_id(next).unwrap()),
            done,
            truncated,
        })
    }

    fn action_space(&self) -> ActionSpace {
        if self.continuous {
            ActionSpace::Continuous(2)
        } else {
            ActionSpace::Discrete(MAZE_ACTIONS.len())
        }
    }

    fn n_states(&self) -> usize {
        self.maze.n_cells()
    }

    fn feature_dim(&self) -> usize {
        match self.feature_kind {
            FeatureKind::Coords => 2,
            FeatureKind::OneHot => self.maze.n_cells(),
        }
    }

    fn features(&self, state: usize) -> Vec<f64> {
        self.maze.features(state, self.feature_kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(env: &mut MazeEnv, policy: &TabularPolicy, seed: u64) -> (usize, f64) {
        let mut s = env.reset(seed);
        let mut ret = 0.0;
        for t in 1.. {
            let a = policy[s.id().unwrap()].iter().position(|&p| p == 1.0).unwrap();
            let st = env.step(&Action::Id(a)).unwrap();
            ret += st.reward;
            s = st.next_state;
            if st.done || st.truncated {
                return (t, ret);
            }
        }
        unreachable!()
    }

    #[test]
    fn parse_and_reject_ragged() {
        let m = GridMaze::parse("S.#\n..G\n").unwrap();
        assert_eq!((m.width, m.height), (3, 2));
        assert_eq!(m.goal, (1, 2));
        assert!(matches!(GridMaze::parse("S..\n.G\n"), Err(EnvError::InvalidMaze(_))));
        assert!(GridMaze::parse("S..\n...\n").is_err());
        assert!(GridMaze::parse("Sx.\n..G\n").is_err());
    }

    #[test]
    fn scripted_open_3x3_takes_four_steps() {
        let maze = GridMaze::open(3, 3, (0, 0), (2, 2)).unwrap();
        let pol = scripted_controller(&maze).unwrap();
        let mut env = MazeEnv::new(maze, false, FeatureKind::Coords).unwrap();
        for seed in 0..20 {
            assert_eq!(rollout(&mut env, &pol, seed), (4, 1.0));
        }
    }

    #[test]
    fn walled_off_goal_is_unsolvable() {
        let maze = GridMaze::parse("S#.\n.#.\n.#G\n").unwrap();
        assert!(!maze.is_solvable());
        assert_eq!(scripted_controller(&maze), Err(EnvError::Unsolvable));
        assert!(MazeEnv::new(maze, false, FeatureKind::Coords).is_err());
    }

    #[test]
    fn wall_bump_and_goal_entry() {
        let maze = GridMaze::parse("S#\n.G\n").unwrap();
        let mut env = MazeEnv::new(maze, false, FeatureKind::Coords).unwrap();
        env.reset(0);
        let st = env.step(&Action::Id(3)).unwrap();
        assert_eq!(st.next_state, st.state);
        assert_eq!(st.reward, 0.0);
        env.step(&Action::Id(1)).unwrap();
        let st = env.step(&Action::Id(3)).unwrap();
        assert!(st.done && st.reward == 1.0);
        assert_eq!(env.step(&Action::Id(4)), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn uniform_start_is_balanced() {
        let maze = GridMaze::parse("S.S\n.G.\n").unwrap();
        let mut env = MazeEnv::new(maze, false, FeatureKind::Coords).unwrap();
        let first = env.maze.cell_id((0, 0)).unwrap();
        let hits = (0..1000).filter(|&s| env.reset(s) == State::Id(first)).count();
        assert!((hits as f64 / 1000.0 - 0.5).abs() < 0.05, "{hits}");
    }

    #[test]
    fn continuous_mapping() {
        assert_eq!(maze_action_from_vector(&[0.1, -0.2]), STAY);
        assert_eq!(maze_action_from_vector(&[-0.9, 0.5]), 0);
        assert_eq!(maze_action_from_vector(&[0.9, 0.5]), 1);
        assert_eq!(maze_action_from_vector(&[0.2, -0.5]), 2);
        assert_eq!(maze_action_from_vector(&[0.2, 0.5]), 3);
    }

    #[test]
    fn mdp_conversion_matches_bfs() {
        let maze = GridMaze::parse("S...\n.##.\n...G\n").unwrap();
        let pol = scripted_controller(&maze).unwrap();
        let mdp = maze.to_mdp(0.9).unwrap();
        let (v, _) = mdp.exact_policy_values(&pol).unwrap();
        let dist = maze.goal_distances();
        for s in 0..maze.n_cells() {
            let d = dist[s].unwrap();
            let expect = if d == 0 { 0.0 } else { 0.9f64.powi(d as i32 - 1) };
            assert!((v[s] - expect).abs() < 1e-12, "cell {:?}", maze.cell(s));
        }
    }
}
