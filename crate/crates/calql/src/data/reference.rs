use super::{DataError, OfflineDataset, Transition};
use crate::env::{Action, State};
use crate::nn::{Graph, Mlp, Activation, Tensor, Trainable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceFamily {
    /// Per-pair mean of return-to-go.
    TabularRegression,
    /// Expected SARSA under the empirical behavior policy, iterated to a fixed point.
    TabularSarsa,
    NetworkRegression { hidden: Vec<usize>, steps: usize, lr: f64, seed: u64 },
    /// Semi-gradient SARSA with a periodically refreshed frozen copy.
    NetworkSarsa { hidden: Vec<usize>, steps: usize, lr: f64, seed: u64 },
}

#[derive(Clone, Debug)]
enum Model {
    /// `None` marks pairs absent from the dataset.
    Table(Vec<Vec<Option<f64>>>),
    Net(Mlp),
}

/// Estimator of the behavior policy's `Q(s, a)` fitted on an offline dataset.
#[derive(Clone, Debug)]
pub struct FittedReference {
    model: Model,
    pub n_states: usize,
    pub n_actions: usize,
    pub family: ReferenceFamily,
    /// Training RMSE against the family's own regression targets.
    pub rmse: f64,
    /// Dataset action counts per state, when states and actions are ids.
    counts: Option<Vec<Vec<f64>>>,
}

impl FittedReference {
    /// Reference value of a pair; `None` for pairs a table never saw.
    pub fn value(&self, s: &State, a: &Action) -> Option<f64> {
        match &self.model {
            Model::Table(t) => t.get(s.id()?)?.get(a.id()?).copied().flatten(),
            Model::Net(net) => {
                let x = encode_pair(s, a, self.n_states, self.n_actions);
                let w = x.len();
                net.forward(&Tensor::matrix(1, w, x)).ok().map(|y| y.item())
            }
        }
    }

    /// `V(s) = sum_a mu(a|s) Q(s, a)` under the empirical behavior policy.
    pub fn state_value(&self, s: usize) -> Option<f64> {
        let row = self.counts.as_ref()?.get(s)?;
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            return None;
        }
        let mut v = 0.0;
        for (a, c) in row.iter().enumerate() {
            if *c > 0.0 {
                v += c / n * self.value(&State::Id(s), &Action::Id(a))?;
            }
        }
        Some(v)
    }

    /// Table view; unseen pairs fall back to `fill`.
    pub fn table(&self, fill: f64) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.value(&State::Id(s), &Action::Id(a)).unwrap_or(fill)).collect())
            .collect()
    }
}

/// One-hot ids, or raw features/vectors when the dataset stores them.
pub fn encode_pair(s: &State, a: &Action, n_states: usize, n_actions: usize) -> Vec<f64> {
    let mut x = match s {
        State::Id(i) => {
            let mut v = vec![0.0; n_states];
            v[*i] = 1.0;
            v
        }
        State::Features(f) => f.clone(),
    };
    match a {
        Action::Id(i) => {
            let mut v = vec![0.0; n_actions];
            v[*i] = 1.0;
            x.extend(v);
        }
        Action::Vector(v) => x.extend_from_slice(v),
    }
    x
}

fn ids(t: &Transition) -> Result<(usize, usize, usize), DataError> {
    match (t.s.id(), t.a.id(), t.s_next.id()) {
        (Some(s), Some(a), Some(s2)) => Ok((s, a, s2)),
        _ => Err(DataError::Precondition("tabular reference fitting needs integer states and actions".into())),
    }
}

pub fn fit_reference_q(ds: &OfflineDataset, family: &ReferenceFamily, n_states: usize, n_actions: usize) -> Result<FittedReference, DataError> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let (model, rmse) = match family {
        ReferenceFamily::TabularRegression => tabular_regression(ds, n_states, n_actions)?,
        ReferenceFamily::TabularSarsa => tabular_sarsa(ds, n_states, n_actions)?,
        ReferenceFamily::NetworkRegression { hidden, steps, lr, seed } => {
            network_fit(ds, n_states, n_actions, hidden, *steps, *lr, *seed, false)?
        }
        ReferenceFamily::NetworkSarsa { hidden, steps, lr, seed } => network_fit(ds, n_states, n_actions, hidden, *steps, *lr, *seed, true)?,
    };
    let counts = ds
        .transitions
        .iter()
        .try_fold(vec![vec![0.0; n_actions]; n_states], |mut c, t| {
            let (s, a, _) = ids(t).ok()?;
            *c.get_mut(s)?.get_mut(a)? += 1.0;
            Some(c)
        });
    Ok(FittedReference { model, n_states, n_actions, family: family.clone(), rmse, counts })
}

fn tabular_regression(ds: &OfflineDataset, ns: usize, na: usize) -> Result<(Model, f64), DataError> {
    let mut sum = vec![vec![0.0; na]; ns];
    let mut cnt = vec![vec![0usize; na]; ns];
    for t in &ds.transitions {
        let (s, a, _) = ids(t)?;
        sum[s][a] += t.mc_return;
        cnt[s][a] += 1;
    }
    let table: Vec<Vec<Option<f64>>> =
        (0..ns).map(|s| (0..na).map(|a| (cnt[s][a] > 0).then(|| sum[s][a] / cnt[s][a] as f64)).collect()).collect();
    let se: f64 = ds
        .transitions
        .iter()
        .map(|t| {
            let (s, a, _) = ids(t).unwrap();
            (table[s][a].unwrap() - t.mc_return).powi(2)
        })
        .sum();
    Ok((Model::Table(table), (se / ds.len() as f64).sqrt()))
}

fn tabular_sarsa(ds: &OfflineDataset, ns: usize, na: usize) -> Result<(Model, f64), DataError> {
    let gamma = ds.gamma_used;
    let mut state_counts = vec![vec![0.0; na]; ns];
    for t in &ds.transitions {
        let (s, a, _) = ids(t)?;
        state_counts[s][a] += 1.0;
    }
    // Empirical behavior policy; states never acted in contribute nothing.
    let behavior: Vec<Option<Vec<f64>>> = state_counts
        .iter()
        .map(|row| {
            let n: f64 = row.iter().sum();
            (n > 0.0).then(|| row.iter().map(|c| c / n).collect())
        })
        .collect();
    let mut q = vec![vec![0.0; na]; ns];
    let continuation = |q: &Vec<Vec<f64>>, t: &Transition| -> f64 {
        if t.done {
            return 0.0;
        }
        let s2 = t.s_next.id().unwrap();
        behavior[s2].as_ref().map_or(0.0, |pi| pi.iter().zip(&q[s2]).map(|(p, v)| p * v).sum())
    };
    for _ in 0..200_000 {
        let mut sum = vec![vec![0.0; na]; ns];
        for t in &ds.transitions {
            let (s, a, _) = ids(t)?;
            sum[s][a] += t.r + gamma * continuation(&q, t);
        }
        let mut diff: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                if state_counts[s][a] > 0.0 {
                    let v = sum[s][a] / state_counts[s][a];
                    diff = diff.max((v - q[s][a]).abs());
                    q[s][a] = v;
                }
            }
        }
        if diff < 1e-13 {
            break;
        }
    }
    let se: f64 = ds
        .transitions
        .iter()
        .map(|t| {
            let (s, a, _) = ids(t).unwrap();
            (q[s][a] - t.r - gamma * continuation(&q, t)).powi(2)
        })
        .sum();
    let table = (0..ns).map(|s| (0..na).map(|a| (state_counts[s][a] > 0.0).then_some(q[s][a])).collect()).collect();
    Ok((Model::Table(table), (se / ds.len() as f64).sqrt()))
}

#[allow(clippy::too_many_arguments)]
fn network_fit(
    ds: &OfflineDataset,
    ns: usize,
    na: usize,
    hidden: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
    sarsa: bool,
) -> Result<(Model, f64), DataError> {
    let rows: Vec<Vec<f64>> = ds.transitions.iter().map(|t| encode_pair(&t.s, &t.a, ns, na)).collect();
    let x = Tensor::from_rows(&rows);
    // SARSA uses the logged next action of the same trajectory.
    let mut next_rows = Vec::new();
    if sarsa {
        let mut by_pos = std::collections::HashMap::new();
        for (i, t) in ds.transitions.iter().enumerate() {
            by_pos.insert((t.traj_id, t.step_idx), i);
        }
        for t in &ds.transitions {
            let row = match by_pos.get(&(t.traj_id, t.step_idx + 1)) {
                Some(&j) if !t.done => Some(encode_pair(&t.s_next, &ds.transitions[j].a, ns, na)),
                _ => None,
            };
            next_rows.push(row);
        }
    }
    let mut widths = vec![x.cols()];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Trainable::new(Mlp::new(&widths, Activation::Relu, &mut rng), lr);
    let mut frozen = model.net.clone();
    let targets = |frozen: &Mlp| -> Vec<f64> {
        if !sarsa {
            return ds.transitions.iter().map(|t| t.mc_return).collect();
        }
        ds.transitions
            .iter()
            .zip(&next_rows)
            .map(|(t, nr)| {
                let boot = nr.as_ref().map_or(0.0, |r| frozen.forward(&Tensor::matrix(1, r.len(), r.clone())).unwrap().item());
                t.r + ds.gamma_used * boot
            })
            .collect()
    };
    let mut y = Tensor::column(targets(&frozen));
    for step in 0..steps {
        if sarsa && step % 50 == 0 {
            frozen = model.net.clone();
            y = Tensor::column(targets(&frozen));
        }
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (out, leaves) = model.net.forward_on(&mut g, xv).map_err(|e| DataError::Precondition(e.to_string()))?;
        let yv = g.leaf(y.clone());
        let d = g.sub(out, yv);
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss, None).map_err(|e| DataError::Precondition(e.to_string()))?;
        model.apply(&grads, &leaves).map_err(|e| DataError::Precondition(e.to_string()))?;
    }
    let y = Tensor::column(targets(&model.net));
    let pred = model.net.forward(&x).map_err(|e| DataError::Precondition(e.to_string()))?;
    let mse = pred.data.iter().zip(&y.data).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / ds.len() as f64;
    Ok((Model::Net(model.net), mse.sqrt()))
}
