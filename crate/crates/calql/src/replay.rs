//! Offline store plus a bounded online store, sampled with a mixing ratio.

use crate::data::{OfflineDataset, Transition};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("mixing ratio {0} is outside [0, 1] and is not -1")]
    BadMixingRatio(f64),
    #[error("online store is empty")]
    EmptyOnlineStore,
    #[error("offline store is empty")]
    EmptyOfflineStore,
    #[error("online capacity must be positive")]
    ZeroCapacity,
}

/// Fraction of each batch taken from the offline store, or `Pooled` for
/// uniform sampling over both stores concatenated (written `-1` in configs).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MixingRatio {
    Fraction(f64),
    Pooled,
}

impl MixingRatio {
    pub fn new(m: f64) -> Result<Self, ReplayError> {
        if m == -1.0 {
            Ok(MixingRatio::Pooled)
        } else if (0.0..=1.0).contains(&m) {
            Ok(MixingRatio::Fraction(m))
        } else {
            Err(ReplayError::BadMixingRatio(m))
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            MixingRatio::Fraction(m) => *m,
            MixingRatio::Pooled => -1.0,
        }
    }

    /// Offline sample count for a batch of `b`: `floor(m * b + 0.5)`.
    pub fn offline_count(&self, b: usize) -> Option<usize> {
        match self {
            MixingRatio::Fraction(m) => Some(((m * b as f64) + 0.5).floor() as usize),
            MixingRatio::Pooled => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Offline,
    Online,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<Transition>,
    pub sources: Vec<Source>,
    /// Per-item weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|s| **s == source).count()
    }

    /// Whole-dataset batch, each transition once with equal weight.
    pub fn full(ds: &OfflineDataset) -> Batch {
        Batch { items: ds.transitions.clone(), sources: vec![Source::Offline; ds.len()], weights: None }
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

#[derive(Clone, Debug)]
pub struct MixedReplayBuffer {
    offline: Arc<OfflineDataset>,
    online: VecDeque<Transition>,
    capacity: usize,
    pub mixing: MixingRatio,
}

impl MixedReplayBuffer {
    pub fn new(offline: Arc<OfflineDataset>, capacity: usize, mixing: MixingRatio) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(MixedReplayBuffer { offline, online: VecDeque::new(), capacity, mixing })
    }

    pub fn offline(&self) -> &OfflineDataset {
        &self.offline
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn online(&self) -> impl Iterator<Item = &Transition> {
        self.online.iter()
    }

    /// Appends a transition, evicting the oldest at capacity.
    pub fn push_online(&mut self, t: Transition) {
        if self.online.len() == self.capacity {
            self.online.pop_front();
        }
        self.online.push_back(t);
    }

    /// Overwrites the return-to-go of the most recent `returns.len()` online
    /// transitions, oldest first. Items already evicted are skipped.
    pub fn backfill_online_returns(&mut self, returns: &[f64], unreliable: bool) {
        let n = returns.len().min(self.online.len());
        let skip = returns.len() - n;
        let start = self.online.len() - n;
        for (t, g) in self.online.iter_mut().skip(start).zip(&returns[skip..]) {
            t.mc_return = *g;
            t.mc_unreliable = unreliable;
        }
    }

    pub fn sample_batch(&self, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch, ReplayError> {
        self.sample_with(self.mixing, b, rng)
    }

    /// Like [`sample_batch`](Self::sample_batch), but an empty online store
    /// falls back to offline-only sampling.
    pub fn sample_batch_cold_start(&self, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch, ReplayError> {
        let m = if self.online.is_empty() { MixingRatio::Fraction(1.0) } else { self.mixing };
        self.sample_with(m, b, rng)
    }

    pub fn sample_with(&self, m: MixingRatio, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch, ReplayError> {
        let n_off = self.offline.len();
        let n_on = self.online.len();
        let mut items = Vec::with_capacity(b);
        let mut sources = Vec::with_capacity(b);
        match m.offline_count(b) {
            Some(k) => {
                if k > 0 && n_off == 0 {
                    return Err(ReplayError::EmptyOfflineStore);
                }
                if b > k && n_on == 0 {
                    return Err(ReplayError::EmptyOnlineStore);
                }
                for _ in 0..k {
                    items.push(self.offline.transitions[rng.gen_range(0..n_off)].clone());
                    sources.push(Source::Offline);
                }
                for _ in k..b {
                    items.push(self.online[rng.gen_range(0..n_on)].clone());
                    sources.push(Source::Online);
                }
            }
            None => {
                let total = n_off + n_on;
                if total == 0 {
                    return Err(ReplayError::EmptyOfflineStore);
                }
                for _ in 0..b {
                    let i = rng.gen_range(0..total);
                    if i < n_off {
                        items.push(self.offline.transitions[i].clone());
                        sources.push(Source::Offline);
                    } else {
                        items.push(self.online[i - n_off].clone());
                        sources.push(Source::Online);
                    }
                }
            }
        }
        Ok(Batch { items, sources, weights: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Composition;
    use crate::env::{Action, State};
    use rand::SeedableRng;

    fn tr(i: usize) -> Transition {
        Transition {
            s: State::Id(i),
            a: Action::Id(0),
            r: 0.0,
            s_next: State::Id(i),
            done: false,
            truncated: false,
            mc_return: 0.0,
            mc_unreliable: true,
            traj_id: i,
            step_idx: 0,
        }
    }

    fn buffer(n_off: usize, m: f64, cap: usize) -> MixedReplayBuffer {
        let ds = OfflineDataset { transitions: (0..n_off).map(tr).collect(), composition: Composition::Narrow, gamma_used: 0.9 };
        MixedReplayBuffer::new(Arc::new(ds), cap, MixingRatio::new(m).unwrap()).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut b = buffer(1, 0.0, 2);
        for i in 10..13 {
            b.push_online(tr(i));
        }
        let ids: Vec<_> = b.online().map(|t| t.s.id().unwrap()).collect();
        assert_eq!(ids, vec![11, 12]);
    }

    #[test]
    fn ratio_edges_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = buffer(5, 0.0, 10);
        assert_eq!(b.sample_batch(4, &mut rng), Err(ReplayError::EmptyOnlineStore));
        b.push_online(tr(99));
        let batch = b.sample_batch(4, &mut rng).unwrap();
        assert_eq!(batch.count(Source::Online), 4);
        let b1 = buffer(5, 1.0, 10);
        assert_eq!(b1.sample_batch(4, &mut rng).unwrap().count(Source::Offline), 4);
        let q = buffer(5, 0.25, 10);
        assert_eq!(q.sample_batch_cold_start(8, &mut rng).unwrap().count(Source::Offline), 8);
        assert!(MixingRatio::new(1.5).is_err());
        assert!(MixingRatio::new(-0.5).is_err());
    }

    #[test]
    fn quarter_mix_of_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = buffer(5, 0.25, 10);
        b.push_online(tr(50));
        let batch = b.sample_batch(8, &mut rng).unwrap();
        assert_eq!((batch.count(Source::Offline), batch.count(Source::Online)), (2, 6));
    }

    #[test]
    fn backfill_targets_latest_items() {
        let mut b = buffer(1, 0.0, 3);
        for i in 0..4 {
            b.push_online(tr(i));
        }
        b.backfill_online_returns(&[0.5, 0.6, 0.7, 0.8], false);
        let g: Vec<_> = b.online().map(|t| t.mc_return).collect();
        assert_eq!(g, vec![0.6, 0.7, 0.8]);
        assert!(b.online().all(|t| !t.mc_unreliable));
    }
}
