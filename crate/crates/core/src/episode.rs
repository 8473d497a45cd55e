//! Episode records, the FIFO replay buffer, and the glue that turns an
//! environment snapshot into whichever observation layout a model consumes.

use crate::error::{Error, Result};
use crate::model::{ModelFamily, ObsRepr, StateRepr};
use crate::numeric::{Matrix, Scalar};
use crate::spread::{SpreadEnv, ACTIONS};
use rand::Rng;
use std::collections::VecDeque;

/// Stacked per-agent observation rows for one time step: graph families get
/// n blocks of k entity rows, legacy families get one flat row per agent.
pub fn stacked_obs<S: Scalar>(env: &SpreadEnv, family: ModelFamily, graph_feats: bool) -> Matrix<S> {
    let n = env.cfg.n;
    match family.obs_repr() {
        ObsRepr::Graph => {
            let k = env.cfg.entities();
            let z = crate::spread::SpreadConfig::obs_width(graph_feats);
            let mut out = Matrix::zeros(n * k, z);
            for a in 0..n {
                let m = env.observation_matrix::<S>(a, graph_feats);
                out.set_rows(a * k, &m);
            }
            out
        }
        ObsRepr::Legacy => {
            let w = env.cfg.legacy_obs_width();
            let mut out = Matrix::zeros(n, w);
            for a in 0..n {
                let m = env.legacy_observation::<S>(a);
                out.set_rows(a, &m);
            }
            out
        }
    }
}

/// State rows for one time step: k x 5 entity rows for graph mixers, a single
/// flat row otherwise. Flattening is row-major, agents then landmarks.
pub fn stacked_state<S: Scalar>(env: &SpreadEnv, family: ModelFamily) -> Matrix<S> {
    match family.state_repr() {
        StateRepr::Graph => env.state_matrix::<S>(),
        StateRepr::LegacyFlat => env.legacy_state::<S>(),
        StateRepr::GraphFlat => {
            let g = env.state_matrix::<S>();
            let (rows, cols) = g.shape();
            let data = g.data().to_vec();
            Matrix::from_vec(1, rows * cols, data)
        }
    }
}

/// One finished episode: T steps plus the trailing observation and state.
#[derive(Clone)]
pub struct EpisodeRecord<S> {
    /// T+1 stacked observation matrices.
    pub obs: Vec<Matrix<S>>,
    /// T+1 state matrices.
    pub states: Vec<Matrix<S>>,
    /// T joint actions, one index per agent.
    pub actions: Vec<Vec<usize>>,
    /// T global rewards.
    pub rewards: Vec<S>,
    /// T+1 availability masks, n * ACTIONS bools per step.
    pub avail: Vec<Vec<bool>>,
    /// The final transition ended the episode (always true for Spread,
    /// which terminates at the step cap).
    pub terminated: bool,
    pub episode_return: f64,
    /// Fraction of landmarks occupied when the episode ended.
    pub final_pol: f64,
    /// Steps actually played; storage past this index is padding.
    pub true_len: usize,
}

impl<S: Scalar> EpisodeRecord<S> {
    pub fn len(&self) -> usize {
        self.true_len
    }

    pub fn is_empty(&self) -> bool {
        self.true_len == 0
    }

    pub fn n_agents(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Appends `extra` zero-reward no-op steps past termination without
    /// growing `len()`. Padded steps repeat the final observation and must
    /// not change losses or gradients.
    pub fn pad(&mut self, extra: usize) {
        let n = self.n_agents();
        for _ in 0..extra {
            self.obs.push(self.obs.last().expect("episode has obs").clone());
            self.states.push(self.states.last().expect("episode has states").clone());
            self.actions.push(vec![0; n]);
            self.rewards.push(S::zero());
            self.avail.push(vec![true; n * ACTIONS]);
        }
    }
}

/// Fixed-capacity FIFO episode store with uniform without-replacement
/// sampling.
pub struct ReplayBuffer<S> {
    capacity: usize,
    items: VecDeque<EpisodeRecord<S>>,
    inserted: u64,
}

impl<S: Scalar> ReplayBuffer<S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay buffer capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        })
    }

    pub fn push(&mut self, episode: EpisodeRecord<S>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(episode);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn get(&self, i: usize) -> &EpisodeRecord<S> {
        &self.items[i]
    }

    /// Uniform sample of `batch` distinct indices.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if batch == 0 || batch > self.items.len() {
            return Err(Error::Usage(format!(
                "cannot sample {batch} episodes from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch).into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelFamily;
    use crate::rng::{seeded, streams};
    use crate::spread::SpreadConfig;

    fn episode_with_return(ret: f64) -> EpisodeRecord<f32> {
        EpisodeRecord {
            obs: vec![Matrix::zeros(1, 1); 2],
            states: vec![Matrix::zeros(1, 1); 2],
            actions: vec![vec![0, 0]],
            rewards: vec![ret as f32],
            avail: vec![vec![true; 2 * ACTIONS]; 2],
            terminated: true,
            episode_return: ret,
            final_pol: 0.0,
            true_len: 1,
        }
    }

    #[test]
    fn fifo_eviction_drops_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(episode_with_return(i as f64));
        }
        assert_eq!(buf.len(), 3, "capacity bound");
        assert_eq!(buf.inserted(), 5);
        let kept: Vec<f64> = (0..3).map(|i| buf.get(i).episode_return).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0], "oldest episodes evicted first");
    }

    #[test]
    fn sampling_is_without_replacement_and_deterministic() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..50 {
            buf.push(episode_with_return(i as f64));
        }
        let mut rng = seeded(7, streams::BUFFER);
        let picks = buf.sample_indices(32, &mut rng).unwrap();
        assert_eq!(picks.len(), 32);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 32, "indices must be distinct");
        assert!(sorted.iter().all(|&i| i < 50));

        let mut rng2 = seeded(7, streams::BUFFER);
        let again = buf.sample_indices(32, &mut rng2).unwrap();
        assert_eq!(picks, again, "same rng state gives the same sample");
    }

    #[test]
    fn oversampling_is_an_error() {
        let mut buf = ReplayBuffer::<f32>::new(10).unwrap();
        buf.push(episode_with_return(0.0));
        let mut rng = seeded(1, streams::BUFFER);
        assert!(buf.sample_indices(2, &mut rng).is_err());
        assert!(buf.sample_indices(0, &mut rng).is_err());
    }

    #[test]
    fn stacked_obs_layouts_match_families() {
        let cfg = SpreadConfig::default();
        let mut rng = seeded(11, streams::ENV);
        let env = SpreadEnv::reset(cfg, &mut rng).unwrap();

        let graph = stacked_obs::<f32>(&env, ModelFamily::Transfqmix, true);
        assert_eq!(graph.shape(), (3 * 6, 4));
        let per_agent = env.observation_matrix::<f32>(1, true);
        for r in 0..6 {
            assert_eq!(graph.row(6 + r), per_agent.row(r), "agent 1 block matches");
        }

        let legacy = stacked_obs::<f32>(&env, ModelFamily::Qmix, true);
        assert_eq!(legacy.shape(), (3, 14));
        assert_eq!(legacy.row(2), env.legacy_observation::<f32>(2).row(0));
    }

    #[test]
    fn stacked_state_flattening_is_row_major() {
        let cfg = SpreadConfig::default();
        let mut rng = seeded(12, streams::ENV);
        let env = SpreadEnv::reset(cfg, &mut rng).unwrap();

        let graph = stacked_state::<f32>(&env, ModelFamily::Transfqmix);
        assert_eq!(graph.shape(), (6, 5));
        let flat = stacked_state::<f32>(&env, ModelFamily::QmixGraphState);
        assert_eq!(flat.shape(), (1, 30));
        for r in 0..6 {
            for c in 0..5 {
                assert_eq!(flat.get(0, r * 5 + c), graph.get(r, c), "row-major order");
            }
        }
        let legacy = stacked_state::<f32>(&env, ModelFamily::Qmix);
        assert_eq!(legacy.shape(), (1, 42));
    }

    #[test]
    fn padding_extends_with_inert_steps() {
        let mut ep = episode_with_return(1.5);
        let before = ep.len();
        ep.pad(3);
        assert_eq!(ep.len(), before, "padding must not count as played steps");
        assert_eq!(ep.obs.len(), before + 3 + 1, "padding must extend storage");
        assert_eq!(ep.rewards[before..], [0.0, 0.0, 0.0]);
    }
}
