//! The batch-construction DAG: states are partial batches (sets of pool
//! positions), actions add one unused position, and every state of size `B`
//! is terminal. There is no explicit stop action.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partial query batch. Indices are kept sorted so that two states holding
/// the same set compare equal regardless of insertion order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchState {
    indices: Vec<usize>,
    capacity: usize,
}

impl BatchState {
    pub fn empty(capacity: usize) -> Self {
        BatchState { indices: Vec::with_capacity(capacity), capacity }
    }

    /// Builds a state from arbitrary-order indices; rejects duplicates and
    /// over-capacity sets.
    pub fn from_indices(mut indices: Vec<usize>, capacity: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateIndex { index: w[0] });
        }
        if indices.len() > capacity {
            return Err(Error::invalid(format!(
                "{} indices exceed batch capacity {capacity}",
                indices.len()
            )));
        }
        Ok(BatchState { indices, capacity })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_terminal(&self) -> bool {
        self.indices.len() == self.capacity
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Position of `i` in the sorted index list.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.indices.binary_search(&i).ok()
    }

    fn with(&self, a: usize) -> Result<Self> {
        match self.indices.binary_search(&a) {
            Ok(_) => Err(Error::DuplicateIndex { index: a }),
            Err(pos) => {
                let mut indices = self.indices.clone();
                indices.insert(pos, a);
                Ok(BatchState { indices, capacity: self.capacity })
            }
        }
    }

    fn without_position(&self, pos: usize) -> Self {
        let mut indices = self.indices.clone();
        indices.remove(pos);
        BatchState { indices, capacity: self.capacity }
    }
}

/// Pool size `N` and batch size `B` of one acquisition step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchEnv {
    pub pool_size: usize,
    pub batch_size: usize,
}

impl BatchEnv {
    pub fn new(pool_size: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > pool_size {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={pool_size} (pool size)"
            )));
        }
        Ok(BatchEnv { pool_size, batch_size })
    }

    pub fn initial_state(&self) -> BatchState {
        BatchState::empty(self.batch_size)
    }

    pub fn is_terminal(&self, s: &BatchState) -> bool {
        s.len() == self.batch_size
    }

    pub fn allowed_actions(&self, s: &BatchState) -> Vec<usize> {
        if self.is_terminal(s) {
            return Vec::new();
        }
        (0..self.pool_size).filter(|i| !s.contains(*i)).collect()
    }

    pub fn apply(&self, s: &BatchState, a: usize) -> Result<BatchState> {
        if self.is_terminal(s) {
            return Err(Error::TerminalState);
        }
        if a >= self.pool_size {
            return Err(Error::DisallowedAction { action: a });
        }
        s.with(a)
    }

    /// Every parent of `s` paired with the index whose removal yields it, in
    /// ascending order of the removed index.
    pub fn parents(&self, s: &BatchState) -> Vec<(BatchState, usize)> {
        (0..s.len())
            .map(|pos| (s.without_position(pos), s.indices[pos]))
            .collect()
    }

    pub fn children(&self, s: &BatchState) -> Vec<(BatchState, usize)> {
        self.allowed_actions(s)
            .into_iter()
            .map(|a| (s.with(a).expect("allowed action"), a))
            .collect()
    }

    /// Number of distinct action orders reaching `s` from the empty state.
    pub fn count_trajectories(&self, s: &BatchState) -> u128 {
        (1..=s.len() as u128).product()
    }
}

/// A complete trajectory `s₀ → … → s_B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<BatchState>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn from_actions(env: &BatchEnv, actions: &[usize]) -> Result<Self> {
        let mut states = Vec::with_capacity(actions.len() + 1);
        let mut s = env.initial_state();
        states.push(s.clone());
        for &a in actions {
            s = env.apply(&s, a)?;
            states.push(s.clone());
        }
        Ok(Trajectory { states, actions: actions.to_vec() })
    }

    pub fn terminal(&self) -> &BatchState {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn is_valid(&self, env: &BatchEnv) -> bool {
        self.states.len() == self.actions.len() + 1
            && self.states.first().is_some_and(|s| s.is_empty())
            && env.is_terminal(self.terminal())
            && self.actions.iter().enumerate().all(|(k, &a)| {
                !self.states[k].contains(a)
                    && self.states[k + 1].contains(a)
                    && self.states[k + 1].len() == self.states[k].len() + 1
            })
    }
}
