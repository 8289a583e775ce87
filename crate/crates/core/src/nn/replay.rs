use std::collections::VecDeque;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// One stored step, keyed on estimated states.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: DVector<f64>,
    pub t: usize,
    pub action: DVector<f64>,
    pub next_state: DVector<f64>,
    /// Scaled stage cost.
    pub cost: f64,
    pub done: bool,
}

/// FIFO transition store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, tr: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `size` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if size > self.items.len() {
            return Err(Error::InsufficientBuffer {
                have: self.items.len(),
                need: size,
            });
        }
        Ok(index::sample(rng, self.items.len(), size)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}
