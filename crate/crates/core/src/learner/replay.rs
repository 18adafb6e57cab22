use std::collections::VecDeque;

use rand::seq::index;

use crate::grid::Action;
use crate::neural::Tensor;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Terminal {
    /// Episode continues.
    No,
    /// Every user connected; the connected reward is treated as absorbing.
    Success,
    /// No legal progress is possible; nothing to bootstrap from.
    Stalled,
    /// Step limit reached; the state itself is not terminal.
    Timeout,
}

/// One joint step `(s, o, u, r, s', o')`; the global state is the agent graph
/// with per-agent observation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Tensor,
    pub adj: Vec<Vec<usize>>,
    pub actions: Vec<Action>,
    pub reward: f64,
    pub shaped: Vec<f64>,
    pub next_obs: Tensor,
    pub next_adj: Vec<Vec<usize>>,
    pub terminal: Terminal,
}

impl Transition {
    pub fn agents_before(&self) -> usize {
        self.obs.rows
    }

    pub fn agents_after(&self) -> usize {
        self.next_obs.rows
    }
}

/// FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct transitions drawn uniformly; `None` if too few are stored.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Option<Vec<&Transition>> {
        if n > self.items.len() {
            return None;
        }
        Some(index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tr(r: f64) -> Transition {
        Transition {
            obs: Tensor::zeros(1, 1),
            adj: vec![vec![]],
            actions: vec![Action::STAY],
            reward: r,
            shaped: vec![r],
            next_obs: Tensor::zeros(2, 1),
            next_adj: vec![vec![1], vec![0]],
            terminal: Terminal::No,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(8);
        for i in 0..11 {
            b.push(tr(f64::from(i)));
        }
        assert_eq!(b.len(), 8);
        let rs: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rs, (3..11).map(f64::from).collect::<Vec<_>>());
        assert_eq!(b.iter().next().unwrap().agents_after(), 2);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.push(tr(f64::from(i)));
        }
        let mut r = rng::stream(0, "replay");
        let s = b.sample(10, &mut r).unwrap();
        let mut seen: Vec<f64> = s.iter().map(|t| t.reward).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(b.sample(11, &mut r).is_none());
    }
}
