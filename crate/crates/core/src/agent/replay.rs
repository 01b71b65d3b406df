use rand::Rng;

use crate::rng::ChaCha8Rng;

/// One n-step transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    /// Discounted reward accumulated over the n steps.
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
    /// Discount applied to the bootstrap distribution.
    pub discount: f64,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
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
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `batch` draws with replacement from the written slots.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Transition> {
        assert!(!self.items.is_empty(), "sampling an empty replay buffer");
        (0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(a: usize) -> Transition {
        Transition {
            observation: vec![],
            action: a,
            reward: 0.0,
            next_observation: vec![],
            done: true,
            discount: 0.0,
        }
    }

    #[test]
    fn never_samples_unwritten_slots() {
        let mut b = ReplayBuffer::new(100);
        for a in 0..7 {
            b.push(t(a));
        }
        let mut r = rng::seeded(1);
        assert!(b.sample(1000, &mut r).iter().all(|x| x.action < 7));
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for a in 0..5 {
            b.push(t(a));
        }
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.sample(200, &mut rng::seeded(2)).iter().map(|x| x.action).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![2, 3, 4]);
    }
}
