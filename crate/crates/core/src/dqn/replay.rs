//! Proportional prioritized replay over a sum tree.

use rand::Rng;

/// Binary tree of partial sums over a fixed number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`, for `0 <= mass < total`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

/// A sampled entry with its importance-sampling weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub weight: f64,
}

/// Ring buffer sampling entry `i` with probability `p_i^alpha / sum_j p_j^alpha`.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    capacity: usize,
    alpha: f64,
    entries: Vec<T>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        PrioritizedReplay {
            capacity,
            alpha,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &T {
        &self.entries[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.alpha)
    }

    /// Add an entry at the largest priority seen so far, evicting the oldest
    /// when full.
    pub fn push(&mut self, item: T) {
        self.push_with_priority(item, self.max_priority);
    }

    pub fn push_with_priority(&mut self, item: T, priority: f64) {
        let i = self.next;
        if self.entries.len() < self.capacity {
            self.entries.push(item);
        } else {
            self.entries[i] = item;
        }
        self.set_priority(i, priority);
        self.next = (i + 1) % self.capacity;
    }

    pub fn set_priority(&mut self, i: usize, priority: f64) {
        assert!(priority > 0.0 && priority.is_finite(), "priority must be positive");
        self.max_priority = self.max_priority.max(priority);
        self.tree.set(i, priority.powf(self.alpha));
    }

    /// Sampling probability of entry `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Draw `n` entries independently, with weights `(N * P(i))^-beta`
    /// scaled so the largest weight in the batch is 1.
    pub fn sample<R: Rng>(&self, n: usize, beta: f64, rng: &mut R) -> Vec<Sample> {
        assert!(!self.is_empty(), "sampling an empty replay buffer");
        let total = self.tree.total();
        let len = self.len() as f64;
        let mut out: Vec<Sample> = (0..n)
            .map(|_| {
                let index = self.tree.find(rng.gen_range(0.0..total)).min(self.len() - 1);
                let weight = (len * self.probability(index)).powf(-beta);
                Sample { index, weight }
            })
            .collect();
        let max = out.iter().map(|s| s.weight).fold(0.0, f64::max);
        for s in &mut out {
            s.weight /= max;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_tree_find() {
        let mut t = SumTree::new(5);
        for (i, v) in [1.0, 0.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            t.set(i, v);
        }
        assert_eq!(t.total(), 10.0);
        assert_eq!(t.find(0.5), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(2.99), 2);
        assert_eq!(t.find(3.0), 3);
        assert_eq!(t.find(9.99), 4);
    }

    #[test]
    fn ring_eviction_and_max_priority() {
        let mut r = PrioritizedReplay::new(3, 1.0);
        r.push('a');
        r.set_priority(0, 5.0);
        r.push('b');
        assert_eq!(r.priority(1), 5.0);
        r.push('c');
        r.push('d');
        assert_eq!(r.len(), 3);
        assert_eq!(*r.get(0), 'd');
    }

    #[test]
    fn weights_favor_rare_entries() {
        let mut r = PrioritizedReplay::new(4, 1.0);
        for (i, p) in [1.0, 3.0].into_iter().enumerate() {
            r.push(i);
            r.set_priority(i, p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in r.sample(64, 1.0, &mut rng) {
            let want = if s.index == 0 { 1.0 } else { 1.0 / 3.0 };
            assert!((s.weight - want).abs() < 1e-12);
        }
    }
}
