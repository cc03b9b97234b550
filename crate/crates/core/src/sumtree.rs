//! Binary sum tree for weighted index sampling with `O(log n)` updates.
//!
//! Internal nodes are recomputed from their children on every update, so the
//! root never accumulates drift from repeated add/subtract.

#[derive(Clone, Debug)]
pub struct SumTree {
    len: usize,
    cap: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(weights: &[f64]) -> Self {
        let cap = weights.len().max(1).next_power_of_two();
        let mut nodes = vec![0.0; 2 * cap];
        for (i, &w) in weights.iter().enumerate() {
            debug_assert!(w >= 0.0 && w.is_finite());
            nodes[cap + i] = w;
        }
        for p in (1..cap).rev() {
            nodes[p] = nodes[2 * p] + nodes[2 * p + 1];
        }
        Self { len: weights.len(), cap, nodes }
    }

    pub fn with_capacity(cap: usize) -> Self {
        let cap = cap.max(1).next_power_of_two();
        Self { len: 0, cap, nodes: vec![0.0; 2 * cap] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.cap + i]
    }

    pub fn set(&mut self, i: usize, w: f64) {
        debug_assert!(i < self.len);
        debug_assert!(w >= 0.0 && w.is_finite(), "bad weight {w}");
        let mut p = self.cap + i;
        self.nodes[p] = w;
        p /= 2;
        while p >= 1 {
            self.nodes[p] = self.nodes[2 * p] + self.nodes[2 * p + 1];
            p /= 2;
        }
    }

    /// Appends a weight, doubling the storage when full. Returns its index.
    pub fn push(&mut self, w: f64) -> usize {
        if self.len == self.cap {
            let leaves: Vec<f64> = (0..self.len).map(|i| self.get(i)).collect();
            let mut grown = Self::with_capacity(2 * self.cap);
            grown.len = self.len;
            grown.nodes[grown.cap..grown.cap + self.len].copy_from_slice(&leaves);
            for p in (1..grown.cap).rev() {
                grown.nodes[p] = grown.nodes[2 * p] + grown.nodes[2 * p + 1];
            }
            *self = grown;
        }
        let i = self.len;
        self.len += 1;
        self.set(i, w);
        i
    }

    /// Index `i` with `prefix(i) <= target < prefix(i+1)`. `target` is
    /// clamped into `[0, total)`; zero-weight leaves are never returned
    /// unless every weight is zero.
    pub fn find(&self, target: f64) -> usize {
        let mut t = target.max(0.0);
        let mut p = 1;
        while p < self.cap {
            let left = self.nodes[2 * p];
            if t < left || self.nodes[2 * p + 1] <= 0.0 {
                p *= 2;
                if t >= left {
                    t = left;
                }
            } else {
                t -= left;
                p = 2 * p + 1;
            }
        }
        let mut i = p - self.cap;
        // Rounding can land on a trailing zero leaf; step back to a live one.
        while i > 0 && (i >= self.len || self.get(i) <= 0.0) {
            i -= 1;
        }
        i
    }

    /// Samples an index with probability proportional to its weight, given a
    /// uniform variate in `[0, 1)`.
    #[inline]
    pub fn sample(&self, u: f64) -> usize {
        self.find(u * self.total())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampling_frequencies_match_weights() {
        let w = [1.0, 0.0, 3.0, 4.0, 2.0];
        let t = SumTree::new(&w);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for k in 0..n {
            counts[t.sample((k as f64 + 0.5) / n as f64)] += 1;
        }
        assert_eq!(counts[1], 0);
        for i in 0..5 {
            let expect = w[i] / 10.0;
            assert!((counts[i] as f64 / n as f64 - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn push_grows_and_preserves() {
        let mut t = SumTree::with_capacity(1);
        for i in 0..37 {
            t.push(i as f64);
        }
        assert_eq!(t.len(), 37);
        assert_eq!(t.total(), (0..37).sum::<i32>() as f64);
        assert_eq!(t.get(36), 36.0);
    }

    proptest! {
        #[test]
        fn total_matches_sum_after_updates(
            init in prop::collection::vec(0.0..10.0f64, 1..64),
            ups in prop::collection::vec((0usize..64, 0.0..10.0f64), 0..200),
        ) {
            let mut w = init.clone();
            let mut t = SumTree::new(&init);
            for (i, x) in ups {
                let i = i % w.len();
                w[i] = x;
                t.set(i, x);
            }
            let s: f64 = w.iter().sum();
            prop_assert!((t.total() - s).abs() <= 1e-12 * s.max(1.0));
            for u in [0.0, 0.25, 0.5, 0.999999] {
                let i = t.sample(u);
                prop_assert!(i < w.len());
                if s > 0.0 { prop_assert!(w[i] > 0.0); }
            }
        }
    }
}
