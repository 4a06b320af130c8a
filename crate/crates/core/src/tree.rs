//! Fenwick (binary indexed) sum trees with weighted index search.
//!
//! Used wherever an event picks an item with probability proportional to a
//! weight that changes after every event: FV particles grouped by state,
//! AFP history counts, branching type counts.

use std::ops::{AddAssign, Sub, SubAssign};

pub trait Weight: Copy + Default + PartialOrd + AddAssign + SubAssign + Sub<Output = Self> {}

impl Weight for f64 {}
impl Weight for u64 {}

#[derive(Clone, Debug)]
pub struct Fenwick<T: Weight> {
    values: Vec<T>,
    tree: Vec<T>,
    top: usize,
}

impl<T: Weight> Fenwick<T> {
    pub fn new(n: usize) -> Self {
        Self::from_values(vec![T::default(); n])
    }

    pub fn from_values(values: Vec<T>) -> Self {
        let n = values.len();
        let mut tree = vec![T::default(); n + 1];
        for i in 1..=n {
            tree[i] += values[i - 1];
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                let v = tree[i];
                tree[parent] += v;
            }
        }
        let top = if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
        Self { values, tree, top }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> T {
        self.values[i]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Appends a slot with the given weight (O(n) rebuild).
    pub fn push(&mut self, w: T) {
        let mut values = std::mem::take(&mut self.values);
        values.push(w);
        *self = Self::from_values(values);
    }

    pub fn set(&mut self, i: usize, w: T) {
        let old = self.values[i];
        if w >= old {
            self.add(i, w - old);
        } else {
            self.sub(i, old - w);
        }
    }

    pub fn add(&mut self, i: usize, delta: T) {
        self.values[i] += delta;
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    pub fn sub(&mut self, i: usize, delta: T) {
        self.values[i] -= delta;
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] -= delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Sum of `values[..i]`.
    pub fn prefix(&self, i: usize) -> T {
        let mut s = T::default();
        let mut j = i;
        while j > 0 {
            s += self.tree[j];
            j &= j - 1;
        }
        s
    }

    pub fn total(&self) -> T {
        self.prefix(self.values.len())
    }

    /// Smallest `i` with `prefix(i + 1) > target`. Rounding can push an f64
    /// search past the end; the result is then the last slot with positive
    /// weight.
    pub fn find(&self, target: T) -> usize {
        let n = self.values.len();
        let mut pos = 0;
        let mut rem = target;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        if pos < n && self.values[pos] > T::default() {
            return pos;
        }
        // landed on a zero-weight slot or past the end: back off
        let zero = T::default();
        (0..n.min(pos + 1))
            .rev()
            .find(|&i| self.values[i] > zero)
            .or_else(|| (pos..n).find(|&i| self.values[i] > zero))
            .expect("find on an empty tree")
    }

    /// Recomputes internal sums from the stored values, discarding
    /// accumulated rounding.
    pub fn rebuild(&mut self) {
        let values = std::mem::take(&mut self.values);
        *self = Self::from_values(values);
    }
}
