//! Lexicographic enumeration of K-subsets of `0..v`.

use alloc::vec::Vec;

/// Binomial coefficient as `u64`; 0 when `k > n`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Binomial coefficient as a real number, defined for any real `n` and
/// integer `k = 2` style uses (`n (n-1) / 2`).
pub(crate) fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Iterator over the K-subsets of `0..v` in lexicographic order.
///
/// Yields a borrowed view of the current combination through [`KSubsets::advance`]
/// to avoid one allocation per candidate; the `Iterator` impl clones.
#[derive(Debug, Clone)]
pub struct KSubsets {
    v: usize,
    current: Vec<usize>,
    started: bool,
    done: bool,
}

impl KSubsets {
    pub fn new(v: usize, k: usize) -> Self {
        KSubsets { v, current: (0..k).collect(), started: false, done: k > v }
    }

    /// Moves to the next combination and returns it, or `None` when exhausted.
    pub fn advance(&mut self) -> Option<&[usize]> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            return Some(&self.current);
        }
        let k = self.current.len();
        let mut i = k;
        while i > 0 {
            i -= 1;
            if self.current[i] < self.v - k + i {
                self.current[i] += 1;
                for j in i + 1..k {
                    self.current[j] = self.current[j - 1] + 1;
                }
                return Some(&self.current);
            }
        }
        self.done = true;
        None
    }
}

impl Iterator for KSubsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        self.advance().map(|s| s.to_vec())
    }
}
