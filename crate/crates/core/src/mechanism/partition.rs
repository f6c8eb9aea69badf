use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vector::{stable_ascending_order, ConfidenceVector};

/// The `k` half-open sub-ranges of `[0, 1)` induced by a sorted score vector.
///
/// `boundaries` holds `b_0 = 0, b_1, .., b_k = 1` with `b_i` the midpoint of
/// the `i`-th and `(i+1)`-th smallest scores. Sub-range `i` (one based) is
/// `[b_{i-1}, b_i)` and houses the `i`-th smallest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangePartition<T: Scalar = f64> {
    boundaries: Vec<T>,
    permutation: Vec<usize>,
    sorted: Vec<T>,
}

impl<T: Scalar> RangePartition<T> {
    pub fn boundaries(&self) -> &[T] {
        &self.boundaries
    }

    /// `permutation()[p]` is the original class index of sorted position `p`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Maps original class index to sorted position.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (pos, &idx) in self.permutation.iter().enumerate() {
            inv[idx] = pos;
        }
        inv
    }

    /// Scores in ascending order.
    pub fn sorted_scores(&self) -> &[T] {
        &self.sorted
    }

    /// Number of sub-ranges (the class count `k`).
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `(start, end)` of sub-range `i`, one based.
    pub fn sub_range(&self, i: usize) -> Result<(T, T)> {
        if i == 0 || i > self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok((self.boundaries[i - 1], self.boundaries[i]))
    }

    /// Sorted positions `[start, end)` of runs of equal scores.
    pub(crate) fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut groups = Vec::new();
        let mut start = 0;
        for p in 1..=self.sorted.len() {
            if p == self.sorted.len() || self.sorted[p] != self.sorted[start] {
                groups.push((start, p));
                start = p;
            }
        }
        groups
    }
}

/// Splits `[0, 1)` into one sub-range per class, ordered like the scores.
pub fn partition<T: Scalar>(y: &ConfidenceVector<T>) -> RangePartition<T> {
    let scores = y.scores();
    let permutation = stable_ascending_order(scores);
    let sorted: Vec<T> = permutation.iter().map(|&i| scores[i]).collect();
    let two = T::lit(2.0);

    let mut boundaries = Vec::with_capacity(sorted.len() + 1);
    boundaries.push(T::zero());
    for pair in sorted.windows(2) {
        boundaries.push((pair[0] + pair[1]) / two);
    }
    boundaries.push(T::one());

    RangePartition {
        boundaries,
        permutation,
        sorted,
    }
}

/// Uniform grid of `m` candidates starting at the left edge of sub-range `i`
/// (one based). Zero-width sub-ranges yield `m` copies of their start.
pub fn discretize<T: Scalar>(partition: &RangePartition<T>, i: usize, m: usize) -> Result<Vec<T>> {
    if m == 0 {
        return Err(Error::InvalidConfig("granularity m must be at least 1"));
    }
    let (start, end) = partition.sub_range(i)?;
    let rho = (end - start) / T::from_usize_lossy(m);
    Ok((0..m)
        .map(|j| start + T::from_usize_lossy(j) * rho)
        .collect())
}
