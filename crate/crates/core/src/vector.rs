//! Confidence score vectors and their phase-one modified counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Absolute tolerance on `|sum - 1|` for accepted inputs.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector of `k >= 2` class scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ConfidenceVector<T: Scalar = f64> {
    scores: Vec<T>,
}

impl<T: Scalar> ConfidenceVector<T> {
    /// Validates `scores` and rescales them to sum to one.
    ///
    /// Vectors whose sum is off by more than [`SUM_TOLERANCE`] are rejected
    /// rather than renormalized.
    pub fn new(mut scores: Vec<T>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidVector("at least two classes are required"));
        }
        let zero = T::zero();
        let one = T::one();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidVector("scores must be finite"));
        }
        if scores.iter().any(|&s| s < zero || s > one) {
            return Err(Error::InvalidVector("scores must lie in [0, 1]"));
        }
        let sum: T = scores.iter().copied().sum();
        if (sum - one).abs() > T::lit(SUM_TOLERANCE) {
            return Err(Error::InvalidVector("scores must sum to 1"));
        }
        if sum != one {
            for s in &mut scores {
                *s /= sum;
                if *s > one {
                    *s = one;
                }
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<T> {
        self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn max(&self) -> T {
        max_of(&self.scores)
    }

    pub fn min(&self) -> T {
        min_of(&self.scores)
    }

    /// Indices of every class attaining the maximum score.
    pub fn argmax_set(&self) -> Vec<usize> {
        argmax_set(&self.scores)
    }

    pub(crate) fn from_normalized(scores: Vec<T>) -> Self {
        Self { scores }
    }
}

impl<'de, T> Deserialize<'de> for ConfidenceVector<T>
where
    T: Scalar + Deserialize<'de>,
{
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let scores = Vec::<T>::deserialize(d)?;
        Self::new(scores).map_err(serde::de::Error::custom)
    }
}

/// Output of the selection phase: one candidate per class.
///
/// Scores need not sum to one. `sub_range[i]` is the sorted position (zero
/// based) of class `i`, i.e. the sub-range its value was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedVector<T: Scalar = f64> {
    pub(crate) scores: Vec<T>,
    pub(crate) sub_range: Vec<usize>,
}

impl<T: Scalar> ModifiedVector<T> {
    /// Builds a modified vector from raw values, e.g. when calibrating
    /// against a previously observed draw. Every class is tagged with its
    /// rank among `scores`.
    pub fn from_scores(scores: Vec<T>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidVector("at least two classes are required"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidVector("scores must be finite"));
        }
        let perm = stable_ascending_order(&scores);
        let mut sub_range = vec![0; scores.len()];
        for (pos, &idx) in perm.iter().enumerate() {
            sub_range[idx] = pos;
        }
        Ok(Self { scores, sub_range })
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn sub_ranges(&self) -> &[usize] {
        &self.sub_range
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn max(&self) -> T {
        max_of(&self.scores)
    }

    pub fn min(&self) -> T {
        min_of(&self.scores)
    }
}

pub(crate) fn max_of<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().fold(T::neg_infinity(), T::max)
}

pub(crate) fn min_of<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().fold(T::infinity(), T::min)
}

pub fn argmax_set<T: Scalar>(xs: &[T]) -> Vec<usize> {
    let m = max_of(xs);
    xs.iter()
        .enumerate()
        .filter(|(_, &x)| x == m)
        .map(|(i, _)| i)
        .collect()
}

/// Indices of `xs` in stable ascending order of value.
pub(crate) fn stable_ascending_order<T: Scalar>(xs: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite scores"));
    idx
}
