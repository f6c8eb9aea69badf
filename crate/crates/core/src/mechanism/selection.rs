use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Exact exponential-mechanism distribution over one sub-range's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable<T: Scalar = f64> {
    pub candidates: Vec<T>,
    pub probabilities: Vec<T>,
}

impl<T: Scalar> SelectionTable<T> {
    /// Inverse-CDF draw of a candidate index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        for (j, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        self.probabilities.len() - 1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        self.candidates[self.sample_index(rng)]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Rescaled utilities `u(c) in (0, 1]` of each candidate for score `y_i`.
///
/// Raw utility is the reciprocal distance `1 / max(|y_i - c|, delta)` with
/// `delta = utility_floor_fraction * rho`; dividing by the largest raw value
/// fixes the sensitivity at one.
pub fn utilities<T: Scalar>(y_i: T, candidates: &[T], utility_floor_fraction: T) -> Vec<T> {
    let m = candidates.len();
    if m < 2 {
        return vec![T::one(); m];
    }
    let rho = (candidates[m - 1] - candidates[0]) / T::from_usize_lossy(m - 1);
    if rho <= T::zero() {
        return vec![T::one(); m];
    }
    let delta = utility_floor_fraction * rho;
    let raw: Vec<T> = candidates
        .iter()
        .map(|&c| T::one() / (y_i - c).abs().max(delta))
        .collect();
    let top = raw.iter().copied().fold(T::zero(), T::max);
    raw.into_iter().map(|r| r / top).collect()
}

/// Closed-form selection probabilities `p(c) ∝ exp(epsilon * u(c) / 2)`.
pub fn selection_table<T: Scalar>(
    y_i: T,
    candidates: &[T],
    epsilon: T,
    utility_floor_fraction: T,
) -> Result<SelectionTable<T>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig("epsilon must be positive and finite"));
    }
    let half = epsilon / T::lit(2.0);
    // max utility is exactly 1, so shifting by it keeps every exponent <= 0
    let weights: Vec<T> = utilities(y_i, candidates, utility_floor_fraction)
        .into_iter()
        .map(|u| (half * (u - T::one())).exp())
        .collect();
    let total: T = weights.iter().copied().sum();
    Ok(SelectionTable {
        candidates: candidates.to_vec(),
        probabilities: weights.into_iter().map(|w| w / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

    #[test]
    fn single_candidate_is_certain() {
        let t = selection_table(0.77, &[0.3], 1.0, 0.1).unwrap();
        assert_eq!(t.probabilities, vec![1.0]);
    }

    #[test]
    fn worked_utilities() {
        let u = utilities(0.2, &GRID, 0.1);
        for (got, want) in u.iter().zip([0.05, 0.1, 1.0, 0.1, 0.05]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn worked_probabilities() {
        // frozen from a 50-digit evaluation of exp(u/2) / sum
        let want = [
            0.176_720_769_587_523,
            0.181_194_477_168_801,
            0.284_169_506_487_351,
            0.181_194_477_168_801,
            0.176_720_769_587_523,
        ];
        let t = selection_table(0.2, &GRID, 1.0, 0.1).unwrap();
        for (got, w) in t.probabilities.iter().zip(want) {
            assert_abs_diff_eq!(*got, w, epsilon = 1e-12);
        }
        let sum: f64 = t.probabilities.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn large_epsilon_concentrates() {
        let t = selection_table(0.2, &GRID, 200.0, 0.1).unwrap();
        assert!(t.probabilities[2] > 0.999);
    }

    #[test]
    fn degenerate_candidates_are_uniform() {
        let t = selection_table(0.3, &[0.3; 4], 3.0, 0.1).unwrap();
        assert_eq!(t.probabilities, vec![0.25; 4]);
    }

    #[test]
    fn rejects_empty_and_bad_epsilon() {
        assert!(matches!(
            selection_table(0.2, &[], 1.0, 0.1),
            Err(Error::EmptyCandidates)
        ));
        assert!(selection_table(0.2, &GRID, 0.0, 0.1).is_err());
        assert!(selection_table(0.2, &GRID, f64::NAN, 0.1).is_err());
    }

    #[test]
    fn sampling_stays_in_candidates() {
        let t = selection_table(0.2, &GRID, 1.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(GRID.contains(&t.sample(&mut rng)));
        }
    }

    #[test]
    fn works_in_single_precision() {
        let t = selection_table(0.2f32, &[0.0, 0.1, 0.2, 0.3, 0.4], 1.0, 0.1).unwrap();
        assert!((t.probabilities[2] - 0.284_169_5).abs() < 1e-5);
    }
}
