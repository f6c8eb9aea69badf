//! Two-phase confidence vector perturbation.
//!
//! Phase one splits `[0, 1)` into one sub-range per class (ordered like the
//! scores), discretizes each into `m` candidates and draws a replacement for
//! every score with the exponential mechanism. Phase two maps the modified
//! vector back onto the simplex with an exponential normalization that uses
//! the same `epsilon`. Because every replacement stays inside its own
//! sub-range and the normalization is monotone, the predicted class never
//! changes.

mod partition;
mod selection;

pub use partition::{discretize, partition, RangePartition};
pub use selection::{selection_table, utilities, SelectionTable};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vector::{ConfidenceVector, ModifiedVector};

pub const DEFAULT_GRANULARITY: usize = 5;
pub const DEFAULT_UTILITY_FLOOR_FRACTION: f64 = 0.1;

/// Boundary agreement required of neighboring vectors.
pub const NEIGHBOR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig<T: Scalar = f64> {
    /// Budget of each selection and of the normalization.
    pub epsilon: T,
    /// Candidates per sub-range.
    pub m: usize,
    /// Utility distance floor as a fraction of the candidate spacing.
    pub utility_floor_fraction: T,
    pub rng_seed: u64,
}

impl<T: Scalar> MechanismConfig<T> {
    pub fn new(epsilon: T) -> Self {
        Self {
            epsilon,
            m: DEFAULT_GRANULARITY,
            utility_floor_fraction: T::lit(DEFAULT_UTILITY_FLOOR_FRACTION),
            rng_seed: 0,
        }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_utility_floor_fraction(mut self, fraction: T) -> Self {
        self.utility_floor_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig("epsilon must be positive and finite"));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("granularity m must be at least 1"));
        }
        let f = self.utility_floor_fraction;
        if !(f > T::zero() && f <= T::one()) {
            return Err(Error::InvalidConfig(
                "utility floor fraction must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Deterministic generator for call number `nonce` under this seed.
    ///
    /// Distinct nonces select independent ChaCha streams, so a batch can be
    /// split across workers and still reproduce the serial output.
    pub fn rng(&self, nonce: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(nonce);
        rng
    }
}

/// Phase one with the configuration's own generator (nonce 0).
pub fn modify<T: Scalar>(
    y: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
) -> Result<ModifiedVector<T>> {
    modify_with_rng(y, cfg, &mut cfg.rng(0))
}

/// Phase one: replace each score by a candidate drawn from its sub-range.
///
/// Runs of equal scores all receive their shared interior boundary, which
/// equals the tied score, so ties survive as exact ties.
pub fn modify_with_rng<T: Scalar, R: Rng + ?Sized>(
    y: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
    rng: &mut R,
) -> Result<ModifiedVector<T>> {
    cfg.validate()?;
    let part = partition(y);
    let k = part.len();
    let mut scores = vec![T::zero(); k];
    let mut sub_range = vec![0; k];

    for (start, end) in part.tie_groups() {
        if end - start == 1 {
            let candidates = discretize(&part, start + 1, cfg.m)?;
            let table = selection_table(
                part.sorted_scores()[start],
                &candidates,
                cfg.epsilon,
                cfg.utility_floor_fraction,
            )?;
            let class = part.permutation()[start];
            scores[class] = table.sample(rng);
            sub_range[class] = start;
        } else {
            let shared = part.boundaries()[start + 1];
            for pos in start..end {
                let class = part.permutation()[pos];
                scores[class] = shared;
                sub_range[class] = pos;
            }
        }
    }
    Ok(ModifiedVector { scores, sub_range })
}

/// Phase two: `z_i = exp(eps * y'_i / 2) / sum_j exp(eps * y'_j / 2)`,
/// evaluated after subtracting the largest exponent.
pub fn normalize<T: Scalar>(
    y_prime: &ModifiedVector<T>,
    epsilon: T,
) -> Result<ConfidenceVector<T>> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig("epsilon must be positive and finite"));
    }
    Ok(ConfidenceVector::from_normalized(exp_normalize(
        y_prime.scores(),
        epsilon,
    )))
}

pub(crate) fn exp_normalize<T: Scalar>(scores: &[T], epsilon: T) -> Vec<T> {
    let half = epsilon / T::lit(2.0);
    let top = scores.iter().copied().fold(T::neg_infinity(), T::max) * half;
    let weights: Vec<T> = scores.iter().map(|&s| (s * half - top).exp()).collect();
    let total: T = weights.iter().copied().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Full defense with a fixed budget: `normalize(modify(y), epsilon)`.
pub fn defend<T: Scalar>(
    y: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
) -> Result<ConfidenceVector<T>> {
    defend_with_rng(y, cfg, &mut cfg.rng(0))
}

pub fn defend_with_rng<T: Scalar, R: Rng + ?Sized>(
    y: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
    rng: &mut R,
) -> Result<ConfidenceVector<T>> {
    let y_prime = modify_with_rng(y, cfg, rng)?;
    normalize(&y_prime, cfg.epsilon)
}

/// Neighbor of `y` sharing its partition: in ascending order the scores are
/// shifted by `+t, -t, +t, ..`, which keeps every adjacent midpoint and the
/// total mass. Only an even class count balances the shifts.
pub fn alternating_neighbor<T: Scalar>(
    y: &ConfidenceVector<T>,
    t: T,
) -> Result<ConfidenceVector<T>> {
    let k = y.len();
    if k % 2 == 1 {
        return Err(Error::NotNeighboring(
            "odd class counts have no shifted neighbor",
        ));
    }
    let part = partition(y);
    let sorted = part.sorted_scores();
    let gap = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(T::infinity(), T::min);
    let two = T::lit(2.0);
    if !(t.abs() * two < gap) || T::from_usize_lossy(k) * t.abs() > T::one() {
        return Err(Error::NotNeighboring(
            "shift must stay below half the smallest gap",
        ));
    }
    let mut scores = vec![T::zero(); k];
    for (pos, &class) in part.permutation().iter().enumerate() {
        let shifted = if pos % 2 == 0 {
            sorted[pos] + t
        } else {
            sorted[pos] - t
        };
        if !(T::zero()..=T::one()).contains(&shifted) {
            return Err(Error::NotNeighboring("shift leaves the unit interval"));
        }
        scores[class] = shifted;
    }
    ConfidenceVector::new(scores)
}

/// Largest pointwise probability ratio, per sub-range, between the
/// selection tables of two neighboring vectors.
///
/// Neighbors share every sub-range boundary (within
/// [`NEIGHBOR_TOLERANCE`]) and lie within L1 distance one, so both tables
/// range over the same candidates. Each entry is bounded by `exp(epsilon)`.
pub fn dp_ratio_check<T: Scalar>(
    y: &ConfidenceVector<T>,
    y_hat: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: y_hat.len(),
        });
    }
    let p = partition(y);
    let q = partition(y_hat);
    let tol = T::lit(NEIGHBOR_TOLERANCE);
    let same_bounds = p
        .boundaries()
        .iter()
        .zip(q.boundaries())
        .all(|(a, b)| (*a - *b).abs() <= tol);
    if !same_bounds {
        return Err(Error::NotNeighboring("sub-range boundaries differ"));
    }
    let l1: T = y
        .scores()
        .iter()
        .zip(y_hat.scores())
        .map(|(a, b)| (*a - *b).abs())
        .sum();
    if l1 > T::one() + tol {
        return Err(Error::NotNeighboring("L1 distance exceeds 1"));
    }

    let mut ratios = Vec::with_capacity(p.len());
    for i in 1..=p.len() {
        let candidates = discretize(&p, i, cfg.m)?;
        let a = selection_table(
            p.sorted_scores()[i - 1],
            &candidates,
            cfg.epsilon,
            cfg.utility_floor_fraction,
        )?;
        let b = selection_table(
            q.sorted_scores()[i - 1],
            &candidates,
            cfg.epsilon,
            cfg.utility_floor_fraction,
        )?;
        let worst = a
            .probabilities
            .iter()
            .zip(&b.probabilities)
            .map(|(&pa, &pb)| (pa / pb).max(pb / pa))
            .fold(T::one(), T::max);
        ratios.push(worst);
    }
    Ok(ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cv(s: &[f64]) -> ConfidenceVector {
        ConfidenceVector::new(s.to_vec()).unwrap()
    }

    #[test]
    fn worked_example_draws_from_each_grid() {
        let y = cv(&[0.2, 0.8]);
        for seed in 0..50 {
            let yp = modify(&y, &MechanismConfig::new(1.0).with_seed(seed)).unwrap();
            let (a, b) = (yp.scores()[0], yp.scores()[1]);
            assert!((0.0..0.45).contains(&a), "{a}");
            assert!((0.5..0.95).contains(&b), "{b}");
            assert!(((a * 10.0).round() - a * 10.0).abs() < 1e-9);
            assert!(((b * 10.0).round() - b * 10.0).abs() < 1e-9);
            assert_eq!(yp.sub_ranges(), &[0, 1]);
        }
    }

    #[test]
    fn uniform_input_stays_uniform() {
        let y = cv(&[0.25; 4]);
        let cfg = MechanismConfig::new(0.7).with_seed(11);
        let yp = modify(&y, &cfg).unwrap();
        assert_eq!(yp.scores(), &[0.25; 4]);
        let z = defend(&y, &cfg).unwrap();
        assert_eq!(z.scores(), &[0.25; 4]);
    }

    #[test]
    fn seeded_modify_is_bitwise_repeatable() {
        let y = cv(&[0.6, 0.1, 0.3]);
        let cfg = MechanismConfig::new(1.0).with_seed(42);
        let a = modify(&y, &cfg).unwrap();
        let b = modify(&y, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |v: &ModifiedVector| v.scores().iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn distinct_nonces_give_distinct_streams() {
        let cfg = MechanismConfig::<f64>::new(1.0).with_seed(9);
        let a: u64 = cfg.rng(0).random();
        let b: u64 = cfg.rng(1).random();
        assert_ne!(a, b);
    }

    #[test]
    fn normalize_worked_example() {
        // oracle: 50-digit evaluation of exp(0.4)/(exp(0.4)+exp(0.9))
        let yp = ModifiedVector::from_scores(vec![0.4, 0.9]).unwrap();
        let z = normalize(&yp, 2.0).unwrap();
        assert_abs_diff_eq!(z.scores()[0], 0.377_540_668_798_145_4, epsilon = 1e-15);
        assert_abs_diff_eq!(z.scores()[1], 0.622_459_331_201_854_6, epsilon = 1e-15);
    }

    #[test]
    fn normalize_at_fixed_point_budget() {
        let eps_star = 2.0 * (0.7f64.ln() - 0.3f64.ln()) / 0.5;
        let yp = ModifiedVector::from_scores(vec![0.4, 0.9]).unwrap();
        let z = normalize(&yp, eps_star).unwrap();
        assert_abs_diff_eq!(z.scores()[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(z.scores()[1] / z.scores()[0], 7.0 / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn normalize_constant_is_uniform() {
        let yp = ModifiedVector::from_scores(vec![0.3; 5]).unwrap();
        for eps in [0.01, 1.0, 300.0] {
            assert_eq!(normalize(&yp, eps).unwrap().scores(), &[0.2; 5]);
        }
    }

    #[test]
    fn normalize_survives_huge_exponents() {
        let yp = ModifiedVector::from_scores(vec![0.1, 0.9]).unwrap();
        let z = normalize(&yp, 5000.0).unwrap();
        assert!(z.scores().iter().all(|s: &f64| s.is_finite()));
        assert_eq!(z.scores()[1], 1.0);
    }

    #[test]
    fn defend_keeps_top_class() {
        let y = cv(&[0.2, 0.8]);
        for seed in 0..20 {
            let z = defend(&y, &MechanismConfig::new(2.0).with_seed(seed)).unwrap();
            assert!(z.scores()[1] > z.scores()[0]);
        }
    }

    #[test]
    fn ratio_identity_is_one() {
        let y = cv(&[0.1, 0.2, 0.3, 0.4]);
        let r = dp_ratio_check(&y, &y, &MechanismConfig::new(1.0)).unwrap();
        assert!(r.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ratio_two_class_neighbors() {
        let r = dp_ratio_check(
            &cv(&[0.2, 0.8]),
            &cv(&[0.3, 0.7]),
            &MechanismConfig::new(1.0),
        )
        .unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|&x| x > 1.0 && x <= 1f64.exp()));
    }

    #[test]
    fn ratio_rejects_non_neighbors() {
        let err = dp_ratio_check(
            &cv(&[0.1, 0.2, 0.7]),
            &cv(&[0.2, 0.2, 0.6]),
            &MechanismConfig::new(1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotNeighboring(_)));
    }

    #[test]
    fn config_validation() {
        assert!(MechanismConfig::new(0.0).validate().is_err());
        assert!(MechanismConfig::new(1.0).with_m(0).validate().is_err());
        assert!(MechanismConfig::new(1.0)
            .with_utility_floor_fraction(0.0)
            .validate()
            .is_err());
        assert!(MechanismConfig::new(1.0).validate().is_ok());
    }

    #[test]
    fn alternating_neighbor_shares_boundaries() {
        let y = ConfidenceVector::new(vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let n = alternating_neighbor(&y, 0.02).unwrap();
        for (a, b) in partition(&y)
            .boundaries()
            .iter()
            .zip(partition(&n).boundaries())
        {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(n.scores()[1], 0.12, epsilon = 1e-15);
        assert!(alternating_neighbor(&y, 0.06).is_err());
        let odd = ConfidenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(alternating_neighbor(&odd, 0.01).is_err());
    }
}
