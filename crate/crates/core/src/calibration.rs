//! Fixed-point budget calibration and confidence-shaping policies.
//!
//! For a modified vector `y'` there is a budget `eps*` at which the
//! exponential normalization reproduces the original scores. Budgets above
//! `eps*` make the released vector look more confident than the model was,
//! budgets below make it look less confident, and the L1 gap to the original
//! grows with `|eps - eps*|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{exp_normalize, modify_with_rng, normalize, MechanismConfig};
use crate::scalar::Scalar;
use crate::vector::{argmax_set, ConfidenceVector, ModifiedVector};

/// Width of the golden-section bracket relative to the seed.
pub const BRACKET_FACTOR: f64 = 10.0;
pub const MAX_ITERATIONS: usize = 200;
/// Relative convergence width on epsilon.
pub const EPSILON_TOLERANCE: f64 = 1e-10;
/// Acceptable gap between achieved and requested L1 distortion.
pub const DISTORTION_TOLERANCE: f64 = 1e-4;
/// Floor applied to model scores before taking logarithms.
pub const SCORE_FLOOR: f64 = 1e-12;

/// Budget at which normalizing `y'` best reproduces `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStar<T: Scalar = f64> {
    pub value: T,
    /// `||normalize(y', value) - y||_1`.
    pub residual: T,
    /// Closed-form initializer from the extreme scores.
    pub pair_seed: T,
}

/// Threshold policy deciding which side of `eps*` a release is pushed to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefensePolicy<T: Scalar = f64> {
    pub tau: T,
    /// Used when `max(y) > tau`; should sit below `eps*`.
    pub eps_confident: T,
    /// Used when `max(y) <= tau`; should sit above `eps*`.
    pub eps_unconfident: T,
}

impl<T: Scalar> DefensePolicy<T> {
    pub fn new(tau: T, eps_confident: T, eps_unconfident: T) -> Result<Self> {
        let p = Self {
            tau,
            eps_confident,
            eps_unconfident,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > T::zero() && self.tau < T::one()) {
            return Err(Error::InvalidConfig("tau must lie in (0, 1)"));
        }
        let ok = |e: T| e > T::zero() && e.is_finite();
        if !ok(self.eps_confident) || !ok(self.eps_unconfident) {
            return Err(Error::InvalidConfig("policy budgets must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonChoice<T: Scalar = f64> {
    pub epsilon: T,
    /// True when `max(y) > tau`.
    pub confident: bool,
    /// True when the configured budget sat on the wrong side of `eps*`.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distortion<T: Scalar = f64> {
    pub l1: T,
    pub l2: T,
}

fn l1<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).sum()
}

fn residual_at<T: Scalar>(y: &[T], y_prime: &[T], eps: T) -> T {
    l1(&exp_normalize(y_prime, eps), y)
}

/// Golden-section search for the minimum of a unimodal `f` on `[a, b]`.
fn golden_section_minimize<T: Scalar>(f: impl Fn(T) -> T, mut a: T, mut b: T) -> (T, T) {
    let resp = T::lit(2.0 - 1.618_033_988_749_895);
    let tol = T::lit(EPSILON_TOLERANCE);
    let mut x1 = a + resp * (b - a);
    let mut x2 = b - resp * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..MAX_ITERATIONS {
        if (b - a) <= tol * x1.abs().max(T::min_positive_value()) {
            break;
        }
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + resp * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - resp * (b - a);
            f2 = f(x2);
        }
    }
    if f1 < f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Solves for the budget at which `normalize(y', eps) = y`.
///
/// When the system has an exact solution it is unique and equals the pair
/// seed `2 (ln y_max - ln y_min) / (y'_max - y'_min)`; otherwise the L1
/// residual is minimized on `[seed / 10, seed * 10]`.
pub fn epsilon_star<T: Scalar>(
    y: &ConfidenceVector<T>,
    y_prime: &ModifiedVector<T>,
) -> Result<EpsilonStar<T>> {
    if y.len() != y_prime.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: y_prime.len(),
        });
    }
    if !(y.min() > T::zero()) {
        return Err(Error::NonPositiveScore);
    }
    let spread = y_prime.max() - y_prime.min();
    if !(spread > T::zero()) {
        return Err(Error::Degenerate);
    }
    let seed = T::lit(2.0) * (y.max().ln() - y.min().ln()) / spread;
    if !(seed > T::zero()) || !seed.is_finite() {
        // y is uniform while y' is not: only eps -> 0 fits
        return Err(Error::Degenerate);
    }

    let ys = y.scores();
    let yp = y_prime.scores();
    let f = |e: T| residual_at(ys, yp, e);
    let factor = T::lit(BRACKET_FACTOR);
    let (best, best_res) = golden_section_minimize(f, seed / factor, seed * factor);
    let seed_res = f(seed);
    let (value, residual) = if seed_res <= best_res {
        (seed, seed_res)
    } else {
        (best, best_res)
    };
    Ok(EpsilonStar {
        value,
        residual,
        pair_seed: seed,
    })
}

/// Picks the release budget for `y` under `policy`.
///
/// Confident outputs (`max(y) > tau`) get `eps_confident`, which must lie
/// below `eps*`; the rest get `eps_unconfident`, which must lie above it.
/// A budget on the wrong side is clamped to `0.9 eps*` or `1.1 eps*`.
pub fn choose_epsilon<T: Scalar>(
    y: &ConfidenceVector<T>,
    policy: &DefensePolicy<T>,
    eps_star: &EpsilonStar<T>,
) -> EpsilonChoice<T> {
    let star = eps_star.value;
    let confident = y.max() > policy.tau;
    let (epsilon, clamped) = if confident {
        if policy.eps_confident < star {
            (policy.eps_confident, false)
        } else {
            (star * T::lit(0.9), true)
        }
    } else if policy.eps_unconfident > star {
        (policy.eps_unconfident, false)
    } else {
        (star * T::lit(1.1), true)
    };
    if clamped {
        tracing::warn!(
            confident,
            clamped_to = epsilon.as_f64(),
            "policy budget on the wrong side of the fixed point; clamped"
        );
    }
    EpsilonChoice {
        epsilon,
        confident,
        clamped,
    }
}

pub fn distortion<T: Scalar>(
    y: &ConfidenceVector<T>,
    z: &ConfidenceVector<T>,
) -> Result<Distortion<T>> {
    if y.len() != z.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: z.len(),
        });
    }
    let (a, b) = (y.scores(), z.scores());
    Ok(Distortion {
        l1: l1(a, b),
        l2: a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum::<T>()
            .sqrt(),
    })
}

/// Supremum of the L1 distortion reachable on `side` of the fixed point.
///
/// As eps grows the release collapses onto the top candidates of `y'`; as
/// it shrinks the release flattens to uniform. Neither limit is attained.
pub fn distortion_supremum<T: Scalar>(
    y: &ConfidenceVector<T>,
    y_prime: &ModifiedVector<T>,
    side: Side,
) -> T {
    let k = y.len();
    let limit: Vec<T> = match side {
        Side::Above => {
            let top = argmax_set(y_prime.scores());
            let share = T::one() / T::from_usize_lossy(top.len());
            (0..k)
                .map(|i| if top.contains(&i) { share } else { T::zero() })
                .collect()
        }
        Side::Below => vec![T::one() / T::from_usize_lossy(k); k],
    };
    l1(&limit, y.scores())
}

/// Budget on `side` of `eps*` whose release sits `target_l1` away from `y`.
pub fn epsilon_for_distortion<T: Scalar>(
    y: &ConfidenceVector<T>,
    y_prime: &ModifiedVector<T>,
    target_l1: T,
    side: Side,
) -> Result<T> {
    if !(target_l1 >= T::zero()) || !target_l1.is_finite() {
        return Err(Error::InvalidConfig("target distance must be non-negative"));
    }
    let star = epsilon_star(y, y_prime)?;
    if target_l1 <= star.residual {
        return Ok(star.value);
    }
    let supremum = distortion_supremum(y, y_prime, side);
    let unreachable = || Error::Unachievable {
        target: target_l1.as_f64(),
        supremum: supremum.as_f64(),
    };
    if target_l1 >= supremum {
        return Err(unreachable());
    }

    let ys = y.scores();
    let yp = y_prime.scores();
    let d = |e: T| residual_at(ys, yp, e);
    let two = T::lit(2.0);

    // walk geometrically away from eps* until the target is bracketed
    let mut near = star.value;
    let mut far = star.value;
    loop {
        far = match side {
            Side::Above => far * two,
            Side::Below => far / two,
        };
        if d(far) >= target_l1 {
            break;
        }
        near = far;
        if !far.is_normal() || far > T::max_value() / two {
            return Err(unreachable());
        }
    }

    let tol = T::lit(DISTORTION_TOLERANCE);
    let mut mid = (near * far).sqrt();
    for _ in 0..MAX_ITERATIONS {
        mid = (near * far).sqrt();
        let gap = d(mid) - target_l1;
        if gap.abs() <= tol {
            return Ok(mid);
        }
        if gap < T::zero() {
            near = mid;
        } else {
            far = mid;
        }
        if (far - near).abs() <= T::lit(EPSILON_TOLERANCE) * mid {
            break;
        }
    }
    Ok(mid)
}

/// Result of a policy-driven release.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRelease<T: Scalar = f64> {
    pub z: ConfidenceVector<T>,
    pub choice: EpsilonChoice<T>,
    /// `None` when `y'` is constant and every budget yields the uniform vector.
    pub eps_star: Option<EpsilonStar<T>>,
}

/// Selection with `cfg.epsilon`, then normalization with the budget picked
/// by `policy` relative to this draw's fixed point.
///
/// Zero scores are floored at [`SCORE_FLOOR`] for the fixed-point solve only.
pub fn defend_with_policy<T: Scalar, R: Rng + ?Sized>(
    y: &ConfidenceVector<T>,
    cfg: &MechanismConfig<T>,
    policy: &DefensePolicy<T>,
    rng: &mut R,
) -> Result<PolicyRelease<T>> {
    policy.validate()?;
    let y_prime = modify_with_rng(y, cfg, rng)?;
    let floored = floor_scores(y)?;
    let (choice, eps_star) = match epsilon_star(&floored, &y_prime) {
        Ok(star) => (choose_epsilon(y, policy, &star), Some(star)),
        Err(Error::Degenerate) => {
            let confident = y.max() > policy.tau;
            let epsilon = if confident {
                policy.eps_confident
            } else {
                policy.eps_unconfident
            };
            (
                EpsilonChoice {
                    epsilon,
                    confident,
                    clamped: false,
                },
                None,
            )
        }
        Err(e) => return Err(e),
    };
    let z = normalize(&y_prime, choice.epsilon)?;
    Ok(PolicyRelease {
        z,
        choice,
        eps_star,
    })
}

fn floor_scores<T: Scalar>(y: &ConfidenceVector<T>) -> Result<ConfidenceVector<T>> {
    if y.min() >= T::lit(SCORE_FLOOR) {
        return Ok(y.clone());
    }
    let floor = T::lit(SCORE_FLOOR);
    let raised: Vec<T> = y.scores().iter().map(|&s| s.max(floor)).collect();
    let total: T = raised.iter().copied().sum();
    ConfidenceVector::new(raised.into_iter().map(|s| s / total).collect())
}
