//! Output-side defense against membership inference.
//!
//! A classifier's confidence vector is perturbed in two phases. First each
//! score is replaced by a draw of the exponential mechanism restricted to a
//! sub-range of `[0, 1)` that keeps the original ranking. The modified scores
//! are then mapped back onto the simplex with a softmax-style normalization
//! whose temperature controls how confident the release looks.
//!
//! ```
//! use dpguard::{defend, ConfidenceVector, MechanismConfig};
//!
//! let y = ConfidenceVector::new(vec![0.1, 0.7, 0.2]).unwrap();
//! let cfg = MechanismConfig::new(1.0).with_seed(7);
//! let z = defend(&y, &cfg).unwrap();
//! assert_eq!(z.argmax_set(), vec![1]);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod attack;
pub mod calibration;
pub mod error;
pub mod mechanism;
pub mod scalar;
pub mod vector;

pub use accountant::{
    fingerprint, query_bound, BudgetLedger, BudgetParams, Fingerprint, QueryOutcome,
};
pub use attack::{
    evaluate_defense, gen_cohort, logistic_attack, threshold_attack, CohortSpec, EvalReport,
};
pub use calibration::{
    choose_epsilon, defend_with_policy, distortion, epsilon_for_distortion, epsilon_star,
    DefensePolicy, Distortion, EpsilonChoice, EpsilonStar, PolicyRelease, Side,
};
pub use error::{Error, Result};
pub use mechanism::{
    alternating_neighbor, defend, defend_with_rng, discretize, dp_ratio_check, modify,
    modify_with_rng, normalize, partition, selection_table, MechanismConfig, RangePartition,
    SelectionTable,
};
pub use scalar::Scalar;
pub use vector::{ConfidenceVector, ModifiedVector};

pub type ConfidenceVectorF32 = ConfidenceVector<f32>;
pub type ConfidenceVectorF64 = ConfidenceVector<f64>;
pub type ModifiedVectorF32 = ModifiedVector<f32>;
pub type ModifiedVectorF64 = ModifiedVector<f64>;
pub type MechanismConfigF32 = MechanismConfig<f32>;
pub type MechanismConfigF64 = MechanismConfig<f64>;
pub type RangePartitionF32 = RangePartition<f32>;
pub type RangePartitionF64 = RangePartition<f64>;
pub type SelectionTableF32 = SelectionTable<f32>;
pub type SelectionTableF64 = SelectionTable<f64>;
pub type EpsilonStarF32 = EpsilonStar<f32>;
pub type EpsilonStarF64 = EpsilonStar<f64>;
pub type DefensePolicyF32 = DefensePolicy<f32>;
pub type DefensePolicyF64 = DefensePolicy<f64>;
