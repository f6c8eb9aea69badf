use dpguard::{epsilon_star, modify, ConfidenceVector, MechanismConfig, ModifiedVector};
use serde::Serialize;

/// Fixed-point budget of a vector pair with suggested policy budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub epsilon_star: f64,
    pub residual: f64,
    pub pair_seed: f64,
    pub eps_confident: f64,
    pub eps_unconfident: f64,
}

impl CalibrationReport {
    pub fn to_kv(&self) -> String {
        format!(
            "epsilon_star={}\nresidual={}\npair_seed={}\neps_confident={}\neps_unconfident={}\n",
            self.epsilon_star,
            self.residual,
            self.pair_seed,
            self.eps_confident,
            self.eps_unconfident
        )
    }
}

/// Solves for `eps*` of `y` against `y_prime`, or against a fresh draw of
/// the mechanism when `y_prime` is `None`.
pub fn calibrate(
    y: &[f64],
    y_prime: Option<&[f64]>,
    mechanism: Option<&MechanismConfig>,
) -> dpguard::Result<CalibrationReport> {
    let y = ConfidenceVector::new(y.to_vec())?;
    let y_prime = match (y_prime, mechanism) {
        (Some(s), _) => ModifiedVector::from_scores(s.to_vec())?,
        (None, Some(cfg)) => modify(&y, cfg)?,
        (None, None) => {
            return Err(dpguard::Error::InvalidConfig(
                "need a modified vector or a mechanism to draw one",
            ))
        }
    };
    let star = epsilon_star(&y, &y_prime)?;
    let positive = |x: f64| x.max(f64::MIN_POSITIVE);
    Ok(CalibrationReport {
        epsilon_star: star.value,
        residual: star.residual,
        pair_seed: star.pair_seed,
        eps_confident: positive(star.value / 4.0),
        eps_unconfident: positive(star.value * 4.0),
    })
}
