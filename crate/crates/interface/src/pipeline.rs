use dpguard::{
    defend_with_policy, defend_with_rng, fingerprint, BudgetLedger, ConfidenceVector, Fingerprint,
    QueryOutcome,
};

use crate::config::AppConfig;
use crate::io::{ErrorKind, Remaining};

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Released {
    pub scores: Vec<f64>,
    pub epsilon_used: f64,
}

pub fn validate(scores: Vec<f64>) -> Result<ConfidenceVector, Failure> {
    ConfidenceVector::new(scores).map_err(|e| Failure::new(ErrorKind::InvalidVector, e.to_string()))
}

/// Ledger key: the caller's record id when given, otherwise the scores.
pub fn budget_key(record_id: Option<&str>, scores: &[f64]) -> Result<Fingerprint, Failure> {
    let doc = match record_id {
        Some(id) => serde_json::json!({ "record_id": id }),
        None => serde_json::json!({ "scores": scores }),
    };
    fingerprint(doc.to_string().as_bytes())
        .map_err(|e| Failure::new(ErrorKind::Internal, e.to_string()))
}

/// Spends one answer from `digest`'s allowance.
pub fn charge(
    ledger: Option<&BudgetLedger>,
    digest: &Fingerprint,
    k: usize,
) -> Result<Remaining, Failure> {
    let Some(ledger) = ledger else {
        return Ok(Remaining::Unlimited);
    };
    if k != ledger.params().num_classes {
        return Err(Failure::new(
            ErrorKind::ClassCountMismatch,
            format!(
                "budget is sized for {} classes",
                ledger.params().num_classes
            ),
        ));
    }
    match ledger.register_query(digest) {
        Ok(QueryOutcome::Allowed { remaining }) => Ok(Remaining::Limited(remaining)),
        Ok(QueryOutcome::Denied) => Err(Failure::new(
            ErrorKind::BudgetExhausted,
            "query budget exhausted",
        )),
        Err(e) => Err(Failure::new(ErrorKind::Internal, e.to_string())),
    }
}

/// Runs the mechanism with RNG stream `nonce`.
pub fn defend_vector(
    y: &ConfidenceVector,
    nonce: u64,
    cfg: &AppConfig,
) -> Result<Released, Failure> {
    let mut rng = cfg.mechanism.rng(nonce);
    let internal = |e: dpguard::Error| Failure::new(ErrorKind::Internal, e.to_string());
    match &cfg.policy {
        Some(policy) => {
            let r = defend_with_policy(y, &cfg.mechanism, policy, &mut rng).map_err(internal)?;
            Ok(Released {
                scores: r.z.into_scores(),
                epsilon_used: r.choice.epsilon,
            })
        }
        None => {
            let z = defend_with_rng(y, &cfg.mechanism, &mut rng).map_err(internal)?;
            Ok(Released {
                scores: z.into_scores(),
                epsilon_used: cfg.mechanism.epsilon,
            })
        }
    }
}
