//! HTTP front end. Every answer goes through the mechanism and is charged
//! to the record's ledger entry first.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dpguard::{fingerprint, BudgetLedger, Fingerprint};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::AppConfig;
use crate::io::{ErrorKind, Remaining};
use crate::pipeline::{budget_key, charge, defend_vector, validate, Failure};

pub struct AppState {
    cfg: AppConfig,
    ledger: BudgetLedger,
    nonce: AtomicU64,
    upstream: Option<(reqwest::Client, String)>,
}

impl AppState {
    pub fn new(cfg: AppConfig, ledger: BudgetLedger) -> Arc<Self> {
        let upstream = cfg
            .upstream
            .clone()
            .map(|url| (reqwest::Client::new(), url));
        Arc::new(Self {
            cfg,
            ledger,
            nonce: AtomicU64::new(0),
            upstream,
        })
    }

    /// Builds the ledger named by `cfg`; a budget is required.
    pub fn from_config(cfg: AppConfig) -> Result<Arc<Self>, dpguard::Error> {
        let params = cfg.budget.ok_or(dpguard::Error::InvalidConfig(
            "serve mode requires a query budget",
        ))?;
        let ledger = match &cfg.ledger {
            Some(path) => BudgetLedger::open(path, params)?,
            None => {
                tracing::warn!(
                    "no ledger file configured; budget state will not survive a restart"
                );
                BudgetLedger::new(params)?
            }
        };
        Ok(Self::new(cfg, ledger))
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }
}

#[derive(Debug, Deserialize)]
struct ServeRequest {
    #[serde(default)]
    record_id: Option<String>,
    #[serde(default)]
    scores: Option<Vec<f64>>,
    /// Raw model input, forwarded when an upstream classifier is configured.
    #[serde(default)]
    input: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct UpstreamReply {
    scores: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ServeResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    record_id: Option<String>,
    scores: Vec<f64>,
    epsilon_used: f64,
    budget_remaining: Remaining,
}

fn failure_response(f: Failure) -> Response {
    let status = match f.kind {
        ErrorKind::ParseError | ErrorKind::InvalidVector | ErrorKind::ClassCountMismatch => {
            StatusCode::BAD_REQUEST
        }
        ErrorKind::BudgetExhausted => StatusCode::TOO_MANY_REQUESTS,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    };
    let body = match f.kind {
        ErrorKind::BudgetExhausted => json!({ "error": f.kind.label(), "budget_remaining": 0 }),
        ErrorKind::Internal => json!({ "error": f.kind.label() }),
        _ => json!({ "error": f.kind.label(), "message": f.message }),
    };
    tracing::info!(
        status = status.as_u16(),
        error = f.kind.label(),
        "defend request failed"
    );
    (status, Json(body)).into_response()
}

async fn defend_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    match handle(&state, &body).await {
        Ok(resp) => {
            tracing::info!(status = 200, "defend request answered");
            (StatusCode::OK, Json(resp)).into_response()
        }
        Err(f) => failure_response(f),
    }
}

async fn handle(state: &AppState, body: &[u8]) -> Result<ServeResponse, Failure> {
    let req: ServeRequest = serde_json::from_slice(body)
        .map_err(|_| Failure::new(ErrorKind::ParseError, "body is not a valid request"))?;
    let k = state.ledger.params().num_classes;
    let (y, remaining) = match &state.upstream {
        None => {
            let scores = req
                .scores
                .ok_or_else(|| Failure::new(ErrorKind::ParseError, "request has no scores"))?;
            let key = budget_key(req.record_id.as_deref(), &scores)?;
            let y = validate(scores)?;
            let remaining = charge(Some(&state.ledger), &key, y.len())?;
            (y, remaining)
        }
        Some((client, url)) => {
            let input = req
                .input
                .ok_or_else(|| Failure::new(ErrorKind::ParseError, "request has no input"))?;
            let key = match req.record_id.as_deref() {
                Some(id) => budget_key(Some(id), &[])?,
                None => upstream_key(&input)?,
            };
            let remaining = charge(Some(&state.ledger), &key, k)?;
            let reply: UpstreamReply = async {
                client
                    .post(url)
                    .json(&input)
                    .send()
                    .await?
                    .error_for_status()?
                    .json()
                    .await
            }
            .await
            .map_err(|_: reqwest::Error| {
                Failure::new(ErrorKind::Internal, "upstream classifier failed")
            })?;
            let y = validate(reply.scores).map_err(|_| {
                Failure::new(ErrorKind::Internal, "upstream returned an invalid vector")
            })?;
            if y.len() != k {
                return Err(Failure::new(
                    ErrorKind::Internal,
                    "upstream class count differs from the budget",
                ));
            }
            (y, remaining)
        }
    };
    let nonce = state.nonce.fetch_add(1, Ordering::Relaxed);
    let released = defend_vector(&y, nonce, &state.cfg)?;
    Ok(ServeResponse {
        record_id: req.record_id,
        scores: released.scores,
        epsilon_used: released.epsilon_used,
        budget_remaining: remaining,
    })
}

fn upstream_key(input: &serde_json::Value) -> Result<Fingerprint, Failure> {
    let doc = json!({ "input": input });
    fingerprint(doc.to_string().as_bytes())
        .map_err(|e| Failure::new(ErrorKind::Internal, e.to_string()))
}

async fn budget_handler(State(state): State<Arc<AppState>>, Path(hex): Path<String>) -> Response {
    match hex.parse::<Fingerprint>() {
        Ok(digest) => Json(json!({
            "fingerprint": digest.to_string(),
            "remaining": state.ledger.remaining(&digest),
            "bound": state.ledger.bound(),
        }))
        .into_response(),
        Err(_) => (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": "parse_error", "message": "fingerprint must be 64 hex digits" })),
        )
            .into_response(),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/defend", post(defend_handler))
        .route("/budget/{fingerprint}", get(budget_handler))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Binds `cfg.listen` and serves until interrupted.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, bound = state.ledger.bound(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
