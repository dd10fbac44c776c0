use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tokio::task::JoinHandle;

use drw_core::watermark::{respond, sampling_stream, Answer, ProbabilityVector};
use drw_core::OutputMode;

use crate::config::{GatewayConfig, TokenKey};
use crate::log::{LogLine, OneOrMany, QueryLog};

pub const TOKEN_HEADER: &str = "x-api-token";

pub struct AppState {
    config: GatewayConfig,
    client: reqwest::Client,
    log: Mutex<QueryLog>,
}

impl AppState {
    pub fn new(config: GatewayConfig) -> std::io::Result<Self> {
        let log = QueryLog::open(&config.log_path)?;
        let client = reqwest::Client::builder()
            .timeout(config.upstream_timeout)
            .build()
            .map_err(std::io::Error::other)?;
        Ok(Self {
            config,
            client,
            log: Mutex::new(log),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// A gateway listening on a socket, serving until dropped or aborted.
pub struct RunningGateway {
    pub addr: SocketAddr,
    pub handle: JoinHandle<std::io::Result<()>>,
}

/// Opens the log, binds `listen_address` and serves in a background task.
pub async fn start(config: GatewayConfig) -> std::io::Result<RunningGateway> {
    let listener = TcpListener::bind(&config.listen_address).await?;
    let addr = listener.local_addr()?;
    let app = router(Arc::new(AppState::new(config)?));
    let handle = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok(RunningGateway { addr, handle })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    x: OneOrMany<u64>,
}

#[derive(Debug, Serialize)]
struct UpstreamRequest<'a> {
    x: &'a [u64],
}

#[derive(Debug, Deserialize)]
struct UpstreamResponse {
    probs: Vec<Vec<f64>>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

/// Seed of a token's hard-label sampling stream (FNV-1a of the token mixed
/// with the serving seed).
pub fn token_seed(serving_seed: u64, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    serving_seed ^ h
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn predict(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(token) = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) else {
        return error(StatusCode::UNAUTHORIZED, "missing API token");
    };
    let Some(entry) = state.config.tokens.get(token) else {
        return error(StatusCode::UNAUTHORIZED, "unknown API token");
    };
    let request: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    if request.x.is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty batch");
    }
    let xs = request.x.to_vec();

    let probs = match fetch_upstream(&state, entry, &xs).await {
        Ok(p) => p,
        Err(reason) => {
            tracing::warn!(%reason, "upstream failure");
            return error(StatusCode::BAD_GATEWAY, reason);
        }
    };

    // sequence numbers, sampling and the log line are one critical section so
    // counters stay gap-free and every answered request has exactly one line
    let mut log = state.log.lock().await;
    let seq = log.next_seq(token);
    let seed = token_seed(state.config.serving_seed, token);
    let mut answers = Vec::with_capacity(xs.len());
    let mut selected = Vec::with_capacity(xs.len());
    for (i, (&x, p)) in xs.iter().zip(&probs).enumerate() {
        let mut rng = sampling_stream(seed, seq + i as u64);
        let token_id = usize::try_from(x).unwrap_or(usize::MAX);
        match respond(&entry.key, &entry.config, token_id, p, &mut rng) {
            Ok(out) => {
                selected.push(out.selected);
                answers.push(out.answer);
            }
            Err(e) => {
                tracing::error!(error = %e, "watermarking failed");
                return error(StatusCode::INTERNAL_SERVER_ERROR, "watermarking failed");
            }
        }
    }
    let single = matches!(request.x, OneOrMany::One(_));
    let line = LogLine {
        ts: now_ms(),
        token: token.to_string(),
        x: request.x,
        selected: if single {
            OneOrMany::One(selected[0])
        } else {
            OneOrMany::Many(selected)
        },
        seq,
    };
    if let Err(e) = log.append(&line) {
        tracing::error!(error = %e, "query log write failed");
        return error(StatusCode::INTERNAL_SERVER_ERROR, "query log unavailable");
    }
    drop(log);

    let body = match entry.config.mode() {
        OutputMode::Soft => {
            let vs: Vec<Value> = answers
                .into_iter()
                .map(|a| match a {
                    Answer::Soft(p) => json!(p.into_inner()),
                    Answer::Hard(c) => json!(c),
                })
                .collect();
            if single {
                json!({ "probs": vs[0] })
            } else {
                json!({ "probs": vs })
            }
        }
        OutputMode::Hard => {
            let labels: Vec<usize> = answers
                .into_iter()
                .map(|a| match a {
                    Answer::Hard(c) => c,
                    Answer::Soft(_) => unreachable!("hard mode answers with labels"),
                })
                .collect();
            if single {
                json!({ "label": labels[0] })
            } else {
                json!({ "label": labels })
            }
        }
    };
    (StatusCode::OK, Json(body)).into_response()
}

async fn fetch_upstream(state: &AppState, entry: &TokenKey, xs: &[u64]) -> Result<Vec<ProbabilityVector>, String> {
    let response = state
        .client
        .post(&state.config.upstream_url)
        .json(&UpstreamRequest { x: xs })
        .send()
        .await
        .map_err(|e| format!("upstream request failed: {e}"))?;
    if !response.status().is_success() {
        return Err(format!("upstream returned {}", response.status()));
    }
    let bytes = response
        .bytes()
        .await
        .map_err(|e| format!("upstream body: {e}"))?;
    let parsed: UpstreamResponse =
        serde_json::from_slice(&bytes).map_err(|e| format!("upstream body: {e}"))?;
    if parsed.probs.len() != xs.len() {
        return Err(format!(
            "upstream answered {} items for {} inputs",
            parsed.probs.len(),
            xs.len()
        ));
    }
    parsed
        .probs
        .into_iter()
        .map(|p| {
            let pv = ProbabilityVector::new(p).map_err(|e| format!("upstream probabilities: {e}"))?;
            if pv.classes() != entry.key.classes() {
                return Err(format!(
                    "upstream returned {} classes, key expects {}",
                    pv.classes(),
                    entry.key.classes()
                ));
            }
            Ok(pv)
        })
        .collect()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let check = tokio::time::timeout(
        state.config.health_timeout,
        state.client.get(&state.config.upstream_url).send(),
    )
    .await;
    let reason = match check {
        Ok(Ok(r)) if !r.status().is_server_error() => None,
        Ok(Ok(r)) => Some(format!("upstream returned {}", r.status())),
        Ok(Err(e)) => Some(format!("upstream unreachable: {e}")),
        Err(_) => Some("upstream health check timed out".to_string()),
    };
    let mut doc = json!({
        "status": if reason.is_none() { "ok" } else { "degraded" },
        "upstream_reachable": reason.is_none(),
        "keys_loaded": state.config.tokens.len(),
    });
    if let Some(r) = reason {
        doc["reason"] = json!(r);
    }
    Json(doc)
}
