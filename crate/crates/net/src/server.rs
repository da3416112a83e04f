//! Federation server: device registration, update ingestion, round
//! progression and global-model distribution.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedbell_core::wire::{decode_json, encode_json, ModelMessage, UpdateMessage};
use fedbell_core::{
    init_params, ClassifierConfig, ClientUpdate, CloseOutcome, FedError, FederationConfig, GlobalModel, ModelError,
    ModelParams, Phase, RoundState, WireError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::api::{self, bearer, ErrorBody, RegisterRequest, RegisterResponse, RoundStatus};
use crate::{now_ms, Running};

pub const MAX_TICK_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub enrollment_secret: String,
    pub expected_clients: usize,
    pub min_quorum: usize,
    pub round_timeout_ms: u64,
    pub total_rounds: u64,
    pub model: ClassifierConfig,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Debug aid: write every accepted update body under this directory.
    #[serde(default)]
    pub dump_dir: Option<PathBuf>,
}

fn default_tick_ms() -> u64 {
    50
}

impl ServerConfig {
    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            expected_clients: self.expected_clients,
            min_quorum: self.min_quorum,
            round_timeout_ms: self.round_timeout_ms,
            total_rounds: self.total_rounds,
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        self.federation().validate()?;
        self.model.validate()?;
        if self.enrollment_secret.is_empty() {
            return Err(ServerError::Config("enrollment_secret must be non-empty".into()));
        }
        if self.tick_ms == 0 || self.tick_ms > MAX_TICK_MS {
            return Err(ServerError::Config(format!("tick_ms must lie in 1..={MAX_TICK_MS}")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid server config: {0}")]
    Config(String),
    #[error(transparent)]
    Federation(#[from] FedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRecord {
    pub device_id: String,
    pub token_hash: [u8; 32],
    pub registered_at_ms: i64,
    pub client_id: String,
}

/// A closed round: the published model and who contributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedRound {
    pub model: GlobalModel,
    pub contributors: Vec<(String, u64)>,
}

fn digest(s: &str) -> [u8; 32] {
    Sha256::digest(s.as_bytes()).into()
}

/// Stable id so aggregation order never depends on registration order.
pub fn client_id_for(device_id: &str) -> String {
    let h = hex::encode(digest(&format!("client:{device_id}")));
    format!("c-{}", &h[..16])
}

#[derive(Debug)]
enum RegisterError {
    Conflict(String),
}

#[derive(Debug, Default)]
struct Registry {
    devices: HashMap<String, DeviceRecord>,
    by_token: HashMap<[u8; 32], String>,
}

impl Registry {
    fn register(&mut self, req: &RegisterRequest) -> Result<String, RegisterError> {
        let token_hash = digest(&req.token);
        if let Some(rec) = self.devices.get(&req.device_id) {
            if rec.token_hash == token_hash {
                return Ok(rec.client_id.clone());
            }
            return Err(RegisterError::Conflict(format!(
                "device {} is registered under a different token",
                req.device_id
            )));
        }
        if self.by_token.contains_key(&token_hash) {
            return Err(RegisterError::Conflict("token already bound to another device".into()));
        }
        let client_id = client_id_for(&req.device_id);
        if self.by_token.values().any(|c| *c == client_id) {
            return Err(RegisterError::Conflict(format!("client id {client_id} already taken")));
        }
        self.by_token.insert(token_hash, client_id.clone());
        self.devices.insert(
            req.device_id.clone(),
            DeviceRecord {
                device_id: req.device_id.clone(),
                token_hash,
                registered_at_ms: now_ms(),
                client_id: client_id.clone(),
            },
        );
        Ok(client_id)
    }

    fn authenticate(&self, token: &str) -> Option<String> {
        self.by_token.get(&digest(token)).cloned()
    }
}

struct Coordinator {
    fed: FederationConfig,
    state: RoundState,
    opened_at: Instant,
    structure: Vec<(String, Vec<usize>)>,
    latest: Bytes,
    history: Vec<PublishedRound>,
    dump_dir: Option<PathBuf>,
}

impl Coordinator {
    fn new(cfg: &ServerConfig, initial: ModelParams) -> Result<Self, ServerError> {
        let structure = initial.structure();
        let round0 = GlobalModel {
            round: 0,
            total_samples: 0,
            params: initial,
        };
        Ok(Self {
            fed: cfg.federation(),
            state: RoundState::first(),
            opened_at: Instant::now(),
            structure,
            latest: encode_json(&ModelMessage::from_global(&round0)?)?.into(),
            history: Vec::new(),
            dump_dir: cfg.dump_dir.clone(),
        })
    }

    fn status(&self) -> RoundStatus {
        RoundStatus {
            round: self.state.round(),
            phase: self.state.phase(),
            received_count: self.state.received().len(),
            expected_clients: self.fed.expected_clients,
        }
    }

    fn submit(&mut self, update: ClientUpdate, raw: &[u8]) -> Result<(), ServerError> {
        if update.params.structure() != self.structure {
            return Err(FedError::Schema {
                client_id: update.client_id,
                detail: "tensor names or shapes differ from the served model".into(),
            }
            .into());
        }
        let (round, client_id) = (update.round, update.client_id.clone());
        self.state.submit_update(update)?;
        self.dump(round, &client_id, raw);
        self.try_close()?;
        Ok(())
    }

    fn dump(&self, round: u64, client_id: &str, raw: &[u8]) {
        let Some(dir) = &self.dump_dir else { return };
        let dir = dir.join(format!("round-{round:04}"));
        if let Err(e) = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join(format!("{client_id}.json")), raw)) {
            tracing::warn!("could not dump update from {client_id}: {e}");
        }
    }

    /// Returns the published round number, if this call closed one.
    fn try_close(&mut self) -> Result<Option<u64>, ServerError> {
        if self.state.phase() != Phase::Open {
            return Ok(None);
        }
        let contributors: Vec<(String, u64)> = self
            .state
            .pending()
            .iter()
            .map(|u| (u.client_id.clone(), u.sample_count))
            .collect();
        let elapsed = self.opened_at.elapsed().as_millis() as u64;
        match self.state.try_close_round(&self.fed, elapsed)? {
            CloseOutcome::StillOpen => Ok(None),
            CloseOutcome::Published(model) => {
                let round = model.round;
                self.latest = encode_json(&ModelMessage::from_global(&model)?)?.into();
                self.opened_at = Instant::now();
                tracing::info!(round, contributors = contributors.len(), "published global model");
                self.history.push(PublishedRound { model, contributors });
                Ok(Some(round))
            }
        }
    }
}

pub(crate) struct Shared {
    secret_hash: [u8; 32],
    registry: Mutex<Registry>,
    coordinator: Mutex<Coordinator>,
    progress: watch::Sender<RoundStatus>,
}

impl Shared {
    fn coordinator(&self) -> MutexGuard<'_, Coordinator> {
        self.coordinator.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish_progress(&self, coord: &Coordinator) {
        self.progress.send_replace(coord.status());
    }

    fn tick(&self) {
        let mut coord = self.coordinator();
        match coord.try_close() {
            Ok(Some(_)) => self.publish_progress(&coord),
            Ok(None) => {}
            Err(ServerError::Federation(FedError::QuorumFailure { received, required })) => {
                tracing::debug!(received, required, "round timed out below quorum")
            }
            Err(e) => tracing::warn!("round close failed: {e}"),
        }
    }
}

fn error_response(status: StatusCode, error: impl Into<String>, current_round: Option<u64>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: error.into(),
            current_round,
        }),
    )
        .into_response()
}

fn unauthorized() -> Response {
    error_response(StatusCode::UNAUTHORIZED, "missing or unknown credential", None)
}

fn submit_error(e: ServerError) -> Response {
    match e {
        ServerError::Federation(f) => match f {
            FedError::StaleRound { current, .. } => error_response(StatusCode::CONFLICT, f.to_string(), Some(current)),
            FedError::Closed(current) => error_response(StatusCode::CONFLICT, f.to_string(), Some(current)),
            FedError::Duplicate(_) => error_response(StatusCode::CONFLICT, f.to_string(), None),
            FedError::Schema { .. } | FedError::ZeroSamples(_) | FedError::RoundMismatch(..) => {
                error_response(StatusCode::BAD_REQUEST, f.to_string(), None)
            }
            other => error_response(StatusCode::INTERNAL_SERVER_ERROR, other.to_string(), None),
        },
        ServerError::Wire(w) => error_response(StatusCode::BAD_REQUEST, w.to_string(), None),
        other => error_response(StatusCode::INTERNAL_SERVER_ERROR, other.to_string(), None),
    }
}

async fn register(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let req: RegisterRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string(), None),
    };
    if req.device_id.is_empty() || req.token.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "device_id and token must be non-empty", None);
    }
    if bearer(&headers).map(digest) != Some(shared.secret_hash) {
        return error_response(StatusCode::UNAUTHORIZED, "enrollment secret rejected", None);
    }
    match shared.registry().register(&req) {
        Ok(client_id) => (StatusCode::OK, Json(RegisterResponse { client_id })).into_response(),
        Err(RegisterError::Conflict(msg)) => error_response(StatusCode::CONFLICT, msg, None),
    }
}

fn authenticate(shared: &Shared, headers: &HeaderMap) -> Option<String> {
    shared.registry().authenticate(bearer(headers)?)
}

async fn get_model(State(shared): State<Arc<Shared>>, headers: HeaderMap) -> Response {
    if authenticate(&shared, &headers).is_none() {
        return unauthorized();
    }
    let body = shared.coordinator().latest.clone();
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn post_update(State(shared): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(client_id) = authenticate(&shared, &headers) else {
        return unauthorized();
    };
    let update = match decode_json::<UpdateMessage>(&body).and_then(UpdateMessage::into_update) {
        Ok(u) => u,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string(), None),
    };
    if update.client_id != client_id {
        return error_response(StatusCode::UNAUTHORIZED, "credential does not match client_id", None);
    }
    let mut coord = shared.coordinator();
    match coord.submit(update, &body) {
        Ok(()) => {
            shared.publish_progress(&coord);
            (StatusCode::ACCEPTED, Json(coord.status())).into_response()
        }
        Err(e) => submit_error(e),
    }
}

async fn get_round(State(shared): State<Arc<Shared>>) -> Json<RoundStatus> {
    Json(shared.coordinator().status())
}

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route(api::REGISTER, post(register))
        .route(api::MODEL, get(get_model))
        .route(api::UPDATE, post(post_update))
        .route(api::ROUND, get(get_round))
        .with_state(shared)
}

pub struct ServerHandle {
    shared: Arc<Shared>,
    running: Running,
    ticker: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.running.addr()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr())
    }

    pub fn status(&self) -> RoundStatus {
        self.shared.coordinator().status()
    }

    pub fn history(&self) -> Vec<PublishedRound> {
        self.shared.coordinator().history.clone()
    }

    pub fn devices(&self) -> Vec<DeviceRecord> {
        let mut v: Vec<DeviceRecord> = self.shared.registry().devices.values().cloned().collect();
        v.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        v
    }

    pub fn progress(&self) -> watch::Receiver<RoundStatus> {
        self.shared.progress.subscribe()
    }

    /// Waits until the final round is published. False on timeout.
    pub async fn wait_finished(&self, timeout: Duration) -> bool {
        let mut rx = self.progress();
        tokio::time::timeout(timeout, rx.wait_for(|s| s.phase == Phase::Published))
            .await
            .is_ok_and(|r| r.is_ok())
    }

    pub async fn shutdown(self) {
        self.ticker.abort();
        self.running.stop().await;
    }
}

/// Binds, starts the round timer and serves until [`ServerHandle::shutdown`].
pub async fn spawn_server(cfg: ServerConfig) -> Result<ServerHandle, ServerError> {
    cfg.validate()?;
    let initial = init_params(&cfg.model)?;
    let coordinator = Coordinator::new(&cfg, initial)?;
    let (progress, _) = watch::channel(coordinator.status());
    let shared = Arc::new(Shared {
        secret_hash: digest(&cfg.enrollment_secret),
        registry: Mutex::new(Registry::default()),
        coordinator: Mutex::new(coordinator),
        progress,
    });
    let listener = TcpListener::bind(&cfg.bind).await?;
    let running = Running::start(listener, router(shared.clone()))?;
    let tick = Duration::from_millis(cfg.tick_ms);
    let ticker = {
        let shared = shared.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(tick);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                shared.tick();
            }
        })
    };
    tracing::info!(addr = %running.addr(), "federation server listening");
    Ok(ServerHandle {
        shared,
        running,
        ticker,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(device: &str, token: &str) -> RegisterRequest {
        RegisterRequest {
            device_id: device.into(),
            token: token.into(),
        }
    }

    #[test]
    fn registration_is_idempotent_per_token() {
        let mut r = Registry::default();
        let a = r.register(&req("door-1", "tok-a")).unwrap();
        assert_eq!(r.register(&req("door-1", "tok-a")).unwrap(), a);
        assert!(matches!(
            r.register(&req("door-1", "tok-b")),
            Err(RegisterError::Conflict(_))
        ));
        assert!(matches!(
            r.register(&req("door-2", "tok-a")),
            Err(RegisterError::Conflict(_))
        ));
        assert_eq!(r.authenticate("tok-a"), Some(a));
        assert_eq!(r.authenticate("tok-b"), None);
    }

    #[test]
    fn tokens_are_stored_hashed() {
        let mut r = Registry::default();
        r.register(&req("door-1", "plaintext-token")).unwrap();
        let rec = &r.devices["door-1"];
        assert_ne!(&rec.token_hash[..], b"plaintext-token".as_slice());
        assert_eq!(rec.token_hash, digest("plaintext-token"));
    }

    #[test]
    fn client_ids_are_stable_and_distinct() {
        assert_eq!(client_id_for("a"), client_id_for("a"));
        assert_ne!(client_id_for("a"), client_id_for("b"));
        assert_eq!(client_id_for("a").len(), 18);
    }

    #[test]
    fn tick_bound_is_enforced() {
        let mut cfg = ServerConfig {
            bind: "127.0.0.1:0".into(),
            enrollment_secret: "s".into(),
            expected_clients: 2,
            min_quorum: 1,
            round_timeout_ms: 1000,
            total_rounds: 1,
            model: ClassifierConfig {
                input_dim: 2,
                hidden_dim: 0,
                num_classes: 2,
                seed: 0,
            },
            tick_ms: 100,
            dump_dir: None,
        };
        assert!(cfg.validate().is_ok());
        cfg.tick_ms = 101;
        assert!(cfg.validate().is_err());
    }
}
