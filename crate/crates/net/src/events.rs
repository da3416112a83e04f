//! Durable detection-event log with time-range queries and webhook
//! notification after persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use fedbell_core::wire::{decode_json, EventMessage, WireMessage};
use fedbell_core::WireError;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::api::{self, AppendAck, ErrorBody};
use crate::{http_client, now_ms, Running};

/// One log line: the event fields followed by `sequence` and `stored_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub event_id: String,
    pub device_id: String,
    pub timestamp_ms: i64,
    pub label: String,
    pub confidence: f64,
    pub bbox: [u32; 4],
    pub sequence: u64,
    pub stored_at: i64,
}

impl EventRecord {
    fn new(msg: &EventMessage, sequence: u64, stored_at: i64) -> Self {
        Self {
            event_id: msg.event_id.clone(),
            device_id: msg.device_id.clone(),
            timestamp_ms: msg.timestamp_ms,
            label: msg.label.clone(),
            confidence: msg.confidence,
            bbox: msg.bbox,
            sequence,
            stored_at,
        }
    }

    pub fn message(&self) -> EventMessage {
        EventMessage {
            event_id: self.event_id.clone(),
            device_id: self.device_id.clone(),
            timestamp_ms: self.timestamp_ms,
            label: self.label.clone(),
            confidence: self.confidence,
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Invalid(#[from] WireError),
    #[error("event log corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("invalid range: t0 {t0} > t1 {t1}")]
    Range { t0: i64, t1: i64 },
}

#[derive(Debug, Default)]
struct Index {
    by_time: BTreeMap<(i64, u64), EventRecord>,
    by_id: HashMap<String, (i64, u64)>,
    last_sequence: u64,
}

impl Index {
    fn insert(&mut self, rec: EventRecord) {
        let key = (rec.timestamp_ms, rec.sequence);
        self.last_sequence = rec.sequence;
        self.by_id.insert(rec.event_id.clone(), key);
        self.by_time.insert(key, rec);
    }
}

#[derive(Debug)]
struct LogWriter {
    file: File,
    len: u64,
}

/// Append-only JSON-lines event log plus an in-memory index rebuilt on open.
///
/// Appends are serialized by the writer lock and made durable before they
/// become visible to queries.
#[derive(Debug)]
pub struct EventStore {
    path: PathBuf,
    writer: Mutex<LogWriter>,
    index: RwLock<Index>,
}

impl EventStore {
    /// Opens or creates the log and replays it. A torn final line left by
    /// an interrupted write is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut index = Index::default();
        let mut good = 0usize;
        for (i, line) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
            if line.last() != Some(&b'\n') {
                tracing::warn!(path = %path.display(), "truncating torn tail of event log");
                break;
            }
            let rec: EventRecord =
                serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| StoreError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let corrupt = |message: String| StoreError::Corrupt { line: i + 1, message };
            rec.message().validate().map_err(|e| corrupt(e.to_string()))?;
            if rec.sequence <= index.last_sequence {
                return Err(corrupt(format!("sequence {} not increasing", rec.sequence)));
            }
            if index.by_id.contains_key(&rec.event_id) {
                return Err(corrupt(format!("event {} appears twice", rec.event_id)));
            }
            index.insert(rec);
            good += line.len();
        }
        if good < bytes.len() {
            file.set_len(good as u64)?;
            file.sync_data()?;
        }
        Ok(Self {
            path,
            writer: Mutex::new(LogWriter { file, len: good as u64 }),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Persists the event and returns its sequence number. A repeated
    /// `event_id` returns the original sequence without writing.
    pub fn append(&self, msg: &EventMessage) -> Result<AppendAck, StoreError> {
        msg.validate()?;
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let next = {
            let index = self.index.read().unwrap_or_else(|p| p.into_inner());
            if let Some(key) = index.by_id.get(&msg.event_id) {
                return Ok(AppendAck {
                    sequence: key.1,
                    duplicate: true,
                });
            }
            index.last_sequence + 1
        };
        let rec = EventRecord::new(msg, next, now_ms());
        let mut line = serde_json::to_vec(&rec).map_err(|e| WireError::Invalid(e.to_string()))?;
        line.push(b'\n');
        if let Err(e) = w.file.write_all(&line).and_then(|_| w.file.sync_data()) {
            let len = w.len;
            let _ = w.file.set_len(len);
            return Err(e.into());
        }
        w.len += line.len() as u64;
        self.index.write().unwrap_or_else(|p| p.into_inner()).insert(rec);
        Ok(AppendAck {
            sequence: next,
            duplicate: false,
        })
    }

    /// Records with `t0 <= timestamp_ms < t1`, optionally for one device,
    /// ordered by `(timestamp_ms, sequence)`.
    pub fn query(&self, device: Option<&str>, t0: i64, t1: i64) -> Result<Vec<EventRecord>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::Range { t0, t1 });
        }
        let index = self.index.read().unwrap_or_else(|p| p.into_inner());
        Ok(index
            .by_time
            .range((t0, 0)..(t1, 0))
            .map(|(_, r)| r)
            .filter(|r| device.is_none_or(|d| r.device_id == d))
            .cloned()
            .collect())
    }

    pub fn get(&self, event_id: &str) -> Option<EventRecord> {
        let index = self.index.read().unwrap_or_else(|p| p.into_inner());
        index.by_id.get(event_id).and_then(|k| index.by_time.get(k)).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|p| p.into_inner()).by_time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebhookConfig {
    pub url: String,
    pub max_retries: u32,
    pub retry_base_ms: u64,
}

impl WebhookConfig {
    /// Wait before retry `i` (1-based): `retry_base_ms * 2^(i-1)`.
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.retry_base_ms.saturating_mul(1u64 << (retry - 1).min(32)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryAttempt {
    /// Microseconds since the first attempt started.
    pub started_us: u64,
    pub status: Option<u16>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryResult {
    pub event_id: String,
    pub attempts: Vec<DeliveryAttempt>,
    pub delivered: bool,
}

/// POSTs the event to the webhook, retrying non-2xx answers and connection
/// failures up to `max_retries` times.
pub async fn notify(http: &reqwest::Client, cfg: &WebhookConfig, event: &EventMessage) -> DeliveryResult {
    let body = serde_json::to_vec(event).unwrap_or_default();
    let start = Instant::now();
    let mut attempts = Vec::new();
    for i in 0..=cfg.max_retries {
        if i > 0 {
            tokio::time::sleep(cfg.backoff(i)).await;
        }
        let started_us = start.elapsed().as_micros() as u64;
        let sent = http
            .post(&cfg.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.clone())
            .send()
            .await;
        let (status, error) = match sent {
            Ok(resp) => (Some(resp.status().as_u16()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let ok = status.is_some_and(|s| (200..300).contains(&s));
        attempts.push(DeliveryAttempt {
            started_us,
            status,
            error,
        });
        if ok {
            return DeliveryResult {
                event_id: event.event_id.clone(),
                attempts,
                delivered: true,
            };
        }
    }
    tracing::warn!(event_id = %event.event_id, "webhook delivery failed");
    DeliveryResult {
        event_id: event.event_id.clone(),
        attempts,
        delivered: false,
    }
}

struct NotifyQueue {
    tx: mpsc::UnboundedSender<EventMessage>,
    pending: AtomicUsize,
    idle: Notify,
    deliveries: Mutex<Vec<DeliveryResult>>,
}

impl NotifyQueue {
    fn enqueue(&self, event: EventMessage) {
        self.pending.fetch_add(1, Ordering::SeqCst);
        if self.tx.send(event).is_err() {
            self.done();
        }
    }

    fn done(&self) {
        if self.pending.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.idle.notify_waiters();
        }
    }
}

struct ServiceState {
    store: Arc<EventStore>,
    queue: Option<Arc<NotifyQueue>>,
}

fn error_response(status: StatusCode, error: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: error.into(),
            current_round: None,
        }),
    )
        .into_response()
}

async fn post_event(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let msg = match decode_json::<EventMessage>(&body) {
        Ok(m) => m,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let store = state.store.clone();
    let stored = {
        let msg = msg.clone();
        tokio::task::spawn_blocking(move || store.append(&msg)).await
    };
    match stored {
        Ok(Ok(ack)) => {
            if !ack.duplicate {
                if let Some(q) = &state.queue {
                    q.enqueue(msg);
                }
            }
            let status = if ack.duplicate {
                StatusCode::OK
            } else {
                StatusCode::CREATED
            };
            (status, Json(ack)).into_response()
        }
        Ok(Err(StoreError::Invalid(e))) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct EventQuery {
    device: Option<String>,
    t0: i64,
    t1: i64,
}

async fn get_events(State(state): State<Arc<ServiceState>>, Query(q): Query<EventQuery>) -> Response {
    let device = q.device.as_deref().filter(|d| !d.is_empty());
    match state.store.query(device, q.t0, q.t1) {
        Ok(records) => Json(records).into_response(),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventServiceConfig {
    pub bind: String,
    pub log_path: PathBuf,
    #[serde(default)]
    pub webhook: Option<WebhookConfig>,
}

/// The event store behind `POST /v1/events` and `GET /v1/events`, with a
/// single worker delivering webhook notifications in append order.
pub struct EventService {
    store: Arc<EventStore>,
    queue: Option<Arc<NotifyQueue>>,
    running: Running,
    worker: Option<JoinHandle<()>>,
}

impl EventService {
    pub async fn spawn(cfg: EventServiceConfig) -> Result<Self, StoreError> {
        let store = Arc::new(EventStore::open(&cfg.log_path)?);
        let (queue, worker) = match cfg.webhook {
            None => (None, None),
            Some(hook) => {
                let (tx, mut rx) = mpsc::unbounded_channel::<EventMessage>();
                let queue = Arc::new(NotifyQueue {
                    tx,
                    pending: AtomicUsize::new(0),
                    idle: Notify::new(),
                    deliveries: Mutex::new(Vec::new()),
                });
                let q = queue.clone();
                let worker = tokio::spawn(async move {
                    let http = http_client();
                    while let Some(event) = rx.recv().await {
                        let result = notify(&http, &hook, &event).await;
                        q.deliveries.lock().unwrap_or_else(|p| p.into_inner()).push(result);
                        q.done();
                    }
                });
                (Some(queue), Some(worker))
            }
        };
        let state = Arc::new(ServiceState {
            store: store.clone(),
            queue: queue.clone(),
        });
        let app = Router::new()
            .route(api::EVENTS, post(post_event).get(get_events))
            .with_state(state);
        let listener = TcpListener::bind(&cfg.bind).await?;
        let running = Running::start(listener, app)?;
        tracing::info!(addr = %running.addr(), log = %cfg.log_path.display(), "event service listening");
        Ok(Self {
            store,
            queue,
            running,
            worker,
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.running.addr()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr())
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    /// Completed deliveries in notification order.
    pub fn deliveries(&self) -> Vec<DeliveryResult> {
        match &self.queue {
            Some(q) => q.deliveries.lock().unwrap_or_else(|p| p.into_inner()).clone(),
            None => Vec::new(),
        }
    }

    /// Waits until every queued notification has finished its attempts.
    pub async fn drain_notifications(&self) {
        let Some(q) = &self.queue else { return };
        loop {
            let idle = q.idle.notified();
            if q.pending.load(Ordering::SeqCst) == 0 {
                return;
            }
            idle.await;
        }
    }

    pub async fn shutdown(self) {
        self.running.stop().await;
        if let Some(w) = self.worker {
            w.abort();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(id: &str, device: &str, t: i64) -> EventMessage {
        EventMessage {
            event_id: id.into(),
            device_id: device.into(),
            timestamp_ms: t,
            label: "person".into(),
            confidence: 0.9,
            bbox: [1, 2, 3, 4],
        }
    }

    #[test]
    fn sequences_start_at_one_and_duplicates_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = EventStore::open(dir.path().join("log.jsonl")).unwrap();
        assert!(store.query(None, 0, 100).unwrap().is_empty());
        assert_eq!(store.append(&ev("a", "d", 5)).unwrap().sequence, 1);
        let again = store.append(&ev("a", "d", 5)).unwrap();
        assert_eq!(
            again,
            AppendAck {
                sequence: 1,
                duplicate: true
            }
        );
        assert_eq!(store.append(&ev("b", "d", 6)).unwrap().sequence, 2);
        let text = std::fs::read_to_string(store.path()).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn half_open_ranges_and_device_filter() {
        let dir = tempfile::tempdir().unwrap();
        let store = EventStore::open(dir.path().join("log.jsonl")).unwrap();
        for (i, t) in [1, 2, 3].into_iter().enumerate() {
            store.append(&ev(&format!("e{i}"), "door", t)).unwrap();
        }
        let got: Vec<i64> = store
            .query(None, 1, 3)
            .unwrap()
            .iter()
            .map(|r| r.timestamp_ms)
            .collect();
        assert_eq!(got, vec![1, 2]);
        assert!(store.query(Some("garage"), 0, 10).unwrap().is_empty());
        assert!(store.query(None, 2, 2).unwrap().is_empty());
        assert!(matches!(
            store.query(None, 3, 1),
            Err(StoreError::Range { t0: 3, t1: 1 })
        ));
    }

    #[test]
    fn torn_tail_is_truncated_on_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let store = EventStore::open(&path).unwrap();
            store.append(&ev("a", "d", 1)).unwrap();
            store.append(&ev("b", "d", 2)).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, [&full[..], b"{\"event_id\":\"c\",\"dev"].concat()).unwrap();
        let store = EventStore::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(std::fs::read(&path).unwrap(), full);
        assert_eq!(store.append(&ev("c", "d", 3)).unwrap().sequence, 3);
        drop(store);
        assert_eq!(EventStore::open(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_interior_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            EventStore::open(&path),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn invalid_events_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = EventStore::open(dir.path().join("log.jsonl")).unwrap();
        let mut bad = ev("a", "d", 1);
        bad.confidence = 1.5;
        assert!(matches!(store.append(&bad), Err(StoreError::Invalid(_))));
        assert!(store.is_empty());
    }

    #[test]
    fn backoff_doubles() {
        let cfg = WebhookConfig {
            url: String::new(),
            max_retries: 3,
            retry_base_ms: 50,
        };
        assert_eq!(cfg.backoff(1), Duration::from_millis(50));
        assert_eq!(cfg.backoff(2), Duration::from_millis(100));
        assert_eq!(cfg.backoff(3), Duration::from_millis(200));
    }
}
