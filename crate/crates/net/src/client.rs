//! Device-side runtime: register, train on the local shard, exchange models
//! with the server, classify regions of interest and report detections.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use bytes::Bytes;
use fedbell_core::synth::{mix_seed, DEFAULT_CLASSES};
use fedbell_core::vision::{
    features_from_roi, read_pgm, AnnotationRecord, BoundingBox, Frame, FrameOutcome, FramePipeline,
};
use fedbell_core::wire::{decode_json, encode_json, EventMessage, ModelMessage, UpdateMessage};
use fedbell_core::{
    forward, local_train, ClientUpdate, GlobalModel, LabeledExample, ModelError, ModelParams, Phase, TrainConfig,
    VisionError, WireError,
};
use reqwest::Method;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{self, AppendAck, ErrorBody, RegisterRequest, RegisterResponse, RoundStatus};
use crate::http_client;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: u64,
    /// Total attempts, including the first.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_ms: 200,
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `n` (1-based); zero for the first attempt.
    pub fn delay_before(&self, n: u32) -> Duration {
        if n <= 1 {
            return Duration::ZERO;
        }
        Duration::from_millis(self.base_ms.saturating_mul(self.factor.saturating_pow(n - 2)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferencePolicy {
    /// Detections below this softmax confidence are kept locally as unknown.
    pub unknown_threshold: f64,
    pub class_labels: Vec<String>,
}

impl Default for InferencePolicy {
    fn default() -> Self {
        Self {
            unknown_threshold: 0.6,
            class_labels: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl InferencePolicy {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.unknown_threshold > 0.0 && self.unknown_threshold < 1.0) {
            return Err(ClientError::Config("unknown_threshold must lie in (0, 1)".into()));
        }
        if self.class_labels.is_empty() {
            return Err(ClientError::Config("class_labels must be non-empty".into()));
        }
        let mut sorted = self.class_labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.class_labels.len() {
            return Err(ClientError::Config("class_labels must be distinct".into()));
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub device_id: String,
    /// The device's own credential, bound at registration.
    pub token: String,
    pub enrollment_secret: String,
    pub server_url: String,
    #[serde(default)]
    pub events_url: Option<String>,
    #[serde(default)]
    pub policy: InferencePolicy,
    #[serde(default = "default_unknown_capacity")]
    pub unknown_capacity: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    #[serde(default)]
    pub train: TrainConfig,
    /// Report motion that yields no confident detection as a "motion" event.
    #[serde(default)]
    pub motion_alerts: bool,
}

fn default_unknown_capacity() -> usize {
    64
}

fn default_poll_ms() -> u64 {
    25
}

pub const MOTION_LABEL: &str = "motion";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("server answered {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("credential rejected by server")]
    Unauthorized,
    #[error("federation finished at round {0}")]
    Finished(u64),
    #[error("no global model fetched yet")]
    NoModel,
    #[error("local shard is empty")]
    EmptyShard,
    #[error("invalid client config: {0}")]
    Config(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Register,
    ModelFetch,
    Update,
    RoundPoll,
    Event,
}

/// One HTTP exchange initiated by the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub kind: MessageKind,
    pub path: String,
    /// Round the exchange concerns, when known.
    pub round: Option<u64>,
    pub request_body: Bytes,
    pub status: u16,
    pub response_bytes: usize,
}

/// Everything a client sent, in order. Shared so tests can inspect it.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<TranscriptEntry>>>);

impl Transcript {
    fn lock(&self) -> MutexGuard<'_, Vec<TranscriptEntry>> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(&self, entry: TranscriptEntry) -> usize {
        let mut v = self.lock();
        v.push(entry);
        v.len() - 1
    }

    fn set_round(&self, index: usize, round: u64) {
        if let Some(e) = self.lock().get_mut(index) {
            e.round = Some(round);
        }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.lock().clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingUnknown {
    pub frame: Frame,
    pub roi: BoundingBox,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inference {
    Detected(EventMessage),
    /// Confidence below threshold; the frame was kept on the device.
    Unknown {
        label: String,
        confidence: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub outcome: FrameOutcome,
    pub inference: Option<Inference>,
    pub motion_event: Option<EventMessage>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub added: usize,
    /// `(image_filename, reason)` for every rejected record.
    pub errors: Vec<(String, String)>,
}

/// Most probable class and its softmax probability for the RoI.
pub fn classify(
    params: &ModelParams,
    policy: &InferencePolicy,
    frame: &Frame,
    roi: &BoundingBox,
) -> Result<(usize, f64), ClientError> {
    let features = features_from_roi(frame, roi)?;
    let probs = forward(params, &features)?;
    if probs.len() != policy.class_labels.len() {
        return Err(ClientError::Config(format!(
            "model has {} classes but policy lists {} labels",
            probs.len(),
            policy.class_labels.len()
        )));
    }
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs[best]))
}

pub struct FederatedClient {
    cfg: ClientConfig,
    http: reqwest::Client,
    client_id: String,
    model: RwLock<Option<Arc<GlobalModel>>>,
    shard: Mutex<Vec<LabeledExample>>,
    unknown: Mutex<VecDeque<PendingUnknown>>,
    transcript: Transcript,
    next_event: AtomicU64,
}

impl FederatedClient {
    /// Registers with the server and returns a client with an empty shard.
    pub async fn register(cfg: ClientConfig) -> Result<Self, ClientError> {
        cfg.policy.validate()?;
        if cfg.device_id.is_empty() || cfg.token.is_empty() {
            return Err(ClientError::Config("device_id and token must be non-empty".into()));
        }
        if cfg.retry.max_attempts == 0 {
            return Err(ClientError::Config("retry.max_attempts must be positive".into()));
        }
        let mut client = Self {
            http: http_client(),
            client_id: String::new(),
            model: RwLock::new(None),
            shard: Mutex::new(Vec::new()),
            unknown: Mutex::new(VecDeque::new()),
            transcript: Transcript::default(),
            next_event: AtomicU64::new(1),
            cfg,
        };
        let body = serde_json::to_vec(&RegisterRequest {
            device_id: client.cfg.device_id.clone(),
            token: client.cfg.token.clone(),
        })
        .map_err(|e| ClientError::Config(e.to_string()))?;
        let url = format!("{}{}", client.cfg.server_url, api::REGISTER);
        let secret = client.cfg.enrollment_secret.clone();
        let (status, resp, _) = client
            .send(
                MessageKind::Register,
                None,
                Method::POST,
                &url,
                &secret,
                Some(body.into()),
            )
            .await?;
        match status {
            200 => {
                let r: RegisterResponse = parse_body(&resp)?;
                client.client_id = r.client_id;
                Ok(client)
            }
            401 => Err(ClientError::Unauthorized),
            _ => Err(rejected(status, &resp)),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn device_id(&self) -> &str {
        &self.cfg.device_id
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn current_model(&self) -> Option<Arc<GlobalModel>> {
        self.model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn set_model(&self, model: Arc<GlobalModel>) {
        *self.model.write().unwrap_or_else(|p| p.into_inner()) = Some(model);
    }

    fn shard(&self) -> MutexGuard<'_, Vec<LabeledExample>> {
        self.shard.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn set_shard(&self, shard: Vec<LabeledExample>) {
        *self.shard() = shard;
    }

    pub fn shard_len(&self) -> usize {
        self.shard().len()
    }

    fn unknown(&self) -> MutexGuard<'_, VecDeque<PendingUnknown>> {
        self.unknown.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn pending_unknown(&self) -> Vec<PendingUnknown> {
        self.unknown().iter().cloned().collect()
    }

    /// Sends with retries on connection failures and 5xx answers. Returns the
    /// final status, body, and transcript index.
    async fn send(
        &self,
        kind: MessageKind,
        round: Option<u64>,
        method: Method,
        url: &str,
        bearer: &str,
        body: Option<Bytes>,
    ) -> Result<(u16, Bytes, usize), ClientError> {
        let policy = self.cfg.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts {
            tokio::time::sleep(policy.delay_before(attempt)).await;
            let mut req = self.http.request(method.clone(), url).bearer_auth(bearer);
            if let Some(b) = &body {
                req = req
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .body(b.clone());
            }
            let resp = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let bytes = match resp.bytes().await {
                Ok(b) => b,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let index = self.transcript.push(TranscriptEntry {
                kind,
                path: url
                    .rsplit_once("/v1/")
                    .map(|(_, p)| format!("/v1/{p}"))
                    .unwrap_or_default(),
                round,
                request_body: body.clone().unwrap_or_default(),
                status,
                response_bytes: bytes.len(),
            });
            if status >= 500 {
                last = format!("status {status}");
                continue;
            }
            return Ok((status, bytes, index));
        }
        Err(ClientError::Network {
            attempts: policy.max_attempts,
            message: last,
        })
    }

    fn server(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.server_url)
    }

    /// Fetches the latest published model and makes it current.
    pub async fn fetch_model(&self) -> Result<Arc<GlobalModel>, ClientError> {
        let url = self.server(api::MODEL);
        let (status, body, index) = self
            .send(MessageKind::ModelFetch, None, Method::GET, &url, &self.cfg.token, None)
            .await?;
        match status {
            200 => {}
            401 => return Err(ClientError::Unauthorized),
            _ => return Err(rejected(status, &body)),
        }
        let model = Arc::new(decode_json::<ModelMessage>(&body)?.into_global()?);
        self.transcript.set_round(index, model.round);
        self.set_model(model.clone());
        Ok(model)
    }

    pub async fn round_status(&self) -> Result<RoundStatus, ClientError> {
        let url = self.server(api::ROUND);
        let (status, body, _) = self
            .send(MessageKind::RoundPoll, None, Method::GET, &url, &self.cfg.token, None)
            .await?;
        if status != 200 {
            return Err(rejected(status, &body));
        }
        parse_body(&body)
    }

    /// One federated round: train from the current global model, submit,
    /// wait for the round to publish and adopt the new global model.
    pub async fn run_round(&self) -> Result<Arc<GlobalModel>, ClientError> {
        let mut base = match self.current_model() {
            Some(m) => m,
            None => self.fetch_model().await?,
        };
        let target = loop {
            let status = self.round_status().await?;
            if status.phase == Phase::Published {
                return Err(ClientError::Finished(status.round));
            }
            if base.round + 1 < status.round {
                base = self.fetch_model().await?;
                continue;
            }
            let target = base.round + 1;
            let (status, body) = self.submit(&base, target).await?;
            match status {
                202 => break target,
                409 => {
                    let err: ErrorBody = parse_body(&body)?;
                    match err.current_round {
                        Some(current) if current > target => {
                            tracing::debug!(target, current, "stale round, refetching model");
                            base = self.fetch_model().await?;
                        }
                        Some(_) => return Err(ClientError::Finished(target)),
                        None => break target,
                    }
                }
                401 => return Err(ClientError::Unauthorized),
                _ => return Err(rejected(status, &body)),
            }
        };
        let poll = Duration::from_millis(self.cfg.poll_interval_ms);
        while !self.round_status().await?.has_published(target) {
            tokio::time::sleep(poll).await;
        }
        self.fetch_model().await
    }

    async fn submit(&self, base: &GlobalModel, target: u64) -> Result<(u16, Bytes), ClientError> {
        let shard = self.shard().clone();
        if shard.is_empty() {
            return Err(ClientError::EmptyShard);
        }
        let train = TrainConfig {
            shuffle_seed: mix_seed(self.cfg.train.shuffle_seed, target),
            ..self.cfg.train
        };
        let params = base.params.clone();
        let sample_count = shard.len() as u64;
        let trained = tokio::task::spawn_blocking(move || local_train(&params, &shard, &train))
            .await
            .map_err(|e| ClientError::Config(format!("training task failed: {e}")))??;
        let msg = UpdateMessage::from_update(&ClientUpdate {
            client_id: self.client_id.clone(),
            round: target,
            sample_count,
            params: trained,
        })?;
        let body = encode_json(&msg)?;
        let url = self.server(api::UPDATE);
        let (status, resp, _) = self
            .send(
                MessageKind::Update,
                Some(target),
                Method::POST,
                &url,
                &self.cfg.token,
                Some(body.into()),
            )
            .await?;
        Ok((status, resp))
    }

    fn next_event_id(&self) -> String {
        let n = self.next_event.fetch_add(1, Ordering::Relaxed);
        format!("{}-{n:08}", self.cfg.device_id)
    }

    fn store_unknown(&self, frame: &Frame, roi: &BoundingBox) {
        let mut q = self.unknown();
        if self.cfg.unknown_capacity == 0 {
            return;
        }
        while q.len() >= self.cfg.unknown_capacity {
            q.pop_front();
        }
        q.push_back(PendingUnknown {
            frame: frame.clone(),
            roi: *roi,
            timestamp_ms: frame.timestamp_ms,
        });
    }

    /// Classifies the RoI with the current global model. Confident results
    /// are reported to the event store; the rest stay on the device.
    pub async fn infer(&self, frame: &Frame, roi: &BoundingBox) -> Result<Inference, ClientError> {
        let model = self.current_model().ok_or(ClientError::NoModel)?;
        let (index, confidence) = classify(&model.params, &self.cfg.policy, frame, roi)?;
        let label = self.cfg.policy.class_labels[index].clone();
        if confidence < self.cfg.policy.unknown_threshold {
            self.store_unknown(frame, roi);
            return Ok(Inference::Unknown { label, confidence });
        }
        let event = EventMessage {
            event_id: self.next_event_id(),
            device_id: self.cfg.device_id.clone(),
            timestamp_ms: frame.timestamp_ms,
            label,
            confidence,
            bbox: roi.as_array(),
        };
        self.emit_event(&event).await?;
        Ok(Inference::Detected(event))
    }

    /// Posts the event when an event store is configured.
    pub async fn emit_event(&self, event: &EventMessage) -> Result<Option<AppendAck>, ClientError> {
        let Some(base) = &self.cfg.events_url else {
            return Ok(None);
        };
        let body = encode_json(event)?;
        let url = format!("{base}{}", api::EVENTS);
        let (status, resp, _) = self
            .send(
                MessageKind::Event,
                None,
                Method::POST,
                &url,
                &self.cfg.token,
                Some(body.into()),
            )
            .await?;
        match status {
            200 | 201 => Ok(Some(parse_body(&resp)?)),
            _ => Err(rejected(status, &resp)),
        }
    }

    /// Runs one frame through the pipeline and classifies any RoI it yields.
    pub async fn observe_frame(&self, pipeline: &mut FramePipeline, frame: &Frame) -> Result<Observation, ClientError> {
        let outcome = pipeline.process(frame)?;
        let inference = match outcome {
            FrameOutcome::Roi(roi) => Some(self.infer(frame, &roi).await?),
            _ => None,
        };
        let motion_box = match (&outcome, &inference) {
            (FrameOutcome::NoRoi, _) => Some(BoundingBox::new(0, 0, frame.width(), frame.height())),
            (FrameOutcome::Roi(roi), Some(Inference::Unknown { .. })) => Some(*roi),
            _ => None,
        };
        let mut motion_event = None;
        if let (true, Some(b)) = (self.cfg.motion_alerts, motion_box) {
            let event = EventMessage {
                event_id: self.next_event_id(),
                device_id: self.cfg.device_id.clone(),
                timestamp_ms: frame.timestamp_ms,
                label: MOTION_LABEL.into(),
                confidence: 0.0,
                bbox: b.as_array(),
            };
            self.emit_event(&event).await?;
            motion_event = Some(event);
        }
        Ok(Observation {
            outcome,
            inference,
            motion_event,
        })
    }

    /// Adds one training example per annotated box. A record with a missing
    /// image, an unknown label or an out-of-bounds box contributes nothing.
    pub fn ingest_annotations(&self, records: &[AnnotationRecord], frames_dir: &Path) -> IngestReport {
        let mut report = IngestReport::default();
        for rec in records {
            match self.record_examples(rec, frames_dir) {
                Ok(examples) => {
                    report.added += examples.len();
                    self.shard().extend(examples);
                }
                Err(e) => report.errors.push((rec.image_filename.clone(), e)),
            }
        }
        report
    }

    fn record_examples(&self, rec: &AnnotationRecord, frames_dir: &Path) -> Result<Vec<LabeledExample>, String> {
        let labels = rec
            .objects
            .iter()
            .map(|o| {
                self.cfg
                    .policy
                    .label_index(&o.label)
                    .ok_or_else(|| format!("unknown label {:?}", o.label))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let frame = read_pgm(&frames_dir.join(&rec.image_filename), 0).map_err(|e| e.to_string())?;
        if (frame.width(), frame.height()) != (rec.image_width, rec.image_height) {
            return Err(format!(
                "image is {}x{} but annotation says {}x{}",
                frame.width(),
                frame.height(),
                rec.image_width,
                rec.image_height
            ));
        }
        rec.objects
            .iter()
            .zip(labels)
            .map(|(o, label)| {
                let f = features_from_roi(&frame, &o.bbox).map_err(|e| e.to_string())?;
                Ok(LabeledExample { features: f, label })
            })
            .collect()
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ClientError> {
    serde_json::from_slice(body).map_err(|e| {
        ClientError::Wire(WireError::Schema {
            path: ".".into(),
            message: e.to_string(),
        })
    })
}

fn rejected(status: u16, body: &[u8]) -> ClientError {
    ClientError::Rejected {
        status,
        body: String::from_utf8_lossy(body).into_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedbell_core::{init_params, ClassifierConfig};

    #[test]
    fn retry_delays_double_from_base() {
        let p = RetryPolicy::default();
        let waits: Vec<u64> = (1..=5).map(|n| p.delay_before(n).as_millis() as u64).collect();
        assert_eq!(waits, vec![0, 200, 400, 800, 1600]);
    }

    #[test]
    fn policy_validation() {
        assert!(InferencePolicy::default().validate().is_ok());
        let p = InferencePolicy {
            unknown_threshold: 1.0,
            ..InferencePolicy::default()
        };
        assert!(p.validate().is_err());
        let mut p = InferencePolicy::default();
        p.class_labels.push("person".into());
        assert!(p.validate().is_err());
    }

    fn zero_model(classes: usize) -> ModelParams {
        let p = init_params(&ClassifierConfig {
            input_dim: 256,
            hidden_dim: 0,
            num_classes: classes,
            seed: 0,
        })
        .unwrap();
        p.zeros_like()
    }

    #[test]
    fn zero_model_is_uniform() {
        let frame = Frame::filled(16, 16, 100, 0).unwrap();
        let roi = BoundingBox::new(0, 0, 16, 16);
        let (label, conf) = classify(&zero_model(4), &InferencePolicy::default(), &frame, &roi).unwrap();
        assert_eq!(label, 0);
        assert!((conf - 0.25).abs() < 1e-15);
    }

    #[test]
    fn roi_outside_frame_is_a_dimension_error() {
        let frame = Frame::filled(8, 8, 0, 0).unwrap();
        let roi = BoundingBox::new(4, 4, 9, 8);
        assert!(matches!(
            classify(&zero_model(4), &InferencePolicy::default(), &frame, &roi),
            Err(ClientError::Vision(_))
        ));
    }

    #[test]
    fn label_count_must_match_model() {
        let frame = Frame::filled(8, 8, 0, 0).unwrap();
        let roi = BoundingBox::new(0, 0, 8, 8);
        assert!(matches!(
            classify(&zero_model(3), &InferencePolicy::default(), &frame, &roi),
            Err(ClientError::Config(_))
        ));
    }
}
