//! End-to-end scenario: server, event service, webhook receiver and K
//! clients talking over loopback HTTP.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fedbell_core::synth::{
    build_dataset, generate_scene, mix_seed, partition_data, BACKGROUND_LEVEL, DEFAULT_CLASSES, SCENE_SIZE,
};
use fedbell_core::vision::{FrameOutcome, FramePipeline, PipelineConfig, FEATURE_DIM};
use fedbell_core::wire::EventMessage;
use fedbell_core::{
    evaluate, local_train, ClassifierConfig, Evaluation, FederationConfig, GlobalModel, LabeledExample, TrainConfig,
};
use fedbell_net::{
    spawn_server, ClientConfig, ClientError, DeliveryResult, EventService, EventServiceConfig, FederatedClient,
    Inference, InferencePolicy, MessageKind, MockWebhook, ReceivedHook, RetryPolicy, ServerConfig, TranscriptEntry,
    WebhookConfig,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SIM_SECRET: &str = "simulation-enrollment";
const HELDOUT_SALT: u64 = 0x4845_4c44;
const PARTITION_SALT: u64 = 0x5041_5254;
const MODEL_SALT: u64 = 0x4d4f_4445;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_clients: usize,
    pub rounds: u64,
    pub samples_per_client: usize,
    pub class_labels: Vec<String>,
    /// Dirichlet concentration of per-client label mixes; small is skewed.
    pub skew: f64,
    pub seed: u64,
    pub train: TrainConfig,
    /// Defaults to full participation over `num_clients` and `rounds`.
    pub federation: Option<FederationConfig>,
    pub hidden_dim: usize,
    pub heldout_per_client: usize,
    pub unknown_threshold: f64,
    pub motion_alerts: bool,
    /// The first this-many webhook requests are answered with 500.
    pub webhook_failures: usize,
    pub webhook_max_retries: u32,
    pub webhook_retry_base_ms: u64,
    pub frame_period_ms: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            rounds: 20,
            samples_per_client: 200,
            class_labels: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            skew: 0.5,
            seed: 42,
            train: TrainConfig::default(),
            federation: None,
            hidden_dim: 32,
            heldout_per_client: 12,
            unknown_threshold: 0.6,
            motion_alerts: false,
            webhook_failures: 2,
            webhook_max_retries: 3,
            webhook_retry_base_ms: 20,
            frame_period_ms: 500,
        }
    }
}

impl ScenarioConfig {
    pub fn federation(&self) -> FederationConfig {
        self.federation
            .unwrap_or_else(|| FederationConfig::full(self.num_clients, self.rounds))
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: FEATURE_DIM,
            hidden_dim: self.hidden_dim,
            num_classes: self.class_labels.len(),
            seed: mix_seed(self.seed, MODEL_SALT),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.num_clients < 1 {
            return bad("num_clients must be at least 1");
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if self.samples_per_client < 1 {
            return bad("samples_per_client must be at least 1");
        }
        if !(self.skew > 0.0 && self.skew.is_finite()) {
            return bad("skew must be positive");
        }
        if self.class_labels.is_empty() || self.class_labels.len() > DEFAULT_CLASSES.len() {
            return bad("class_labels must name 1 to 4 classes");
        }
        let fed = self.federation();
        if fed.expected_clients != self.num_clients || fed.total_rounds != self.rounds {
            return bad("federation must match num_clients and rounds");
        }
        fed.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.classifier()
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.policy().validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    fn policy(&self) -> InferencePolicy {
        InferencePolicy {
            unknown_threshold: self.unknown_threshold,
            class_labels: self.class_labels.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: u64,
        client: String,
        source: ClientError,
    },
    #[error("inference on client {client}: {source}")]
    Inference { client: String, source: ClientError },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub contributors: usize,
    pub total_samples: u64,
    pub global_accuracy: f64,
    /// f(w): mean loss over the union of all shards.
    pub global_loss: f64,
    /// F_k(w) per client, in client order.
    pub client_losses: Vec<f64>,
    pub bytes_up: Vec<usize>,
    pub bytes_down: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub model_parameters: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceMetrics {
    pub frames: usize,
    pub rois: usize,
    pub roi_accuracy: f64,
    pub detections: usize,
    pub unknown: usize,
    pub motion_events: usize,
    pub events_stored: usize,
    pub webhook_deliveries: usize,
    pub webhook_attempts: usize,
    pub webhook_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: ScenarioConfig,
    pub clients: Vec<String>,
    pub shard_sizes: Vec<usize>,
    pub rounds: Vec<RoundMetrics>,
    pub totals: Totals,
    pub inference: InferenceMetrics,
}

impl MetricsReport {
    /// Pretty JSON with a trailing newline; field order is fixed.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is plain data");
        s.push('\n');
        s
    }
}

/// Everything a simulation produced, for inspection beyond the report.
#[derive(Debug)]
pub struct SimulationRun {
    pub report: MetricsReport,
    pub shards: Vec<Vec<LabeledExample>>,
    pub history: Vec<GlobalModel>,
    pub transcripts: Vec<Vec<TranscriptEntry>>,
    pub emitted: Vec<EventMessage>,
    pub deliveries: Vec<DeliveryResult>,
    pub webhook_requests: Vec<ReceivedHook>,
    pub event_log: PathBuf,
    pub webhook: WebhookConfig,
}

pub fn device_name(k: usize) -> String {
    format!("doorbell-{k:02}")
}

/// Client shards for the scenario, in client order.
pub fn scenario_shards(cfg: &ScenarioConfig) -> Result<Vec<Vec<LabeledExample>>, SimError> {
    let n = cfg.num_clients * cfg.samples_per_client;
    let data = build_dataset(n, cfg.class_labels.len(), cfg.seed).map_err(|e| SimError::Setup(e.to_string()))?;
    partition_data(&data, cfg.num_clients, cfg.skew, mix_seed(cfg.seed, PARTITION_SALT))
        .map_err(|e| SimError::Setup(e.to_string()))
}

/// Centralized reference: the same model and schedule trained on the union
/// of all shards for `rounds * epochs` epochs.
pub fn centralized_baseline(cfg: &ScenarioConfig) -> Result<Evaluation, SimError> {
    cfg.validate()?;
    let union: Vec<LabeledExample> = scenario_shards(cfg)?.concat();
    let init = fedbell_core::init_params(&cfg.classifier()).map_err(|e| SimError::Setup(e.to_string()))?;
    let train = TrainConfig {
        epochs: cfg.train.epochs * cfg.rounds as usize,
        ..cfg.train
    };
    let trained = local_train(&init, &union, &train).map_err(|e| SimError::Setup(e.to_string()))?;
    evaluate(&trained, &union).map_err(|e| SimError::Setup(e.to_string()))
}

fn setup<E: std::fmt::Display>(e: E) -> SimError {
    SimError::Setup(e.to_string())
}

pub async fn simulate(cfg: &ScenarioConfig, work_dir: &Path) -> Result<SimulationRun, SimError> {
    cfg.validate()?;
    let shards = scenario_shards(cfg)?;
    let fed = cfg.federation();
    let server = spawn_server(ServerConfig {
        bind: "127.0.0.1:0".into(),
        enrollment_secret: SIM_SECRET.into(),
        expected_clients: fed.expected_clients,
        min_quorum: fed.min_quorum,
        round_timeout_ms: fed.round_timeout_ms,
        total_rounds: fed.total_rounds,
        model: cfg.classifier(),
        tick_ms: 20,
        dump_dir: None,
    })
    .await
    .map_err(setup)?;
    let receiver = MockWebhook::spawn(vec![500; cfg.webhook_failures]).await?;
    let webhook = WebhookConfig {
        url: receiver.url(),
        max_retries: cfg.webhook_max_retries,
        retry_base_ms: cfg.webhook_retry_base_ms,
    };
    let event_log = work_dir.join("events.jsonl");
    if event_log.exists() {
        std::fs::remove_file(&event_log)?;
    }
    let events = EventService::spawn(EventServiceConfig {
        bind: "127.0.0.1:0".into(),
        log_path: event_log.clone(),
        webhook: Some(webhook.clone()),
    })
    .await
    .map_err(setup)?;

    let mut clients = Vec::with_capacity(cfg.num_clients);
    for (k, shard) in shards.iter().enumerate() {
        let device = device_name(k);
        let client = FederatedClient::register(ClientConfig {
            device_id: device.clone(),
            token: format!("{device}-{:016x}", mix_seed(cfg.seed, k as u64)),
            enrollment_secret: SIM_SECRET.into(),
            server_url: server.url(),
            events_url: Some(events.url()),
            policy: cfg.policy(),
            unknown_capacity: 64,
            retry: RetryPolicy::default(),
            poll_interval_ms: 5,
            train: TrainConfig {
                shuffle_seed: mix_seed(cfg.seed ^ cfg.train.shuffle_seed, k as u64),
                ..cfg.train
            },
            motion_alerts: cfg.motion_alerts,
        })
        .await
        .map_err(|e| SimError::Client {
            round: 0,
            client: device.clone(),
            source: e,
        })?;
        client.set_shard(shard.clone());
        clients.push(Arc::new(client));
    }

    let mut tasks = Vec::new();
    for client in &clients {
        let client = client.clone();
        let rounds = cfg.rounds;
        tasks.push(tokio::spawn(async move {
            loop {
                let done = client.current_model().map_or(0, |m| m.round);
                if done >= rounds {
                    return Ok(());
                }
                match client.run_round().await {
                    Ok(_) => {}
                    Err(ClientError::Finished(_)) => return Ok(()),
                    Err(e) => {
                        return Err(SimError::Client {
                            round: done + 1,
                            client: client.device_id().to_string(),
                            source: e,
                        })
                    }
                }
            }
        }));
    }
    for t in tasks {
        t.await.map_err(setup)??;
    }
    server.wait_finished(Duration::from_secs(60)).await;
    let published = server.history();

    let mut inference = InferenceMetrics::default();
    let mut emitted = Vec::new();
    let mut correct = 0usize;
    let mut clock: i64 = 0;
    for (k, client) in clients.iter().enumerate() {
        let stale = client.current_model().is_none_or(|m| m.round < cfg.rounds);
        if stale {
            client.fetch_model().await.map_err(|e| SimError::Inference {
                client: client.device_id().to_string(),
                source: e,
            })?;
        }
        let mut pipeline = FramePipeline::new(PipelineConfig::default());
        let background = |t: i64| fedbell_core::vision::Frame::filled(SCENE_SIZE, SCENE_SIZE, BACKGROUND_LEVEL, t);
        let mut frames = vec![(background(clock).map_err(setup)?, None)];
        for i in 0..cfg.heldout_per_client {
            clock += cfg.frame_period_ms as i64;
            let class = (k + i) % cfg.class_labels.len();
            let seed = mix_seed(mix_seed(cfg.seed, HELDOUT_SALT), (k * 100_000 + i) as u64);
            let mut scene = generate_scene(class, seed).map_err(setup)?;
            scene.frame.timestamp_ms = clock;
            frames.push((scene.frame, Some(class)));
            clock += cfg.frame_period_ms as i64;
            frames.push((background(clock).map_err(setup)?, None));
        }
        clock += cfg.frame_period_ms as i64;
        for (frame, truth) in frames {
            let obs = client
                .observe_frame(&mut pipeline, &frame)
                .await
                .map_err(|e| SimError::Inference {
                    client: client.device_id().to_string(),
                    source: e,
                })?;
            inference.frames += 1;
            if let FrameOutcome::Roi(_) = obs.outcome {
                inference.rois += 1;
            }
            match &obs.inference {
                Some(Inference::Detected(ev)) => {
                    inference.detections += 1;
                    correct += usize::from(truth.map(|t| cfg.class_labels[t] == ev.label) == Some(true));
                    emitted.push(ev.clone());
                }
                Some(Inference::Unknown { label, .. }) => {
                    inference.unknown += 1;
                    correct += usize::from(truth.map(|t| &cfg.class_labels[t] == label) == Some(true));
                }
                None => {}
            }
            if let Some(ev) = obs.motion_event {
                inference.motion_events += 1;
                emitted.push(ev);
            }
        }
    }
    inference.roi_accuracy = if inference.rois == 0 {
        0.0
    } else {
        correct as f64 / inference.rois as f64
    };
    tokio::time::timeout(Duration::from_secs(120), events.drain_notifications())
        .await
        .map_err(|_| SimError::Setup("webhook deliveries did not finish".into()))?;
    let deliveries = events.deliveries();
    inference.events_stored = events.store().len();
    inference.webhook_deliveries = deliveries.iter().filter(|d| d.delivered).count();
    inference.webhook_failed = deliveries.iter().filter(|d| !d.delivered).count();
    inference.webhook_attempts = deliveries.iter().map(|d| d.attempts.len()).sum();
    let webhook_requests = receiver.received();

    let transcripts: Vec<Vec<TranscriptEntry>> = clients.iter().map(|c| c.transcript().entries()).collect();
    let names: Vec<String> = clients.iter().map(|c| c.device_id().to_string()).collect();
    drop(clients);
    server.shutdown().await;
    events.shutdown().await;
    receiver.shutdown().await;

    let initial = GlobalModel {
        round: 0,
        total_samples: 0,
        params: fedbell_core::init_params(&cfg.classifier()).map_err(setup)?,
    };
    let mut history = vec![initial];
    history.extend(published.iter().map(|p| p.model.clone()));
    let union: Vec<LabeledExample> = shards.concat();
    let mut rounds = Vec::with_capacity(history.len());
    for (i, model) in history.iter().enumerate() {
        let global = evaluate(&model.params, &union).map_err(setup)?;
        let client_losses = shards
            .iter()
            .map(|s| evaluate(&model.params, s).map(|e| e.mean_loss))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(setup)?;
        let bytes = |kind: MessageKind| -> Vec<usize> {
            transcripts
                .iter()
                .map(|t| {
                    t.iter()
                        .filter(|e| e.kind == kind && e.round == Some(model.round))
                        .map(|e| match kind {
                            MessageKind::Update => e.request_body.len(),
                            _ => e.response_bytes,
                        })
                        .sum()
                })
                .collect()
        };
        rounds.push(RoundMetrics {
            round: model.round,
            contributors: if i == 0 { 0 } else { published[i - 1].contributors.len() },
            total_samples: model.total_samples,
            global_accuracy: global.accuracy,
            global_loss: global.mean_loss,
            client_losses,
            bytes_up: bytes(MessageKind::Update),
            bytes_down: bytes(MessageKind::ModelFetch),
        });
    }
    let last = rounds.last().expect("round 0 always present");
    let totals = Totals {
        model_parameters: history[0].params.num_parameters(),
        bytes_up: rounds.iter().flat_map(|r| &r.bytes_up).sum(),
        bytes_down: rounds.iter().flat_map(|r| &r.bytes_down).sum(),
        final_accuracy: last.global_accuracy,
        final_loss: last.global_loss,
    };
    let report = MetricsReport {
        scenario: cfg.clone(),
        clients: names,
        shard_sizes: shards.iter().map(Vec::len).collect(),
        rounds,
        totals,
        inference,
    };
    Ok(SimulationRun {
        report,
        shards,
        history,
        transcripts,
        emitted,
        deliveries,
        webhook_requests,
        event_log,
        webhook,
    })
}
