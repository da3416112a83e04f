#![allow(dead_code)]

use fedbell_core::ClassifierConfig;
use fedbell_net::{ClientConfig, InferencePolicy, RetryPolicy, ServerConfig};

pub const SECRET: &str = "enroll-me";

pub fn server_config(expected: usize, rounds: u64, model: ClassifierConfig) -> ServerConfig {
    ServerConfig {
        bind: "127.0.0.1:0".into(),
        enrollment_secret: SECRET.into(),
        expected_clients: expected,
        min_quorum: expected,
        round_timeout_ms: 60_000,
        total_rounds: rounds,
        model,
        tick_ms: 10,
        dump_dir: None,
    }
}

pub fn tiny_model(classes: usize) -> ClassifierConfig {
    ClassifierConfig {
        input_dim: 256,
        hidden_dim: 0,
        num_classes: classes,
        seed: 3,
    }
}

pub fn client_config(server_url: &str, device: &str) -> ClientConfig {
    ClientConfig {
        device_id: device.into(),
        token: format!("token-{device}"),
        enrollment_secret: SECRET.into(),
        server_url: server_url.into(),
        events_url: None,
        policy: InferencePolicy::default(),
        unknown_capacity: 4,
        retry: RetryPolicy {
            base_ms: 5,
            ..RetryPolicy::default()
        },
        poll_interval_ms: 5,
        train: Default::default(),
        motion_alerts: false,
    }
}
