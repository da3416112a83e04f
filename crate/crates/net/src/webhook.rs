//! Local webhook receiver that answers with a scripted sequence of status
//! codes and records every request.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use tokio::net::TcpListener;

use crate::Running;

pub const HOOK_PATH: &str = "/hook";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedHook {
    /// Arrival time relative to receiver start.
    pub at: Duration,
    pub status: u16,
    pub body: Bytes,
}

struct MockState {
    script: Vec<u16>,
    started: Instant,
    received: Mutex<Vec<ReceivedHook>>,
}

async fn hook(State(state): State<Arc<MockState>>, body: Bytes) -> StatusCode {
    let mut received = state.received.lock().unwrap_or_else(|p| p.into_inner());
    let status = state.script.get(received.len()).copied().unwrap_or(200);
    received.push(ReceivedHook {
        at: state.started.elapsed(),
        status,
        body,
    });
    StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

/// Request `i` is answered with `script[i]`, or 200 once the script runs out.
pub struct MockWebhook {
    state: Arc<MockState>,
    running: Running,
}

impl MockWebhook {
    pub async fn spawn(script: Vec<u16>) -> std::io::Result<Self> {
        let state = Arc::new(MockState {
            script,
            started: Instant::now(),
            received: Mutex::new(Vec::new()),
        });
        let app = Router::new().route(HOOK_PATH, post(hook)).with_state(state.clone());
        let running = Running::start(TcpListener::bind("127.0.0.1:0").await?, app)?;
        Ok(Self { state, running })
    }

    pub fn url(&self) -> String {
        format!("http://{}{HOOK_PATH}", self.running.addr())
    }

    pub fn received(&self) -> Vec<ReceivedHook> {
        self.state.received.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub async fn shutdown(self) {
        self.running.stop().await;
    }
}
