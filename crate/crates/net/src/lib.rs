//! HTTP services around the federated core: the federation server, the
//! device-side client runtime, the detection event store and a scripted
//! webhook receiver for tests and simulations.

pub mod api;
pub mod client;
pub mod events;
pub mod server;
pub mod webhook;

use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use api::{AppendAck, ErrorBody, RegisterRequest, RegisterResponse, RoundStatus};
pub use client::{
    ClientConfig, ClientError, FederatedClient, Inference, InferencePolicy, IngestReport, MessageKind, Observation,
    RetryPolicy, Transcript, TranscriptEntry,
};
pub use events::{
    notify, DeliveryAttempt, DeliveryResult, EventRecord, EventService, EventServiceConfig, EventStore, StoreError,
    WebhookConfig,
};
pub use server::{spawn_server, DeviceRecord, PublishedRound, ServerConfig, ServerError, ServerHandle};
pub use webhook::{MockWebhook, ReceivedHook};

/// An axum app running on a background task until stopped.
#[derive(Debug)]
pub(crate) struct Running {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    join: JoinHandle<io::Result<()>>,
}

impl Running {
    pub(crate) fn start(listener: TcpListener, app: axum::Router) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let join = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            join,
        })
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Graceful stop; lingering keep-alive connections get one second.
    pub(crate) async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let abort = self.join.abort_handle();
        if tokio::time::timeout(Duration::from_secs(1), &mut self.join)
            .await
            .is_err()
        {
            abort.abort();
        }
    }
}

pub(crate) fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// `reqwest` client for loopback and LAN use: no proxy, bounded timeout.
pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .timeout(Duration::from_secs(30))
        .build()
        .expect("static client configuration")
}
