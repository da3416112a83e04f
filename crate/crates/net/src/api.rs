//! JSON bodies for the routes that carry no model or event payload.

use fedbell_core::Phase;
use serde::{Deserialize, Serialize};

pub const REGISTER: &str = "/v1/register";
pub const MODEL: &str = "/v1/model";
pub const UPDATE: &str = "/v1/update";
pub const ROUND: &str = "/v1/round";
pub const EVENTS: &str = "/v1/events";

/// Body of `POST /v1/register`. The enrollment secret travels separately as
/// the bearer credential; `token` becomes the device's own credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub device_id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterResponse {
    pub client_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundStatus {
    pub round: u64,
    pub phase: Phase,
    pub received_count: usize,
    pub expected_clients: usize,
}

impl RoundStatus {
    /// True once the model for `round` has been published.
    pub fn has_published(&self, round: u64) -> bool {
        self.round > round || (self.round == round && self.phase == Phase::Published)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_round: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendAck {
    pub sequence: u64,
    pub duplicate: bool,
}

pub(crate) fn bearer(headers: &axum::http::HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
}
