//! JSON wire format for model exchange and detection events.
//!
//! Tensor payloads are base64 (standard alphabet, padded) of the row-major
//! little-endian binary64 bytes. Messages serialize with fields in
//! declaration order and no whitespace; unknown fields are rejected.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::WireError;
use crate::fedavg::{ClientUpdate, GlobalModel};
use crate::tensor::{ModelParams, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireTensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub data_b64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateMessage {
    pub client_id: String,
    pub round: u64,
    pub sample_count: u64,
    pub tensors: Vec<WireTensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMessage {
    pub round: u64,
    pub total_samples: u64,
    pub tensors: Vec<WireTensor>,
}

/// Detection metadata; never carries pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMessage {
    pub event_id: String,
    pub device_id: String,
    pub timestamp_ms: i64,
    pub label: String,
    pub confidence: f64,
    pub bbox: [u32; 4],
}

/// Messages with the strict JSON envelope.
pub trait WireMessage: Serialize + DeserializeOwned {
    /// Semantic checks applied after a successful schema decode.
    fn validate(&self) -> Result<(), WireError> {
        Ok(())
    }
}

impl WireMessage for UpdateMessage {
    fn validate(&self) -> Result<(), WireError> {
        if self.client_id.is_empty() {
            return Err(WireError::Invalid("client_id is empty".into()));
        }
        if self.sample_count == 0 {
            return Err(WireError::Invalid("sample_count must be positive".into()));
        }
        Ok(())
    }
}

impl WireMessage for ModelMessage {
    fn validate(&self) -> Result<(), WireError> {
        if self.round > 0 && self.total_samples == 0 {
            return Err(WireError::Invalid(
                "trained rounds need a positive total_samples".into(),
            ));
        }
        Ok(())
    }
}

impl WireMessage for EventMessage {
    fn validate(&self) -> Result<(), WireError> {
        if self.event_id.is_empty() || self.device_id.is_empty() {
            return Err(WireError::Invalid("event_id and device_id must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(WireError::Invalid(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if x0 >= x1 || y0 >= y1 {
            return Err(WireError::Invalid(format!("degenerate bbox {:?}", self.bbox)));
        }
        Ok(())
    }
}

pub fn encode_json<M: WireMessage>(msg: &M) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    serde_json::to_vec(msg).map_err(|e| WireError::Invalid(e.to_string()))
}

pub fn decode_json<M: WireMessage>(bytes: &[u8]) -> Result<M, WireError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let msg: M = serde_path_to_error::deserialize(&mut de).map_err(|e| WireError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| WireError::Schema {
        path: ".".into(),
        message: e.to_string(),
    })?;
    msg.validate()?;
    Ok(msg)
}

pub fn encode_tensor(name: &str, tensor: &Tensor) -> Result<WireTensor, WireError> {
    let mut bytes = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        if !v.is_finite() {
            return Err(WireError::NonFinite(name.to_string()));
        }
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(WireTensor {
        name: name.to_string(),
        shape: tensor.shape().iter().map(|&d| d as u64).collect(),
        data_b64: STANDARD.encode(bytes),
    })
}

pub fn decode_tensor(wire: &WireTensor) -> Result<Tensor, WireError> {
    let shape: Vec<usize> = wire
        .shape
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<Result<_, _>>()
        .map_err(|_| WireError::Invalid(format!("tensor {:?}: dimension too large", wire.name)))?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| WireError::Invalid(format!("tensor {:?}: shape overflows", wire.name)))?;
    let bytes = STANDARD
        .decode(wire.data_b64.as_bytes())
        .map_err(|_| WireError::Base64(wire.name.clone()))?;
    if bytes.len() != count {
        return Err(WireError::ByteLength {
            name: wire.name.clone(),
            expected: count,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(WireError::NonFinite(wire.name.clone()));
    }
    Tensor::new(shape, data).map_err(|e| WireError::Invalid(e.to_string()))
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<WireTensor>, WireError> {
    params.iter().map(|(n, t)| encode_tensor(n, t)).collect()
}

pub fn decode_params(tensors: &[WireTensor]) -> Result<ModelParams, WireError> {
    let entries = tensors
        .iter()
        .map(|w| Ok((w.name.clone(), decode_tensor(w)?)))
        .collect::<Result<Vec<_>, WireError>>()?;
    ModelParams::new(entries).map_err(|e| WireError::Invalid(e.to_string()))
}

impl UpdateMessage {
    pub fn from_update(update: &ClientUpdate) -> Result<Self, WireError> {
        Ok(Self {
            client_id: update.client_id.clone(),
            round: update.round,
            sample_count: update.sample_count,
            tensors: encode_params(&update.params)?,
        })
    }

    pub fn into_update(self) -> Result<ClientUpdate, WireError> {
        self.validate()?;
        Ok(ClientUpdate {
            params: decode_params(&self.tensors)?,
            client_id: self.client_id,
            round: self.round,
            sample_count: self.sample_count,
        })
    }
}

impl ModelMessage {
    pub fn from_global(model: &GlobalModel) -> Result<Self, WireError> {
        Ok(Self {
            round: model.round,
            total_samples: model.total_samples,
            tensors: encode_params(&model.params)?,
        })
    }

    pub fn into_global(self) -> Result<GlobalModel, WireError> {
        self.validate()?;
        Ok(GlobalModel {
            params: decode_params(&self.tensors)?,
            round: self.round,
            total_samples: self.total_samples,
        })
    }
}
