//! Core of a federated smart-doorbell system: tensors and a small classifier,
//! sample-weighted federated averaging with its round state machine, the JSON
//! wire format, the frame pre-processing pipeline, and synthetic scene data.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and sequentially otherwise; both paths produce bit-identical
//! results.

pub mod error;
pub mod exec;
pub mod fedavg;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod vision;
pub mod wire;

pub use error::{FedError, ModelError, VisionError, VocError, WireError};
pub use exec::Execution;
pub use fedavg::{aggregate, ClientUpdate, CloseOutcome, FederationConfig, GlobalModel, Phase, RoundState};
pub use model::{
    evaluate, forward, init_params, local_train, loss_and_gradient, ClassifierConfig, Evaluation, LabeledExample,
    TrainConfig,
};
pub use tensor::{ModelParams, Tensor};
