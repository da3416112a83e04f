//! Sample-weighted federated averaging and the synchronous round state machine.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::FedError;
use crate::exec::{Execution, COMPONENT_CHUNK};
use crate::tensor::ModelParams;

/// One client's locally trained parameters for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u64,
    pub sample_count: u64,
    pub params: ModelParams,
}

/// Aggregated model published at the end of a round. Round 0 is the initial
/// model and carries `total_samples == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub round: u64,
    pub total_samples: u64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub expected_clients: usize,
    pub min_quorum: usize,
    pub round_timeout_ms: u64,
    pub total_rounds: u64,
}

impl FederationConfig {
    /// Full participation, no early close.
    pub fn full(expected_clients: usize, total_rounds: u64) -> Self {
        Self {
            expected_clients,
            min_quorum: expected_clients,
            round_timeout_ms: 30_000,
            total_rounds,
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        if self.expected_clients < 1 {
            return Err(FedError::Config("expected_clients must be positive".into()));
        }
        if self.min_quorum < 1 || self.min_quorum > self.expected_clients {
            return Err(FedError::Config("min_quorum must lie in 1..=expected_clients".into()));
        }
        if self.total_rounds < 1 {
            return Err(FedError::Config("total_rounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Open,
    Published,
}

/// Bookkeeping for the round currently collecting updates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    round: u64,
    phase: Phase,
    received: BTreeSet<String>,
    pending: Vec<ClientUpdate>,
}

/// Result of asking whether the open round can close.
#[derive(Debug, Clone, PartialEq)]
pub enum CloseOutcome {
    StillOpen,
    Published(GlobalModel),
}

impl RoundState {
    /// Training rounds are numbered from 1; round 0 is the initial model.
    pub fn first() -> Self {
        Self::open(1)
    }

    pub fn open(round: u64) -> Self {
        Self {
            round,
            phase: Phase::Open,
            received: BTreeSet::new(),
            pending: Vec::new(),
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn received(&self) -> &BTreeSet<String> {
        &self.received
    }

    pub fn pending(&self) -> &[ClientUpdate] {
        &self.pending
    }

    /// Accepts an update for the open round. On error the state is unchanged.
    pub fn submit_update(&mut self, update: ClientUpdate) -> Result<(), FedError> {
        if self.phase != Phase::Open {
            return Err(FedError::Closed(self.round));
        }
        if update.round != self.round {
            return Err(FedError::StaleRound {
                current: self.round,
                submitted: update.round,
            });
        }
        if update.sample_count == 0 {
            return Err(FedError::ZeroSamples(update.client_id));
        }
        if self.received.contains(&update.client_id) {
            return Err(FedError::Duplicate(update.client_id));
        }
        self.received.insert(update.client_id.clone());
        self.pending.push(update);
        Ok(())
    }

    /// Closes the round when every expected client has reported, or when the
    /// timeout has elapsed and the quorum is met. A closed round advances the
    /// state to the next open round, or to `Published` after the final round.
    pub fn try_close_round(&mut self, cfg: &FederationConfig, elapsed_ms: u64) -> Result<CloseOutcome, FedError> {
        if self.phase != Phase::Open {
            return Err(FedError::Closed(self.round));
        }
        let received = self.received.len();
        let full = received >= cfg.expected_clients;
        let timed_out = elapsed_ms >= cfg.round_timeout_ms;
        if !full {
            if !timed_out {
                return Ok(CloseOutcome::StillOpen);
            }
            if received < cfg.min_quorum {
                return Err(FedError::QuorumFailure {
                    received,
                    required: cfg.min_quorum,
                });
            }
        }
        let model = aggregate(&self.pending)?;
        if self.round >= cfg.total_rounds {
            self.phase = Phase::Published;
            self.received.clear();
            self.pending.clear();
        } else {
            *self = RoundState::open(self.round + 1);
        }
        Ok(CloseOutcome::Published(model))
    }
}

/// Weighted component-wise average `sum_k (n_k / n) * w_k`.
///
/// Updates are summed in ascending `client_id` order so the result does not
/// depend on arrival order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<GlobalModel, FedError> {
    aggregate_with(Execution::default(), updates)
}

pub fn aggregate_with(exec: Execution, updates: &[ClientUpdate]) -> Result<GlobalModel, FedError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let first = *sorted.first().ok_or(FedError::NoUpdates)?;
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FedError::Duplicate(pair[0].client_id.clone()));
        }
    }
    let mut total: u64 = 0;
    for u in &sorted {
        if u.round != first.round {
            return Err(FedError::RoundMismatch(first.round, u.round));
        }
        if !u.params.same_structure(&first.params) {
            return Err(FedError::Schema {
                client_id: u.client_id.clone(),
                detail: format!(
                    "structure {:?} differs from {:?}",
                    u.params.structure(),
                    first.params.structure()
                ),
            });
        }
        if u.sample_count == 0 {
            return Err(FedError::ZeroSamples(u.client_id.clone()));
        }
        total = total
            .checked_add(u.sample_count)
            .ok_or_else(|| FedError::Config("sample count overflow".into()))?;
    }

    let weights: Vec<f64> = sorted.iter().map(|u| u.sample_count as f64 / total as f64).collect();
    let flats: Vec<Vec<f64>> = sorted.iter().map(|u| u.params.flatten()).collect();
    let mut out = vec![0.0; first.params.num_parameters()];
    exec.for_each_chunk_mut(&mut out, COMPONENT_CHUNK, |start, chunk| {
        for (i, slot) in chunk.iter_mut().enumerate() {
            let j = start + i;
            let mut acc = weights[0] * flats[0][j];
            for (w, f) in weights.iter().zip(&flats).skip(1) {
                acc += w * f[j];
            }
            *slot = acc;
        }
    });
    let params = first.params.with_flat(&out).map_err(|e| FedError::Schema {
        client_id: first.client_id.clone(),
        detail: e.to_string(),
    })?;
    Ok(GlobalModel {
        round: first.round,
        total_samples: total,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(values: &[f64]) -> ModelParams {
        ModelParams::new(vec![("w".into(), Tensor::vector(values.to_vec()).unwrap())]).unwrap()
    }

    fn update(id: &str, round: u64, n: u64, values: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client_id: id.into(),
            round,
            sample_count: n,
            params: params(values),
        }
    }

    #[test]
    fn single_update_is_identity() {
        let u = update("a", 1, 9, &[0.125, -0.0, 7.5]);
        let g = aggregate(std::slice::from_ref(&u)).unwrap();
        assert_eq!(g.total_samples, 9);
        let bits: Vec<u64> = g.params.flatten().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = u.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn equal_weights_give_plain_mean() {
        let g = aggregate(&[update("a", 1, 5, &[1.0, 3.0]), update("b", 1, 5, &[3.0, 5.0])]).unwrap();
        assert_eq!(g.params.flatten(), vec![2.0, 4.0]);
    }

    #[test]
    fn weights_follow_sample_counts() {
        let g = aggregate(&[update("a", 1, 1, &[0.0]), update("b", 1, 3, &[4.0])]).unwrap();
        assert_eq!(g.params.flatten(), vec![3.0]);
        assert_eq!(g.total_samples, 4);
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        assert_eq!(aggregate(&[]), Err(FedError::NoUpdates));
        assert!(matches!(
            aggregate(&[update("a", 1, 1, &[0.0]), update("b", 2, 1, &[0.0])]),
            Err(FedError::RoundMismatch(1, 2))
        ));
        assert!(matches!(
            aggregate(&[update("a", 1, 1, &[0.0]), update("b", 1, 1, &[0.0, 1.0])]),
            Err(FedError::Schema { .. })
        ));
        assert!(matches!(
            aggregate(&[update("a", 1, 1, &[0.0]), update("a", 1, 2, &[1.0])]),
            Err(FedError::Duplicate(_))
        ));
    }

    #[test]
    fn submit_tracks_clients() {
        let mut s = RoundState::first();
        s.submit_update(update("a", 1, 1, &[0.0])).unwrap();
        assert_eq!(s.received().iter().collect::<Vec<_>>(), vec!["a"]);

        let before = s.clone();
        assert_eq!(
            s.submit_update(update("a", 1, 1, &[0.0])),
            Err(FedError::Duplicate("a".into()))
        );
        assert_eq!(s, before);
    }

    #[test]
    fn stale_round_is_rejected() {
        let mut s = RoundState::open(4);
        assert_eq!(
            s.submit_update(update("a", 3, 1, &[0.0])),
            Err(FedError::StaleRound {
                current: 4,
                submitted: 3
            })
        );
        assert!(s.pending().is_empty());
    }

    fn cfg(k: usize, q: usize) -> FederationConfig {
        FederationConfig {
            expected_clients: k,
            min_quorum: q,
            round_timeout_ms: 1000,
            total_rounds: 10,
        }
    }

    #[test]
    fn closes_on_full_participation() {
        let mut s = RoundState::first();
        for id in ["a", "b", "c"] {
            s.submit_update(update(id, 1, 1, &[1.0])).unwrap();
        }
        match s.try_close_round(&cfg(3, 3), 0).unwrap() {
            CloseOutcome::Published(g) => assert_eq!((g.round, g.total_samples), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s, RoundState::open(2));
    }

    #[test]
    fn waits_before_timeout() {
        let mut s = RoundState::first();
        s.submit_update(update("a", 1, 1, &[1.0])).unwrap();
        assert_eq!(s.try_close_round(&cfg(3, 2), 999).unwrap(), CloseOutcome::StillOpen);
    }

    #[test]
    fn quorum_failure_keeps_round_open() {
        let mut s = RoundState::first();
        s.submit_update(update("a", 1, 1, &[1.0])).unwrap();
        let before = s.clone();
        assert_eq!(
            s.try_close_round(&cfg(3, 2), 1000),
            Err(FedError::QuorumFailure {
                received: 1,
                required: 2
            })
        );
        assert_eq!(s, before);
    }

    #[test]
    fn quorum_close_after_timeout() {
        let mut s = RoundState::first();
        s.submit_update(update("a", 1, 2, &[1.0])).unwrap();
        s.submit_update(update("b", 1, 2, &[3.0])).unwrap();
        match s.try_close_round(&cfg(3, 2), 1500).unwrap() {
            CloseOutcome::Published(g) => {
                assert_eq!(g.total_samples, 4);
                assert_eq!(g.params.flatten(), vec![2.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn final_round_stops_accepting() {
        let mut s = RoundState::open(10);
        s.submit_update(update("a", 10, 1, &[1.0])).unwrap();
        assert!(matches!(
            s.try_close_round(&cfg(1, 1), 0).unwrap(),
            CloseOutcome::Published(_)
        ));
        assert_eq!(s.phase(), Phase::Published);
        assert_eq!(s.round(), 10);
        assert_eq!(s.submit_update(update("b", 10, 1, &[1.0])), Err(FedError::Closed(10)));
        assert!(s.try_close_round(&cfg(1, 1), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3, 0).validate().is_err());
        assert!(cfg(3, 4).validate().is_err());
        assert!(cfg(3, 3).validate().is_ok());
    }
}
