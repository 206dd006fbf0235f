//! Server-side round orchestration.
//!
//! A training round in masked mode runs: draw a fresh round secret, mask the
//! current weights, broadcast the masked model, collect one update per
//! enrolled client, aggregate the uploads weighted by sample count, and
//! recover the true aggregated gradient and training loss in a single
//! inversion. The secret is consumed by that inversion — the state machine
//! refuses to recover twice — and the plain gradient never exists on any
//! client.
//!
//! Everything here is deterministic given the run seed: per-round mask
//! secrets and per-client batch selections come from dedicated RNG streams
//! keyed by `(seed, round)` and `(seed, client, round)`, so an in-process
//! run and a networked run of the same configuration walk through identical
//! numbers regardless of message timing.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{
    local_update, local_update_plain, local_update_with_swapped_groups, ClientUpdate, LossReport,
    PlainUpdate,
};
use crate::error::{Error, Result};
use crate::model::{GradientSet, MlpParams, Sample};
use crate::perturb::{
    mask_model, recover_gradient, sample_secret, MaskedAggregate, MaskedModel, NoiseConfig,
    RoundSecret,
};
use crate::tensor::Matrix;

/// Whether rounds run with model masking or as ordinary federated averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    Plain,
    Masked,
}

impl RoundMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoundMode::Plain => "plain",
            RoundMode::Masked => "masked",
        }
    }
}

/// How a client picks its per-round batch from its shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Use the whole shard every round.
    Full,
    /// Sample `size` rows (or the whole shard if smaller) without
    /// replacement, fresh per round.
    Fixed { size: usize },
}

impl BatchPolicy {
    pub fn validate(&self) -> Result<()> {
        if let BatchPolicy::Fixed { size: 0 } = self {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Build a ChaCha stream keyed by an 8-byte domain tag plus three 64-bit
/// values. Distinct tags give independent streams from one run seed.
fn keyed_rng(tag: &[u8; 8], seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(tag);
    key[8..16].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// RNG stream for the round secret of `round`.
pub fn mask_rng(run_seed: u64, round: u64) -> ChaCha8Rng {
    keyed_rng(b"mask-sec", run_seed, round, 0)
}

/// RNG stream for `client`'s batch selection in `round`.
pub fn batch_rng(run_seed: u64, client: u64, round: u64) -> ChaCha8Rng {
    keyed_rng(b"batchsel", run_seed, client, round)
}

/// RNG stream for dataset synthesis, splitting, and sharding.
pub fn data_rng(run_seed: u64) -> ChaCha8Rng {
    keyed_rng(b"datapipe", run_seed, 0, 0)
}

/// RNG stream for model weight initialization.
pub fn init_rng(run_seed: u64) -> ChaCha8Rng {
    keyed_rng(b"initpara", run_seed, 0, 0)
}

/// One enrolled client as driven by the in-process loop: its identity, its
/// training shard, and the batch policy it applies each round.
#[derive(Debug, Clone)]
pub struct LocalClient {
    pub id: u64,
    pub shard: Vec<Sample>,
    pub batch: BatchPolicy,
    pub run_seed: u64,
}

impl LocalClient {
    pub fn new(id: u64, shard: Vec<Sample>, batch: BatchPolicy, run_seed: u64) -> LocalClient {
        LocalClient { id, shard, batch, run_seed }
    }

    /// The batch this client trains on in `round`. Depends only on
    /// `(run_seed, id, round)` — in particular not on the round mode — so
    /// plain and masked runs of one configuration see identical data.
    pub fn batch_for_round(&self, round: u64) -> Vec<Sample> {
        match self.batch {
            BatchPolicy::Full => self.shard.clone(),
            BatchPolicy::Fixed { size } => {
                let take = size.min(self.shard.len());
                let mut rng = batch_rng(self.run_seed, self.id, round);
                let mut indices: Vec<usize> = (0..self.shard.len()).collect();
                for i in 0..take {
                    let j = rng.gen_range(i..indices.len());
                    indices.swap(i, j);
                }
                indices[..take].iter().map(|&i| self.shard[i].clone()).collect()
            }
        }
    }

    pub fn update_masked(&self, round: u64, model: &MaskedModel) -> Result<ClientUpdate> {
        local_update(model, self.id, round, &self.batch_for_round(round))
    }

    pub fn update_plain(&self, round: u64, params: &MlpParams) -> Result<PlainUpdate> {
        local_update_plain(params, self.id, round, &self.batch_for_round(round))
    }

    /// Planted-bug variant for the test suite: correction groups reported in
    /// reversed order. See [`local_update_with_swapped_groups`].
    #[doc(hidden)]
    pub fn update_masked_swapped(&self, round: u64, model: &MaskedModel) -> Result<ClientUpdate> {
        local_update_with_swapped_groups(model, self.id, round, &self.batch_for_round(round))
    }
}

/// Membership and uniqueness bookkeeping for one round's uploads.
#[derive(Debug)]
struct RoundCollector<U> {
    round_id: u64,
    expected: BTreeSet<u64>,
    updates: BTreeMap<u64, U>,
}

impl<U> RoundCollector<U> {
    fn new(round_id: u64, client_ids: &[u64]) -> Result<RoundCollector<U>> {
        let expected: BTreeSet<u64> = client_ids.iter().copied().collect();
        if expected.is_empty() {
            return Err(Error::Usage("a round needs at least one enrolled client".into()));
        }
        if expected.len() != client_ids.len() {
            return Err(Error::Usage(format!("duplicate client ids in roster {client_ids:?}")));
        }
        Ok(RoundCollector { round_id, expected, updates: BTreeMap::new() })
    }

    fn accept(&mut self, client_id: u64, round_id: u64, update: U) -> Result<()> {
        if round_id != self.round_id {
            return Err(Error::Protocol(format!(
                "client {client_id} answered round {round_id}, server is on round {}",
                self.round_id
            )));
        }
        if !self.expected.contains(&client_id) {
            return Err(Error::Protocol(format!(
                "update from client {client_id}, which is not enrolled in this round"
            )));
        }
        if self.updates.contains_key(&client_id) {
            return Err(Error::Protocol(format!(
                "duplicate update from client {client_id} in round {round_id}"
            )));
        }
        self.updates.insert(client_id, update);
        Ok(())
    }

    fn ready(&self) -> bool {
        self.updates.len() == self.expected.len()
    }

    fn missing(&self) -> Vec<u64> {
        self.expected.iter().filter(|id| !self.updates.contains_key(id)).copied().collect()
    }

    /// Drain updates in ascending client-id order; errors while any are
    /// outstanding.
    fn take_sorted(&mut self) -> Result<Vec<U>> {
        if !self.ready() {
            return Err(Error::Protocol(format!(
                "round {} is missing updates from clients {:?}",
                self.round_id,
                self.missing()
            )));
        }
        Ok(std::mem::take(&mut self.updates).into_values().collect())
    }
}

/// The server's view of one round's true result.
#[derive(Debug, Clone)]
pub struct RecoveredRound {
    pub grad: GradientSet,
    pub train_loss: f64,
    pub total_samples: u64,
}

/// Server state for one masked round: the broadcastable masked model, the
/// one-time recovery secret, and the collected uploads.
#[derive(Debug)]
pub struct MaskedRoundState {
    masked: MaskedModel,
    secret: Option<RoundSecret>,
    collector: RoundCollector<ClientUpdate>,
}

impl MaskedRoundState {
    /// Draw the round secret from `rng`, mask `params`, and open the round
    /// for the given roster.
    pub fn begin(
        round_id: u64,
        params: &MlpParams,
        noise: &NoiseConfig,
        partition_groups: usize,
        client_ids: &[u64],
        rng: &mut impl Rng,
    ) -> Result<MaskedRoundState> {
        let secret = sample_secret(params.dims(), partition_groups, noise, rng)?;
        let masked = mask_model(params, &secret)?;
        Ok(MaskedRoundState {
            masked,
            secret: Some(secret),
            collector: RoundCollector::new(round_id, client_ids)?,
        })
    }

    /// What gets broadcast. Contains no secret material.
    pub fn masked_model(&self) -> &MaskedModel {
        &self.masked
    }

    pub fn round_id(&self) -> u64 {
        self.collector.round_id
    }

    pub fn accept(&mut self, update: ClientUpdate) -> Result<()> {
        update.validate(&self.masked)?;
        self.collector.accept(update.client_id, update.round_id, update)
    }

    pub fn ready(&self) -> bool {
        self.collector.ready()
    }

    pub fn missing(&self) -> Vec<u64> {
        self.collector.missing()
    }

    /// Aggregate the uploads and undo the masks. Consumes the round secret:
    /// a second call fails even though the state still exists.
    pub fn recover(&mut self) -> Result<RecoveredRound> {
        let updates = self.collector.take_sorted()?;
        let secret = self.secret.take().ok_or_else(|| {
            Error::Protocol(format!(
                "recovery secret for round {} was already consumed",
                self.collector.round_id
            ))
        })?;
        let total: u64 = updates.iter().map(|u| u.sample_count).sum();
        let depth = self.masked.dims.depth();
        let m = self.masked.group_count();
        let zeros = |l: usize| {
            let w = self.masked.layer(l);
            Matrix::zeros(w.rows(), w.cols())
        };
        let mut agg = MaskedAggregate {
            grad: (1..=depth).map(zeros).collect(),
            group_corrections: (1..=depth).map(|l| vec![zeros(l); m]).collect(),
            sum_corrections: (1..=depth).map(zeros).collect(),
        };
        let mut loss =
            LossReport { masked_loss: 0.0, act_sum_sq: 0.0, group_terms: vec![0.0; m] };
        for update in &updates {
            let w = update.sample_count as f64 / total as f64;
            for idx in 0..depth {
                agg.grad[idx].axpy(w, &update.grad[idx])?;
                agg.sum_corrections[idx].axpy(w, &update.sum_corrections[idx])?;
                for s in 0..m {
                    agg.group_corrections[idx][s].axpy(w, &update.group_corrections[idx][s])?;
                }
            }
            loss.masked_loss += w * update.loss.masked_loss;
            loss.act_sum_sq += w * update.loss.act_sum_sq;
            for s in 0..m {
                loss.group_terms[s] += w * update.loss.group_terms[s];
            }
        }
        let grad = recover_gradient(&secret, &agg)?;
        let mut train_loss = loss.masked_loss;
        for (s, &coeff) in secret.group_coeffs().iter().enumerate() {
            train_loss -= coeff * loss.group_terms[s];
        }
        train_loss += 0.5 * secret.offset_energy() * loss.act_sum_sq;
        Ok(RecoveredRound { grad, train_loss, total_samples: total })
    }
}

/// Server state for one unmasked round; same collection discipline, no
/// secret.
#[derive(Debug)]
pub struct PlainRoundState {
    params: MlpParams,
    collector: RoundCollector<PlainUpdate>,
    finished: bool,
}

impl PlainRoundState {
    pub fn begin(
        round_id: u64,
        params: &MlpParams,
        client_ids: &[u64],
    ) -> Result<PlainRoundState> {
        Ok(PlainRoundState {
            params: params.clone(),
            collector: RoundCollector::new(round_id, client_ids)?,
            finished: false,
        })
    }

    pub fn round_id(&self) -> u64 {
        self.collector.round_id
    }

    pub fn accept(&mut self, update: PlainUpdate) -> Result<()> {
        update.validate(&self.params)?;
        self.collector.accept(update.client_id, update.round_id, update)
    }

    pub fn ready(&self) -> bool {
        self.collector.ready()
    }

    pub fn missing(&self) -> Vec<u64> {
        self.collector.missing()
    }

    /// Weighted aggregation of the plain uploads; refuses to run twice.
    pub fn finish(&mut self) -> Result<RecoveredRound> {
        if self.finished {
            return Err(Error::Protocol(format!(
                "round {} was already aggregated",
                self.collector.round_id
            )));
        }
        let updates = self.collector.take_sorted()?;
        self.finished = true;
        let total: u64 = updates.iter().map(|u| u.sample_count).sum();
        let mut grad = GradientSet::zeros_like(&self.params);
        let mut train_loss = 0.0;
        for update in &updates {
            let w = update.sample_count as f64 / total as f64;
            grad.axpy(w, &GradientSet::from_layers(update.grad.clone()))?;
            train_loss += w * update.loss;
        }
        Ok(RecoveredRound { grad, train_loss, total_samples: total })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub mode: RoundMode,
    pub train_loss: f64,
    /// Frobenius norm of the aggregated (recovered) gradient per layer.
    pub grad_norms: Vec<f64>,
    /// Wall-clock time of the round. Excluded from determinism comparisons.
    pub wall_ms: f64,
}

/// Everything a finished run hands back: final weights, the per-round log,
/// and the per-round aggregated gradients for auditing.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: MlpParams,
    pub records: Vec<RoundRecord>,
    pub round_gradients: Vec<GradientSet>,
}

/// Knobs for [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: RoundMode,
    pub rounds: u64,
    pub learning_rate: f64,
    pub noise: NoiseConfig,
    pub partition_groups: usize,
    pub run_seed: u64,
}

/// Drive a full federated run in-process: every round goes through the same
/// round-state machinery a networked server uses, with clients called
/// directly instead of over a transport.
pub fn run_training(
    initial: &MlpParams,
    clients: &[LocalClient],
    opts: &TrainOptions,
) -> Result<RunOutcome> {
    if clients.is_empty() {
        return Err(Error::Usage("training needs at least one client".into()));
    }
    if !(opts.learning_rate.is_finite() && opts.learning_rate > 0.0) {
        return Err(Error::Usage(format!("learning rate {} must be positive", opts.learning_rate)));
    }
    for c in clients {
        c.batch.validate()?;
    }
    let ids: Vec<u64> = clients.iter().map(|c| c.id).collect();
    let mut model = initial.clone();
    let mut records = Vec::with_capacity(opts.rounds as usize);
    let mut round_gradients = Vec::with_capacity(opts.rounds as usize);
    for round in 0..opts.rounds {
        let start = Instant::now();
        let result = match opts.mode {
            RoundMode::Masked => {
                let mut rng = mask_rng(opts.run_seed, round);
                let mut state = MaskedRoundState::begin(
                    round,
                    &model,
                    &opts.noise,
                    opts.partition_groups,
                    &ids,
                    &mut rng,
                )?;
                for client in clients {
                    state.accept(client.update_masked(round, state.masked_model())?)?;
                }
                state.recover()?
            }
            RoundMode::Plain => {
                let mut state = PlainRoundState::begin(round, &model, &ids)?;
                for client in clients {
                    state.accept(client.update_plain(round, &model)?)?;
                }
                state.finish()?
            }
        };
        model = model.apply_gradient(&result.grad, opts.learning_rate)?;
        records.push(RoundRecord {
            round,
            mode: opts.mode,
            train_loss: result.train_loss,
            grad_norms: result.grad.layer_norms(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        round_gradients.push(result.grad);
    }
    Ok(RunOutcome { params: model, records, round_gradients })
}
