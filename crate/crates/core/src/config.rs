//! Run configuration: one JSON document pins an entire run.
//!
//! Everything a run needs — data source, model shape, federation size,
//! masking parameters, transport, output paths — lives in [`RunConfig`].
//! Two processes (or one process twice) given the same document and seed
//! reproduce the same dataset, the same shards, the same initial weights,
//! and the same round-by-round numbers; that is what lets a TCP client
//! rebuild its own shard locally instead of receiving data over the wire.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, shard, split_and_normalize, synth_classification, synth_regression, CsvSchema,
    Dataset, DataSplits, Normalization, ShardPlan, SplitRatios, SynthClassConfig, SynthRegConfig,
};
use crate::error::{Error, Result};
use crate::model::{LayerDims, MlpParams};
use crate::perturb::NoiseConfig;
use crate::server::{
    data_rng, init_rng, BatchPolicy, LocalClient, RoundMode, TrainOptions,
};

/// Where the training rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    SynthClassification {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        separation: f64,
        cluster_std: f64,
    },
    SynthRegression {
        n_samples: usize,
        n_features: usize,
        n_targets: usize,
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

/// How server and clients talk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportConfig {
    InProcess,
    Tcp {
        /// Server listen address / client connect address, e.g.
        /// `127.0.0.1:7700`.
        addr: String,
        #[serde(default = "default_handshake_timeout_ms")]
        handshake_timeout_ms: u64,
        #[serde(default = "default_round_timeout_ms")]
        round_timeout_ms: u64,
    },
}

fn default_handshake_timeout_ms() -> u64 {
    10_000
}

fn default_round_timeout_ms() -> u64 {
    120_000
}

fn default_split() -> SplitRatios {
    SplitRatios::default()
}

fn default_normalization() -> Normalization {
    Normalization::None
}

fn default_transport() -> TransportConfig {
    TransportConfig::InProcess
}

/// The complete, serializable description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RoundMode,
    pub dataset: DatasetConfig,
    /// Layer widths `n_0..n_L`; `n_0` and `n_L` must match the dataset's
    /// feature and target widths.
    pub dims: Vec<usize>,
    pub clients: usize,
    pub rounds: u64,
    pub learning_rate: f64,
    pub batch: BatchPolicy,
    /// Coefficient group count; defaults to the output width (one group per
    /// output coordinate).
    #[serde(default)]
    pub partition_groups: Option<usize>,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitRatios,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_transport")]
    pub transport: TransportConfig,
    /// Where to write the per-round metrics table; omit to skip.
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
    /// Where to write the run manifest; omit to skip.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

/// A run made concrete: data dealt, weights initialized, clients built.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub initial: MlpParams,
    pub clients: Vec<LocalClient>,
    pub splits: DataSplits,
    pub plan: ShardPlan,
}

impl RunConfig {
    /// Read and parse a config file. Unreadable files are I/O errors;
    /// unparseable content is a usage error naming the offending field.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate a config from JSON text.
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dims(&self) -> Result<LayerDims> {
        LayerDims::new(self.dims.clone())
    }

    /// Group count after applying the default (one group per output).
    pub fn effective_partition_groups(&self) -> Result<usize> {
        let n_out = self.dims()?.output_width();
        match self.partition_groups {
            None => Ok(n_out),
            Some(g) if g >= 1 && g <= n_out => Ok(g),
            Some(g) => Err(Error::Usage(format!(
                "partition_groups {g} must lie in 1..={n_out} for {n_out} outputs"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        self.effective_partition_groups()?;
        self.noise.validate()?;
        self.batch.validate()?;
        if self.clients == 0 {
            return Err(Error::Usage("clients must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Usage("rounds must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Usage(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        match &self.dataset {
            DatasetConfig::SynthClassification { n_features, n_classes, .. } => {
                if *n_features != dims.input_width() || *n_classes != dims.output_width() {
                    return Err(Error::Usage(format!(
                        "dims {:?} do not fit a dataset with {n_features} features and \
                         {n_classes} classes",
                        self.dims
                    )));
                }
            }
            DatasetConfig::SynthRegression { n_features, n_targets, .. } => {
                if *n_features != dims.input_width() || *n_targets != dims.output_width() {
                    return Err(Error::Usage(format!(
                        "dims {:?} do not fit a dataset with {n_features} features and \
                         {n_targets} targets",
                        self.dims
                    )));
                }
            }
            // CSV widths are only known after loading; checked in prepare().
            DatasetConfig::Csv { .. } => {}
        }
        Ok(())
    }

    /// Materialize the dataset (synthesis consumes the head of the data RNG
    /// stream; CSV loading consumes none).
    pub fn build_dataset(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::SynthClassification {
                n_samples,
                n_features,
                n_classes,
                separation,
                cluster_std,
            } => synth_classification(
                &SynthClassConfig {
                    n_samples: *n_samples,
                    n_features: *n_features,
                    n_classes: *n_classes,
                    separation: *separation,
                    cluster_std: *cluster_std,
                },
                rng,
            ),
            DatasetConfig::SynthRegression { n_samples, n_features, n_targets, noise_std } => {
                synth_regression(
                    &SynthRegConfig {
                        n_samples: *n_samples,
                        n_features: *n_features,
                        n_targets: *n_targets,
                        noise_std: *noise_std,
                    },
                    rng,
                )
            }
            DatasetConfig::Csv { path, schema } => load_csv(path, schema),
        }
    }

    /// Run the full deterministic pipeline: dataset, split/normalize, shard,
    /// client construction, weight initialization.
    pub fn prepare(&self) -> Result<PreparedRun> {
        self.validate()?;
        let dims = self.dims()?;
        let mut rng = data_rng(self.seed);
        let dataset = self.build_dataset(&mut rng)?;
        if dataset.feature_width != dims.input_width()
            || dataset.target_width != dims.output_width()
        {
            return Err(Error::Usage(format!(
                "dims {:?} do not fit the loaded dataset ({} features, {} targets)",
                self.dims, dataset.feature_width, dataset.target_width
            )));
        }
        let splits = split_and_normalize(&dataset, self.split, self.normalization, &mut rng)?;
        let plan = shard(splits.train.len(), self.clients, &mut rng)?;
        let clients = (0..self.clients)
            .map(|c| {
                LocalClient::new(c as u64, plan.shard(&splits.train, c), self.batch, self.seed)
            })
            .collect();
        let initial = MlpParams::init_normal(dims, &mut init_rng(self.seed));
        Ok(PreparedRun { initial, clients, splits, plan })
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            mode: self.mode,
            rounds: self.rounds,
            learning_rate: self.learning_rate,
            noise: self.noise.clone(),
            partition_groups: self.effective_partition_groups()?,
            run_seed: self.seed,
        })
    }
}
