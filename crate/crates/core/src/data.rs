//! Dataset ingestion, synthesis, splitting, normalization, and sharding.
//!
//! The pipeline is deliberately split-first: rows are partitioned into
//! train/validation/test by a seeded permutation, normalization statistics
//! are fitted on the training rows only, and the training rows are then
//! dealt to clients in nearly equal shards (IID, because the permutation
//! already mixed them). Every step is a pure function of `(input, seed)` so
//! a run can be replayed bit-for-bit from its manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::tensor::Vector;

/// A fully numeric dataset; categorical inputs are already one-hot expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_width: usize,
    pub target_width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Column roles for [`load_csv`]. Columns listed in `categorical_columns`
/// must also appear in `feature_columns`; they are expanded into one-hot
/// indicators over their observed values in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub target_columns: Vec<String>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
}

/// Feature normalization applied after the train split is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Leave features as loaded.
    None,
    /// Per-feature map to `[0, 1]` using train-split min/max; constant
    /// features map to 0.
    MinMax,
    /// Per-feature standardization using train-split mean/std; constant
    /// features map to 0.
    ZScore,
}

/// Per-feature statistics actually used for normalization, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub kind: Normalization,
    /// `(min, max)` pairs for min-max, `(mean, std)` pairs for z-score,
    /// empty for no normalization.
    pub per_feature: Vec<(f64, f64)>,
}

/// Row shares for the three splits; the short form of "8:1:1".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> SplitRatios {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if !(self.train > 0.0 && self.val >= 0.0 && self.test >= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!(
                "split ratios {self:?} must be nonnegative with a positive train share and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Split datasets with the row indices that produced them, so manifests can
/// record exactly which rows went where.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub stats: NormStats,
}

/// Which training rows each client owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub assignments: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn client_count(&self) -> usize {
        self.assignments.len()
    }

    /// Materialize client `k`'s samples from the training split.
    pub fn shard(&self, train: &Dataset, k: usize) -> Vec<Sample> {
        self.assignments[k].iter().map(|&i| train.samples[i].clone()).collect()
    }
}

/// Read a CSV file into an unnormalized dataset according to the schema.
///
/// Numeric cells must parse as finite `f64`; cells of categorical columns
/// may hold arbitrary strings and become one-hot indicator features (one per
/// observed value, in sorted value order, appended after the numeric
/// features in schema order).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &String| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingestion(format!("column {name:?} not found in {headers:?}")))
    };
    for cat in &schema.categorical_columns {
        if !schema.feature_columns.contains(cat) {
            return Err(Error::Usage(format!(
                "categorical column {cat:?} is not listed as a feature column"
            )));
        }
    }
    let feature_idx: Vec<usize> =
        schema.feature_columns.iter().map(col_index).collect::<Result<_>>()?;
    let target_idx: Vec<usize> =
        schema.target_columns.iter().map(col_index).collect::<Result<_>>()?;
    if target_idx.is_empty() {
        return Err(Error::Usage("schema lists no target columns".into()));
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingestion(format!("row {}: {e}", line + 2)))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no data rows", path.display())));
    }

    // Observed category values per categorical column, sorted for a
    // deterministic one-hot layout.
    let mut categories: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for cat in &schema.categorical_columns {
        let idx = col_index(cat)?;
        let mut values: Vec<String> = rows.iter().map(|r| r[idx].clone()).collect();
        values.sort();
        values.dedup();
        categories.insert(cat.clone(), values);
    }

    let parse_cell = |row: usize, col: &str, cell: &str| -> Result<f64> {
        let value: f64 = cell.parse().map_err(|_| {
            Error::Ingestion(format!("row {row}, column {col:?}: {cell:?} is not numeric"))
        })?;
        if !value.is_finite() {
            return Err(Error::Ingestion(format!(
                "row {row}, column {col:?}: non-finite value {cell:?}"
            )));
        }
        Ok(value)
    };

    let mut samples = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let csv_row = r + 2; // 1-based plus header, for messages
        let mut features = Vec::new();
        for (name, &idx) in schema.feature_columns.iter().zip(&feature_idx) {
            if let Some(values) = categories.get(name) {
                for v in values {
                    features.push(if &row[idx] == v { 1.0 } else { 0.0 });
                }
            } else {
                features.push(parse_cell(csv_row, name, &row[idx])?);
            }
        }
        let mut target = Vec::new();
        for (name, &idx) in schema.target_columns.iter().zip(&target_idx) {
            target.push(parse_cell(csv_row, name, &row[idx])?);
        }
        samples.push(Sample {
            features: Vector::from_data(features)
                .map_err(|e| Error::Ingestion(format!("row {csv_row}: {e}")))?,
            target: Vector::from_data(target)
                .map_err(|e| Error::Ingestion(format!("row {csv_row}: {e}")))?,
        });
    }
    let feature_width = samples[0].features.len();
    let target_width = samples[0].target.len();
    Ok(Dataset { samples, feature_width, target_width })
}

/// Write a dataset to CSV with generated headers `f0..`, `t0..`. Floats are
/// printed in shortest round-trip form, so load -> write -> load is exact.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let headers: Vec<String> = (0..ds.feature_width)
        .map(|i| format!("f{i}"))
        .chain((0..ds.target_width).map(|i| format!("t{i}")))
        .collect();
    writeln!(file, "{}", headers.join(","))?;
    for s in &ds.samples {
        let cells: Vec<String> = s
            .features
            .as_slice()
            .iter()
            .chain(s.target.as_slice())
            .map(|v| format!("{v}"))
            .collect();
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Schema matching [`write_csv`] output for a dataset of this shape.
pub fn generated_schema(feature_width: usize, target_width: usize) -> CsvSchema {
    CsvSchema {
        feature_columns: (0..feature_width).map(|i| format!("f{i}")).collect(),
        target_columns: (0..target_width).map(|i| format!("t{i}")).collect(),
        categorical_columns: Vec::new(),
    }
}

/// Split rows by a seeded permutation, then fit the requested normalization
/// on the training rows only and apply it to all three splits.
pub fn split_and_normalize(
    ds: &Dataset,
    ratios: SplitRatios,
    norm: Normalization,
    rng: &mut impl Rng,
) -> Result<DataSplits> {
    ratios.validate()?;
    if ds.is_empty() {
        return Err(Error::Ingestion("cannot split an empty dataset".into()));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = (n as f64 * ratios.val).floor() as usize;
    let n_test = (n as f64 * ratios.test).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Ingestion(format!("split of {n} rows leaves no training rows")));
    }
    let train_indices = order[..n_train].to_vec();
    let val_indices = order[n_train..n_train + n_val].to_vec();
    let test_indices = order[n_train + n_val..].to_vec();

    let stats = fit_stats(ds, &train_indices, norm);
    let take = |indices: &[usize]| -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| apply_stats(&ds.samples[i], &stats))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, feature_width: ds.feature_width, target_width: ds.target_width })
    };
    Ok(DataSplits {
        train: take(&train_indices)?,
        val: take(&val_indices)?,
        test: take(&test_indices)?,
        train_indices,
        val_indices,
        test_indices,
        stats,
    })
}

fn fit_stats(ds: &Dataset, train_indices: &[usize], kind: Normalization) -> NormStats {
    let per_feature = match kind {
        Normalization::None => Vec::new(),
        Normalization::MinMax => (0..ds.feature_width)
            .map(|f| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &i in train_indices {
                    let v = ds.samples[i].features.get(f);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            })
            .collect(),
        Normalization::ZScore => (0..ds.feature_width)
            .map(|f| {
                let n = train_indices.len() as f64;
                let mean = train_indices.iter().map(|&i| ds.samples[i].features.get(f)).sum::<f64>() / n;
                let var = train_indices
                    .iter()
                    .map(|&i| {
                        let d = ds.samples[i].features.get(f) - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                (mean, var.sqrt())
            })
            .collect(),
    };
    NormStats { kind, per_feature }
}

fn apply_stats(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    let features = match stats.kind {
        Normalization::None => sample.features.clone(),
        Normalization::MinMax => Vector::from_fn(sample.features.len(), |f| {
            let (lo, hi) = stats.per_feature[f];
            if hi > lo {
                (sample.features.get(f) - lo) / (hi - lo)
            } else {
                0.0
            }
        }),
        Normalization::ZScore => Vector::from_fn(sample.features.len(), |f| {
            let (mean, std) = stats.per_feature[f];
            if std > 0.0 {
                (sample.features.get(f) - mean) / std
            } else {
                0.0
            }
        }),
    };
    Ok(Sample { features, target: sample.target.clone() })
}

/// Deal `train_len` rows to `k` clients: seeded permutation, contiguous
/// chunks, sizes differing by at most one. Errors if any client would be
/// left without samples.
pub fn shard(train_len: usize, k: usize, rng: &mut impl Rng) -> Result<ShardPlan> {
    if k == 0 {
        return Err(Error::Usage("client count must be at least 1".into()));
    }
    if k > train_len {
        return Err(Error::Usage(format!(
            "cannot shard {train_len} training rows across {k} clients with at least one row each"
        )));
    }
    let mut order: Vec<usize> = (0..train_len).collect();
    for i in (1..train_len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = train_len / k;
    let extra = train_len % k;
    let mut assignments = Vec::with_capacity(k);
    let mut cursor = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        assignments.push(order[cursor..cursor + len].to_vec());
        cursor += len;
    }
    Ok(ShardPlan { assignments })
}

/// Configuration for the synthetic Gaussian-cluster classification set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassConfig {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Scale of the class-mean draw; larger means better-separated clusters.
    pub separation: f64,
    /// Within-cluster standard deviation.
    pub cluster_std: f64,
}

/// Gaussian clusters with one-hot targets. Class labels cycle, so counts are
/// balanced within one; class means are drawn first, then samples in order,
/// making the whole dataset a deterministic function of the RNG stream.
pub fn synth_classification(cfg: &SynthClassConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if cfg.n_classes < 2 || cfg.n_features == 0 || cfg.n_samples < cfg.n_classes {
        return Err(Error::Usage(format!("degenerate synthetic classification config {cfg:?}")));
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.n_features).map(|_| cfg.separation * unit.sample(rng)).collect())
        .collect();
    let samples = (0..cfg.n_samples)
        .map(|i| {
            let class = i % cfg.n_classes;
            let features = Vector::from_fn(cfg.n_features, |f| {
                means[class][f] + cfg.cluster_std * unit.sample(rng)
            });
            let target = Vector::from_fn(cfg.n_classes, |c| if c == class { 1.0 } else { 0.0 });
            Sample { features, target }
        })
        .collect();
    Ok(Dataset { samples, feature_width: cfg.n_features, target_width: cfg.n_classes })
}

/// Configuration for the synthetic linear-map regression set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRegConfig {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_targets: usize,
    /// Standard deviation of the additive observation noise.
    pub noise_std: f64,
}

/// Targets are a planted linear map of standard-normal features plus noise.
pub fn synth_regression(cfg: &SynthRegConfig, rng: &mut impl Rng) -> Result<Dataset> {
    if cfg.n_samples == 0 || cfg.n_features == 0 || cfg.n_targets == 0 {
        return Err(Error::Usage(format!("degenerate synthetic regression config {cfg:?}")));
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let scale = 1.0 / (cfg.n_features as f64).sqrt();
    let map: Vec<Vec<f64>> = (0..cfg.n_targets)
        .map(|_| (0..cfg.n_features).map(|_| scale * unit.sample(rng)).collect())
        .collect();
    let samples = (0..cfg.n_samples)
        .map(|_| {
            let features = Vector::from_fn(cfg.n_features, |_| unit.sample(rng));
            let target = Vector::from_fn(cfg.n_targets, |t| {
                let clean: f64 =
                    map[t].iter().zip(features.as_slice()).map(|(a, b)| a * b).sum();
                clean + cfg.noise_std * unit.sample(rng)
            });
            Sample { features, target }
        })
        .collect();
    Ok(Dataset { samples, feature_width: cfg.n_features, target_width: cfg.n_targets })
}
