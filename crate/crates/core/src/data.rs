//! Dataset ingestion, chronological splits, sliding windows, z-score
//! normalization, missing-value masks and forecast metrics.
//!
//! Series tensors are `steps×|V|×D`. CSV columns are node-major:
//! column `v·D + f` holds feature `f` of node `v` and is headed `node{v}_f{f}`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::spline::ControlPath;

/// Observations read per window (`N + 1`).
pub const INPUT_LEN: usize = 12;
/// Forecast horizon `S`.
pub const HORIZON: usize = 12;
/// Targets with `|y| <= MAPE_EPSILON` are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1e-1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid metadata: {source}")]
    Meta {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{what}: expected {expected}, found {found}")]
    Ingest {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse { row: usize, col: usize, value: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing rate {0} must lie in [0, 1)")]
    Rate(f64),
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Volume,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_nodes: usize,
    pub num_steps: usize,
    pub num_features: usize,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    pub value_type: ValueType,
}

fn default_interval() -> u32 {
    5
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_nodes == 0 || self.num_features == 0 {
            return Err(DataError::InvalidMeta("num_nodes and num_features must be positive".into()));
        }
        if self.num_steps <= INPUT_LEN + HORIZON {
            return Err(DataError::InvalidMeta(format!(
                "num_steps must exceed {}, got {}",
                INPUT_LEN + HORIZON,
                self.num_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `num_steps×|V|×D`
    pub series: Tensor,
}

pub fn load_meta(meta_json: &Path) -> Result<DatasetMeta, DataError> {
    let text = std::fs::read_to_string(meta_json).map_err(io_err(meta_json))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| DataError::Meta {
        path: meta_json.to_path_buf(),
        source,
    })?;
    meta.validate()?;
    Ok(meta)
}

pub fn load_dataset(values_csv: &Path, meta_json: &Path) -> Result<Dataset, DataError> {
    let meta = load_meta(meta_json)?;
    let file = File::open(values_csv).map_err(io_err(values_csv))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let cols = meta.num_nodes * meta.num_features;
    let header_cols = reader.headers()?.len();
    if header_cols != cols {
        return Err(DataError::Ingest {
            what: "CSV columns (num_nodes × num_features)".into(),
            expected: cols,
            found: header_cols,
        });
    }

    let mut data = Vec::with_capacity(meta.num_steps * cols);
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != cols {
            return Err(DataError::Ingest {
                what: format!("columns in row {rows}"),
                expected: cols,
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value = cell.trim().parse::<f64>().map_err(|_| DataError::Parse {
                row: rows,
                col,
                value: cell.to_string(),
            })?;
            data.push(value);
        }
        rows += 1;
    }
    if rows != meta.num_steps {
        return Err(DataError::Ingest {
            what: "CSV rows (num_steps)".into(),
            expected: meta.num_steps,
            found: rows,
        });
    }
    let series = Tensor::new(&[meta.num_steps, meta.num_nodes, meta.num_features], data)
        .expect("length checked above");
    Ok(Dataset { meta, series })
}

pub fn csv_header(num_nodes: usize, num_features: usize) -> Vec<String> {
    (0..num_nodes)
        .flat_map(|v| (0..num_features).map(move |f| format!("node{v}_f{f}")))
        .collect()
}

/// Writes the values CSV and metadata JSON for a dataset.
pub fn write_dataset(dataset: &Dataset, values_csv: &Path, meta_json: &Path) -> Result<(), DataError> {
    let meta = &dataset.meta;
    let file = File::create(values_csv).map_err(io_err(values_csv))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer.write_record(csv_header(meta.num_nodes, meta.num_features))?;
    let cols = meta.num_nodes * meta.num_features;
    for row in dataset.series.data().chunks_exact(cols) {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush().map_err(io_err(values_csv))?;
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    std::fs::write(meta_json, json + "\n").map_err(io_err(meta_json))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
}

/// Split lengths `⌊0.6L⌋`, `⌊0.2L⌋` and the remainder.
pub fn split_lengths(len: usize) -> (usize, usize, usize) {
    let train = len * 6 / 10;
    let val = len * 2 / 10;
    (train, val, len - train - val)
}

/// Contiguous chronological 6:2:2 split along the leading (time) axis.
pub fn split_6_2_2(series: &Tensor) -> Splits {
    let (train, val, _) = split_lengths(series.rows());
    let row = series.row_len();
    let data = series.data();
    let slice = |from: usize, to: usize| {
        let mut shape = series.shape().to_vec();
        shape[0] = to - from;
        Tensor::new(&shape, data[from * row..to * row].to_vec()).expect("slice of valid tensor")
    };
    Splits {
        train: slice(0, train),
        val: slice(train, train + val),
        test: slice(train + val, series.rows()),
    }
}

/// Start offsets of every stride-1 window that fits inside a split of
/// length `len`: `len - input_len - horizon + 1` of them.
pub fn window_starts(len: usize, input_len: usize, horizon: usize) -> Vec<usize> {
    let span = input_len + horizon;
    if len < span {
        return Vec::new();
    }
    (0..=len - span).collect()
}

/// Per-channel z-score statistics (population std, clamped to 1 when zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every step and node of a `steps×|V|×D` series.
    pub fn fit(series: &Tensor) -> Self {
        let d = *series.shape().last().expect("non-empty shape");
        let count = (series.len() / d) as f64;
        let mut mean = vec![0.0; d];
        for row in series.data().chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for row in series.data().chunks_exact(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Normalizes a tensor whose last axis is the channel axis.
    pub fn zscore(&self, x: &Tensor) -> Tensor {
        self.per_channel(x, |v, m, s| (v - m) / s)
    }

    pub fn denorm(&self, x: &Tensor) -> Tensor {
        self.per_channel(x, |v, m, s| v * s + m)
    }

    fn per_channel(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = *x.shape().last().expect("non-empty shape");
        assert!(d <= self.mean.len(), "tensor has more channels than the statistics");
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean[c], self.std[c]);
            }
        }
        out
    }
}

/// Per-window observation masks, `windows×|V|×INPUT_LEN`, `true` = observed.
///
/// For every window and node exactly `⌊rate·input_len⌋` time indices are
/// dropped (all channels of the node at once), drawn without replacement.
pub fn apply_missing_mask(
    num_windows: usize,
    num_nodes: usize,
    input_len: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<bool>, DataError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DataError::Rate(rate));
    }
    let drop = (rate * input_len as f64 + 1e-9).floor() as usize;
    let mut mask = vec![true; num_windows * num_nodes * input_len];
    if drop == 0 {
        return Ok(mask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node_mask in mask.chunks_exact_mut(input_len) {
        for i in sample(&mut rng, input_len, drop) {
            node_mask[i] = false;
        }
    }
    Ok(mask)
}

/// Writes `(window_index, node, time_index)` for every dropped observation.
pub fn write_mask_csv(
    mask: &[bool],
    num_nodes: usize,
    input_len: usize,
    path: &Path,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let w = |e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(out, "window_index,node,time_index").map_err(w)?;
    for (i, &observed) in mask.iter().enumerate() {
        if !observed {
            let window = i / (num_nodes * input_len);
            let node = (i / input_len) % num_nodes;
            let t = i % input_len;
            writeln!(out, "{window},{node},{t}").map_err(w)?;
        }
    }
    out.flush().map_err(w)
}

/// Batch of windows ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B×|V|×INPUT_LEN×D`, normalized
    pub inputs: Tensor,
    /// `B×|V|×HORIZON×M`, original units
    pub targets: Tensor,
    /// `B×|V|×INPUT_LEN`
    pub masks: Vec<bool>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Control paths for every window. Unobservable channels fall back to the
    /// training mean, which is 0 after normalization. With `time_channel`
    /// the observation time `t` is appended as one more channel, so the
    /// path is built from `(t_i, x_i)` pairs.
    pub fn control_paths(&self, time_channel: bool) -> Vec<ControlPath> {
        let shape = self.inputs.shape();
        let (nodes, len, d) = (shape[1], shape[2], shape[3]);
        let channels = d + usize::from(time_channel);
        let per = nodes * len * d;
        let fill = vec![0.0; channels];
        self.inputs
            .data()
            .chunks_exact(per)
            .zip(self.masks.chunks_exact(nodes * len))
            .map(|(window, mask)| {
                let data = if time_channel {
                    window
                        .chunks_exact(d)
                        .enumerate()
                        .flat_map(|(i, row)| std::iter::once((i % len) as f64).chain(row.iter().copied()))
                        .collect()
                } else {
                    window.to_vec()
                };
                let window = Tensor::new(&[nodes, len, channels], data).expect("window shape");
                ControlPath::build(&window, mask, &fill)
            })
            .collect()
    }
}

/// Windows over one split. Inputs are read from the normalized copy,
/// targets (the first `output_dim` channels) from the raw copy.
#[derive(Debug, Clone)]
pub struct WindowSet {
    raw: Tensor,
    normalized: Tensor,
    starts: Vec<usize>,
    masks: Option<Vec<bool>>,
    output_dim: usize,
}

impl WindowSet {
    pub fn new(split: &Tensor, stats: &NormStats, output_dim: usize) -> Self {
        let starts = window_starts(split.rows(), INPUT_LEN, HORIZON);
        Self {
            raw: split.clone(),
            normalized: stats.zscore(split),
            starts,
            masks: None,
            output_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn num_features(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn masks(&self) -> Option<&[bool]> {
        self.masks.as_deref()
    }

    /// Drops observations at `rate`; a rate of 0 leaves the set untouched.
    pub fn with_missing(mut self, rate: f64, seed: u64) -> Result<Self, DataError> {
        let mask = apply_missing_mask(self.len(), self.num_nodes(), INPUT_LEN, rate, seed)?;
        self.masks = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        Ok(self)
    }

    /// Raw `(input |V|×INPUT_LEN×D, target |V|×HORIZON×M)` of window `i`.
    pub fn window(&self, i: usize) -> (Tensor, Tensor) {
        let start = self.starts[i];
        (
            self.gather(&self.raw, start, INPUT_LEN, self.num_features()),
            self.gather(&self.raw, start + INPUT_LEN, HORIZON, self.output_dim),
        )
    }

    fn gather(&self, src: &Tensor, start: usize, len: usize, channels: usize) -> Tensor {
        let (v, d) = (self.num_nodes(), self.num_features());
        let data = src.data();
        let mut out = Vec::with_capacity(v * len * channels);
        for node in 0..v {
            for t in start..start + len {
                let base = (t * v + node) * d;
                out.extend_from_slice(&data[base..base + channels]);
            }
        }
        Tensor::new(&[v, len, channels], out).expect("window shape")
    }

    pub fn batch(&self, indices: &[usize]) -> WindowBatch {
        let (v, d, m) = (self.num_nodes(), self.num_features(), self.output_dim);
        let mut inputs = Vec::with_capacity(indices.len() * v * INPUT_LEN * d);
        let mut targets = Vec::with_capacity(indices.len() * v * HORIZON * m);
        let mut masks = Vec::with_capacity(indices.len() * v * INPUT_LEN);
        for &i in indices {
            let start = self.starts[i];
            inputs.extend(self.gather(&self.normalized, start, INPUT_LEN, d).into_data());
            targets.extend(self.gather(&self.raw, start + INPUT_LEN, HORIZON, m).into_data());
            match &self.masks {
                Some(all) => {
                    let per = v * INPUT_LEN;
                    masks.extend_from_slice(&all[i * per..(i + 1) * per]);
                }
                None => masks.extend(std::iter::repeat(true).take(v * INPUT_LEN)),
            }
        }
        let b = indices.len();
        WindowBatch {
            inputs: Tensor::new(&[b, v, INPUT_LEN, d], inputs).expect("batch shape"),
            targets: Tensor::new(&[b, v, HORIZON, m], targets).expect("batch shape"),
            masks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

pub fn compute_metrics(pred: &[f64], target: &[f64]) -> Metrics {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_count = 0usize;
    for (&p, &y) in pred.iter().zip(target) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() > MAPE_EPSILON {
            pct += (e / y).abs();
            pct_count += 1;
        }
    }
    Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: if pct_count == 0 {
            0.0
        } else {
            100.0 * pct / pct_count as f64
        },
    }
}

/// Synthetic ring of sensors:
/// `x_v(t) = sin(2π(t + 10v)/288) + 0.3·sin(2πt/36) + N(0, 0.05²)`.
pub fn synthetic_ring(num_nodes: usize, num_steps: usize, seed: u64) -> Dataset {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut data = Vec::with_capacity(num_steps * num_nodes);
    for t in 0..num_steps {
        let t = t as f64;
        for v in 0..num_nodes {
            let daily = (TAU * (t + 10.0 * v as f64) / 288.0).sin();
            let fast = 0.3 * (TAU * t / 36.0).sin();
            data.push(daily + fast + noise.sample(&mut rng));
        }
    }
    Dataset {
        meta: DatasetMeta {
            name: format!("synthetic-ring{num_nodes}"),
            num_nodes,
            num_steps,
            num_features: 1,
            interval_minutes: 5,
            value_type: ValueType::Volume,
        },
        series: Tensor::new(&[num_steps, num_nodes, 1], data).expect("series shape"),
    }
}
