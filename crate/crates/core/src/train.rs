//! L1 training with Adam, early stopping on validation MAE, and evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{DecayMode, LossSpace, TrainConfig};
use crate::data::{compute_metrics, split_6_2_2, Dataset, DataError, Metrics, NormStats, WindowBatch, WindowSet, HORIZON};
use crate::model::{ModelError, ModelParams, Stgncde};
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error("no {0} windows: the split is shorter than one input window plus horizon")]
    NoWindows(&'static str),
    #[error("dataset has {found} features but output_dim is {output_dim}")]
    OutputDim { found: usize, output_dim: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// True when the failure is numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Divergence { .. } | TrainError::Model(ModelError::Solver(SolverError::Divergence { .. }))
        )
    }
}

/// Mean absolute error over every entry, recorded on the tape.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and optional weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub mode: DecayMode,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams<Tensor>, lr: f64, weight_decay: f64, mode: DecayMode) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            weight_decay,
            mode,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<Tensor>, grads: &ModelParams<Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        let grads = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let mut gj = g[j];
                if self.mode == DecayMode::L2 {
                    gj += self.weight_decay * *theta;
                }
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if self.mode == DecayMode::Decoupled {
                    *theta -= self.lr * self.weight_decay * *theta;
                }
                *theta -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ModelParams<Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.named_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation MAE.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_mae: f64) -> Progress {
        if val_mae < self.best {
            self.best = val_mae;
            self.best_epoch = epoch;
            self.stale = 0;
            Progress::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Train/val/test windows with shared normalization.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: TrainConfig,
    /// Length of the full series the splits came from.
    pub series_len: usize,
    pub stats: NormStats,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Seed offsets so that each split draws an independent mask stream.
const MASK_STREAMS: [u64; 3] = [0x6d61_736b_0001, 0x6d61_736b_0002, 0x6d61_736b_0003];

impl Experiment {
    /// Splits 6:2:2 and normalizes with statistics of the training split.
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        let stats = NormStats::fit(&split_6_2_2(&dataset.series).train);
        Self::with_stats(dataset, config, stats)
    }

    /// Like [`Experiment::new`] but with given normalization statistics,
    /// e.g. those stored in a checkpoint.
    pub fn with_stats(dataset: &Dataset, config: TrainConfig, stats: NormStats) -> Result<Self, TrainError> {
        let features = dataset.meta.num_features;
        if config.output_dim > features {
            return Err(TrainError::OutputDim {
                found: features,
                output_dim: config.output_dim,
            });
        }
        let splits = split_6_2_2(&dataset.series);
        let rate = config.missing_rate;
        let make = |split: &Tensor, stream: u64, name: &'static str| -> Result<WindowSet, TrainError> {
            let set = WindowSet::new(split, &stats, config.output_dim)
                .with_missing(rate, config.seed ^ stream)?;
            if set.is_empty() {
                return Err(TrainError::NoWindows(name));
            }
            Ok(set)
        };
        let train = make(&splits.train, MASK_STREAMS[0], "train")?;
        let val = make(&splits.val, MASK_STREAMS[1], "validation")?;
        let test = make(&splits.test, MASK_STREAMS[2], "test")?;
        Ok(Self {
            series_len: dataset.series.rows(),
            stats,
            train,
            val,
            test,
            config,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.train.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.train.num_features()
    }

    pub fn init_model(&self) -> Stgncde {
        let dims = self.config.model_dims(self.num_nodes(), self.num_features());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        Stgncde::new(dims, self.config.variant, &mut rng)
    }
}

/// Constant tensors mapping normalized predictions back to data units.
fn denorm_constants(stats: &NormStats, shape: &[usize]) -> (Tensor, Tensor) {
    let m = *shape.last().expect("non-empty shape");
    let scale = Tensor::from_fn(shape, |i| stats.std[i % m]);
    let shift = Tensor::from_fn(shape, |i| stats.mean[i % m]);
    (scale, shift)
}

/// Records the loss of one batch. Returns the loss variable.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Stgncde,
    bound: &ModelParams<crate::autodiff::Var>,
    batch: &WindowBatch,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<Var, TrainError> {
    let paths = batch.control_paths(config.time_channel);
    let out = model.forward(tape, bound, &paths, &config.solver_config())?;
    let (pred, target) = match config.loss_space {
        LossSpace::Original => {
            let (scale, shift) = denorm_constants(stats, batch.targets.shape());
            let scale = tape.constant(scale);
            let shift = tape.constant(shift);
            let scaled = tape.mul(out, scale)?;
            let pred = tape.add(scaled, shift)?;
            (pred, tape.constant(batch.targets.clone()))
        }
        LossSpace::Normalized => (out, tape.constant(stats.zscore(&batch.targets))),
    };
    Ok(l1_loss(tape, pred, target)?)
}

/// Predictions for every window of a set, in original units, alongside the
/// targets. Both are `windows×|V|×S×M`.
pub fn predict_windows(
    model: &Stgncde,
    windows: &WindowSet,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<(Tensor, Tensor), TrainError> {
    let indices: Vec<usize> = (0..windows.len()).collect();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for chunk in indices.chunks(config.batch_size) {
        let batch = windows.batch(chunk);
        let out = model.predict(&batch.control_paths(config.time_channel), &config.solver_config())?;
        preds.extend(stats.denorm(&out).into_data());
        targets.extend(batch.targets.into_data());
    }
    let shape = [windows.len(), windows.num_nodes(), HORIZON, windows.output_dim()];
    Ok((Tensor::new(&shape, preds)?, Tensor::new(&shape, targets)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
}

/// Overall and per-horizon metrics of `windows×|V|×S×M` predictions.
pub fn metrics_by_horizon(pred: &Tensor, target: &Tensor) -> Evaluation {
    let shape = pred.shape();
    let (s, m) = (shape[2], shape[3]);
    let overall = compute_metrics(pred.data(), target.data());
    let per_horizon = (0..s)
        .map(|h| {
            let pick = |t: &Tensor| -> Vec<f64> {
                t.data()
                    .chunks_exact(s * m)
                    .flat_map(|node| node[h * m..(h + 1) * m].iter().copied())
                    .collect()
            };
            compute_metrics(&pick(pred), &pick(target))
        })
        .collect();
    Evaluation { overall, per_horizon }
}

pub fn evaluate(
    model: &Stgncde,
    windows: &WindowSet,
    stats: &NormStats,
    config: &TrainConfig,
) -> Result<Evaluation, TrainError> {
    let (pred, target) = predict_windows(model, windows, stats, config)?;
    Ok(metrics_by_horizon(&pred, &target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val.mae, self.val.rmse, self.val.mape, self.seconds
        )
    }
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{LOG_HEADER}").map_err(io)?;
    for row in log {
        writeln!(out, "{}", row.csv_row()).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// One pass over the training windows in the given order. Returns the mean
/// batch loss.
pub fn train_epoch(
    model: &mut Stgncde,
    optimizer: &mut Adam,
    exp: &Experiment,
    order: &[usize],
    epoch: usize,
) -> Result<f64, TrainError> {
    let cfg = &exp.config;
    let mut total = 0.0;
    let mut batches = 0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch = exp.train.batch(chunk);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let loss = batch_loss(&mut tape, model, &bound, &batch, &exp.stats, cfg)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TrainError::Divergence { epoch, step });
        }
        let mut grads = tape.backward(loss)?;
        let mut grads = bound.gradients(&mut grads);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        optimizer.step(&mut model.params, &grads);
        total += value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Full training run: shuffled mini-batches, validation after every epoch,
/// best-so-far parameters kept, early stop after `patience` stale epochs.
pub fn train_loop(
    exp: &Experiment,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let cfg = &exp.config;
    let mut model = exp.init_model();
    let mut optimizer = Adam::new(&model.params, cfg.lr, cfg.weight_decay, cfg.weight_decay_mode);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..exp.train.len()).collect();
    let mut log = Vec::new();
    let mut best = Checkpoint::new(cfg.clone(), &model, 0, f64::INFINITY, exp.stats.clone());
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let train_loss = train_epoch(&mut model, &mut optimizer, exp, &order, epoch)?;
        let val = evaluate(&model, &exp.val, &exp.stats, cfg)?.overall;
        let seconds = if cfg.record_timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let row = EpochLog {
            epoch,
            train_loss,
            val,
            seconds,
        };
        on_epoch(&row);
        log.push(row);
        let progress = stopper.observe(epoch, val.mae);
        if progress == Progress::Improved {
            best = Checkpoint::new(cfg.clone(), &model, epoch, val.mae, exp.stats.clone());
        }
        if progress == Progress::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        log,
        stopped_early,
    })
}
