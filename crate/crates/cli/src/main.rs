use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stgncde::checkpoint::Checkpoint;
use stgncde::config::{ConfigError, TrainConfig, CONFIG_KEYS};
use stgncde::data::{load_dataset, split_lengths, write_mask_csv, Dataset, DataError, INPUT_LEN};
use stgncde::model::Variant;
use stgncde::train::{
    evaluate, metrics_by_horizon, predict_windows, train_loop, write_log_csv, Evaluation, Experiment,
};
use stgncde::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Missing-observation rates accepted by `mask-eval`.
const MASK_RATE_GRID: [f64; 4] = [0.0, 0.1, 0.3, 0.5];

fn config_help() -> String {
    let mut out = String::from("Config keys (JSON object, flat namespace; override with --set key=value):\n");
    for (key, default, what) in CONFIG_KEYS {
        out.push_str(&format!("  {key:<18} default {default:<9} {what}\n"));
    }
    out
}

#[derive(Parser, Debug)]
#[command(name = "stgncde", version, about = "Traffic forecasting with graph neural controlled differential equations")]
#[command(after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set variant=spatial_only. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
#[command(after_help = config_help())]
enum Command {
    /// Train a model; writes checkpoint, training log, resolved config and test metrics.
    #[command(after_help = config_help())]
    Train(Common),
    /// Test-split metrics of a checkpoint, overall and per horizon.
    #[command(after_help = config_help())]
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (defaults to --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-split predictions of a checkpoint as CSV.
    #[command(after_help = config_help())]
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Irregular forecasting: drop a fraction of input steps per node and
    /// report metrics per rate and variant.
    #[command(name = "mask-eval", after_help = config_help())]
    MaskEval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated missing rates from {0, 0.1, 0.3, 0.5}.
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5])]
        rates: Vec<f64>,
        /// Comma-separated variants: full, temporal, spatial.
        #[arg(long, value_delimiter = ',', default_values_t = [Variant::Full, Variant::TemporalOnly, Variant::SpatialOnly])]
        variants: Vec<Variant>,
        /// Evaluate this checkpoint on masked test inputs instead of training
        /// one model per rate and variant.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-node prediction CSVs and a per-horizon error CSV for plotting.
    #[command(after_help = config_help())]
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated node ids (default: every node).
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<usize>,
        /// Forecast horizon (1..=12) written to the node CSVs.
        #[arg(long, default_value_t = 1)]
        horizon: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Error> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(TrainConfig::load(&common.config, &overrides)?)
}

fn load_data(cfg: &TrainConfig) -> Result<Dataset, Error> {
    let (Some(values), Some(meta)) = (&cfg.values_csv, &cfg.meta_json) else {
        return Err(ConfigError::Invalid("values_csv and meta_json must be set".into()).into());
    };
    Ok(load_dataset(values, meta)?)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_evaluation(path: &Path, eval: &Evaluation) -> Result<(), Error> {
    let per_horizon: Vec<_> = eval
        .per_horizon
        .iter()
        .enumerate()
        .map(|(h, m)| serde_json::json!({"horizon": h + 1, "mae": m.mae, "rmse": m.rmse, "mape": m.mape}))
        .collect();
    write_json(
        path,
        &serde_json::json!({"overall": eval.overall, "per_horizon": per_horizon}),
    )
}

fn log_evaluation(label: &str, eval: &Evaluation) {
    let m = eval.overall;
    log::info!("{label}: MAE {:.4}  RMSE {:.4}  MAPE {:.2}%", m.mae, m.rmse, m.mape);
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train(common) => cmd_train(&common),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(&common, checkpoint),
        Command::Predict { common, checkpoint } => cmd_predict(&common, checkpoint),
        Command::MaskEval {
            common,
            rates,
            variants,
            checkpoint,
        } => cmd_mask_eval(&common, &rates, &variants, checkpoint),
        Command::Export {
            common,
            checkpoint,
            nodes,
            horizon,
        } => cmd_export(&common, checkpoint, &nodes, horizon),
    }
}

fn cmd_train(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let dataset = load_data(&cfg)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("config.resolved.json"), &cfg)?;
    let exp = Experiment::new(&dataset, cfg.clone())?;
    log::info!(
        "{}: {} nodes, {} train / {} val / {} test windows, {} parameters",
        dataset.meta.name,
        exp.num_nodes(),
        exp.train.len(),
        exp.val.len(),
        exp.test.len(),
        exp.init_model().params.num_scalars()
    );
    let outcome = train_loop(&exp, |row| {
        log::info!(
            "epoch {:>3}  loss {:.4}  val MAE {:.4}  RMSE {:.4}  MAPE {:.2}%",
            row.epoch,
            row.train_loss,
            row.val.mae,
            row.val.rmse,
            row.val.mape
        );
    })?;
    write_log_csv(&outcome.log, &common.out.join("train_log.csv"))?;
    outcome.best.save(&common.out)?;
    let test = evaluate(&outcome.best.model, &exp.test, &exp.stats, &cfg)?;
    log::info!("best epoch {}", outcome.best.epoch);
    log_evaluation("test", &test);
    write_evaluation(&common.out.join("test_metrics.json"), &test)
}

/// Checkpoint plus the experiment it was trained on. The checkpoint's own
/// normalization statistics are used so results do not depend on refitting.
fn load_trained(common: &Common, checkpoint: Option<PathBuf>) -> Result<(Checkpoint, Experiment), Error> {
    let cfg = load_config(common)?;
    let dir = checkpoint.unwrap_or_else(|| common.out.clone());
    let ckpt = Checkpoint::load(&dir)?;
    let dataset = load_data(&cfg)?;
    let mut exp = Experiment::new(&dataset, cfg)?;
    let expected = exp.config.model_dims(exp.num_nodes(), exp.num_features());
    let found = ckpt.model.dims;
    if expected.num_nodes != found.num_nodes || expected.input_dim != found.input_dim {
        return Err(ConfigError::Invalid(format!(
            "checkpoint expects {} nodes × {} path channels, config and dataset give {} × {}",
            found.num_nodes, found.input_dim, expected.num_nodes, expected.input_dim
        ))
        .into());
    }
    if exp.stats != ckpt.stats {
        exp = Experiment::with_stats(&dataset, exp.config.clone(), ckpt.stats.clone())?;
    }
    Ok((ckpt, exp))
}

fn cmd_evaluate(common: &Common, checkpoint: Option<PathBuf>) -> Result<(), Error> {
    let (ckpt, exp) = load_trained(common, checkpoint)?;
    let eval = evaluate(&ckpt.model, &exp.test, &exp.stats, &exp.config)?;
    log_evaluation("test", &eval);
    for (h, m) in eval.per_horizon.iter().enumerate() {
        log::info!("  horizon {:>2}: MAE {:.4}  RMSE {:.4}  MAPE {:.2}%", h + 1, m.mae, m.rmse, m.mape);
    }
    create_dir(&common.out)?;
    write_evaluation(&common.out.join("eval_metrics.json"), &eval)
}

fn cmd_predict(common: &Common, checkpoint: Option<PathBuf>) -> Result<(), Error> {
    let (ckpt, exp) = load_trained(common, checkpoint)?;
    let (pred, target) = predict_windows(&ckpt.model, &exp.test, &exp.stats, &exp.config)?;
    create_dir(&common.out)?;
    let path = common.out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e.into()))?;
    let write_err = |e: csv::Error| io_error(&path, e.into());
    w.write_record(["window", "node", "horizon", "channel", "prediction", "truth"])
        .map_err(write_err)?;
    let shape = pred.shape().to_vec();
    let (v, s, m) = (shape[1], shape[2], shape[3]);
    for (i, (p, y)) in pred.data().iter().zip(target.data()).enumerate() {
        let window = i / (v * s * m);
        let node = (i / (s * m)) % v;
        let horizon = (i / m) % s + 1;
        let channel = i % m;
        w.write_record([
            window.to_string(),
            node.to_string(),
            horizon.to_string(),
            channel.to_string(),
            p.to_string(),
            y.to_string(),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    log::info!("wrote {} predictions to {}", pred.len(), path.display());
    Ok(())
}

fn check_rates(rates: &[f64]) -> Result<(), Error> {
    if let Some(r) = rates.iter().find(|r| !MASK_RATE_GRID.contains(r)) {
        return Err(ConfigError::Invalid(format!("missing rate {r} is not in {MASK_RATE_GRID:?}")).into());
    }
    Ok(())
}

fn cmd_mask_eval(
    common: &Common,
    rates: &[f64],
    variants: &[Variant],
    checkpoint: Option<PathBuf>,
) -> Result<(), Error> {
    check_rates(rates)?;
    let base = load_config(common)?;
    create_dir(&common.out)?;
    let mut rows = Vec::new();
    match checkpoint {
        Some(dir) => {
            let (ckpt, exp) = load_trained(common, Some(dir))?;
            for &rate in rates {
                let test = exp.test.clone().with_missing(rate, base.seed)?;
                let eval = evaluate(&ckpt.model, &test, &exp.stats, &exp.config)?;
                log_evaluation(&format!("rate {rate} {}", ckpt.model.variant.name()), &eval);
                rows.push((rate, ckpt.model.variant, eval.overall));
            }
        }
        None => {
            let dataset = load_data(&base)?;
            for &rate in rates {
                for &variant in variants {
                    let cfg = TrainConfig {
                        variant,
                        missing_rate: rate,
                        ..base.clone()
                    };
                    cfg.validate()?;
                    let exp = Experiment::new(&dataset, cfg.clone())?;
                    if let Some(mask) = exp.test.masks() {
                        let path = common.out.join(format!("mask_test_rate{rate}.csv"));
                        write_mask_csv(mask, exp.num_nodes(), INPUT_LEN, &path)?;
                    }
                    let outcome = train_loop(&exp, |row| {
                        log::debug!("rate {rate} {} epoch {} val MAE {:.4}", variant.name(), row.epoch, row.val.mae);
                    })?;
                    let eval = evaluate(&outcome.best.model, &exp.test, &exp.stats, &cfg)?;
                    log_evaluation(&format!("rate {rate} {}", variant.name()), &eval);
                    rows.push((rate, variant, eval.overall));
                }
            }
        }
    }
    let path = common.out.join("mask_eval.csv");
    let mut text = String::from("rate,variant,mae,rmse,mape\n");
    for (rate, variant, m) in &rows {
        text.push_str(&format!("{rate},{},{},{},{}\n", variant.name(), m.mae, m.rmse, m.mape));
    }
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn cmd_export(common: &Common, checkpoint: Option<PathBuf>, nodes: &[usize], horizon: usize) -> Result<(), Error> {
    let (ckpt, exp) = load_trained(common, checkpoint)?;
    let num_nodes = exp.num_nodes();
    if let Some(&bad) = nodes.iter().find(|&&n| n >= num_nodes) {
        return Err(ConfigError::Invalid(format!("node {bad} out of range 0..{num_nodes}")).into());
    }
    if !(1..=stgncde::data::HORIZON).contains(&horizon) {
        return Err(ConfigError::Invalid(format!("horizon {horizon} out of range 1..=12")).into());
    }
    let nodes: Vec<usize> = if nodes.is_empty() {
        (0..num_nodes).collect()
    } else {
        nodes.to_vec()
    };
    let (pred, target) = predict_windows(&ckpt.model, &exp.test, &exp.stats, &exp.config)?;
    create_dir(&common.out)?;

    let shape = pred.shape().to_vec();
    let (s, m) = (shape[2], shape[3]);
    let (train_len, val_len, _) = split_lengths(exp.series_len);
    let offset = train_len + val_len;
    for &node in &nodes {
        let path = common.out.join(format!("node_{node}.csv"));
        let mut text = String::from("t,truth,prediction\n");
        for (w, &start) in exp.test.starts().iter().enumerate() {
            // First output channel; the index is the absolute time step.
            let i = ((w * num_nodes + node) * s + (horizon - 1)) * m;
            let t = offset + start + INPUT_LEN + horizon - 1;
            text.push_str(&format!("{t},{},{}\n", target.data()[i], pred.data()[i]));
        }
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    }
    let eval = metrics_by_horizon(&pred, &target);
    let path = common.out.join("horizon_metrics.csv");
    let mut text = String::from("horizon,mae,rmse,mape\n");
    for (h, met) in eval.per_horizon.iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", h + 1, met.mae, met.rmse, met.mape));
    }
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    log::info!("exported {} node files and per-horizon metrics to {}", nodes.len(), common.out.display());
    Ok(())
}
