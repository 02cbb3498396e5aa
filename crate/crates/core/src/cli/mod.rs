//! Command-line front end: `generate`, `train`, `eval`, `embed`.

mod config;

pub use config::{ConfigError, DataSource, ExperimentConfig, ModelOptions};

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde_json::{json, Map, Value};

use crate::error::{DataError, Error};
use crate::eval::{ablation_eval, ClusterReport, CONSISTENT_KEY};
use crate::model::MscibModel;
use crate::mvdata::{
    generate_synthetic, load_dataset, normalize_views, write_dataset, write_matrix, MultiViewDataset,
};
use crate::network::Checkpoint;
use crate::train::{TrainHistory, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";

#[derive(Debug, Parser)]
#[command(name = "mscib", version, about = "Multi-view clustering with a consistent representation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (`key = value` lines)
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed (also the synthetic data seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `output`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset of the config as view files, labels and a manifest
    Generate(Common),
    /// Pretrain and train; writes a checkpoint, the per-epoch log and metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier `train`
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Cluster every representation of a trained model
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export `Z` or a per-view posterior mean `Z^(m)` as a matrix file
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `Z`, or `Z^(m)` / `Zm` for view m (1-based)
        #[arg(long, default_value = "Z")]
        which: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 config, 3 data (including files and checkpoints), 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::NonFinite { .. } | Error::Diverged { .. } => 4,
                Error::InvalidArgument(_) => 2,
                Error::Data(_) | Error::Checkpoint(_) | Error::Shape { .. } | Error::Io(_) => 3,
            },
        }
    }
}

/// Parses arguments and runs the command. Progress lines go to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli.command, stdout)
}

pub fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Generate(c) => {
            let (cfg, out) = resolve(&c)?;
            cmd_generate(&cfg, &out).map(|_| ())
        }
        Command::Train { common, resume } => {
            let (cfg, out) = resolve(&common)?;
            cmd_train(&cfg, &out, resume.as_deref(), stdout).map(|_| ())
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            cmd_eval(&cfg, &checkpoint, &out).map(|_| ())
        }
        Command::Embed {
            common,
            checkpoint,
            which,
        } => {
            let (cfg, out) = resolve(&common)?;
            cmd_embed(&cfg, &checkpoint, &which, &out).map(|_| ())
        }
    }
}

fn resolve(c: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    let out = cfg.output.clone();
    Ok((cfg, out))
}

/// Raw dataset named by the config.
pub fn load_raw(cfg: &ExperimentConfig) -> Result<MultiViewDataset, CliError> {
    match &cfg.data {
        Some(DataSource::Manifest(p)) => Ok(load_dataset(p)?),
        Some(DataSource::Synthetic(s)) => Ok(generate_synthetic(s)?),
        None => Err(ConfigError::Missing("data.manifest".into()).into()),
    }
}

/// Dataset as the model sees it (normalized).
pub fn load_inputs(cfg: &ExperimentConfig) -> Result<MultiViewDataset, CliError> {
    Ok(normalize_views(&load_raw(cfg)?, cfg.normalization))
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let Some(DataSource::Synthetic(spec)) = &cfg.data else {
        return Err(ConfigError::Missing("synthetic.n_samples".into()).into());
    };
    let ds = generate_synthetic(spec)?;
    Ok(write_dataset(&ds, out)?)
}

fn n_clusters(cfg: &ExperimentConfig, ds: &MultiViewDataset) -> Result<usize, CliError> {
    if let Some(k) = cfg.model.n_clusters {
        return Ok(k);
    }
    if let Some(DataSource::Synthetic(s)) = &cfg.data {
        return Ok(s.n_clusters);
    }
    ds.n_classes()
        .ok_or_else(|| ConfigError::Missing("model.clusters".into()).into())
}

struct Tee<'a> {
    a: &'a mut dyn Write,
    b: fs::File,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}

/// Artifacts of a `train` run.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: MscibModel,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: Option<PathBuf>,
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<TrainOutput, CliError> {
    let data = load_inputs(cfg)?;
    let k = n_clusters(cfg, &data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;

    let mut trainer = match resume {
        Some(p) => Trainer::load_checkpoint(p, cfg.train)?,
        None => {
            let spec = cfg.model.spec(data.dims(), data.n_samples(), k);
            Trainer::new(MscibModel::init(spec, cfg.seed)?, cfg.train)?
        }
    };
    let log_path = out.join(LOG_FILE);
    let log_file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let mut tee = Tee {
        a: stdout,
        b: log_file,
    };
    trainer.run(&data, &mut tee)?;
    tee.flush()?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.save_checkpoint(&checkpoint)?;
    let epochs = trainer.train_epochs_done();
    let (model, history) = trainer.into_parts();

    let metrics = match data.labels() {
        Some(labels) => {
            let table = ablation_eval(&model, data.views(), labels, k, &cfg.train.eval)?;
            let path = out.join(METRICS_FILE);
            fs::write(&path, metrics_json(cfg, epochs, &table))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutput {
        model,
        history,
        checkpoint,
        log: log_path,
        metrics,
    })
}

fn load_model(path: &Path) -> Result<MscibModel, CliError> {
    Ok(MscibModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = MscibModel::from_checkpoint(&ck)?;
    let data = load_inputs(cfg)?;
    model.check_views(data.views())?;
    if data.n_samples() != model.z.nrows() {
        return Err(Error::shape("samples in dataset", model.z.nrows(), data.n_samples()).into());
    }
    let labels = data.labels().ok_or_else(|| {
        CliError::Core(DataError::Invalid("labels are required for eval".into()).into())
    })?;
    let table = ablation_eval(&model, data.views(), labels, model.n_clusters(), &cfg.train.eval)?;
    let epochs = ck
        .meta("train.train_done")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    fs::create_dir_all(out)?;
    let path = out.join(EVAL_METRICS_FILE);
    fs::write(&path, metrics_json(cfg, epochs, &table))?;
    Ok(path)
}

/// 0-based view index for `Z^(m)` / `Zm`, or `None` for `Z`.
pub fn parse_which(which: &str, n_views: usize) -> Result<Option<usize>, CliError> {
    if which == CONSISTENT_KEY {
        return Ok(None);
    }
    let inner = which
        .strip_prefix("Z^(")
        .and_then(|s| s.strip_suffix(')'))
        .or_else(|| which.strip_prefix('Z'));
    match inner.and_then(|s| s.parse::<usize>().ok()) {
        Some(m) if (1..=n_views).contains(&m) => Ok(Some(m - 1)),
        _ => Err(CliError::Usage(format!(
            "unknown representation {which:?}; expected Z or Z^(1)..Z^({n_views})"
        ))),
    }
}

pub fn cmd_embed(cfg: &ExperimentConfig, checkpoint: &Path, which: &str, out: &Path) -> Result<PathBuf, CliError> {
    let model = load_model(checkpoint)?;
    let view = parse_which(which, model.n_views())?;
    let matrix: Array2<f64> = match view {
        None => model.z.clone(),
        Some(m) => {
            let data = load_inputs(cfg)?;
            model.view_embeddings(data.views())?.swap_remove(m)
        }
    };
    fs::create_dir_all(out)?;
    let name = match view {
        None => "embedding_Z.csv".to_string(),
        Some(m) => format!("embedding_Z{}.csv", m + 1),
    };
    let path = out.join(name);
    write_matrix(&path, &matrix)?;
    Ok(path)
}

/// `{representation: {acc, nmi, ari, inertia, runs}, ..., "metadata": {...}}`
pub fn metrics_json(cfg: &ExperimentConfig, epochs: usize, table: &[(String, ClusterReport)]) -> String {
    let mut map = Map::new();
    for (key, r) in table {
        map.insert(
            key.clone(),
            serde_json::to_value(r).expect("report serializes"),
        );
    }
    map.insert(
        "metadata".into(),
        json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "pretrain_epochs": cfg.train.pretrain_epochs,
            "epochs": epochs,
            "objective": if cfg.is_autoencoder_only() { "autoencoder-only" } else { "mscib" },
        }),
    );
    let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("json");
    text.push('\n');
    text
}

/// Parses a metrics file written by `train` or `eval`.
pub fn read_metrics(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        _ => Err(DataError::Invalid(format!("{} is not a metrics object", path.display())).into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn which_names() {
        assert_eq!(parse_which("Z", 2).unwrap(), None);
        assert_eq!(parse_which("Z^(2)", 2).unwrap(), Some(1));
        assert_eq!(parse_which("Z1", 2).unwrap(), Some(0));
        assert!(parse_which("Z^(9)", 2).is_err());
        assert!(parse_which("Z^(0)", 2).is_err());
        assert!(parse_which("X", 2).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(ConfigError::Missing("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(DataError::Invalid("x".into())).exit_code(), 3);
        let e = CliError::Core(Error::NonFinite { term: "sem".into() });
        assert_eq!(e.exit_code(), 4);
    }
}
