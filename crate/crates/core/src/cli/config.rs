//! Experiment configuration: `key = value` lines with dotted sections.
//!
//! ```text
//! seed = 7
//! output = runs/synthetic
//!
//! # either a manifest ...
//! data.manifest = data/manifest.txt
//! # ... or a synthetic section
//! synthetic.n_samples = 300
//! synthetic.n_clusters = 3
//! synthetic.view_dims = 10, 1000
//! synthetic.noise = 0.1, 0.5
//!
//! loss.tau = 1.0
//! train.epochs = 300
//! ```
//!
//! Every key has a default except the dataset source. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::eval::{EvalConfig, KMeansConfig};
use crate::kv;
use crate::model::ModelSpec;
use crate::mvdata::{Normalization, SyntheticSpec};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: line {line}: {message}")]
    Syntax {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("unknown key `{key}` (line {line})")]
    Unknown { key: String, line: usize },
    #[error("bad value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Architecture choices; view widths and `N` come from the data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelOptions {
    /// `None` means: the number of label classes (or the synthetic K).
    pub n_clusters: Option<usize>,
    pub latent_dim: usize,
    pub consistent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let d = ModelSpec::new(vec![1, 1], 1, 1);
        Self {
            n_clusters: None,
            latent_dim: d.latent_dim,
            consistent_dim: d.consistent_dim,
            encoder_hidden: d.encoder_hidden,
            head_hidden: d.head_hidden,
        }
    }
}

impl ModelOptions {
    pub fn spec(&self, view_dims: Vec<usize>, n_samples: usize, n_clusters: usize) -> ModelSpec {
        ModelSpec {
            view_dims,
            n_samples,
            latent_dim: self.latent_dim,
            consistent_dim: self.consistent_dim,
            n_clusters,
            encoder_hidden: self.encoder_hidden.clone(),
            head_hidden: self.head_hidden.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed: model initialization, batching, noise and evaluation.
    pub seed: u64,
    pub data: Option<DataSource>,
    pub normalization: Normalization,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            normalization: Normalization::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

struct Table {
    entries: BTreeMap<String, (String, usize)>,
}

impl Table {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                message: format!("{v:?}: {e}"),
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.take(key) else {
            return Ok(None);
        };
        if v.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.into(),
                    message: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }
}

fn require<T>(key: &str, v: Option<T>) -> Result<T, ConfigError> {
    v.ok_or_else(|| ConfigError::Missing(key.into()))
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Parses config text; relative `data.manifest` paths are resolved
    /// against `base` (the config file's directory).
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self, ConfigError> {
        let entries = kv::parse(text).map_err(|(line, message)| ConfigError::Syntax {
            path: origin.into(),
            line,
            message,
        })?;
        let mut t = Table {
            entries: entries
                .into_iter()
                .map(|e| (e.key, (e.value, e.line)))
                .collect(),
        };
        let mut c = ExperimentConfig::default();
        t.set("seed", &mut c.seed)?;
        if let Some(o) = t.take("output") {
            c.output = PathBuf::from(o);
        }

        if let Some(m) = t.take("data.manifest") {
            let p = PathBuf::from(m);
            c.data = Some(DataSource::Manifest(if p.is_absolute() { p } else { base.join(p) }));
        }
        if let Some(n) = t.take("data.normalization") {
            c.normalization = Normalization::from_name(&n).ok_or_else(|| ConfigError::Value {
                key: "data.normalization".into(),
                message: format!("{n:?} is not one of min-max, z-score, none"),
            })?;
        }
        let has_synthetic = t.entries.keys().any(|k| k.starts_with("synthetic."));
        if has_synthetic {
            if c.data.is_some() {
                return Err(ConfigError::Value {
                    key: "data.manifest".into(),
                    message: "give either a manifest or a synthetic section, not both".into(),
                });
            }
            c.data = Some(DataSource::Synthetic(parse_synthetic(&mut t, c.seed)?));
        }

        let m = &mut c.model;
        if let Some(k) = t.parse("model.clusters")? {
            m.n_clusters = Some(k);
        }
        t.set("model.latent_dim", &mut m.latent_dim)?;
        t.set("model.consistent_dim", &mut m.consistent_dim)?;
        if let Some(v) = t.list("model.encoder_hidden")? {
            m.encoder_hidden = v;
        }
        if let Some(v) = t.list("model.head_hidden")? {
            m.head_hidden = v;
        }

        let l = &mut c.train.loss;
        t.set("loss.lambda1", &mut l.lambda1)?;
        t.set("loss.lambda2", &mut l.lambda2)?;
        t.set("loss.beta", &mut l.beta)?;
        t.set("loss.tau", &mut l.tau)?;
        t.set("loss.gamma_scale", &mut l.gamma_scale)?;

        let tr = &mut c.train;
        t.set("train.pretrain_epochs", &mut tr.pretrain_epochs)?;
        t.set("train.epochs", &mut tr.train_epochs)?;
        t.set("train.batch_size", &mut tr.batch_size)?;
        t.set("train.pretrain_lr", &mut tr.pretrain_lr)?;
        t.set("train.lr", &mut tr.lr)?;
        t.set("train.eval_every", &mut tr.eval_every)?;
        t.set("train.convergence_window", &mut tr.convergence_window)?;
        t.set("train.convergence_threshold", &mut tr.convergence_threshold)?;

        let e = &mut tr.eval;
        t.set("eval.runs", &mut e.runs)?;
        t.set("eval.restarts", &mut e.kmeans.restarts)?;
        t.set("eval.max_iters", &mut e.kmeans.max_iters)?;
        t.set("eval.tol", &mut e.kmeans.tol)?;

        if let Some((key, (_, line))) = t.entries.into_iter().next() {
            return Err(ConfigError::Unknown { key, line });
        }
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Propagates the master seed to training and evaluation.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.train.eval.seed = seed;
    }

    /// Replaces the master seed, also for a synthetic dataset.
    pub fn override_seed(&mut self, seed: u64) {
        self.set_seed(seed);
        if let Some(DataSource::Synthetic(s)) = &mut self.data {
            s.seed = seed;
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                message: message.into(),
            })
        };
        let m = &self.model;
        if m.latent_dim == 0 || m.consistent_dim == 0 {
            return bad("model.latent_dim", "latent widths must be positive");
        }
        if m.encoder_hidden.contains(&0) || m.head_hidden.contains(&0) {
            return bad("model.encoder_hidden", "hidden widths must be positive");
        }
        if m.n_clusters == Some(0) {
            return bad("model.clusters", "must be at least 1");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1");
        }
        if self.train.eval.runs == 0 || self.train.eval.kmeans.restarts == 0 {
            return bad("eval.runs", "runs and restarts must be at least 1");
        }
        if let Err(e) = self.train.validate() {
            return bad("loss", &e.to_string());
        }
        Ok(())
    }

    /// The resolved configuration, every key spelled out; parsing it back
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("output", self.output.display().to_string());
        match &self.data {
            Some(DataSource::Manifest(p)) => line("data.manifest", p.display().to_string()),
            Some(DataSource::Synthetic(sy)) => {
                line("synthetic.n_samples", sy.n_samples.to_string());
                line("synthetic.n_clusters", sy.n_clusters.to_string());
                line("synthetic.latent_dim", sy.latent_dim.to_string());
                line("synthetic.view_dims", list_text(&sy.view_dims));
                line("synthetic.separation", sy.cluster_separation.to_string());
                line("synthetic.noise", list_text(&sy.noise_sigmas));
                line("synthetic.seed", sy.seed.to_string());
                line("synthetic.identity_projection", sy.identity_projection.to_string());
            }
            None => {}
        }
        line("data.normalization", self.normalization.name().to_string());
        let m = &self.model;
        if let Some(k) = m.n_clusters {
            line("model.clusters", k.to_string());
        }
        line("model.latent_dim", m.latent_dim.to_string());
        line("model.consistent_dim", m.consistent_dim.to_string());
        line("model.encoder_hidden", list_text(&m.encoder_hidden));
        line("model.head_hidden", list_text(&m.head_hidden));
        let l = &self.train.loss;
        line("loss.lambda1", l.lambda1.to_string());
        line("loss.lambda2", l.lambda2.to_string());
        line("loss.beta", l.beta.to_string());
        line("loss.tau", l.tau.to_string());
        line("loss.gamma_scale", l.gamma_scale.to_string());
        let t = &self.train;
        line("train.pretrain_epochs", t.pretrain_epochs.to_string());
        line("train.epochs", t.train_epochs.to_string());
        line("train.batch_size", t.batch_size.to_string());
        line("train.pretrain_lr", t.pretrain_lr.to_string());
        line("train.lr", t.lr.to_string());
        line("train.eval_every", t.eval_every.to_string());
        line("train.convergence_window", t.convergence_window.to_string());
        line("train.convergence_threshold", t.convergence_threshold.to_string());
        let e: &EvalConfig = &t.eval;
        let k: &KMeansConfig = &e.kmeans;
        line("eval.runs", e.runs.to_string());
        line("eval.restarts", k.restarts.to_string());
        line("eval.max_iters", k.max_iters.to_string());
        line("eval.tol", k.tol.to_string());
        s
    }

    /// SHA-256 of the resolved config without the `output` line, so that
    /// identical runs written to different directories share a hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output ="))
            .flat_map(|l| [l, "\n"])
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn is_autoencoder_only(&self) -> bool {
        self.train.loss.lambda1 == 0.0 && self.train.loss.lambda2 == 0.0
    }
}

fn parse_synthetic(t: &mut Table, seed: u64) -> Result<SyntheticSpec, ConfigError> {
    let n = t.parse("synthetic.n_samples")?;
    let n_samples = require("synthetic.n_samples", n)?;
    let k = t.parse("synthetic.n_clusters")?;
    let n_clusters = require("synthetic.n_clusters", k)?;
    let dims = t.list("synthetic.view_dims")?;
    let view_dims = require("synthetic.view_dims", dims)?;
    let noise = t.list("synthetic.noise")?;
    let noise_sigmas = require("synthetic.noise", noise)?;
    let mut spec = SyntheticSpec {
        n_samples,
        n_clusters,
        latent_dim: 8,
        view_dims,
        cluster_separation: 10.0,
        noise_sigmas,
        seed,
        identity_projection: false,
    };
    t.set("synthetic.latent_dim", &mut spec.latent_dim)?;
    t.set("synthetic.separation", &mut spec.cluster_separation)?;
    t.set("synthetic.seed", &mut spec.seed)?;
    t.set("synthetic.identity_projection", &mut spec.identity_projection)?;
    Ok(spec)
}
