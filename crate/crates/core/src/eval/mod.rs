//! Clustering learned representations and scoring them against labels.

mod kmeans;
mod metrics;

pub use kmeans::{kmeans, total_sum_of_squares, KMeansConfig, KMeansResult};
pub use metrics::{ari, clustering_accuracy, hungarian, nmi, Contingency};

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MscibModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub runs: usize,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            seed: 0,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Mean metrics over independent k-means runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    /// Labels of the lowest-inertia run.
    #[serde(skip)]
    pub labels: Vec<usize>,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub inertia: f64,
    pub runs: usize,
}

/// Seed of run `r` under master seed `seed`; distinct for distinct `r`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed ^ (run as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn evaluate_representation(
    points: &Array2<f64>,
    truth: &[usize],
    k: usize,
    config: &EvalConfig,
) -> Result<ClusterReport> {
    if truth.len() != points.nrows() {
        return Err(Error::shape("labels for representation", points.nrows(), truth.len()));
    }
    if config.runs == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one run".into()));
    }
    let mut report = ClusterReport {
        labels: Vec::new(),
        acc: 0.0,
        nmi: 0.0,
        ari: 0.0,
        inertia: 0.0,
        runs: config.runs,
    };
    let mut best = f64::INFINITY;
    for r in 0..config.runs {
        let res = kmeans(points, k, &config.kmeans, run_seed(config.seed, r))?;
        report.acc += clustering_accuracy(truth, &res.labels)?;
        report.nmi += nmi(truth, &res.labels)?;
        report.ari += ari(truth, &res.labels)?;
        report.inertia += res.inertia;
        if res.inertia < best {
            best = res.inertia;
            report.labels = res.labels;
        }
    }
    let runs = config.runs as f64;
    report.acc /= runs;
    report.nmi /= runs;
    report.ari /= runs;
    report.inertia /= runs;
    Ok(report)
}

/// Name of the raw input of view `m` (0-based).
pub fn raw_key(m: usize) -> String {
    format!("X^({})", m + 1)
}

/// Name of the encoding of view `m` (0-based).
pub fn view_key(m: usize) -> String {
    format!("Z^({})", m + 1)
}

pub const CONSISTENT_KEY: &str = "Z";

/// Reports for every raw view, every per-view posterior mean and `Z`,
/// in that order. `views` must be the (normalized) model inputs.
pub fn ablation_eval(
    model: &MscibModel,
    views: &[Array2<f64>],
    truth: &[usize],
    k: usize,
    config: &EvalConfig,
) -> Result<Vec<(String, ClusterReport)>> {
    let embeddings = model.view_embeddings(views)?;
    let mut out = Vec::with_capacity(2 * views.len() + 1);
    for (m, x) in views.iter().enumerate() {
        out.push((raw_key(m), evaluate_representation(x, truth, k, config)?));
    }
    for (m, e) in embeddings.iter().enumerate() {
        out.push((view_key(m), evaluate_representation(e, truth, k, config)?));
    }
    out.push((
        CONSISTENT_KEY.to_string(),
        evaluate_representation(&model.z, truth, k, config)?,
    ));
    Ok(out)
}
