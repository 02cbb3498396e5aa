//! Lloyd's k-means with k-means++ seeding and best-of-restarts selection.

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Final inertia of every restart, in execution order.
    pub restart_inertias: Vec<f64>,
    /// Inertia after each assignment step of the selected restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus<R: Rng + ?Sized>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Assigns every point to its nearest centroid; returns per-point squared
/// distances alongside.
fn assign(points: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize], dist: &mut [f64]) {
    for (i, p) in points.outer_iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, ctr) in centroids.outer_iter().enumerate() {
            let d = sq_dist(p, ctr);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dist[i] = best.1;
    }
}

struct Run {
    labels: Vec<usize>,
    centroids: Array2<f64>,
    inertia: f64,
    trace: Vec<f64>,
}

fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>, config: &KMeansConfig) -> Run {
    let (n, d) = points.dim();
    let k = centroids.nrows();
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    for _ in 0..config.max_iters.max(1) {
        assign(points, &centroids, &mut labels, &mut dist);
        trace.push(dist.iter().sum());

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &p);
            counts[labels[i]] += 1;
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                next.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("non-empty");
                next.row_mut(c).assign(&points.row(far));
                dist[far] = 0.0;
            }
        }
        let shift = next
            .outer_iter()
            .zip(centroids.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < config.tol {
            break;
        }
    }
    assign(points, &centroids, &mut labels, &mut dist);
    let inertia = dist.iter().sum();
    trace.push(inertia);
    Run {
        labels,
        centroids,
        inertia,
        trace,
    }
}

pub fn kmeans(points: &Array2<f64>, k: usize, config: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs N >= K >= 1, got N = {n}, K = {k}"
        )));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one restart".into()));
    }
    if !points.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            term: "k-means input".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    let mut restart_inertias = Vec::with_capacity(config.restarts);
    for _ in 0..config.restarts {
        let run = lloyd(points, plus_plus(points, k, &mut rng), config);
        restart_inertias.push(run.inertia);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(KMeansResult {
        labels: best.labels,
        centroids: best.centroids,
        inertia: best.inertia,
        restart_inertias,
        trace: best.trace,
    })
}

/// Total squared deviation from the grand mean (inertia of `K = 1`).
pub fn total_sum_of_squares(points: &Array2<f64>) -> f64 {
    match points.mean_axis(Axis(0)) {
        Some(mean) => points.outer_iter().map(|p| sq_dist(p, mean.view())).sum(),
        None => 0.0,
    }
}
