//! External clustering metrics: ACC (optimal matching), NMI, ARI.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Contingency table with rows indexed by the distinct true labels and
/// columns by the distinct predicted labels, both in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

impl Contingency {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidArgument(format!(
                "label vectors differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        let rows = dense_index(truth);
        let cols = dense_index(pred);
        let mut counts = vec![vec![0; cols.len()]; rows.len()];
        for (t, p) in truth.iter().zip(pred) {
            counts[rows[t]][cols[p]] += 1;
        }
        Ok(Self {
            counts,
            n: truth.len(),
        })
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

fn dense_index(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut map: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

/// Minimum-cost assignment on a rectangular cost matrix with
/// `rows <= cols`; returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // Potentials-based shortest augmenting path, 1-indexed with a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of samples correctly labeled under the best one-to-one
/// mapping of predicted clusters to classes.
pub fn clustering_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = Contingency::new(truth, pred)?;
    if table.n == 0 {
        return Ok(1.0);
    }
    let (r, c) = (table.counts.len(), table.counts[0].len());
    let size = r.max(c);
    let mut cost = vec![vec![0.0; size]; size];
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            cost[i][j] = -(x as f64);
        }
    }
    let matched: usize = hungarian(&cost)
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < r && j < c)
        .map(|(i, &j)| table.counts[i][j])
        .sum();
    Ok(matched as f64 / table.n as f64)
}

fn entropy(sums: &[usize], n: f64) -> f64 {
    sums.iter()
        .filter(|&&a| a > 0)
        .map(|&a| {
            let p = a as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two trivial (single-block) partitions score 1.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = Contingency::new(truth, pred)?;
    if table.n == 0 {
        return Ok(1.0);
    }
    let n = table.n as f64;
    let (a, b) = (table.row_sums(), table.col_sums());
    let (hu, hv) = (entropy(&a, n), entropy(&b, n));
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (hu + hv))).clamp(0.0, 1.0))
}

fn pairs(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Degenerate tables where the chance-adjusted
/// denominator vanishes score 1.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = Contingency::new(truth, pred)?;
    let index: f64 = table.counts.iter().flatten().map(|&x| pairs(x)).sum();
    let sa: f64 = table.row_sums().into_iter().map(pairs).sum();
    let sb: f64 = table.col_sums().into_iter().map(pairs).sum();
    let total = pairs(table.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(clustering_accuracy(&[0, 1, 2], &[7, 3, 5]).unwrap(), 1.0);
        assert!(clustering_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_with_more_clusters_than_classes() {
        // clusters 0,1,2 over classes 0,1: best is 2 of cluster 0 + 2 of cluster 1
        let acc = clustering_accuracy(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 2]).unwrap();
        assert!((acc - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1], &[1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // pairs: tp = 0, fp = fn = tn = 2, so 2(0 - 4) / (2*4 + 2*4)
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(ari(&[0, 0, 1, 1, 2, 2], &[0; 6]).unwrap(), 0.0);
    }

    #[test]
    fn hungarian_small_case() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0);
    }
}
