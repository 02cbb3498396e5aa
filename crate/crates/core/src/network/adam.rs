use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// How a tensor takes part in one optimizer step.
#[derive(Clone, Copy, Debug)]
pub enum Update<'a> {
    Dense,
    /// Only the listed rows are updated; the moments of other rows are left as is.
    Rows(&'a [usize]),
    Frozen,
}

/// Bias-corrected Adam with per-tensor moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (first, second) = shapes
            .into_iter()
            .map(|s| (Array2::zeros(s), Array2::zeros(s)))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
        updates: &[Update<'_>],
    ) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() || updates.len() != self.len() {
            return Err(Error::shape("optimizer tensor count", self.len(), params.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first[i].dim() {
                return Err(Error::shape(
                    format!("optimizer tensor {i}"),
                    self.first[i].len(),
                    g.len(),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for (i, update) in updates.iter().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = &mut *params[i];
            let g = &grads[i];
            match *update {
                Update::Frozen => {}
                Update::Dense => Zip::from(p)
                    .and(m)
                    .and(v)
                    .and(g)
                    .for_each(|p, m, v, &g| apply(p, m, v, g)),
                Update::Rows(rows) => {
                    let mut rows = rows.to_vec();
                    rows.sort_unstable();
                    rows.dedup();
                    for r in rows {
                        Zip::from(p.row_mut(r))
                            .and(m.row_mut(r))
                            .and(v.row_mut(r))
                            .and(g.row(r))
                            .for_each(|p, m, v, &g| apply(p, m, v, g));
                    }
                }
            }
        }
        Ok(())
    }
}
