//! Central finite-difference verification of tape gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Tensors larger than this are checked on a random subset of this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub excluded: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failed == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.tensors.iter().map(|t| t.excluded).sum()
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Probe {
    value: f64,
    signature: Vec<u8>,
}

fn probe<F>(objective: &F, params: &[Array2<f64>]) -> Result<Probe>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = objective(&mut tape, &vars)?;
    Ok(Probe {
        value: tape.scalar(out),
        signature: tape.kink_signature(),
    })
}

/// Analytic gradients of `objective` at `params`.
pub fn analytic_gradients<F>(objective: &F, params: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = objective(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::shape("objective output size", 1, tape.value(out).len()));
    }
    let mut grads = tape.backward(out);
    let value = tape.scalar(out);
    let g = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
        .collect();
    Ok((value, g))
}

/// Compares tape gradients of a scalar program against central differences.
///
/// `objective` receives one leaf per entry of `params` and must build the
/// same program on every call (any randomness has to be fixed by the caller).
pub fn check_gradients<F>(
    objective: F,
    names: &[String],
    params: &[Array2<f64>],
    options: GradCheckOptions,
) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if names.len() != params.len() {
        return Err(Error::shape("gradient check names", params.len(), names.len()));
    }
    let (_, analytic) = analytic_gradients(&objective, params)?;
    let base = probe(&objective, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());

    for (t, name) in names.iter().enumerate() {
        let len = params[t].len();
        let coords: Vec<usize> = if len <= options.max_coords {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, options.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
            failed: 0,
        };
        let cols = params[t].ncols();
        for flat in coords {
            let idx = [flat / cols, flat % cols];
            let orig = params[t][idx];
            work[t][idx] = orig + options.h;
            let plus = probe(&objective, &work)?;
            work[t][idx] = orig - options.h;
            let minus = probe(&objective, &work)?;
            work[t][idx] = orig;

            if plus.signature != base.signature || minus.signature != base.signature {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * options.h);
            let err = relative_error(analytic[t][idx], numeric);
            check.checked += 1;
            check.max_rel_error = check.max_rel_error.max(err);
            if !(err <= options.tol) {
                check.failed += 1;
            }
        }
        tensors.push(check);
    }
    Ok(GradientReport {
        tol: options.tol,
        tensors,
    })
}
