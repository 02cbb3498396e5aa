use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    SoftmaxRows,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::SoftmaxRows => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            "softmax" => Some(Activation::SoftmaxRows),
            _ => None,
        }
    }

    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|e| if e > 0.0 { e } else { 0.0 }),
            Activation::Identity => {}
            Activation::SoftmaxRows => *x = softmax_rows(x),
        }
    }

    fn apply_on(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
            Activation::SoftmaxRows => tape.softmax_rows(x),
        }
    }
}

/// One affine map followed by an activation. `weight` is `in×out`, `bias` is `1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Fully connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Tape handles for the weights and biases of an [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.dim() != (1, layer.out_dim()) {
                return Err(Error::shape(
                    format!("bias of layer {i}"),
                    layer.out_dim(),
                    layer.bias.len(),
                ));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(
                    format!("input of layer {i}"),
                    layers[i - 1].out_dim(),
                    layer.in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output; hidden layers use `hidden`, the last `output`.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Layer {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
                    bias: Array2::zeros((1, fan_out)),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Weight and bias of every layer, in order.
    pub fn tensors(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut h = input.clone();
        for layer in &self.layers {
            let mut next = h.dot(&layer.weight);
            next += &layer.bias;
            layer.activation.apply(&mut next);
            h = next;
        }
        Ok(h)
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        MlpVars { layers }
    }

    /// Rebuilds handles from a flat slice in [`MlpParams::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> MlpVars {
        debug_assert_eq!(vars.len(), self.tensor_count());
        MlpVars {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        self.check_input(tape.shape(input).1)?;
        let mut h = input;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            let affine = tape.matmul(h, w);
            let shifted = tape.add_row(affine, b);
            h = layer.activation.apply_on(tape, shifted);
        }
        Ok(h)
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.in_dim() {
            return Err(Error::shape("network input width", self.in_dim(), width));
        }
        Ok(())
    }
}
