//! Parameterized layers. Each layer owns only its parameter names; values
//! live in a [`ParameterTree`] so frozen and trainable sets can be split.

use rand::Rng;

use crate::error::{NdError, Result};
use crate::float::Float;
use crate::param::ParameterTree;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Group count used by every normalization layer: `min(8, channels)`,
/// lowered to the nearest divisor of `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub const NORM_EPS: f64 = 1e-5;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        let b = fan_in_bound(self.din);
        tree.insert(self.weight(), Tensor::uniform(&[self.dout, self.din], b, rng), true)?;
        tree.insert(self.bias(), Tensor::uniform(&[self.dout], b, rng), true)
    }

    pub fn init_zero<F: Float>(&self, tree: &mut ParameterTree<F>) -> Result<()> {
        tree.insert(self.weight(), Tensor::zeros(&[self.dout, self.din]), true)?;
        tree.insert(self.bias(), Tensor::zeros(&[self.dout]), true)
    }

    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        let w = tape.param(tree, &self.weight())?;
        let b = tape.param(tree, &self.bias())?;
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel: (kernel, kernel),
            stride: (stride, stride),
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn wshape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel.0, self.kernel.1]
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        let b = fan_in_bound(self.cin * self.kernel.0 * self.kernel.1);
        tree.insert(self.weight(), Tensor::uniform(&self.wshape(), b, rng), true)?;
        tree.insert(self.bias(), Tensor::uniform(&[self.cout], b, rng), true)
    }

    /// Zero weights and bias.
    pub fn init_zero<F: Float>(&self, tree: &mut ParameterTree<F>) -> Result<()> {
        tree.insert(self.weight(), Tensor::zeros(&self.wshape()), true)?;
        tree.insert(self.bias(), Tensor::zeros(&[self.cout]), true)
    }

    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        let w = tape.param(tree, &self.weight())?;
        let b = tape.param(tree, &self.bias())?;
        tape.conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        let b = fan_in_bound(self.cin * self.kernel);
        tree.insert(self.weight(), Tensor::uniform(&[self.cout, self.cin, self.kernel], b, rng), true)?;
        tree.insert(self.bias(), Tensor::uniform(&[self.cout], b, rng), true)
    }

    pub fn init_zero<F: Float>(&self, tree: &mut ParameterTree<F>) -> Result<()> {
        tree.insert(self.weight(), Tensor::zeros(&[self.cout, self.cin, self.kernel]), true)?;
        tree.insert(self.bias(), Tensor::zeros(&[self.cout]), true)
    }

    /// Output length for an input of `len` steps.
    pub fn out_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        let w = tape.param(tree, &self.weight())?;
        let b = tape.param(tree, &self.bias())?;
        tape.conv1d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>) -> Result<()> {
        tree.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]), true)?;
        tree.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]), true)
    }

    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        let g = tape.param(tree, &format!("{}.gamma", self.name))?;
        let b = tape.param(tree, &format!("{}.beta", self.name))?;
        tape.group_norm(x, g, b, norm_groups(self.channels), F::c(NORM_EPS))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Identity,
    Linear(Linear),
    Conv1d(Conv1d),
    Conv2d(Conv2d),
    GroupNorm(GroupNorm),
    Silu,
}

impl Layer {
    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        match self {
            Layer::Identity | Layer::Silu => Ok(()),
            Layer::Linear(l) => l.init(tree, rng),
            Layer::Conv1d(l) => l.init(tree, rng),
            Layer::Conv2d(l) => l.init(tree, rng),
            Layer::GroupNorm(l) => l.init(tree),
        }
    }

    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        match self {
            Layer::Identity => Ok(x),
            Layer::Silu => Ok(tape.silu(x)),
            Layer::Linear(l) => l.apply(tape, tree, x),
            Layer::Conv1d(l) => l.apply(tape, tree, x),
            Layer::Conv2d(l) => l.apply(tape, tree, x),
            Layer::GroupNorm(l) => l.apply(tape, tree, x),
        }
    }

    /// Output shape for `input`, or the reason it is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| NdError::ShapeMismatch {
            op: "layer input",
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Identity | Layer::Silu => Ok(input.to_vec()),
            Layer::Linear(l) => match input {
                [n, d] if *d == l.din => Ok(vec![*n, l.dout]),
                _ => Err(mismatch(vec![input.first().copied().unwrap_or(1), l.din])),
            },
            Layer::Conv1d(l) => match input {
                [n, c, len] if *c == l.cin => Ok(vec![*n, l.cout, l.out_len(*len)]),
                _ => Err(mismatch(vec![input.first().copied().unwrap_or(1), l.cin, 0])),
            },
            Layer::Conv2d(l) => match input {
                [n, c, h, w] if *c == l.cin => Ok(vec![
                    *n,
                    l.cout,
                    h.div_ceil(l.stride.0),
                    w.div_ceil(l.stride.1),
                ]),
                _ => Err(mismatch(vec![input.first().copied().unwrap_or(1), l.cin, 0, 0])),
            },
            Layer::GroupNorm(l) => match input {
                [_, c, ..] if *c == l.channels => Ok(input.to_vec()),
                _ => Err(mismatch(vec![input.first().copied().unwrap_or(1), l.channels])),
            },
        }
    }
}

/// Sequential composition of layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

/// Gradients from [`LayerStack::backpropagate`].
#[derive(Debug)]
pub struct Backprop<F> {
    pub input: Tensor<F>,
    pub params: std::collections::BTreeMap<String, Tensor<F>>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(tree, rng))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    pub fn record<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |x, l| l.apply(tape, tree, x))
    }

    pub fn evaluate<F: Float>(&self, tree: &ParameterTree<F>, input: &Tensor<F>) -> Result<Tensor<F>> {
        self.output_shape(input.shape())?;
        let mut tape = Tape::no_grad();
        let x = tape.input(input.clone());
        let y = self.record(&mut tape, tree, x)?;
        let out = tape.value(y).clone();
        out.ensure_finite("layer stack output")?;
        Ok(out)
    }

    /// Re-runs the forward pass and pulls `upstream` back to the input and
    /// every trainable parameter.
    pub fn backpropagate<F: Float>(
        &self,
        tree: &ParameterTree<F>,
        input: &Tensor<F>,
        upstream: &Tensor<F>,
    ) -> Result<Backprop<F>> {
        let out_shape = self.output_shape(input.shape())?;
        upstream.expect_shape("backpropagate upstream", &out_shape)?;
        let mut tape = Tape::new();
        let x = tape.input_grad(input.clone());
        let y = self.record(&mut tape, tree, x)?;
        let grads: Gradients<F> = tape.backward_with(y, upstream.clone())?;
        Ok(Backprop {
            input: grads
                .get(x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape())),
            params: grads.param_grads(),
        })
    }
}
