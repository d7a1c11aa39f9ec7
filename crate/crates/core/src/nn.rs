//! Parameterized layers built on the tensor ops.

use std::sync::RwLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Conv2dSpec};
use crate::tensor::{Scalar, Tensor, Var};

/// Whether batch normalization uses batch statistics (and updates its
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named learnable tensor.
///
/// The current value is held as a graph leaf; [`Param::set`] swaps in a new
/// leaf, which also clears the accumulated gradient.
#[derive(Debug)]
pub struct Param<T: Scalar> {
    name: String,
    decay: bool,
    value: RwLock<Var<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Self {
            name: name.into(),
            decay,
            value: RwLock::new(Var::leaf(value)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Whether weight decay applies to this tensor.
    pub fn decay(&self) -> bool {
        self.decay
    }

    pub fn var(&self) -> Var<T> {
        self.value.read().expect("param lock").clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.var().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.var().value().len()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.var().grad()
    }

    pub fn set(&self, value: Tensor<T>) -> Result<()> {
        let current = self.shape();
        if value.shape() != current.as_slice() {
            return Err(Error::dim("Param::set", &current, value.shape()));
        }
        *self.value.write().expect("param lock") = Var::leaf(value);
        Ok(())
    }
}

/// Non-learnable state that still belongs in a checkpoint.
#[derive(Debug)]
pub struct Buffer<T: Scalar> {
    name: String,
    value: RwLock<Tensor<T>>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value: RwLock::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Tensor<T> {
        self.value.read().expect("buffer lock").clone()
    }

    pub fn set(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.value.write().expect("buffer lock");
        if value.shape() != slot.shape() {
            return Err(Error::dim("Buffer::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Anything owning parameters and buffers.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal weights with standard deviation `sqrt(gain / fan_in)`.
fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

/// Fully connected layer with weight `[in, out]`.
#[derive(Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Param::new(join(prefix, "weight"), fan_in_normal(&[fan_in, fan_out], fan_in, 1.0, rng), true),
            bias: bias.then(|| Param::new(join(prefix, "bias"), Tensor::zeros(&[fan_out]), false)),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.as_ref().map(Param::var);
        ops::linear(x, &self.weight.var(), b.as_ref())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.weight];
        p.extend(self.bias.as_ref());
        p
    }
}

/// Square-kernel convolution with He-initialized weights.
#[derive(Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: Param::new(
                join(prefix, "weight"),
                fan_in_normal(&[cout, cin, kernel, kernel], fan_in, 2.0, rng),
                true,
            ),
            bias: bias.then(|| Param::new(join(prefix, "bias"), Tensor::zeros(&[cout]), false)),
            spec,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.as_ref().map(Param::var);
        ops::conv2d(x, &self.weight.var(), b.as_ref(), self.spec)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.weight];
        p.extend(self.bias.as_ref());
        p
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization with running statistics.
///
/// Before any training step the running estimates are mean 0 and variance 1.
#[derive(Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(join(prefix, "weight"), Tensor::ones(&[channels]), false),
            beta: Param::new(join(prefix, "bias"), Tensor::zeros(&[channels]), false),
            running_mean: Buffer::new(join(prefix, "running_mean"), Tensor::zeros(&[channels])),
            running_var: Buffer::new(join(prefix, "running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let eps = T::of(NORM_EPS);
        let (g, b) = (self.gamma.var(), self.beta.var());
        match mode {
            Mode::Eval => {
                let (m, v) = (self.running_mean.value(), self.running_var.value());
                Ok(ops::batch_norm2d(x, &g, &b, Some((m.data(), v.data())), eps)?.0)
            }
            Mode::Train => {
                let (y, stats) = ops::batch_norm2d(x, &g, &b, None, eps)?;
                let stats = stats.expect("train-mode statistics");
                let mom = T::of(BN_MOMENTUM);
                let unbias = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let mut m = self.running_mean.value();
                let mut v = self.running_var.value();
                for c in 0..stats.mean.len() {
                    let rm = &mut m.data_mut()[c];
                    *rm = (T::one() - mom) * *rm + mom * stats.mean[c];
                    let rv = &mut v.data_mut()[c];
                    *rv = (T::one() - mom) * *rv + mom * stats.var[c] * unbias;
                }
                self.running_mean.set(m)?;
                self.running_var.set(v)?;
                Ok(y)
            }
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }
}

#[derive(Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(join(prefix, "weight"), Tensor::ones(&[width]), false),
            beta: Param::new(join(prefix, "bias"), Tensor::zeros(&[width]), false),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        ops::layer_norm(x, &self.gamma.var(), &self.beta.var(), T::of(NORM_EPS))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
}
