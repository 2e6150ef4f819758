//! Named parameters and the small layer types built from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tensor};

/// A named leaf tensor. Frozen parameters still take part in forward passes
/// but do not collect gradients, so optimizers skip them.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter { name: name.into(), tensor: Tensor::param(data, shape)?, frozen: false })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if self.frozen != frozen {
            self.frozen = frozen;
            self.tensor = self.tensor.to_leaf(!frozen);
        }
    }

    /// Replace the values; the old leaf and its gradient are dropped.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        let t = if self.frozen { Tensor::new(data, self.tensor.shape())? } else { Tensor::param(data, self.tensor.shape())? };
        self.tensor = t;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    /// Freeze (or thaw) every parameter whose name starts with one of `prefixes`.
    fn freeze_prefixes(&mut self, prefixes: &[String], frozen: bool) {
        for p in self.parameters_mut() {
            if prefixes.iter().any(|pre| p.name().starts_with(pre.as_str())) {
                p.set_frozen(frozen);
            }
        }
    }

    fn freeze_all(&mut self) {
        self.parameters_mut().into_iter().for_each(|p| p.set_frozen(true));
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.data().len()).sum()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-half_width..=half_width)).collect()
}

/// Fully connected layer, `weight: out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let a = 1.0 / (d_in as f64).sqrt();
        Self::with_weights(name, uniform(rng, d_in * d_out, a), vec![0.0; d_out], d_in, d_out)
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_weights(name, vec![0.0; d_in * d_out], vec![0.0; d_out], d_in, d_out)
    }

    pub fn with_weights(name: &str, weight: Vec<f64>, bias: Vec<f64>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), weight, &[d_out, d_in])?,
            bias: Parameter::new(format!("{name}.bias"), bias, &[d_out])?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(self.weight.tensor(), Some(self.bias.tensor()))
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel convolution with bias, `weight: out x in x k x k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, padding: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let a = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self::with_weights(name, uniform(rng, c_out * c_in * k * k, a), vec![0.0; c_out], c_in, c_out, k, padding)
    }

    pub fn zeros(name: &str, c_in: usize, c_out: usize, k: usize, padding: usize) -> Result<Self> {
        Self::with_weights(name, vec![0.0; c_out * c_in * k * k], vec![0.0; c_out], c_in, c_out, k, padding)
    }

    pub fn with_weights(
        name: &str,
        weight: Vec<f64>,
        bias: Vec<f64>,
        c_in: usize,
        c_out: usize,
        k: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight, &[c_out, c_in, k, k])?,
            bias: Parameter::new(format!("{name}.bias"), bias, &[c_out])?,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(self.weight.tensor(), self.bias.tensor(), self.padding)
    }
}

impl Module for Conv2d {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), vec![1.0; d], &[d])?,
            beta: Parameter::new(format!("{name}.beta"), vec![0.0; d], &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor(), Self::EPS)
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
