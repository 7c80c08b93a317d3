//! Thin layer wrappers: convolutions, linear, batch norm. Each owns its
//! parameter tensors and exposes them by name through `visit`, which is how
//! the optimizer and the weight file reach them.

use nzip_tensor::Tensor;
use rand::rngs::StdRng;

use crate::error::Result;

/// Fan-in scaled uniform init, the usual default for conv/linear stacks.
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut StdRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StdRng,
    ) -> Conv2d {
        Conv2d {
            weight: init_uniform(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Tensor::leaf(vec![0.0; c_out], &[c_out]).unwrap(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct ConvT2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvT2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StdRng,
    ) -> ConvT2d {
        ConvT2d {
            // weight layout [C_in, C_out, k, k]; effective fan-in per output
            // element is c_in·k²/stride², but the plain conv bound works fine
            weight: init_uniform(&[c_in, c_out, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Tensor::leaf(vec![0.0; c_out], &[c_out]).unwrap(),
            stride,
            padding,
        }
    }

    /// `output_padding` is per-axis (rows, cols) so odd target extents can be
    /// reproduced exactly when inverting a strided conv.
    pub fn forward(&self, x: &Tensor, output_padding: (usize, usize)) -> Result<Tensor> {
        Ok(x.conv2d_transposed(
            &self.weight,
            Some(&self.bias),
            self.stride,
            self.padding,
            output_padding,
        )?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, rng: &mut StdRng) -> Linear {
        Linear {
            weight: init_uniform(&[c_out, c_in], c_in, rng),
            bias: Tensor::leaf(vec![0.0; c_out], &[c_out]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(&self.weight, Some(&self.bias))?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::leaf(vec![1.0; channels], &[channels]).unwrap(),
            beta: Tensor::leaf(vec![0.0; channels], &[channels]).unwrap(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates used at eval time.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, mean, var) = x.batch_norm_train(&self.gamma, &self.beta)?;
        let m = self.momentum;
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.batch_norm_eval(&self.gamma, &self.beta, &self.running_mean, &self.running_var)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}
