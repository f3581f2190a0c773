//! Parameterized layers: convolution and per-channel batch normalization.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BnMode, Tensor};

/// Forward-pass mode. Training uses batch statistics and branch sampling;
/// evaluation uses running statistics and the fused branch combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform fan-in initialization: bound = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// 2-D convolution layer with square kernels.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        let n = out_channels * in_channels * kernel * kernel;
        let weight = Tensor::param(
            &[out_channels, in_channels, kernel, kernel],
            kaiming_uniform(rng, n, fan_in),
        )
        .expect("conv weight shape");
        let bias = with_bias
            .then(|| Tensor::param(&[out_channels], vec![0.0; out_channels]).expect("conv bias"));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Convolution weights only (no bias): the count the block-size
    /// comparisons are stated in.
    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }
}

/// Per-channel batch normalization over the spatial axes of one sample.
/// Training normalizes with the sample's own statistics and maintains
/// running estimates; evaluation normalizes with the running estimates.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("bn gamma"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("bn beta"),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, stats) = x.batchnorm(&self.gamma, &self.beta, self.eps, BnMode::Batch)?;
                if let Some((mean, var)) = stats {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for c in 0..mean.len() {
                        rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                        rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c];
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                let (y, _) = x.batchnorm(
                    &self.gamma,
                    &self.beta,
                    self.eps,
                    BnMode::Running {
                        mean: &rm,
                        var: &rv,
                    },
                )?;
                Ok(y)
            }
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.running_var.borrow().clone()
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn kaiming_bound_respects_fan_in() {
        let mut rng = rng_from(1);
        let fan_in = 9 * 64;
        let vals = kaiming_uniform(&mut rng, 10_000, fan_in);
        let bound = (6.0 / fan_in as f64).sqrt();
        assert!(vals.iter().all(|v| v.abs() < bound));
        assert!(vals.iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn conv_layer_forward_shape() {
        let mut rng = rng_from(2);
        let conv = Conv2d::new(1, 64, 7, 2, 3, false, &mut rng);
        let x = Tensor::zeros(&[1, 224, 224]);
        assert_eq!(conv.forward(&x).unwrap().shape(), &[64, 112, 112]);
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let bn = BatchNorm2d::new(2);
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        let rm = bn.running_mean();
        assert!((rm[0] - 0.1 * 2.5).abs() < 1e-12);
        assert!((rm[1] + 0.1 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let bn = BatchNorm2d::new(1);
        bn.set_running_stats(vec![1.0], vec![4.0]);
        let x = Tensor::new(&[1, 1, 2], vec![3.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let v = y.to_vec();
        // (3 - 1) / sqrt(4 + eps) ~ 1.0
        assert!((v[0] - 1.0).abs() < 1e-5);
        assert!(v[1].abs() < 1e-9);
    }
}
