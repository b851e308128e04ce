//! Parameter bundles for the three learned layer kinds: convolution,
//! batch normalization, and the fully connected classifier head.
//!
//! Each bundle owns trainable leaf tensors (and, for batch normalization,
//! non-trainable running-statistics buffers) and validates its shape
//! invariants at construction, so the hot forward/backward paths can rely
//! on them.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights for a 2-D convolution with square kernels.
pub struct ConvParams<S: Scalar> {
    weight: Tensor<S>,
    bias: Option<Tensor<S>>,
    stride: usize,
    padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    /// A zero-initialized convolution; weights are filled in later by the
    /// network initializer or a checkpoint load.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = Tensor::param(
            &[out_channels, in_channels, kernel, kernel],
            vec![S::zero(); out_channels * in_channels * kernel * kernel],
        )?;
        let bias = if with_bias {
            Some(Tensor::param(&[out_channels], vec![S::zero(); out_channels])?)
        } else {
            None
        };
        Self::from_parts(weight, bias, stride, padding)
    }

    /// Builds from explicit tensors, validating every shape invariant.
    pub fn from_parts(
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::Config(format!(
                "convolution weight must be rank 4 (out, in, kh, kw), got shape {}",
                weight.shape()
            )));
        }
        let dims = weight.dims();
        let (out_channels, kh, kw) = (dims[0], dims[2], dims[3]);
        if kh != kw {
            return Err(Error::Config(format!("convolution kernels must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if let Some(b) = &bias {
            if b.dims() != [out_channels] {
                return Err(Error::Config(format!(
                    "convolution bias must have shape {out_channels}, got {}",
                    b.shape()
                )));
            }
        }
        Ok(ConvParams { weight, bias, stride, padding })
    }

    /// The weight tensor, laid out `(out, in, kh, kw)`.
    pub fn weight(&self) -> &Tensor<S> {
        &self.weight
    }

    /// The per-output-channel bias, when present.
    pub fn bias(&self) -> Option<&Tensor<S>> {
        self.bias.as_ref()
    }

    /// Spatial stride.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Zero padding applied on every spatial border.
    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Number of output channels.
    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Number of input channels.
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Side length of the square kernel.
    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Inputs feeding one output element; the denominator used by the
    /// variance-preserving initializer.
    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }
}

/// Learned scale/shift plus running statistics for batch normalization.
///
/// `gamma` and `beta` are trainable; `running_mean` and `running_var` are
/// buffers updated during training-mode forward passes and consumed in
/// inference mode. The running statistics follow
/// `running = momentum * running + (1 - momentum) * batch_statistic`,
/// i.e. `momentum` is the retention factor. Batch variance is the biased
/// (population) estimate, and the same estimate is stored in the running
/// buffer.
pub struct BatchNormState<S: Scalar> {
    gamma: Tensor<S>,
    beta: Tensor<S>,
    running_mean: Tensor<S>,
    running_var: Tensor<S>,
    eps: S,
    momentum: S,
    training: Cell<bool>,
}

impl<S: Scalar> BatchNormState<S> {
    /// Default settings: `eps = 1e-5`, `momentum = 0.9`, training mode on,
    /// `gamma = 1`, `beta = 0`, `running_mean = 0`, `running_var = 1`.
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_settings(channels, S::from_f64(1e-5), S::from_f64(0.9))
    }

    /// Builds with explicit numeric settings.
    pub fn with_settings(channels: usize, eps: S, momentum: S) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("batch norm needs at least one channel".into()));
        }
        if !(eps > S::zero()) || !eps.is_finite() {
            return Err(Error::Config(format!("batch norm eps must be positive and finite, got {eps}")));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::Config(format!(
                "batch norm momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(BatchNormState {
            gamma: Tensor::param(&[channels], vec![S::one(); channels])?,
            beta: Tensor::param(&[channels], vec![S::zero(); channels])?,
            running_mean: Tensor::from_vec(&[channels], vec![S::zero(); channels])?,
            running_var: Tensor::from_vec(&[channels], vec![S::one(); channels])?,
            eps,
            momentum,
            training: Cell::new(true),
        })
    }

    /// Number of normalized channels.
    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Learned per-channel scale.
    pub fn gamma(&self) -> &Tensor<S> {
        &self.gamma
    }

    /// Learned per-channel shift.
    pub fn beta(&self) -> &Tensor<S> {
        &self.beta
    }

    /// Exponential moving average of batch means.
    pub fn running_mean(&self) -> &Tensor<S> {
        &self.running_mean
    }

    /// Exponential moving average of (biased) batch variances.
    pub fn running_var(&self) -> &Tensor<S> {
        &self.running_var
    }

    /// Numerical stabilizer added to the variance before the square root.
    pub fn eps(&self) -> S {
        self.eps
    }

    /// Retention factor for the running statistics.
    pub fn momentum(&self) -> S {
        self.momentum
    }

    /// Switches between batch statistics (training) and running statistics
    /// (inference).
    pub fn set_training(&self, training: bool) {
        self.training.set(training);
    }

    /// Whether forward passes currently use batch statistics.
    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    /// Resets the running statistics to their initial values (mean 0, var 1).
    pub fn reset_running(&self) {
        for v in self.running_mean.data_mut().iter_mut() {
            *v = S::zero();
        }
        for v in self.running_var.data_mut().iter_mut() {
            *v = S::one();
        }
    }
}

/// Weights for the fully connected classifier head.
pub struct LinearParams<S: Scalar> {
    weight: Tensor<S>,
    bias: Option<Tensor<S>>,
}

impl<S: Scalar> LinearParams<S> {
    /// A zero-initialized linear map from `in_features` to `out_features`.
    pub fn new(out_features: usize, in_features: usize, with_bias: bool) -> Result<Self> {
        let weight =
            Tensor::param(&[out_features, in_features], vec![S::zero(); out_features * in_features])?;
        let bias = if with_bias {
            Some(Tensor::param(&[out_features], vec![S::zero(); out_features])?)
        } else {
            None
        };
        Self::from_parts(weight, bias)
    }

    /// Builds from explicit tensors, validating shapes.
    pub fn from_parts(weight: Tensor<S>, bias: Option<Tensor<S>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Config(format!(
                "linear weight must be rank 2 (out, in), got shape {}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.dims() != [weight.dims()[0]] {
                return Err(Error::Config(format!(
                    "linear bias must have shape {}, got {}",
                    weight.dims()[0],
                    b.shape()
                )));
            }
        }
        Ok(LinearParams { weight, bias })
    }

    /// The weight tensor, laid out `(out, in)`.
    pub fn weight(&self) -> &Tensor<S> {
        &self.weight
    }

    /// The per-output bias, when present.
    pub fn bias(&self) -> Option<&Tensor<S>> {
        self.bias.as_ref()
    }

    /// Input feature count.
    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Output feature count.
    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_params_validate_shapes() {
        assert!(ConvParams::<f32>::new(4, 3, 3, 1, 1, true).is_ok());
        assert!(ConvParams::<f32>::new(4, 3, 3, 0, 1, true).is_err());
        let rect = Tensor::<f32>::param(&[4, 3, 3, 5], vec![0.0; 180]).unwrap();
        assert!(ConvParams::from_parts(rect, None, 1, 1).is_err());
        let w = Tensor::<f32>::param(&[4, 3, 3, 3], vec![0.0; 108]).unwrap();
        let bad_bias = Tensor::<f32>::param(&[3], vec![0.0; 3]).unwrap();
        assert!(ConvParams::from_parts(w, Some(bad_bias), 1, 1).is_err());
    }

    #[test]
    fn conv_params_expose_geometry() {
        let p = ConvParams::<f32>::new(8, 4, 3, 2, 1, false).unwrap();
        assert_eq!(p.out_channels(), 8);
        assert_eq!(p.in_channels(), 4);
        assert_eq!(p.kernel(), 3);
        assert_eq!(p.stride(), 2);
        assert_eq!(p.padding(), 1);
        assert_eq!(p.fan_in(), 36);
        assert!(p.bias().is_none());
        assert!(p.weight().requires_grad());
    }

    #[test]
    fn batch_norm_starts_at_identity_settings() {
        let bn = BatchNormState::<f64>::new(3).unwrap();
        assert_eq!(bn.channels(), 3);
        assert_eq!(bn.gamma().to_vec(), vec![1.0; 3]);
        assert_eq!(bn.beta().to_vec(), vec![0.0; 3]);
        assert_eq!(bn.running_mean().to_vec(), vec![0.0; 3]);
        assert_eq!(bn.running_var().to_vec(), vec![1.0; 3]);
        assert!(bn.is_training());
        assert!(bn.gamma().requires_grad());
        assert!(!bn.running_mean().requires_grad());
    }

    #[test]
    fn batch_norm_rejects_bad_settings() {
        assert!(BatchNormState::<f64>::with_settings(0, 1e-5, 0.9).is_err());
        assert!(BatchNormState::<f64>::with_settings(3, 0.0, 0.9).is_err());
        assert!(BatchNormState::<f64>::with_settings(3, -1.0, 0.9).is_err());
        assert!(BatchNormState::<f64>::with_settings(3, 1e-5, 1.0).is_err());
        assert!(BatchNormState::<f64>::with_settings(3, 1e-5, -0.1).is_err());
    }

    #[test]
    fn batch_norm_mode_flag_and_reset() {
        let bn = BatchNormState::<f32>::new(2).unwrap();
        bn.set_training(false);
        assert!(!bn.is_training());
        bn.running_mean().data_mut()[0] = 5.0;
        bn.running_var().data_mut()[1] = 7.0;
        bn.reset_running();
        assert_eq!(bn.running_mean().to_vec(), vec![0.0, 0.0]);
        assert_eq!(bn.running_var().to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn linear_params_validate_shapes() {
        let p = LinearParams::<f32>::new(10, 64, true).unwrap();
        assert_eq!(p.out_features(), 10);
        assert_eq!(p.in_features(), 64);
        assert!(p.bias().is_some());
        let w = Tensor::<f32>::param(&[10, 64], vec![0.0; 640]).unwrap();
        let bad = Tensor::<f32>::param(&[64], vec![0.0; 64]).unwrap();
        assert!(LinearParams::from_parts(w, Some(bad)).is_err());
    }
}
