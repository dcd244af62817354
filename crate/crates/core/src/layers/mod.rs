//! Layer kinds, their parameters, shape rules, and forward/backward kernels.

mod conv;
mod linear;
mod norm;
mod pool;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{col2im, conv_output_extent, im2col};
pub use norm::{affine_per_channel, batch_stats, fold_scale_shift, NormCache};
pub(crate) use norm::stats_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDef {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Add,
    Flatten,
}

impl LayerDef {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerDef::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerDef::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerDef::BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerDef::Conv2d { .. } => "conv2d",
            LayerDef::Linear { .. } => "linear",
            LayerDef::BatchNorm2d { .. } => "batchnorm2d",
            LayerDef::Relu => "relu",
            LayerDef::MaxPool2d { .. } => "maxpool2d",
            LayerDef::AvgPool2d { .. } => "avgpool2d",
            LayerDef::Add => "add",
            LayerDef::Flatten => "flatten",
        }
    }

    /// Conv and linear layers: the ones carrying a weight matrix.
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerDef::Conv2d { .. } | LayerDef::Linear { .. })
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerDef::Add => 2,
            _ => 1,
        }
    }

    /// Per-sample output shape for the given per-sample input shapes.
    pub fn output_shape(&self, name: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        if inputs.len() != self.arity() {
            return Err(Error::InvalidNetwork(format!(
                "layer `{name}` ({}) takes {} inputs, got {}",
                self.kind(),
                self.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: name.into(),
            expected,
            actual: x.to_vec(),
        };
        match *self {
            LayerDef::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if x.len() != 3 || x[0] != in_channels {
                    return Err(mismatch(vec![in_channels, 0, 0]));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidNetwork(format!("layer `{name}`: zero kernel or stride")));
                }
                let ho = conv_output_extent(x[1], kernel, stride, padding);
                let wo = conv_output_extent(x[2], kernel, stride, padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok(vec![out_channels, ho, wo]),
                    _ => Err(Error::InvalidNetwork(format!(
                        "layer `{name}`: kernel {kernel} does not fit input {x:?}"
                    ))),
                }
            }
            LayerDef::Linear {
                in_features,
                out_features,
                ..
            } => {
                if x != [in_features] {
                    return Err(mismatch(vec![in_features]));
                }
                Ok(vec![out_features])
            }
            LayerDef::BatchNorm2d { channels, .. } => {
                if x.len() != 3 || x[0] != channels {
                    return Err(mismatch(vec![channels, 0, 0]));
                }
                Ok(x.to_vec())
            }
            LayerDef::Relu => Ok(x.to_vec()),
            LayerDef::MaxPool2d { kernel, stride } | LayerDef::AvgPool2d { kernel, stride } => {
                if x.len() != 3 {
                    return Err(mismatch(vec![0, 0, 0]));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidNetwork(format!("layer `{name}`: zero kernel or stride")));
                }
                match (
                    conv_output_extent(x[1], kernel, stride, 0),
                    conv_output_extent(x[2], kernel, stride, 0),
                ) {
                    (Some(ho), Some(wo)) => Ok(vec![x[0], ho, wo]),
                    _ => Err(Error::InvalidNetwork(format!(
                        "layer `{name}`: pool {kernel} does not fit input {x:?}"
                    ))),
                }
            }
            LayerDef::Add => {
                if inputs[1] != x {
                    return Err(Error::ShapeMismatch {
                        layer: name.into(),
                        expected: x.to_vec(),
                        actual: inputs[1].to_vec(),
                    });
                }
                Ok(x.to_vec())
            }
            LayerDef::Flatten => Ok(vec![x.iter().product()]),
        }
    }
}

/// Learnable parameters and buffers of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    None,
    Affine {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Norm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
}

impl<T: Scalar> LayerParams<T> {
    /// Zero-initialized parameters of the right shapes for `def`.
    pub fn zeros_for(def: &LayerDef) -> Self {
        match *def {
            LayerDef::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => LayerParams::Affine {
                weight: Tensor::zeros([out_channels, in_channels, kernel, kernel]),
                bias: bias.then(|| Tensor::zeros([out_channels])),
            },
            LayerDef::Linear {
                in_features,
                out_features,
                bias,
            } => LayerParams::Affine {
                weight: Tensor::zeros([out_features, in_features]),
                bias: bias.then(|| Tensor::zeros([out_features])),
            },
            LayerDef::BatchNorm2d { channels, .. } => LayerParams::Norm {
                gamma: Tensor::full([channels], T::one()),
                beta: Tensor::zeros([channels]),
                running_mean: Tensor::zeros([channels]),
                running_var: Tensor::full([channels], T::one()),
            },
            _ => LayerParams::None,
        }
    }

    /// Trainable tensors in a fixed order: `[weight, bias?]` or `[gamma, beta]`.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Affine { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.as_ref());
                v
            }
            LayerParams::Norm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Affine { weight, bias } => {
                let mut v = vec![weight];
                v.extend(bias.as_mut());
                v
            }
            LayerParams::Norm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    /// Names matching [`LayerParams::trainable`], followed by buffer names.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Affine { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Affine { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            LayerParams::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        match self {
            LayerParams::None => LayerParams::None,
            LayerParams::Affine { weight, bias } => LayerParams::Affine {
                weight: weight.cast(),
                bias: bias.as_ref().map(Tensor::cast),
            },
            LayerParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => LayerParams::Norm {
                gamma: gamma.cast(),
                beta: beta.cast(),
                running_mean: running_mean.cast(),
                running_var: running_var.cast(),
            },
        }
    }
}

/// Values recorded by a forward kernel and consumed by its backward.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    None,
    Conv { cols: Vec<T> },
    Norm(NormCache<T>),
    MaxPool { argmax: Vec<u32> },
}

fn bad_params(name: &str, def: &LayerDef) -> Error {
    Error::InvalidNetwork(format!("layer `{name}` ({}) has mismatched parameters", def.kind()))
}

/// Runs one layer forward on batched inputs.
pub fn forward<T: Scalar>(
    def: &LayerDef,
    name: &str,
    params: &LayerParams<T>,
    inputs: &[&Tensor<T>],
    mode: Mode,
) -> Result<(Tensor<T>, Cache<T>)> {
    let x = inputs[0];
    match (def, params) {
        (
            &LayerDef::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            },
            LayerParams::Affine { weight, bias },
        ) => {
            let (y, cols) = conv::forward(x, weight, bias.as_ref(), out_channels, kernel, stride, padding);
            Ok((y, Cache::Conv { cols }))
        }
        (LayerDef::Linear { .. }, LayerParams::Affine { weight, bias }) => {
            Ok((linear::forward(x, weight, bias.as_ref()), Cache::None))
        }
        (
            &LayerDef::BatchNorm2d { eps, .. },
            LayerParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => {
            let (y, cache) = norm::forward(x, gamma, beta, running_mean, running_var, T::from_f64(eps), mode);
            Ok((y, Cache::Norm(cache)))
        }
        (LayerDef::Relu, _) => Ok((x.map(|v| if v > T::zero() { v } else { T::zero() }), Cache::None)),
        (&LayerDef::MaxPool2d { kernel, stride }, _) => {
            let (y, argmax) = pool::max_forward(x, kernel, stride);
            Ok((y, Cache::MaxPool { argmax }))
        }
        (&LayerDef::AvgPool2d { kernel, stride }, _) => Ok((pool::avg_forward(x, kernel, stride), Cache::None)),
        (LayerDef::Add, _) => {
            let b = inputs[1];
            if x.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    layer: name.into(),
                    expected: x.shape().to_vec(),
                    actual: b.shape().to_vec(),
                });
            }
            Ok((x.zip_map(b, |p, q| p + q), Cache::None))
        }
        (LayerDef::Flatten, _) => {
            let n = x.batch();
            Ok((x.clone().reshape([n, x.row_len()])?, Cache::None))
        }
        _ => Err(bad_params(name, def)),
    }
}

/// Gradients produced by one layer's backward.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    /// One entry per layer input; `None` where not requested.
    pub inputs: Vec<Option<Tensor<T>>>,
    /// Aligned with [`LayerParams::trainable`].
    pub params: Vec<Tensor<T>>,
}

/// Backpropagates `grad` (shaped like `output`) through one layer.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    def: &LayerDef,
    name: &str,
    params: &LayerParams<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    cache: &Cache<T>,
    grad: &Tensor<T>,
    need_input_grad: bool,
) -> Result<LayerGrads<T>> {
    if grad.shape() != output.shape() {
        return Err(Error::ShapeMismatch {
            layer: String::from(name),
            expected: output.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    let x = inputs[0];
    let single = |g: Option<Tensor<T>>, params: Vec<Tensor<T>>| LayerGrads {
        inputs: vec![g],
        params,
    };
    match (def, params, cache) {
        (
            &LayerDef::Conv2d {
                kernel,
                stride,
                padding,
                ..
            },
            LayerParams::Affine { weight, bias },
            Cache::Conv { cols },
        ) => {
            let (dx, dw, db) = conv::backward(x, weight, bias.is_some(), cols, grad, kernel, stride, padding, need_input_grad);
            let mut p = vec![dw];
            p.extend(db);
            Ok(single(dx, p))
        }
        (LayerDef::Linear { .. }, LayerParams::Affine { weight, bias }, _) => {
            let (dx, dw, db) = linear::backward(x, weight, bias.is_some(), grad, need_input_grad);
            let mut p = vec![dw];
            p.extend(db);
            Ok(single(dx, p))
        }
        (LayerDef::BatchNorm2d { .. }, LayerParams::Norm { gamma, .. }, Cache::Norm(c)) => {
            let (dx, dgamma, dbeta) = norm::backward(x, gamma, c, grad);
            Ok(single(need_input_grad.then_some(dx), vec![dgamma, dbeta]))
        }
        (LayerDef::Relu, _, _) => {
            let dx = need_input_grad.then(|| grad.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() }));
            Ok(single(dx, Vec::new()))
        }
        (LayerDef::MaxPool2d { .. }, _, Cache::MaxPool { argmax }) => {
            let dx = need_input_grad.then(|| pool::max_backward(x.shape(), argmax, grad));
            Ok(single(dx, Vec::new()))
        }
        (&LayerDef::AvgPool2d { kernel, stride }, _, _) => {
            let dx = need_input_grad.then(|| pool::avg_backward(x.shape(), kernel, stride, grad));
            Ok(single(dx, Vec::new()))
        }
        (LayerDef::Add, _, _) => {
            let g = need_input_grad.then(|| grad.clone());
            Ok(LayerGrads {
                inputs: vec![g.clone(), g],
                params: Vec::new(),
            })
        }
        (LayerDef::Flatten, _, _) => {
            let dx = if need_input_grad {
                Some(grad.clone().reshape(x.shape().to_vec())?)
            } else {
                None
            };
            Ok(single(dx, Vec::new()))
        }
        _ => Err(bad_params(name, def)),
    }
}
