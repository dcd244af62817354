//! Integer-only inference.
//!
//! [`lower`] turns a quantized network into integer codes plus power-of-two
//! radix offsets, folding batchnorm into an 8-bit multiplier and a 32-bit
//! additive code. [`int_forward`] then runs on `i32` codes alone: every
//! rescale is a shift, rounding is half away from zero like the quantizer,
//! and accumulations are checked for 32-bit overflow. Because every value
//! of the simulated forward pass is exactly representable, the dequantized
//! integer output equals the simulated output bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::quantized_scale_shift;
use crate::layers::{conv_output_extent, fold_scale_shift, stats_for, LayerDef, LayerParams};
use crate::qat::QuantNet;
use crate::quant::{exact_log2, pow2, QuantSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter codes at their declared width: value `k * 2^spec.radix`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeTensor {
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
}

impl CodeTensor {
    fn from_values<T: Scalar>(t: &Tensor<T>, spec: QuantSpec, what: &str) -> Result<Self> {
        let mut codes = Vec::with_capacity(t.len());
        for (i, v) in t.data().iter().enumerate() {
            let v = v.as_f64();
            if !spec.contains(v) {
                return Err(Error::Lowering(format!("{what}[{i}] = {v} is not on its grid")));
            }
            codes.push(spec.code(v) as i32);
        }
        Ok(Self {
            spec,
            shape: t.shape().to_vec(),
            codes,
        })
    }

    pub fn max_abs(&self) -> i64 {
        self.codes.iter().map(|&c| (c as i64).abs()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IntOp {
    Conv {
        stride: usize,
        padding: usize,
        weight: CodeTensor,
        bias: Option<CodeTensor>,
    },
    Linear {
        weight: CodeTensor,
        bias: Option<CodeTensor>,
    },
    /// Per-channel `scale * x + shift`.
    Norm { scale: CodeTensor, shift: CodeTensor },
    /// Clamp to `[0, max_code]` on the grid `2^radix`.
    Relu { radix: i32, max_code: i32 },
    MaxPool { kernel: usize, stride: usize },
    /// Sum over the window, then a right shift by `log2(kernel^2)`; with
    /// `requant`, rounded back onto `(radix, max_code)`.
    AvgPool {
        kernel: usize,
        stride: usize,
        requant: Option<(i32, i32)>,
    },
    Add,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntLayer {
    pub name: String,
    /// Value indices, as in the float graph.
    pub inputs: Vec<usize>,
    pub op: IntOp,
    /// Radix of this layer's output codes.
    pub out_radix: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerModel {
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub input_spec: QuantSpec,
    pub layers: Vec<IntLayer>,
}

/// A batch of activation codes sharing one radix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codes {
    pub shape: Vec<usize>,
    pub codes: Vec<i32>,
    pub radix: i32,
}

impl Codes {
    pub fn dequantize(&self) -> Tensor<f64> {
        let s = pow2(self.radix);
        Tensor::new(self.shape.clone(), self.codes.iter().map(|&c| c as f64 * s).collect()).unwrap()
    }

    /// Row-wise argmax (lowest index on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = self.codes.len() / self.shape[0];
        self.codes
            .chunks(k)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Quantizes a float batch onto the model's input grid.
pub fn quantize_input<T: Scalar>(model: &IntegerModel, x: &Tensor<T>) -> Result<Codes> {
    x.check_finite("input")?;
    Ok(Codes {
        shape: x.shape().to_vec(),
        codes: x.data().iter().map(|v| model.input_spec.code(v.as_f64()) as i32).collect(),
        radix: model.input_spec.radix,
    })
}

const I32_LIMIT: f64 = 2_147_483_647.0;

/// Static bookkeeping per value during lowering.
#[derive(Debug, Clone, Copy)]
struct ValueInfo {
    radix: i32,
    /// Upper bound on `|code|`.
    bound: f64,
}

fn overflow(name: &str) -> Error {
    Error::AccumulatorOverflow { layer: name.into() }
}

/// Lowers a quantized network. The network must have every activation
/// quantizer installed; batchnorm uses its running statistics.
pub fn lower<T: Scalar>(q: &QuantNet<T>) -> Result<IntegerModel> {
    if q.is_float() {
        return Err(Error::Lowering("float networks cannot be lowered".into()));
    }
    let input_spec = q
        .input_spec()
        .ok_or_else(|| Error::Lowering("network input has no quantization spec".into()))?;
    let net = q.network();
    let mut info = vec![ValueInfo {
        radix: input_spec.radix,
        bound: input_spec.max_code() as f64,
    }];
    let mut layers = Vec::with_capacity(net.nodes().len());
    for (i, node) in net.nodes().iter().enumerate() {
        let name = &node.name;
        let ins: Vec<ValueInfo> = node.inputs.iter().map(|&v| info[v]).collect();
        let x = ins[0];
        let (op, out) = match node.layer {
            LayerDef::Conv2d { .. } | LayerDef::Linear { .. } => {
                let Some(LayerParams::Affine { weight, bias }) = q.quantized_params(i) else {
                    return Err(Error::Lowering(format!("layer `{name}` has no quantized parameters")));
                };
                let w = CodeTensor::from_values(weight, q.weight_spec(i).unwrap(), &format!("{name}.weight"))?;
                let b = match bias {
                    Some(b) => Some(CodeTensor::from_values(b, q.bias_spec(i).unwrap(), &format!("{name}.bias"))?),
                    None => None,
                };
                let acc_radix = w.spec.radix + x.radix;
                let out_radix = b.as_ref().map_or(acc_radix, |b| acc_radix.min(b.spec.radix));
                let rows = w.shape[0];
                let fan = w.codes.len() / rows;
                let mut bound = 0.0f64;
                for o in 0..rows {
                    let l1: f64 = w.codes[o * fan..(o + 1) * fan].iter().map(|&c| (c as f64).abs()).sum();
                    let acc = l1 * x.bound;
                    let bias_part = b.as_ref().map_or(0.0, |b| (b.codes[o] as f64).abs() * pow2(b.spec.radix - out_radix));
                    let total = acc * pow2(acc_radix - out_radix) + bias_part;
                    if acc > I32_LIMIT || total > I32_LIMIT {
                        return Err(overflow(name));
                    }
                    bound = bound.max(total);
                }
                let op = if let LayerDef::Conv2d { stride, padding, .. } = node.layer {
                    IntOp::Conv {
                        stride,
                        padding,
                        weight: w,
                        bias: b,
                    }
                } else {
                    IntOp::Linear { weight: w, bias: b }
                };
                (op, ValueInfo { radix: out_radix, bound })
            }
            LayerDef::BatchNorm2d { eps, .. } => {
                let (Some(specs), LayerParams::Norm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }) = (q.norm_specs(i), &net.params()[i])
                else {
                    return Err(Error::Lowering(format!("layer `{name}` has no batchnorm specs")));
                };
                // a probe tensor of the right channel count; only the running stats are read
                let probe = Tensor::<T>::zeros([1, gamma.len(), 1, 1]);
                let stats = stats_for(&probe, running_mean, running_var, T::from_f64(eps), crate::graph::Mode::Eval);
                let (raw, _) = fold_scale_shift(gamma.data(), beta.data(), &stats.mean, &stats.inv_std);
                let limit = specs.scale.max_value() + specs.scale.step() / 2.0;
                if let Some((c, v)) = raw.iter().enumerate().find(|(_, v)| !(v.as_f64().abs() < limit)) {
                    return Err(Error::MultiplierRange {
                        layer: name.clone(),
                        channel: c,
                        value: v.as_f64(),
                    });
                }
                let (scale, shift) = quantized_scale_shift(gamma.data(), beta.data(), &stats.mean, &stats.inv_std, specs);
                let n = scale.len();
                let scale = Tensor::new([n], scale).unwrap();
                let shift = Tensor::new([n], shift).unwrap();
                let shift_limit = specs.shift.max_value();
                if let Some(c) = shift.data().iter().position(|v| v.as_f64().abs() >= shift_limit) {
                    return Err(Error::Lowering(format!(
                        "batchnorm `{name}` channel {c}: additive constant saturates its 32-bit range"
                    )));
                }
                let s = CodeTensor::from_values(&scale, specs.scale, &format!("{name}.scale"))?;
                let h = CodeTensor::from_values(&shift, specs.shift, &format!("{name}.shift"))?;
                let prod_radix = x.radix + s.spec.radix;
                let out_radix = prod_radix.min(h.spec.radix);
                let prod = s.max_abs() as f64 * x.bound;
                let total = prod * pow2(prod_radix - out_radix) + h.max_abs() as f64 * pow2(h.spec.radix - out_radix);
                if prod > I32_LIMIT || total > I32_LIMIT {
                    return Err(overflow(name));
                }
                (IntOp::Norm { scale: s, shift: h }, ValueInfo { radix: out_radix, bound: total })
            }
            LayerDef::Relu => {
                let aq = q
                    .act_quant(i)
                    .ok_or_else(|| Error::Lowering(format!("ReLU `{name}` has no activation quantizer")))?;
                let clip_ok = aq.spec.contains(aq.clip) || aq.clip >= aq.spec.max_value();
                if aq.spec.signed || !clip_ok {
                    return Err(Error::Lowering(format!("ReLU `{name}` clip {} is not on its grid", aq.clip)));
                }
                let max_code = aq.max_code() as i32;
                (
                    IntOp::Relu {
                        radix: aq.spec.radix,
                        max_code,
                    },
                    ValueInfo {
                        radix: aq.spec.radix,
                        bound: max_code as f64,
                    },
                )
            }
            LayerDef::MaxPool2d { kernel, stride } => (IntOp::MaxPool { kernel, stride }, x),
            LayerDef::AvgPool2d { kernel, stride } => {
                let shift = exact_log2((kernel * kernel) as f64)
                    .ok_or_else(|| Error::Lowering(format!("average pool `{name}` area is not a power of two")))?;
                let sum = x.bound * (kernel * kernel) as f64;
                if sum > I32_LIMIT {
                    return Err(overflow(name));
                }
                match q.act_quant(i) {
                    Some(aq) => {
                        if aq.spec.signed || !(aq.spec.contains(aq.clip) || aq.clip >= aq.spec.max_value()) {
                            return Err(Error::Lowering(format!("average pool `{name}` clip is not on its grid")));
                        }
                        let max_code = aq.max_code() as i32;
                        (
                            IntOp::AvgPool {
                                kernel,
                                stride,
                                requant: Some((aq.spec.radix, max_code)),
                            },
                            ValueInfo {
                                radix: aq.spec.radix,
                                bound: max_code as f64,
                            },
                        )
                    }
                    None => (
                        IntOp::AvgPool {
                            kernel,
                            stride,
                            requant: None,
                        },
                        ValueInfo {
                            radix: x.radix - shift,
                            bound: sum,
                        },
                    ),
                }
            }
            LayerDef::Add => {
                let y = ins[1];
                let r = x.radix.min(y.radix);
                let bound = x.bound * pow2(x.radix - r) + y.bound * pow2(y.radix - r);
                if bound > I32_LIMIT {
                    return Err(overflow(name));
                }
                (IntOp::Add, ValueInfo { radix: r, bound })
            }
            LayerDef::Flatten => (IntOp::Flatten, x),
        };
        info.push(out);
        layers.push(IntLayer {
            name: name.clone(),
            inputs: node.inputs.clone(),
            op,
            out_radix: out.radix,
        });
    }
    Ok(IntegerModel {
        input_shape: net.input_shape().to_vec(),
        input_spec,
        layers,
    })
}

/// `round(x / 2^s)` with ties away from zero, for `s >= 0`.
#[inline]
pub fn round_shift(x: i64, s: u32) -> i64 {
    if s == 0 {
        return x;
    }
    let half = 1i64 << (s - 1);
    if x >= 0 {
        (x + half) >> s
    } else {
        -((-x + half) >> s)
    }
}

/// `x * 2^(from - to)` exactly, or rounded when `from < to`.
#[inline]
fn rescale(x: i64, from: i32, to: i32) -> i64 {
    if from >= to {
        x << (from - to) as u32
    } else {
        round_shift(x, (to - from) as u32)
    }
}

fn to_i32(v: i64, name: &str) -> Result<i32> {
    i32::try_from(v).map_err(|_| overflow(name))
}

fn conv(
    name: &str,
    x: &Codes,
    w: &CodeTensor,
    bias: Option<&CodeTensor>,
    stride: usize,
    padding: usize,
    out_radix: i32,
) -> Result<Codes> {
    let &[n, cin, h, wd] = x.shape.as_slice() else { unreachable!() };
    let &[cout, _, k, _] = w.shape.as_slice() else { unreachable!() };
    let ho = conv_output_extent(h, k, stride, padding).unwrap();
    let wo = conv_output_extent(wd, k, stride, padding).unwrap();
    let acc_radix = w.spec.radix + x.radix;
    let mut out = vec![0i32; n * cout * ho * wo];
    for b in 0..n {
        let img = &x.codes[b * cin * h * wd..(b + 1) * cin * h * wd];
        for o in 0..cout {
            let filt = &w.codes[o * cin * k * k..(o + 1) * cin * k * k];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc: i32 = 0;
                    for c in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = img[(c * h + iy as usize) * wd + ix as usize];
                                let wv = filt[(c * k + ky) * k + kx];
                                acc = wv
                                    .checked_mul(xv)
                                    .and_then(|p| acc.checked_add(p))
                                    .ok_or_else(|| overflow(name))?;
                            }
                        }
                    }
                    let mut v = rescale(acc as i64, acc_radix, out_radix);
                    if let Some(bias) = bias {
                        v += rescale(bias.codes[o] as i64, bias.spec.radix, out_radix);
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = to_i32(v, name)?;
                }
            }
        }
    }
    Ok(Codes {
        shape: vec![n, cout, ho, wo],
        codes: out,
        radix: out_radix,
    })
}

fn linear(name: &str, x: &Codes, w: &CodeTensor, bias: Option<&CodeTensor>, out_radix: i32) -> Result<Codes> {
    let n = x.shape[0];
    let (o, f) = (w.shape[0], w.shape[1]);
    let acc_radix = w.spec.radix + x.radix;
    let mut out = vec![0i32; n * o];
    for b in 0..n {
        let row = &x.codes[b * f..(b + 1) * f];
        for j in 0..o {
            let mut acc: i32 = 0;
            for (&wv, &xv) in w.codes[j * f..(j + 1) * f].iter().zip(row) {
                acc = wv
                    .checked_mul(xv)
                    .and_then(|p| acc.checked_add(p))
                    .ok_or_else(|| overflow(name))?;
            }
            let mut v = rescale(acc as i64, acc_radix, out_radix);
            if let Some(bias) = bias {
                v += rescale(bias.codes[j] as i64, bias.spec.radix, out_radix);
            }
            out[b * o + j] = to_i32(v, name)?;
        }
    }
    Ok(Codes {
        shape: vec![n, o],
        codes: out,
        radix: out_radix,
    })
}

fn pool(x: &Codes, kernel: usize, stride: usize, f: impl Fn(&mut dyn Iterator<Item = i32>) -> Result<i32>) -> Result<Codes> {
    let &[n, c, h, w] = x.shape.as_slice() else { unreachable!() };
    let ho = conv_output_extent(h, kernel, stride, 0).unwrap();
    let wo = conv_output_extent(w, kernel, stride, 0).unwrap();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let src = &x.codes[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut it = (0..kernel * kernel).map(|t| src[(oy * stride + t / kernel) * w + ox * stride + t % kernel]);
                out.push(f(&mut it)?);
            }
        }
    }
    Ok(Codes {
        shape: vec![n, c, ho, wo],
        codes: out,
        radix: x.radix,
    })
}

/// Runs the integer model. `input` must sit on the model's input grid.
pub fn int_forward(model: &IntegerModel, input: &Codes) -> Result<Codes> {
    if input.radix != model.input_spec.radix || input.shape.len() != model.input_shape.len() + 1 || input.shape[1..] != model.input_shape[..] {
        return Err(Error::ShapeMismatch {
            layer: "input".into(),
            expected: model.input_shape.clone(),
            actual: input.shape.clone(),
        });
    }
    let mut values: Vec<Codes> = Vec::with_capacity(model.layers.len() + 1);
    values.push(input.clone());
    for layer in &model.layers {
        let name = layer.name.as_str();
        let x = &values[layer.inputs[0]];
        let y = match &layer.op {
            IntOp::Conv {
                stride,
                padding,
                weight,
                bias,
            } => conv(name, x, weight, bias.as_ref(), *stride, *padding, layer.out_radix)?,
            IntOp::Linear { weight, bias } => linear(name, x, weight, bias.as_ref(), layer.out_radix)?,
            IntOp::Norm { scale, shift } => {
                let &[n, c, h, w] = x.shape.as_slice() else { unreachable!() };
                let prod_radix = x.radix + scale.spec.radix;
                let mut codes = Vec::with_capacity(x.codes.len());
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let add = rescale(shift.codes[ch] as i64, shift.spec.radix, layer.out_radix);
                        for &v in &x.codes[base..base + h * w] {
                            let p = scale.codes[ch].checked_mul(v).ok_or_else(|| overflow(name))?;
                            codes.push(to_i32(rescale(p as i64, prod_radix, layer.out_radix) + add, name)?);
                        }
                    }
                }
                Codes {
                    shape: x.shape.clone(),
                    codes,
                    radix: layer.out_radix,
                }
            }
            &IntOp::Relu { radix, max_code } => Codes {
                shape: x.shape.clone(),
                codes: x
                    .codes
                    .iter()
                    .map(|&v| rescale(v as i64, x.radix, radix).clamp(0, max_code as i64) as i32)
                    .collect(),
                radix,
            },
            &IntOp::MaxPool { kernel, stride } => pool(x, kernel, stride, |it| Ok(it.max().unwrap()))?,
            &IntOp::AvgPool {
                kernel,
                stride,
                requant,
            } => {
                let mut sum = pool(x, kernel, stride, |it| {
                    let mut acc = 0i32;
                    for v in it {
                        acc = acc.checked_add(v).ok_or_else(|| overflow(name))?;
                    }
                    Ok(acc)
                })?;
                let shift = (kernel * kernel).trailing_zeros() as i32;
                sum.radix = x.radix - shift;
                if let Some((radix, max_code)) = requant {
                    for v in &mut sum.codes {
                        *v = rescale(*v as i64, sum.radix, radix).clamp(0, max_code as i64) as i32;
                    }
                    sum.radix = radix;
                }
                sum
            }
            IntOp::Add => {
                let z = &values[layer.inputs[1]];
                let r = layer.out_radix;
                let codes = x
                    .codes
                    .iter()
                    .zip(&z.codes)
                    .map(|(&a, &b)| to_i32(rescale(a as i64, x.radix, r) + rescale(b as i64, z.radix, r), name))
                    .collect::<Result<Vec<_>>>()?;
                Codes {
                    shape: x.shape.clone(),
                    codes,
                    radix: r,
                }
            }
            IntOp::Flatten => {
                let n = x.shape[0];
                Codes {
                    shape: vec![n, x.codes.len() / n],
                    codes: x.codes.clone(),
                    radix: x.radix,
                }
            }
        };
        debug_assert_eq!(y.radix, layer.out_radix, "layer {name}");
        values.push(y);
    }
    Ok(values.pop().unwrap())
}
