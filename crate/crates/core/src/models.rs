//! Model zoo: a small MNIST CNN and a CIFAR-style residual network.

use alloc::format;
use alloc::string::String;

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Network, NetworkBuilder};
use crate::layers::{LayerDef, LayerParams};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelSpec {
    /// conv(16)-ReLU-pool-conv(32)-ReLU-pool-linear(10) on 1x28x28.
    MnistCnn,
    /// Residual network for 3x32x32 inputs: a stem conv, four stages of
    /// basic blocks with widths `w, 2w, 4w, 8w`, a 4x4 average pool and a
    /// linear classifier.
    CifarResnet { blocks: [usize; 4], width: usize },
}

impl ModelSpec {
    /// Reduced residual net for desk-scale runs.
    pub fn cifar_small() -> Self {
        ModelSpec::CifarResnet {
            blocks: [1, 1, 1, 1],
            width: 16,
        }
    }

    /// Full-depth ResNet-18 layout.
    pub fn resnet18() -> Self {
        ModelSpec::CifarResnet {
            blocks: [2, 2, 2, 2],
            width: 64,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelSpec::MnistCnn => [1, 28, 28],
            ModelSpec::CifarResnet { .. } => [3, 32, 32],
        }
    }

    pub fn builder(&self) -> NetworkBuilder {
        match *self {
            ModelSpec::MnistCnn => mnist_cnn(),
            ModelSpec::CifarResnet { blocks, width } => cifar_resnet(blocks, width),
        }
    }
}

fn mnist_cnn() -> NetworkBuilder {
    let mut b = NetworkBuilder::new([1, 28, 28]);
    b.add("conv1", LayerDef::conv(1, 16, 3, 1, 1));
    b.add("relu1", LayerDef::Relu);
    b.add("pool1", LayerDef::MaxPool2d { kernel: 2, stride: 2 });
    b.add("conv2", LayerDef::conv(16, 32, 3, 1, 1));
    b.add("relu2", LayerDef::Relu);
    b.add("pool2", LayerDef::MaxPool2d { kernel: 2, stride: 2 });
    b.add("flatten", LayerDef::Flatten);
    b.add("fc", LayerDef::linear(32 * 7 * 7, 10));
    b
}

fn conv_nb(cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerDef {
    LayerDef::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding: kernel / 2,
        bias: false,
    }
}

fn cifar_resnet(blocks: [usize; 4], width: usize) -> NetworkBuilder {
    let mut b = NetworkBuilder::new([3, 32, 32]);
    b.add("stem.conv", conv_nb(3, width, 3, 1));
    b.add("stem.bn", LayerDef::batchnorm(width));
    let mut x = b.add("stem.relu", LayerDef::Relu);
    let mut cin = width;
    for (stage, &count) in blocks.iter().enumerate() {
        let cout = width << stage;
        for blk in 0..count {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, blk + 1);
            b.add_from(format!("{p}.conv1"), conv_nb(cin, cout, 3, stride), &[x]);
            b.add(format!("{p}.bn1"), LayerDef::batchnorm(cout));
            b.add(format!("{p}.relu1"), LayerDef::Relu);
            b.add(format!("{p}.conv2"), conv_nb(cout, cout, 3, 1));
            let main = b.add(format!("{p}.bn2"), LayerDef::batchnorm(cout));
            let short = if stride != 1 || cin != cout {
                b.add_from(format!("{p}.down.conv"), conv_nb(cin, cout, 1, stride), &[x]);
                b.add(format!("{p}.down.bn"), LayerDef::batchnorm(cout))
            } else {
                x
            };
            b.add_from(format!("{p}.add"), LayerDef::Add, &[main, short]);
            x = b.add(format!("{p}.relu2"), LayerDef::Relu);
            cin = cout;
        }
    }
    b.add("pool", LayerDef::AvgPool2d { kernel: 4, stride: 4 });
    b.add("flatten", LayerDef::Flatten);
    b.add("fc", LayerDef::linear(cin, 10));
    b
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, identity
/// batchnorm. Each layer draws from its own stream, so initialization of a
/// layer does not depend on the layers before it.
pub fn init_he<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let fan_ins: alloc::vec::Vec<Option<usize>> = net
        .nodes()
        .iter()
        .map(|n| match n.layer {
            LayerDef::Conv2d {
                in_channels, kernel, ..
            } => Some(in_channels * kernel * kernel),
            LayerDef::Linear { in_features, .. } => Some(in_features),
            _ => None,
        })
        .collect();
    for (i, params) in net.params_mut().iter_mut().enumerate() {
        let LayerParams::Affine { weight, bias } = params else {
            continue;
        };
        let std = Float::sqrt(2.0 / fan_ins[i].unwrap() as f64);
        let mut rng = stream(seed, Purpose::Init, i as u64, 0);
        for w in weight.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = T::from_f64(z * std);
        }
        if let Some(b) = bias {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Network<T>> {
    let mut net = spec.builder().build()?;
    init_he(&mut net, seed);
    Ok(net)
}

/// A randomly shaped small network for property tests: a conv stem with
/// optional batchnorm, an optional residual block, an optional pool and a
/// linear head. Batchnorm statistics and biases are randomized so the
/// folded constants are non-trivial.
pub fn random_small<T: Scalar>(seed: u64) -> Result<Network<T>> {
    use rand::Rng;
    let mut rng = stream(seed, Purpose::Synthetic, u64::MAX, 0);
    let cin = rng.random_range(1..=3);
    let side = [4usize, 6, 8][rng.random_range(0..3)];
    let k = rng.random_range(2..=6);
    let with_bn = rng.random_bool(0.6);
    let residual = rng.random_bool(0.5);
    let pool = rng.random_range(0..3);
    let classes = rng.random_range(3..=5);
    let mut b = NetworkBuilder::new([cin, side, side]);
    b.add(
        "conv1",
        LayerDef::Conv2d {
            in_channels: cin,
            out_channels: k,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: !with_bn,
        },
    );
    if with_bn {
        b.add("bn1", LayerDef::batchnorm(k));
    }
    let mut x = b.add("relu1", LayerDef::Relu);
    if residual {
        b.add("res.conv", conv_nb(k, k, 3, 1));
        let m = b.add("res.bn", LayerDef::batchnorm(k));
        b.add_from("res.add", LayerDef::Add, &[m, x]);
        x = b.add("res.relu", LayerDef::Relu);
    }
    let mut s = side;
    match pool {
        1 => {
            b.add_from("pool", LayerDef::MaxPool2d { kernel: 2, stride: 2 }, &[x]);
            s /= 2;
        }
        2 => {
            b.add_from("pool", LayerDef::AvgPool2d { kernel: 2, stride: 2 }, &[x]);
            s /= 2;
        }
        _ => {}
    }
    b.add("flatten", LayerDef::Flatten);
    b.add("fc", LayerDef::linear(k * s * s, classes));
    let mut net = b.build::<T>()?;
    init_he(&mut net, seed);
    for p in net.params_mut() {
        match p {
            LayerParams::Affine { bias: Some(bias), .. } => {
                for v in bias.data_mut() {
                    *v = T::from_f64(rng.random_range(-0.3..0.3));
                }
            }
            LayerParams::Norm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                for c in 0..gamma.len() {
                    gamma.data_mut()[c] = T::from_f64(rng.random_range(0.5..1.5));
                    beta.data_mut()[c] = T::from_f64(rng.random_range(-0.5..0.5));
                    running_mean.data_mut()[c] = T::from_f64(rng.random_range(-0.5..0.5));
                    running_var.data_mut()[c] = T::from_f64(rng.random_range(0.5..2.0));
                }
            }
            _ => {}
        }
    }
    Ok(net)
}

/// Short human-readable name for logs and file names.
pub fn model_name(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::MnistCnn => "mnist_cnn".into(),
        ModelSpec::CifarResnet { blocks, width } => format!(
            "cifar_resnet_{}{}{}{}_w{width}",
            blocks[0], blocks[1], blocks[2], blocks[3]
        ),
    }
}
