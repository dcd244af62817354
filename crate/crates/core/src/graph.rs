//! Networks as topologically ordered layer graphs.
//!
//! Value `0` is the network input and value `i + 1` is the output of node
//! `i`; the last node produces the network output. A forward pass returns a
//! [`Trace`] holding every intermediate value, which the backward pass
//! consumes.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, affine_per_channel, fold_scale_shift, stats_for, Cache, LayerDef, LayerParams};
use crate::quant::{ActQuant, QuantSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batchnorm normalizes with batch statistics.
    Train,
    /// Batchnorm normalizes with running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerDef,
    /// Value indices (0 = network input, `i + 1` = node `i`).
    pub inputs: Vec<usize>,
}

/// Serializable topology of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    shapes: Vec<Vec<usize>>,
    error: Option<Error>,
}

impl NetworkBuilder {
    pub fn new(input_shape: impl Into<Vec<usize>>) -> Self {
        let input_shape = input_shape.into();
        Self {
            shapes: vec![input_shape.clone()],
            input_shape,
            nodes: Vec::new(),
            error: None,
        }
    }

    /// Value id of the most recently added node (or the input).
    pub fn last(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, value: usize) -> &[usize] {
        &self.shapes[value]
    }

    /// Appends a layer fed by the previous value.
    pub fn add(&mut self, name: impl Into<String>, layer: LayerDef) -> usize {
        let prev = self.last();
        self.add_from(name, layer, &[prev])
    }

    /// Appends a layer fed by the given values; returns its value id.
    pub fn add_from(&mut self, name: impl Into<String>, layer: LayerDef, inputs: &[usize]) -> usize {
        let name = name.into();
        let id = self.nodes.len() + 1;
        if self.error.is_none() {
            let result = if inputs.iter().any(|&i| i >= id) {
                Err(Error::InvalidNetwork(format!("layer `{name}` reads a value that does not exist yet")))
            } else {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shapes[i].as_slice()).collect();
                layer.output_shape(&name, &shapes)
            };
            match result {
                Ok(s) => self.shapes.push(s),
                Err(e) => {
                    self.error = Some(e);
                    self.shapes.push(Vec::new());
                }
            }
        } else {
            self.shapes.push(Vec::new());
        }
        self.nodes.push(Node {
            name,
            layer,
            inputs: inputs.to_vec(),
        });
        id
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
        }
    }

    /// Builds a network with zero weights (see `models` for initialization).
    pub fn build<T: Scalar>(self) -> Result<Network<T>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Network::from_architecture(Architecture {
            input_shape: self.input_shape,
            nodes: self.nodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: Vec<LayerParams<T>>,
    /// Per-sample shape of every value.
    shapes: Vec<Vec<usize>>,
}

/// Quantization applied on top of a float forward pass.
///
/// Slices are indexed by node. `params[i]` replaces the weights and bias of a
/// conv/linear node; `norm[i]` turns a batchnorm into the quantized affine
/// `Q(scale) * x + Q(shift)`; `act[i]` quantizes the output of a ReLU (after
/// clipping, with a straight-through gradient inside the clip range) or an
/// average pool.
#[derive(Debug, Clone, Copy)]
pub struct QuantView<'a, T> {
    pub input: Option<QuantSpec>,
    pub params: &'a [Option<LayerParams<T>>],
    pub norm: &'a [Option<NormSpecs>],
    pub act: &'a [Option<ActQuant>],
}

/// Specs for a folded batchnorm's multiplier and additive constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSpecs {
    pub scale: QuantSpec,
    pub shift: QuantSpec,
}

#[derive(Debug, Clone)]
pub struct Trace<T> {
    mode: Mode,
    values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T> Trace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.values.last().unwrap()
    }

    /// Output of node `i`.
    pub fn node_output(&self, i: usize) -> &Tensor<T> {
        &self.values[i + 1]
    }

    /// Input values of node `i`, in order.
    pub fn node_inputs<'a>(&'a self, nodes: &[Node], i: usize) -> Vec<&'a Tensor<T>> {
        nodes[i].inputs.iter().map(|&v| &self.values[v]).collect()
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.pop().unwrap()
    }
}

/// Parameter gradients, aligned with [`LayerParams::trainable`] per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub per_node: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            per_node: net
                .params
                .iter()
                .map(|p| p.trainable().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.per_node.iter_mut().zip(&other.per_node) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.per_node.iter_mut().flatten() {
            t.scale(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.per_node.iter().flatten()
    }
}

impl<T: Scalar> Network<T> {
    pub fn from_architecture(arch: Architecture) -> Result<Self> {
        let mut shapes = vec![arch.input_shape.clone()];
        let mut names = BTreeSet::new();
        for (i, node) in arch.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::InvalidNetwork(format!("duplicate layer name `{}`", node.name)));
            }
            if node.inputs.iter().any(|&v| v > i) {
                return Err(Error::InvalidNetwork(format!(
                    "layer `{}` reads a later value",
                    node.name
                )));
            }
            let ins: Vec<&[usize]> = node.inputs.iter().map(|&v| shapes[v].as_slice()).collect();
            let out = node.layer.output_shape(&node.name, &ins)?;
            shapes.push(out);
        }
        if arch.nodes.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        Ok(Self {
            params: arch.nodes.iter().map(|n| LayerParams::zeros_for(&n.layer)).collect(),
            input_shape: arch.input_shape,
            nodes: arch.nodes,
            shapes,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of node `i`.
    pub fn node_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Indices of conv and linear nodes, in order.
    pub fn weight_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].layer.has_weights()).collect()
    }

    /// Indices of ReLU nodes, in order.
    pub fn relu_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].layer == LayerDef::Relu)
            .collect()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().flat_map(|p| p.trainable()).map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            params: self.params.iter().map(LayerParams::cast).collect(),
            shapes: self.shapes.clone(),
        }
    }

    /// Replaces the parameters of node `i`, checking shapes.
    pub fn set_params(&mut self, i: usize, params: LayerParams<T>) -> Result<()> {
        let current = &self.params[i];
        let same = current.named().len() == params.named().len()
            && current
                .named()
                .iter()
                .zip(params.named())
                .all(|((a, x), (b, y))| *a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::InvalidNetwork(format!(
                "parameters for `{}` do not match its layer definition",
                self.nodes[i].name
            )));
        }
        self.params[i] = params;
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![input.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected,
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.forward_with(input, mode, None)
    }

    /// Output only, in eval mode.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Eval)?.into_output())
    }

    pub fn forward_with(&self, input: &Tensor<T>, mode: Mode, quant: Option<&QuantView<'_, T>>) -> Result<Trace<T>> {
        self.check_input(input)?;
        let first = match quant.and_then(|q| q.input) {
            Some(spec) => {
                input.check_finite("input")?;
                input.map(|v| spec.apply(v))
            }
            None => input.clone(),
        };
        let mut values = Vec::with_capacity(self.nodes.len() + 1);
        values.push(first);
        let mut caches = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&v| &values[v]).collect();
            let (y, cache) = self.node_forward(i, &ins, mode, quant)?;
            values.push(y);
            caches.push(cache);
        }
        Ok(Trace { mode, values, caches })
    }

    fn node_forward(
        &self,
        i: usize,
        ins: &[&Tensor<T>],
        mode: Mode,
        quant: Option<&QuantView<'_, T>>,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let node = &self.nodes[i];
        let params = quant
            .and_then(|q| q.params[i].as_ref())
            .unwrap_or(&self.params[i]);
        let act = quant.and_then(|q| q.act[i]);
        match (&node.layer, quant.and_then(|q| q.norm[i])) {
            (&LayerDef::BatchNorm2d { eps, .. }, Some(specs)) => {
                let LayerParams::Norm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } = params
                else {
                    unreachable!()
                };
                let x = ins[0];
                let cache = stats_for(x, running_mean, running_var, T::from_f64(eps), mode);
                let (scale, shift) = quantized_scale_shift(gamma.data(), beta.data(), &cache.mean, &cache.inv_std, specs);
                Ok((affine_per_channel(x, &scale, &shift), Cache::Norm(cache)))
            }
            (LayerDef::Relu, _) if act.is_some() => {
                let aq = act.unwrap();
                Ok((ins[0].map(|v| aq.apply(v)), Cache::None))
            }
            (LayerDef::AvgPool2d { .. }, _) if act.is_some() => {
                let (y, cache) = layers::forward(&node.layer, &node.name, params, ins, mode)?;
                let aq = act.unwrap();
                Ok((y.map(|v| aq.apply(v)), cache))
            }
            _ => layers::forward(&node.layer, &node.name, params, ins, mode),
        }
    }

    pub fn backward(&self, trace: &Trace<T>, grad: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with(trace, grad, None)
    }

    /// Backpropagates `grad` (shaped like the trace output). With a
    /// [`QuantView`], gradients pass straight through every quantizer; a
    /// quantized ReLU passes gradient only where `0 < x <= y_max`.
    pub fn backward_with(
        &self,
        trace: &Trace<T>,
        grad: &Tensor<T>,
        quant: Option<&QuantView<'_, T>>,
    ) -> Result<Gradients<T>> {
        if grad.shape() != trace.output().shape() {
            return Err(Error::ShapeMismatch {
                layer: self.nodes.last().unwrap().name.clone(),
                expected: trace.output().shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut vgrads: Vec<Option<Tensor<T>>> = vec![None; n + 1];
        vgrads[n] = Some(grad.clone());
        let mut out = Gradients::zeros_like(self);
        for i in (0..n).rev() {
            let Some(g) = vgrads[i + 1].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let ins = trace.node_inputs(&self.nodes, i);
            let need_input = node.inputs.iter().any(|&v| v > 0);
            let params = quant
                .and_then(|q| q.params[i].as_ref())
                .unwrap_or(&self.params[i]);
            let act = quant.and_then(|q| q.act[i]);
            let lg = match &node.layer {
                LayerDef::Relu if act.is_some() => {
                    let clip = T::from_f64(act.unwrap().clip);
                    let dx = g.zip_map(ins[0], |g, x| if x > T::zero() && x <= clip { g } else { T::zero() });
                    layers::LayerGrads {
                        inputs: vec![Some(dx)],
                        params: Vec::new(),
                    }
                }
                layer => layers::backward(
                    layer,
                    &node.name,
                    params,
                    &ins,
                    trace.node_output(i),
                    &trace.caches[i],
                    &g,
                    need_input,
                )?,
            };
            for (&v, gi) in node.inputs.iter().zip(lg.inputs) {
                if v == 0 {
                    continue;
                }
                if let Some(gi) = gi {
                    match &mut vgrads[v] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            if !lg.params.is_empty() {
                out.per_node[i] = lg.params;
            }
        }
        Ok(out)
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// statistics of every batchnorm layer.
    pub fn commit_running_stats(&mut self, trace: &Trace<T>) {
        if trace.mode != Mode::Train {
            return;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let (LayerDef::BatchNorm2d { momentum, .. }, Cache::Norm(c)) = (&node.layer, &trace.caches[i]) else {
                continue;
            };
            let LayerParams::Norm {
                running_mean,
                running_var,
                ..
            } = &mut self.params[i]
            else {
                continue;
            };
            let m = T::from_f64(*momentum);
            let keep = T::one() - m;
            for (r, &b) in running_mean.data_mut().iter_mut().zip(&c.mean) {
                *r = keep * *r + m * b;
            }
            if let Some(v) = &c.batch_var_unbiased {
                for (r, &b) in running_var.data_mut().iter_mut().zip(v) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// BN multiplier and shift, each rounded onto its grid.
pub fn quantized_scale_shift<T: Scalar>(
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
    specs: NormSpecs,
) -> (Vec<T>, Vec<T>) {
    let (scale, shift) = fold_scale_shift(gamma, beta, mean, inv_std);
    (
        scale.into_iter().map(|v| specs.scale.apply(v)).collect(),
        shift.into_iter().map(|v| specs.shift.apply(v)).collect(),
    )
}

/// A network instance that remembers its last forward pass.
#[derive(Debug)]
pub struct Executor<'n, T> {
    net: &'n Network<T>,
    trace: Option<Trace<T>>,
}

impl<'n, T: Scalar> Executor<'n, T> {
    pub fn new(net: &'n Network<T>) -> Self {
        Self { net, trace: None }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<&Tensor<T>> {
        self.trace = Some(self.net.forward(input, mode)?);
        Ok(self.trace.as_ref().unwrap().output())
    }

    /// Consumes the recorded forward pass.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Gradients<T>> {
        let trace = self.trace.take().ok_or(Error::BackwardBeforeForward)?;
        self.net.backward(&trace, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkBuilder {
        let mut b = NetworkBuilder::new([1, 4, 4]);
        b.add("conv", LayerDef::conv(1, 2, 3, 1, 1));
        b.add("relu", LayerDef::Relu);
        b.add("flat", LayerDef::Flatten);
        b.add("fc", LayerDef::linear(32, 3));
        b
    }

    #[test]
    fn build_checks_shapes() {
        let mut b = NetworkBuilder::new([1, 4, 4]);
        b.add("fc", LayerDef::linear(10, 3));
        assert!(matches!(b.build::<f64>(), Err(Error::ShapeMismatch { .. })));
        let net = tiny().build::<f64>().unwrap();
        assert_eq!(net.output_shape(), &[3]);
        assert_eq!(net.weight_nodes(), vec![0, 3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = NetworkBuilder::new([4]);
        b.add("a", LayerDef::Relu);
        b.add("a", LayerDef::Relu);
        assert!(b.build::<f32>().is_err());
    }

    #[test]
    fn input_shape_mismatch_names_input() {
        let net = tiny().build::<f64>().unwrap();
        let x = Tensor::zeros([2, 1, 5, 5]);
        match net.forward(&x, Mode::Eval) {
            Err(Error::ShapeMismatch { layer, expected, actual }) => {
                assert_eq!(layer, "input");
                assert_eq!(expected, vec![2, 1, 4, 4]);
                assert_eq!(actual, vec![2, 1, 5, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let net = tiny().build::<f64>().unwrap();
        let mut ex = Executor::new(&net);
        assert_eq!(ex.backward(&Tensor::zeros([1, 3])), Err(Error::BackwardBeforeForward));
        ex.forward(&Tensor::zeros([1, 1, 4, 4]), Mode::Train).unwrap();
        assert!(ex.backward(&Tensor::zeros([1, 3])).is_ok());
        assert_eq!(ex.backward(&Tensor::zeros([1, 3])), Err(Error::BackwardBeforeForward));
    }

    #[test]
    fn residual_gradients_accumulate() {
        // y = relu(x) + relu(x) -> dy/dx = 2 where x > 0
        let mut b = NetworkBuilder::new([3]);
        let r = b.add("relu", LayerDef::Relu);
        b.add_from("add", LayerDef::Add, &[r, r]);
        b.add("fc", LayerDef::Linear { in_features: 3, out_features: 1, bias: false });
        let mut net = b.build::<f64>().unwrap();
        net.set_params(
            2,
            LayerParams::Affine {
                weight: Tensor::from_f64([1, 3], &[1.0, 1.0, 1.0]).unwrap(),
                bias: None,
            },
        )
        .unwrap();
        let x = Tensor::from_f64([1, 3], &[1.0, -1.0, 2.0]).unwrap();
        let trace = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(trace.output().data(), &[6.0]);
        let g = net.backward(&trace, &Tensor::full([1, 1], 1.0)).unwrap();
        assert_eq!(g.per_node[2][0].data(), &[2.0, 0.0, 4.0]);
    }
}
