//! Checkpoints: parameters and optimizer state as safetensors, with the
//! architecture and quantization state as JSON in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use faq_core::data::Normalization;
use faq_core::graph::Architecture;
use faq_core::models::ModelSpec;
use faq_core::optim::MomentumState;
use faq_core::quant::ActQuant;
use faq_core::train::TrainState;
use faq_core::{Network, PrecisionPolicy, QuantNet, QuantSpec, Scalar, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "faq";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: Option<ModelSpec>,
    pub architecture: Architecture,
    pub policy: PrecisionPolicy,
    pub input_spec: Option<QuantSpec>,
    /// `(node, quantizer)` for every quantized ReLU.
    pub activations: Vec<(usize, ActQuant)>,
    pub normalization: Normalization,
    pub epoch: usize,
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub state: TrainState<T>,
}

fn encode<T: Scalar>(t: &Tensor<T>) -> (Dtype, Vec<u8>) {
    if std::mem::size_of::<T>() == 4 {
        (Dtype::F32, t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect())
    }
}

fn decode<T: Scalar>(name: &str, view: &TensorView<'_>, dst: &mut Tensor<T>) -> Result<()> {
    if view.shape() != dst.shape() {
        return Err(Error::Format(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            view.shape(),
            dst.shape()
        )));
    }
    let bytes = view.data();
    let out = dst.data_mut();
    match view.dtype() {
        Dtype::F32 => {
            for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for (o, b) in out.iter_mut().zip(bytes.chunks_exact(8)) {
                *o = T::from_f64(f64::from_le_bytes(b.try_into().unwrap()));
            }
        }
        other => return Err(Error::Format(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    }
    Ok(())
}

fn param_key(net_node: &str, param: &str) -> String {
    format!("{net_node}.{param}")
}

fn momentum_key(node: &str, k: usize) -> String {
    format!("momentum/{node}/{k}")
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(state: TrainState<T>, model: Option<ModelSpec>, normalization: Normalization, seed: u64) -> Self {
        let q = &state.qnet;
        let meta = CheckpointMeta {
            format: FORMAT_VERSION,
            model,
            architecture: q.network().architecture(),
            policy: *q.policy(),
            input_spec: q.input_spec(),
            activations: q.relu_quantizers(),
            normalization,
            epoch: state.epoch,
            iteration: state.iteration,
            seed,
        };
        Self { meta, state }
    }

    pub fn network(&self) -> &Network<T> {
        self.state.qnet.network()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = self.state.qnet.network();
        let mut tensors: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (node, params) in net.nodes().iter().zip(net.params()) {
            for (pname, t) in params.named() {
                let (dt, b) = encode(t);
                tensors.push((param_key(&node.name, pname), dt, t.shape().to_vec(), b));
            }
        }
        for (node, vel) in net.nodes().iter().zip(&self.state.momentum.velocity) {
            for (k, t) in vel.iter().enumerate() {
                let (dt, b) = encode(t);
                tensors.push((momentum_key(&node.name, k), dt, t.shape().to_vec(), b));
            }
        }
        let views = tensors
            .iter()
            .map(|(n, dt, s, b)| Ok((n.as_str(), TensorView::new(*dt, s.clone(), b).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let info = Some(HashMap::from([(META_KEY.to_string(), meta)]));
        safetensors::serialize(views, &info).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Format("checkpoint has no `faq` metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| Error::Format(e.to_string()))?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint format {}", meta.format)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut net = Network::<T>::from_architecture(meta.architecture.clone())?;
        let names: Vec<String> = net.nodes().iter().map(|n| n.name.clone()).collect();
        for (name, params) in names.iter().zip(net.params_mut()) {
            for (pname, t) in params.named_mut() {
                let key = param_key(name, pname);
                let view = st.tensor(&key).map_err(|_| Error::Format(format!("missing tensor `{key}`")))?;
                decode(&key, &view, t)?;
            }
        }
        let mut momentum = MomentumState::zeros(&net);
        for (name, vel) in names.iter().zip(momentum.velocity.iter_mut()) {
            for (k, t) in vel.iter_mut().enumerate() {
                let key = momentum_key(name, k);
                if let Ok(view) = st.tensor(&key) {
                    decode(&key, &view, t)?;
                }
            }
        }
        let mut qnet = QuantNet::new(net, meta.policy)?;
        if !meta.policy.is_float() {
            qnet.set_activation_quantizers(meta.input_spec, &meta.activations)?;
        }
        let state = TrainState {
            qnet,
            momentum,
            epoch: meta.epoch,
            iteration: meta.iteration,
        };
        Ok(Self { meta, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Format(format!("safetensors: {e:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use faq_core::calibrate::default_uncalibrated_spec;
    use faq_core::models::{build_model, random_small};

    #[test]
    fn float_round_trip() {
        let net = build_model::<f32>(&ModelSpec::MnistCnn, 3).unwrap();
        let mut state = TrainState::new(QuantNet::float(net));
        state.epoch = 4;
        state.momentum.velocity[0][0].data_mut()[5] = 0.25;
        let ck = Checkpoint::new(state, Some(ModelSpec::MnistCnn), Normalization::identity(1), 9);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn quantized_round_trip_restores_grids() {
        for seed in 0..6 {
            let net = random_small::<f64>(seed).unwrap();
            let mut q = QuantNet::new(net, PrecisionPolicy::fixed(4)).unwrap();
            q.apply_uncalibrated_defaults(QuantSpec::signed(8, -5));
            let ck = Checkpoint::new(TrainState::new(q), None, Normalization::identity(1), seed);
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back.state.qnet, ck.state.qnet);
            assert!(back.meta.activations.iter().all(|(_, a)| *a == default_uncalibrated_spec(4) || a.spec.bits == 8));
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::<f32>::from_bytes(b"not a checkpoint").is_err());
        let empty = safetensors::serialize(Vec::<(&str, TensorView<'_>)>::new(), &None).unwrap();
        assert!(matches!(Checkpoint::<f32>::from_bytes(&empty), Err(Error::Format(_))));
    }
}
