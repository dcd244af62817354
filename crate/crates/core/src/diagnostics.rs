//! Measurements of quantization effects during training.
//!
//! [`NoiseProbe`] tracks how far the realized steps of the quantized
//! weights stray from the steps SGD asks for on the shadow weights.
//! [`network_similarity`] compares two networks neuron by neuron.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::qat::QuantNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{StepObserver, StepSnapshot};

pub const DEFAULT_SMOOTHING: f64 = 0.9;

/// Cosine of two equal-length vectors, or `None` if either has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (Float::sqrt(aa) * Float::sqrt(bb))).clamp(-1.0, 1.0))
}

/// Exponential moving average with smoothing factor `alpha`, the weight of
/// the newest observation: `e <- alpha * a + (1 - alpha) * e`, starting
/// from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub alpha: f64,
    pub value: Vec<f64>,
}

impl EmaState {
    pub fn new(len: usize, alpha: f64) -> Self {
        Self {
            alpha,
            value: vec![0.0; len],
        }
    }

    pub fn update<T: Scalar>(&mut self, a: impl Iterator<Item = T>) {
        let add = self.alpha;
        let keep = 1.0 - self.alpha;
        for (e, x) in self.value.iter_mut().zip(a) {
            *e = keep * *e + add * x.as_f64();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSample {
    pub cosine: f64,
    /// One of the vectors had zero norm; `cosine` is reported as 0.
    pub degenerate: bool,
}

/// Folds the realized step `new_q - prev_q` into `ema` and returns the
/// cosine between `desired_step` and the updated average.
pub fn grad_noise_cosine<T: Scalar>(
    desired_step: &Tensor<T>,
    prev_q: &Tensor<T>,
    new_q: &Tensor<T>,
    ema: &mut EmaState,
) -> Result<NoiseSample> {
    for (name, t) in [("previous quantized weight", prev_q), ("new quantized weight", new_q)] {
        if t.shape() != desired_step.shape() {
            return Err(Error::ShapeMismatch {
                layer: String::from(name),
                expected: desired_step.shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    if ema.value.len() != desired_step.len() {
        return Err(Error::InvalidArgument(format!(
            "EMA has {} entries for a step of {}",
            ema.value.len(),
            desired_step.len()
        )));
    }
    ema.update(new_q.data().iter().zip(prev_q.data()).map(|(&n, &p)| n - p));
    Ok(match cosine(&desired_step.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), &ema.value) {
        Some(c) => NoiseSample {
            cosine: c,
            degenerate: false,
        },
        None => NoiseSample {
            cosine: 0.0,
            degenerate: true,
        },
    })
}

/// Per-layer noise cosines, sampled after every optimizer step.
#[derive(Debug, Clone)]
pub struct NoiseProbe {
    pub layers: Vec<usize>,
    pub names: Vec<String>,
    ema: Vec<EmaState>,
    /// `series[k][t]` is layer `k`'s cosine after its `t + 1`-th step.
    pub series: Vec<Vec<f64>>,
    pub degenerate_steps: usize,
    epoch_start: usize,
}

impl NoiseProbe {
    pub fn new<T: Scalar>(net: &Network<T>, alpha: f64) -> Self {
        let layers = net.weight_nodes();
        Self {
            names: layers.iter().map(|&i| net.nodes()[i].name.clone()).collect(),
            ema: layers
                .iter()
                .map(|&i| EmaState::new(net.params()[i].weight().unwrap().len(), alpha))
                .collect(),
            series: vec![Vec::new(); layers.len()],
            layers,
            degenerate_steps: 0,
            epoch_start: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    /// Every `k`-th sample as `(iteration, layer position, cosine)`.
    pub fn logged(&self, k: usize) -> Vec<(usize, usize, f64)> {
        let k = k.max(1);
        let mut out = Vec::new();
        for t in (k - 1..self.steps()).step_by(k) {
            for (l, s) in self.series.iter().enumerate() {
                out.push((t + 1, l, s[t]));
            }
        }
        out
    }

    /// Mean cosine per layer over iterations `from..=to` (1-based,
    /// clamped to what was recorded).
    pub fn window_mean(&self, from: usize, to: usize) -> Vec<Option<f64>> {
        self.series
            .iter()
            .map(|s| {
                let lo = from.max(1) - 1;
                let hi = to.min(s.len());
                (hi > lo).then(|| s[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
            })
            .collect()
    }
}

impl<T: Scalar> StepObserver<T> for NoiseProbe {
    fn after_step(&mut self, _iteration: usize, before: &StepSnapshot<T>, after: &QuantNet<T>) {
        for (k, (node, shadow_prev, q_prev)) in before.weights.iter().enumerate() {
            debug_assert_eq!(*node, self.layers[k]);
            let shadow_new = after.network().params()[*node].weight().unwrap();
            let q_new = after.forward_weight(*node).unwrap();
            let desired = shadow_new.zip_map(shadow_prev, |a, b| a - b);
            let s = grad_noise_cosine(&desired, q_prev, q_new, &mut self.ema[k]).expect("probe shapes match the network");
            self.degenerate_steps += usize::from(s.degenerate);
            self.series[k].push(s.cosine);
        }
    }

    fn epoch_summary(&mut self) -> Option<f64> {
        let from = self.epoch_start;
        self.epoch_start = self.steps();
        let vals: Vec<f64> = self.series.iter().flat_map(|s| s[from..].iter().copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub mean: f64,
    pub neurons: usize,
    pub excluded: usize,
    pub warnings: Vec<String>,
}

/// Mean cosine between corresponding neurons (conv output channels and
/// linear rows) of two networks with the same architecture.
pub fn network_similarity<T: Scalar>(a: &Network<T>, b: &Network<T>) -> Result<Similarity> {
    if a.architecture() != b.architecture() {
        return Err(Error::InvalidNetwork("networks have different architectures".into()));
    }
    let mut sum = 0.0;
    let mut neurons = 0;
    let mut excluded = 0;
    let mut warnings = Vec::new();
    for i in a.weight_nodes() {
        let (wa, wb) = (a.params()[i].weight().unwrap(), b.params()[i].weight().unwrap());
        let rows = wa.shape()[0];
        let len = wa.len() / rows;
        for r in 0..rows {
            let span = r * len..(r + 1) * len;
            match cosine(&wa.data()[span.clone()], &wb.data()[span]) {
                Some(c) => {
                    sum += c;
                    neurons += 1;
                }
                None => {
                    excluded += 1;
                    warnings.push(format!("neuron {r} of `{}` has zero norm; excluded", a.nodes()[i].name));
                }
            }
        }
    }
    if neurons == 0 {
        return Err(Error::InvalidArgument("no neuron with non-zero weights in both networks".into()));
    }
    Ok(Similarity {
        mean: sum / neurons as f64,
        neurons,
        excluded,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn exact_steps_converge_to_one() {
        let d = t(&[0.3, -0.1, 0.2]);
        let mut ema = EmaState::new(3, 0.9);
        let mut q = t(&[0.0, 0.0, 0.0]);
        let mut last = 0.0;
        for _ in 0..50 {
            let next = q.zip_map(&d, |a, b| a + b);
            last = grad_noise_cosine(&d, &q, &next, &mut ema).unwrap().cosine;
            q = next;
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_factor_weights_the_newest_step() {
        let mut ema = EmaState::new(1, 0.9);
        ema.update([1.0f64].into_iter());
        ema.update([2.0f64].into_iter());
        assert!((ema.value[0] - (0.9 * 2.0 + 0.1 * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_and_degenerate() {
        let mut ema = EmaState::new(2, 0.9);
        let s = grad_noise_cosine(&t(&[1.0, 0.0]), &t(&[0.0, 0.0]), &t(&[0.0, 2.0]), &mut ema).unwrap();
        assert_eq!(s.cosine, 0.0);
        assert!(!s.degenerate);
        let mut ema = EmaState::new(2, 0.9);
        let s = grad_noise_cosine(&t(&[1.0, 0.0]), &t(&[1.0, 1.0]), &t(&[1.0, 1.0]), &mut ema).unwrap();
        assert!(s.degenerate);
        assert!(grad_noise_cosine(&t(&[1.0]), &t(&[1.0, 1.0]), &t(&[1.0, 1.0]), &mut ema).is_err());
    }

    #[test]
    fn similarity_self_and_antipodal() {
        let a = build_model::<f64>(&ModelSpec::MnistCnn, 1).unwrap();
        assert!((network_similarity(&a, &a).unwrap().mean - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        for p in neg.params_mut() {
            for w in p.trainable_mut() {
                w.scale(-1.0);
            }
        }
        assert!((network_similarity(&a, &neg).unwrap().mean + 1.0).abs() < 1e-12);
        let other = build_model::<f64>(&ModelSpec::cifar_small(), 1).unwrap();
        assert!(network_similarity(&a, &other).is_err());
    }

    #[test]
    fn zero_neuron_excluded() {
        let a = build_model::<f64>(&ModelSpec::MnistCnn, 1).unwrap();
        let mut b = a.clone();
        if let crate::layers::LayerParams::Affine { weight, .. } = &mut b.params_mut()[0] {
            weight.data_mut()[..9].iter_mut().for_each(|v| *v = 0.0);
        }
        let s = network_similarity(&a, &b).unwrap();
        assert_eq!(s.excluded, 1);
        assert_eq!(s.warnings.len(), 1);
        assert!((s.mean - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 4), w in prop::collection::vec(-5.0f64..5.0, 4), s in 0.01f64..100.0) {
            if let Some(c) = cosine(&v, &w) {
                prop_assert!((-1.0..=1.0).contains(&c));
                let vs: Vec<f64> = v.iter().map(|x| x * s).collect();
                prop_assert!((cosine(&vs, &w).unwrap() - c).abs() < 1e-9);
                prop_assert!((cosine(&w, &v).unwrap() - c).abs() < 1e-12);
            }
        }

        #[test]
        fn similarity_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = build_model::<f64>(&ModelSpec::MnistCnn, s1).unwrap();
            let b = build_model::<f64>(&ModelSpec::MnistCnn, s2).unwrap();
            let x = network_similarity(&a, &b).unwrap().mean;
            let y = network_similarity(&b, &a).unwrap().mean;
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
