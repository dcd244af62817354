//! Activation range calibration.
//!
//! A handful of training batches go through the float network in eval
//! mode. For every ReLU the nearest-rank percentile of each batch's
//! activations is taken, the maximum over batches is rounded up to an even
//! power of two, and that ceiling fixes the layer's unsigned spec.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mode, Network};
use crate::qat::PrecisionPolicy;
use crate::quant::{activation_radix, ceil_log2, pow2, round_up_even_pow2, ActQuant, QuantSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Percentile level for ReLUs of at least 8 bits.
pub const LEVEL_8BIT: f64 = 0.9999;
/// Percentile level for narrower ReLUs.
pub const LEVEL_LOW_BIT: f64 = 0.999;

pub fn level_for_bits(bits: u32) -> f64 {
    if bits >= 8 {
        LEVEL_8BIT
    } else {
        LEVEL_LOW_BIT
    }
}

/// Nearest-rank percentile: the `ceil(level * N)`-th smallest value.
pub fn percentile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty tensor".into()));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidArgument(format!("percentile level {level} not in (0, 1]")));
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            tensor: "activations".into(),
            index: i,
        });
    }
    let n = values.len();
    // shave a relative epsilon so that e.g. 0.9999 * 10000 gives rank 9999
    let k = Float::ceil((level * n as f64) * (1.0 - 1e-12)).max(1.0) as usize;
    let k = k.min(n);
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Node index of the ReLU.
    pub node: usize,
    pub name: String,
    pub bits: u32,
    pub level: f64,
    pub batch_percentiles: Vec<f64>,
    pub max_percentile: f64,
    pub y_max: f64,
    pub radix: i32,
}

impl LayerCalibration {
    /// Record for an explicit ceiling `y_max` (a power of two).
    pub fn from_y_max(node: usize, name: &str, bits: u32, level: f64, y_max: f64) -> Self {
        Self {
            node,
            name: name.into(),
            bits,
            level,
            batch_percentiles: Vec::new(),
            max_percentile: y_max,
            y_max,
            radix: activation_radix(y_max, bits).expect("y_max must be a power of two"),
        }
    }

    pub fn quantizer(&self) -> ActQuant {
        ActQuant {
            spec: QuantSpec::unsigned(self.bits, self.radix),
            clip: self.y_max,
        }
    }
}

/// Spec of the network input: signed, scaled to the power-of-two ceiling of
/// the largest magnitude seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputCalibration {
    pub bits: u32,
    pub max_abs: f64,
    pub radix: i32,
}

impl InputCalibration {
    pub fn from_max_abs(bits: u32, max_abs: f64) -> Self {
        let p = if max_abs > 0.0 { ceil_log2(max_abs) } else { 0 };
        Self {
            bits,
            max_abs,
            radix: p - (bits as i32 - 1),
        }
    }

    pub fn spec(&self) -> QuantSpec {
        QuantSpec::signed(self.bits, self.radix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub input: InputCalibration,
    pub layers: Vec<LayerCalibration>,
    pub warnings: Vec<String>,
}

impl CalibrationReport {
    pub fn layer(&self, node: usize) -> Option<&LayerCalibration> {
        self.layers.iter().find(|l| l.node == node)
    }
}

/// Calibrates every ReLU of `net` (float parameters) on `batches`.
pub fn calibrate<T: Scalar>(
    net: &Network<T>,
    batches: &[Tensor<T>],
    policy: &PrecisionPolicy,
) -> Result<CalibrationReport> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one batch".into()));
    }
    let relus = net.relu_nodes();
    let mut warnings = Vec::new();
    if relus.is_empty() {
        warnings.push(String::from("network has no ReLU layers; nothing to calibrate"));
    }
    let mut per_layer: Vec<Vec<f64>> = relus.iter().map(|_| Vec::new()).collect();
    let mut max_abs = 0.0f64;
    let mut buf = Vec::new();
    for batch in batches {
        batch.check_finite("calibration batch")?;
        for v in batch.data() {
            max_abs = max_abs.max(v.as_f64().abs());
        }
        let trace = net.forward(batch, Mode::Eval)?;
        for (k, &r) in relus.iter().enumerate() {
            let bits = policy.activation_bits(&relus, r);
            buf.clear();
            buf.extend(trace.node_output(r).data().iter().map(|v| v.as_f64()));
            per_layer[k].push(percentile(&buf, level_for_bits(bits))?);
        }
    }
    let input_bits = if policy.is_float() { 8 } else { policy.input_bits };
    let mut layers = Vec::with_capacity(relus.len());
    for (k, &r) in relus.iter().enumerate() {
        let bits = policy.activation_bits(&relus, r);
        let name = &net.nodes()[r].name;
        let m = per_layer[k].iter().copied().fold(0.0f64, f64::max);
        let y_max = if m > 0.0 {
            round_up_even_pow2(m)?
        } else {
            warnings.push(format!("ReLU `{name}` produced only zeros; using y_max = 1"));
            1.0
        };
        layers.push(LayerCalibration {
            node: r,
            name: name.clone(),
            bits,
            level: level_for_bits(bits),
            batch_percentiles: per_layer[k].clone(),
            max_percentile: m,
            y_max,
            radix: activation_radix(y_max, bits)?,
        });
    }
    Ok(CalibrationReport {
        input: InputCalibration::from_max_abs(input_bits, max_abs),
        layers,
        warnings,
    })
}

/// Activation quantizer for uncalibrated runs: ceiling `2^(b/2) - 1`,
/// radix `-b/2`.
pub fn default_uncalibrated_spec(bits: u32) -> ActQuant {
    let half = (bits / 2) as i32;
    ActQuant {
        spec: QuantSpec::unsigned(bits, -half),
        clip: pow2(half) - 1.0,
    }
}

/// Fraction of `values` strictly above `y_max`.
pub fn clipped_fraction(values: &[f64], y_max: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > y_max).count() as f64 / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkBuilder;
    use crate::layers::LayerDef;
    use crate::models::init_he;
    use crate::rng::{stream, Purpose};
    use alloc::vec;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5).unwrap(), 50.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 100.0);
        assert_eq!(percentile(&v, 0.01).unwrap(), 1.0);
        assert_eq!(percentile(&[5.0], 0.9999).unwrap(), 5.0);
        assert!(percentile(&[], 0.5).is_err());
        let w: Vec<f64> = (1..=10000).map(f64::from).collect();
        assert_eq!(percentile(&w, 0.9999).unwrap(), 9999.0);
        assert_eq!(percentile(&w, 0.999).unwrap(), 9990.0);
    }

    #[test]
    fn max_then_even_power_of_two() {
        let m = [3.1, 5.2, 4.4, 4.9, 5.0].into_iter().fold(0.0f64, f64::max);
        assert_eq!(m, 5.2);
        assert_eq!(round_up_even_pow2(m).unwrap(), 16.0);
    }

    #[test]
    fn uncalibrated_defaults() {
        let a = default_uncalibrated_spec(8);
        assert_eq!((a.clip, a.spec.radix, a.max_value()), (15.0, -4, 15.0));
        let a = default_uncalibrated_spec(4);
        assert_eq!((a.clip, a.spec.radix, a.max_value()), (3.0, -2, 3.0));
        let a = default_uncalibrated_spec(2);
        assert_eq!((a.clip, a.spec.radix, a.max_value()), (1.0, -1, 1.0));
    }

    fn net() -> Network<f64> {
        let mut b = NetworkBuilder::new([1, 6, 6]);
        b.add("conv1", LayerDef::conv(1, 4, 3, 1, 1));
        b.add("relu1", LayerDef::Relu);
        b.add("conv2", LayerDef::conv(4, 4, 3, 1, 1));
        b.add("relu2", LayerDef::Relu);
        b.add("flat", LayerDef::Flatten);
        b.add("fc", LayerDef::linear(144, 3));
        let mut n = b.build().unwrap();
        init_he(&mut n, 1);
        n
    }

    fn batch(seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Purpose::Synthetic, 0, 0);
        Tensor::new(vec![16, 1, 6, 6], (0..576).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn report_covers_every_relu_once_and_is_deterministic() {
        let n = net();
        let batches: Vec<_> = (0..5).map(batch).collect();
        let p = PrecisionPolicy::fixed(4);
        let r = calibrate(&n, &batches, &p).unwrap();
        assert_eq!(r.layers.iter().map(|l| l.node).collect::<Vec<_>>(), n.relu_nodes());
        assert_eq!(r.layers[0].bits, 4);
        assert_eq!(r.layers[0].level, 0.999);
        assert_eq!(r.layers[1].bits, 8);
        assert_eq!(r.layers[1].level, 0.9999);
        for l in &r.layers {
            assert!(l.y_max >= l.max_percentile);
            assert_eq!(l.batch_percentiles.len(), 5);
        }
        assert_eq!(r, calibrate(&n, &batches, &p).unwrap());
        assert!(calibrate(&n, &[], &p).is_err());
    }

    #[test]
    fn clip_fraction_bounded_on_calibration_batches() {
        let n = net();
        let batches: Vec<_> = (0..5).map(batch).collect();
        let r = calibrate(&n, &batches, &PrecisionPolicy::fixed(8)).unwrap();
        for l in &r.layers {
            for b in &batches {
                let t = n.forward(b, Mode::Eval).unwrap();
                let vals: Vec<f64> = t.node_output(l.node).data().to_vec();
                assert!(clipped_fraction(&vals, l.y_max) <= 1.0 - l.level + 0.001);
            }
        }
    }

    #[test]
    fn all_zero_layer_and_relu_free_network() {
        let mut n = net();
        // zero the first conv so relu1 is identically zero
        for t in n.params_mut()[0].trainable_mut() {
            t.scale(0.0);
        }
        let r = calibrate(&n, &[batch(0)], &PrecisionPolicy::fixed(8)).unwrap();
        assert_eq!(r.layers[0].y_max, 1.0);
        assert!(r.warnings.iter().any(|w| w.contains("relu1")));

        let mut b = NetworkBuilder::new([3]);
        b.add("fc", LayerDef::linear(3, 2));
        let lin: Network<f64> = b.build().unwrap();
        let r = calibrate(&lin, &[Tensor::zeros([2, 3])], &PrecisionPolicy::fixed(8)).unwrap();
        assert!(r.layers.is_empty());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn input_spec_rule() {
        let c = InputCalibration::from_max_abs(8, 2.8);
        assert_eq!(c.spec(), QuantSpec::signed(8, 2 - 7));
        let c = InputCalibration::from_max_abs(8, 1.0);
        assert_eq!(c.radix, -7);
    }

    proptest! {
        #[test]
        fn subset_never_raises_y_max(seeds in prop::collection::vec(0u64..50, 2..5), cut in 1usize..4) {
            let n = net();
            let batches: Vec<_> = seeds.iter().map(|&s| batch(s)).collect();
            let cut = cut.min(batches.len());
            let p = PrecisionPolicy::fixed(4);
            let full = calibrate(&n, &batches, &p).unwrap();
            let sub = calibrate(&n, &batches[..cut], &p).unwrap();
            for (a, b) in sub.layers.iter().zip(&full.layers) {
                prop_assert!(a.y_max <= b.y_max);
            }
        }

        #[test]
        fn percentile_is_monotone_in_level(v in prop::collection::vec(-1.0e3f64..1.0e3, 1..200), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        }
    }
}
