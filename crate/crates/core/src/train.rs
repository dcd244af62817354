//! Training loops: float baselines and fine-tuning under quantization.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, CalibrationReport, InputCalibration};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::graph::{Mode, Network};
use crate::optim::{sgd_step, MomentumState, TrainPlan, VirtualBatch};
use crate::qat::{PrecisionPolicy, QuantNet};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, its gradient w.r.t. the
/// logits, and the number of correct argmax predictions.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>, usize) {
    let n = logits.batch();
    let k = logits.row_len();
    assert_eq!(n, labels.len(), "one label per row");
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut loss = 0.0f64;
    let mut correct = 0;
    let inv_n = 1.0 / n as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
        let m = row[best].as_f64();
        let exps: Vec<f64> = row.iter().map(|v| num_traits::Float::exp(v.as_f64() - m)).collect();
        let z: f64 = exps.iter().sum();
        loss += num_traits::Float::ln(z) - (row[label].as_f64() - m);
        let g = &mut grad.data_mut()[r * k..(r + 1) * k];
        for j in 0..k {
            let p = exps[j] / z;
            let t = if j == label { 1.0 } else { 0.0 };
            g[j] = T::from_f64((p - t) * inv_n);
        }
    }
    (loss * inv_n, grad, correct)
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub qnet: QuantNet<T>,
    pub momentum: MomentumState<T>,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub iteration: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(qnet: QuantNet<T>) -> Self {
        Self {
            momentum: MomentumState::zeros(qnet.network()),
            qnet,
            epoch: 0,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub mean_grad_noise_cosine: Option<f64>,
}

/// Weights immediately before an optimizer step, handed to observers.
#[derive(Debug, Clone)]
pub struct StepSnapshot<T> {
    /// `(node, shadow weight, weight used by the forward pass)`.
    pub weights: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

/// Hook called after every optimizer step. Observers see the network but
/// cannot change it.
pub trait StepObserver<T> {
    fn after_step(&mut self, iteration: usize, before: &StepSnapshot<T>, after: &QuantNet<T>);

    /// Mean statistic for the epoch just finished, reported in metrics.
    fn epoch_summary(&mut self) -> Option<f64> {
        None
    }
}

fn snapshot<T: Scalar>(q: &QuantNet<T>) -> StepSnapshot<T> {
    StepSnapshot {
        weights: q
            .network()
            .weight_nodes()
            .into_iter()
            .map(|i| {
                let shadow = q.network().params()[i].weight().unwrap().clone();
                let fwd = q.forward_weight(i).unwrap().clone();
                (i, shadow, fwd)
            })
            .collect(),
    }
}

/// One pass over `data` in the order fixed by `(plan.seed, epoch)`.
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    norm: &Normalization,
    plan: &TrainPlan,
    mut observer: Option<&mut dyn StepObserver<T>>,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let (physical, multiplier) = plan.physical_batch_at(epoch);
    let hp = plan.sgd_params(epoch);
    let order = data.shuffled_indices(plan.seed, epoch as u64);
    let augment = plan.augment.then_some((plan.seed, epoch as u64));
    let mut vb = VirtualBatch::new(multiplier);
    let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
    let chunks: Vec<&[usize]> = order.chunks(physical).collect();
    let last = chunks.len() - 1;
    state.qnet.refresh_weight_specs()?;
    for (c, idx) in chunks.into_iter().enumerate() {
        let (x, labels) = data.batch::<T>(idx, norm, augment);
        let trace = state.qnet.quantized_forward(&x, Mode::Train)?;
        let (loss, dlogits, ok) = softmax_cross_entropy(trace.output(), &labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        loss_sum += loss * idx.len() as f64;
        correct += ok;
        seen += idx.len();
        let grads = state.qnet.ste_backward(&trace, &dlogits)?;
        state.qnet.network_mut().commit_running_stats(&trace);
        let update = match vb.push(grads) {
            Some(g) => Some(g),
            None if c == last => vb.flush(),
            None => None,
        };
        if let Some(g) = update {
            let before = observer.as_ref().map(|_| snapshot(&state.qnet));
            sgd_step(state.qnet.network_mut(), &g, &mut state.momentum, hp)?;
            state.qnet.refresh_weight_specs()?;
            state.iteration += 1;
            if let (Some(obs), Some(before)) = (observer.as_deref_mut(), before) {
                obs.after_step(state.iteration, &before, &state.qnet);
            }
        }
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        lr: hp.lr,
        batch_size: physical * multiplier,
        train_loss: loss_sum / seen as f64,
        train_acc: correct as f64 / seen as f64,
        val_acc: None,
        mean_grad_noise_cosine: observer.and_then(|o| o.epoch_summary()),
    })
}

/// `(mean loss, accuracy)` of the network in eval mode.
pub fn evaluate<T: Scalar>(qnet: &QuantNet<T>, data: &Dataset, norm: &Normalization, batch: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, norm, None);
        let out = qnet.predict(&x)?;
        let (l, _, ok) = softmax_cross_entropy(&out, &labels);
        loss += l * chunk.len() as f64;
        correct += ok;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Runs the remaining epochs of `plan`. `on_epoch` sees each epoch's
/// metrics and state (for logging and checkpointing).
///
/// If an epoch diverges, `state` is restored to the end of the last good
/// epoch and `Error::Diverged` is returned.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    val: Option<&Dataset>,
    norm: &Normalization,
    plan: &TrainPlan,
    mut observer: Option<&mut dyn StepObserver<T>>,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &TrainState<T>),
) -> Result<Vec<EpochMetrics>> {
    plan.validate()?;
    let mut out = Vec::new();
    while state.epoch < plan.epochs {
        let good = state.clone();
        let mut m = match train_epoch(state, data, norm, plan, observer.as_mut().map(|o| &mut **o as &mut dyn StepObserver<T>)) {
            Ok(m) => m,
            Err(e @ (Error::Diverged { .. } | Error::NanGradient { .. } | Error::NonFinite { .. })) => {
                let epoch = good.epoch;
                *state = good;
                return Err(match e {
                    Error::Diverged { .. } => Error::Diverged { epoch },
                    other => other,
                });
            }
            Err(e) => return Err(e),
        };
        if let Some(v) = val {
            m.val_acc = Some(evaluate(&state.qnet, v, norm, 500)?.1);
        }
        on_epoch(&m, state);
        out.push(m);
    }
    Ok(out)
}

/// How the fine-tuning run sets its activation ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    /// `false` installs the fixed uncalibrated ceilings instead.
    pub enabled: bool,
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            batches: 5,
            batch_size: 256,
        }
    }
}

/// Training batches for calibration, drawn without augmentation from a
/// stream keyed by the seed.
pub fn calibration_batches<T: Scalar>(
    data: &Dataset,
    norm: &Normalization,
    settings: &CalibrationSettings,
    seed: u64,
) -> Vec<Tensor<T>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, Purpose::Calibration, 0, 0));
    idx.chunks(settings.batch_size.max(1))
        .take(settings.batches)
        .map(|c| data.batch::<T>(c, norm, None).0)
        .collect()
}

#[derive(Debug, Clone)]
pub struct FaqRun<T> {
    pub state: TrainState<T>,
    pub report: Option<CalibrationReport>,
    pub metrics: Vec<EpochMetrics>,
}

/// Calibrate, quantize, fine-tune. With `plan.epochs == 0` this is plain
/// post-training quantization.
pub fn quantize_for_finetune<T: Scalar>(
    pretrained: Network<T>,
    policy: PrecisionPolicy,
    data: &Dataset,
    norm: &Normalization,
    settings: &CalibrationSettings,
    seed: u64,
) -> Result<(QuantNet<T>, Option<CalibrationReport>)> {
    let batches = calibration_batches::<T>(data, norm, settings, seed);
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no data for calibration".into()));
    }
    if settings.enabled {
        let report = calibrate(&pretrained, &batches, &policy)?;
        let mut q = QuantNet::new(pretrained, policy)?;
        q.apply_calibration(&report)?;
        Ok((q, Some(report)))
    } else {
        let max_abs = batches
            .iter()
            .flat_map(|b| b.data().iter())
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        let input = InputCalibration::from_max_abs(policy.input_bits.min(31), max_abs);
        let mut q = QuantNet::new(pretrained, policy)?;
        q.apply_uncalibrated_defaults(input.spec());
        Ok((q, None))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_faq<T: Scalar>(
    pretrained: Network<T>,
    policy: PrecisionPolicy,
    settings: &CalibrationSettings,
    plan: &TrainPlan,
    data: &Dataset,
    val: Option<&Dataset>,
    norm: &Normalization,
    observer: Option<&mut dyn StepObserver<T>>,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &TrainState<T>),
) -> Result<FaqRun<T>> {
    let (qnet, report) = quantize_for_finetune(pretrained, policy, data, norm, settings, plan.seed)?;
    let mut state = TrainState::new(qnet);
    let metrics = fit(&mut state, data, val, norm, plan, observer, on_epoch)?;
    Ok(FaqRun { state, report, metrics })
}

/// Name of the layer that produced the first non-finite value, if any.
pub fn first_non_finite_layer<T: Scalar>(net: &Network<T>) -> Option<alloc::string::String> {
    net.params().iter().zip(net.nodes()).find_map(|(p, n)| {
        p.named()
            .iter()
            .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
            .then(|| n.name.clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::graph::NetworkBuilder;
    use crate::layers::LayerDef;
    use crate::models::init_he;
    use crate::optim::LrSchedule;

    #[test]
    fn cross_entropy_matches_closed_form() {
        let logits = Tensor::from_f64([2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, g, ok) = softmax_cross_entropy::<f64>(&logits, &[2, 1]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expect = ((z.ln() - 3.0) + 3f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        assert_eq!(ok, 1);
        let row_sum: f64 = g.data()[..3].iter().sum();
        assert!(row_sum.abs() < 1e-15);
        assert!((g.data()[4] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-15);
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        // two classes separable by the brightness of the left half
        use rand::Rng;
        let mut rng = stream(seed, Purpose::Synthetic, 0, 0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let c: u8 = rng.random_range(0..2);
            for _y in 0..4 {
                for x in 0..4 {
                    let base = if (x < 2) == (c == 1) { 180 } else { 40 };
                    images.push(base + rng.random_range(0..40u8));
                }
            }
            labels.push(c);
        }
        Dataset::new(Split::Train, [4, 4, 1], 2, images, labels).unwrap()
    }

    fn toy_net() -> Network<f64> {
        let mut b = NetworkBuilder::new([1, 4, 4]);
        b.add("conv", LayerDef::conv(1, 4, 3, 1, 1));
        b.add("bn", LayerDef::batchnorm(4));
        b.add("relu", LayerDef::Relu);
        b.add("flat", LayerDef::Flatten);
        b.add("fc", LayerDef::linear(64, 2));
        let mut n = b.build().unwrap();
        init_he(&mut n, 2);
        n
    }

    fn plan(epochs: usize) -> TrainPlan {
        let mut p = TrainPlan::constant_batch(epochs, 0.05, LrSchedule::Constant, 16, 3);
        p.weight_decay = 1e-4;
        p
    }

    #[test]
    fn float_training_learns_and_is_deterministic() {
        let data = toy_data(256, 1);
        let norm = Normalization::compute(&data);
        let run = || {
            let mut s = TrainState::new(QuantNet::float(toy_net()));
            let m = fit(&mut s, &data, None, &norm, &plan(3), None, &mut |_, _| {}).unwrap();
            (s, m)
        };
        let (a, ma) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(ma[2].train_acc > 0.95, "{:?}", ma);
        assert_eq!(a.iteration, 3 * 16);
    }

    #[test]
    fn zero_epoch_faq_is_ptq() {
        let data = toy_data(64, 2);
        let norm = Normalization::compute(&data);
        let net = toy_net();
        let settings = CalibrationSettings {
            batch_size: 32,
            ..Default::default()
        };
        let run = run_faq(net.clone(), PrecisionPolicy::fixed(4), &settings, &plan(0), &data, None, &norm, None, &mut |_, _| {})
            .unwrap();
        assert!(run.metrics.is_empty());
        assert_eq!(run.state.qnet.network(), &net);
        assert_eq!(run.report.unwrap().layers.len(), 1);
    }

    #[test]
    fn virtual_batch_equals_large_batch() {
        let data = toy_data(64, 4);
        let norm = Normalization::identity(1);
        let mut big = plan(1);
        big.momentum = 0.9;
        big.batch_schedule[0].batch_size = 64;
        big.max_physical_batch = 64;
        let mut virt = big.clone();
        virt.max_physical_batch = 16;
        // batchnorm statistics depend on the physical batch, so compare on a BN-free net
        let mut b = NetworkBuilder::new([1, 4, 4]);
        b.add("conv", LayerDef::conv(1, 2, 3, 1, 1));
        b.add("relu", LayerDef::Relu);
        b.add("flat", LayerDef::Flatten);
        b.add("fc", LayerDef::linear(32, 2));
        let mut net = b.build::<f64>().unwrap();
        init_he(&mut net, 9);
        let go = |p: &TrainPlan| {
            let mut s = TrainState::new(QuantNet::float(net.clone()));
            fit(&mut s, &data, None, &norm, p, None, &mut |_, _| {}).unwrap();
            s
        };
        let a = go(&big);
        let v = go(&virt);
        assert_eq!((a.iteration, v.iteration), (1, 1));
        for (x, y) in a.qnet.network().params().iter().zip(v.qnet.network().params()) {
            for (s, t) in x.trainable().iter().zip(y.trainable()) {
                for (p, q) in s.data().iter().zip(t.data()) {
                    assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn divergence_restores_last_good_epoch() {
        let data = toy_data(64, 5);
        let norm = Normalization::compute(&data);
        let mut p = plan(3);
        p.base_lr = 1e200;
        let mut s = TrainState::new(QuantNet::float(toy_net()));
        let err = fit(&mut s, &data, None, &norm, &p, None, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NanGradient { .. }), "{err:?}");
        assert!(first_non_finite_layer(s.qnet.network()).is_none());
    }

    #[test]
    fn quantized_finetune_runs_on_grids() {
        let data = toy_data(128, 6);
        let norm = Normalization::compute(&data);
        let settings = CalibrationSettings {
            batch_size: 32,
            ..Default::default()
        };
        let run = run_faq(toy_net(), PrecisionPolicy::fixed(4), &settings, &plan(2), &data, None, &norm, None, &mut |_, _| {})
            .unwrap();
        let (x, _) = data.batch::<f64>(&[0, 1, 2, 3], &norm, None);
        let t = run.state.qnet.quantized_forward(&x, Mode::Train).unwrap();
        assert!(run.state.qnet.grid_violations(&t).is_empty());
    }
}
