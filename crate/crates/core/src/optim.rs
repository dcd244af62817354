//! SGD with momentum, learning-rate schedules and batch-size schedules.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum buffers, aligned with [`Gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<T> {
    pub velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> MomentumState<T> {
    pub fn zeros(net: &Network<T>) -> Self {
        Self {
            velocity: Gradients::zeros_like(net).per_node,
        }
    }

    pub fn cast<U: Scalar>(&self) -> MomentumState<U> {
        MomentumState {
            velocity: self
                .velocity
                .iter()
                .map(|v| v.iter().map(Tensor::cast).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One in-place update of a flat parameter:
/// `d = g + wd * w; v = mu * v + d; w -= lr * v`.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], hp: SgdParams) {
    let (lr, mu, wd) = (T::from_f64(hp.lr), T::from_f64(hp.momentum), T::from_f64(hp.weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let d = g + wd * *w;
        *v = mu * *v + d;
        *w -= lr * *v;
    }
}

/// Applies one SGD step to every trainable tensor of `net`. A NaN in any
/// gradient aborts before anything is modified.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut MomentumState<T>,
    hp: SgdParams,
) -> Result<()> {
    for (i, g) in grads.per_node.iter().enumerate() {
        if g.iter().any(|t| t.data().iter().any(|v| v.is_nan())) {
            return Err(Error::NanGradient {
                layer: net.nodes()[i].name.clone(),
            });
        }
    }
    for (i, params) in net.params_mut().iter_mut().enumerate() {
        for ((w, g), v) in params
            .trainable_mut()
            .into_iter()
            .zip(&grads.per_node[i])
            .zip(state.velocity[i].iter_mut())
        {
            sgd_update(w.data_mut(), g.data(), v.data_mut(), hp);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `base * decay^epoch`.
    Exponential { decay: f64 },
    /// `base * factor^(number of milestones <= epoch)`.
    Step { milestones: Vec<usize>, factor: f64 },
}

/// From `from_epoch` on, updates use an effective batch of `batch_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPhase {
    pub from_epoch: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Effective batch sizes; the first phase must start at epoch 0.
    pub batch_schedule: Vec<BatchPhase>,
    /// Largest batch run in one forward/backward; bigger effective batches
    /// average the gradients of several physical batches.
    pub max_physical_batch: usize,
    pub seed: u64,
    /// Random crop and flip (image datasets with spatial extent only).
    pub augment: bool,
}

impl TrainPlan {
    pub fn constant_batch(
        epochs: usize,
        base_lr: f64,
        schedule: LrSchedule,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            epochs,
            base_lr,
            schedule,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_schedule: alloc::vec![BatchPhase { from_epoch: 0, batch_size }],
            max_physical_batch: batch_size,
            seed,
            augment: false,
        }
    }

    /// Decay factor that takes `base_lr` to `final_lr` over `epochs`.
    pub fn exponential_decay_to(base_lr: f64, final_lr: f64, epochs: usize) -> f64 {
        if epochs == 0 {
            return 1.0;
        }
        powf(final_lr / base_lr, 1.0 / epochs as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        match &self.schedule {
            LrSchedule::Exponential { decay } if !(*decay > 0.0 && *decay <= 1.0) => {
                return bad("exponential decay must be in (0, 1]");
            }
            LrSchedule::Step { factor, milestones } => {
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return bad("step factor must be in (0, 1]");
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("step milestones must be strictly increasing");
                }
            }
            _ => {}
        }
        if self.max_physical_batch == 0 {
            return bad("max_physical_batch must be positive");
        }
        match self.batch_schedule.first() {
            Some(p) if p.from_epoch == 0 => {}
            _ => return bad("batch schedule must start at epoch 0"),
        }
        for w in self.batch_schedule.windows(2) {
            if w[1].from_epoch <= w[0].from_epoch {
                return bad("batch schedule epochs must be strictly increasing");
            }
            if w[1].batch_size < w[0].batch_size {
                return bad("batch sizes must be non-decreasing");
            }
        }
        for p in &self.batch_schedule {
            if p.batch_size == 0 {
                return bad("batch sizes must be positive");
            }
            if p.batch_size > self.max_physical_batch && p.batch_size % self.max_physical_batch != 0 {
                return Err(Error::Config(format!(
                    "batch size {} is not a multiple of max_physical_batch {}",
                    p.batch_size, self.max_physical_batch
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Exponential { decay } => self.base_lr * powi_exact(*decay, epoch),
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * powi_exact(*factor, passed)
            }
        }
    }

    pub fn batch_size_at(&self, epoch: usize) -> usize {
        self.batch_schedule
            .iter()
            .rev()
            .find(|p| p.from_epoch <= epoch)
            .map(|p| p.batch_size)
            .unwrap_or(self.max_physical_batch)
    }

    /// `(physical batch, virtual multiplier)` for `epoch`.
    pub fn physical_batch_at(&self, epoch: usize) -> (usize, usize) {
        let b = self.batch_size_at(epoch);
        if b <= self.max_physical_batch {
            (b, 1)
        } else {
            (self.max_physical_batch, b / self.max_physical_batch)
        }
    }

    pub fn sgd_params(&self, epoch: usize) -> SgdParams {
        SgdParams {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

fn powi_exact(x: f64, n: usize) -> f64 {
    let mut r = 1.0;
    for _ in 0..n {
        r *= x;
    }
    r
}

fn powf(x: f64, y: f64) -> f64 {
    num_traits::Float::powf(x, y)
}

/// Averages every `n` consecutive gradients into one update.
#[derive(Debug, Clone)]
pub struct VirtualBatch<T> {
    n: usize,
    count: usize,
    acc: Option<Gradients<T>>,
}

impl<T: Scalar> VirtualBatch<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "virtual batch multiplier must be at least 1");
        Self { n, count: 0, acc: None }
    }

    pub fn multiplier(&self) -> usize {
        self.n
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Accumulates `grad`; returns the mean once `n` have been seen.
    pub fn push(&mut self, grad: Gradients<T>) -> Option<Gradients<T>> {
        if self.n == 1 {
            return Some(grad);
        }
        match &mut self.acc {
            Some(a) => a.add_assign(&grad),
            None => self.acc = Some(grad),
        }
        self.count += 1;
        if self.count < self.n {
            return None;
        }
        self.count = 0;
        let mut g = self.acc.take().unwrap();
        g.scale(T::one() / T::from_usize(self.n));
        Some(g)
    }

    /// Mean of a partial accumulation left at the end of an epoch.
    pub fn flush(&mut self) -> Option<Gradients<T>> {
        let k = core::mem::take(&mut self.count);
        let mut g = self.acc.take()?;
        g.scale(T::one() / T::from_usize(k));
        Some(g)
    }
}

/// Iterations for SGD to reach a `2 eps`-approximate optimum:
/// `(sigma2 + L * dist^2)^2 / eps^2`.
pub fn iteration_bound(sigma2: f64, lipschitz: f64, dist: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if sigma2 < 0.0 || lipschitz < 0.0 || dist < 0.0 {
        return Err(Error::InvalidArgument("sigma2, L and dist must be non-negative".into()));
    }
    let a = sigma2 + lipschitz * dist * dist;
    Ok(a * a / (eps * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn hp(lr: f64, momentum: f64, weight_decay: f64) -> SgdParams {
        SgdParams { lr, momentum, weight_decay }
    }

    #[test]
    fn zero_lr_and_vanilla() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut w, &[3.0, 4.0], &mut v, hp(0.0, 0.9, 1e-4));
        assert_eq!(w, vec![1.0, -2.0]);
        let mut v = vec![0.0; 2];
        sgd_update(&mut w, &[3.0, 4.0], &mut v, hp(0.5, 0.0, 0.0));
        assert_eq!(w, vec![-0.5, -4.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        for _ in 0..2 {
            sgd_update(&mut w, &[g], &mut v, hp(lr, 0.9, 0.0));
        }
        assert!((w[0] + lr * g * 2.9).abs() < 1e-15);
    }

    fn plan(schedule: LrSchedule, base: f64) -> TrainPlan {
        TrainPlan::constant_batch(110, base, schedule, 64, 0)
    }

    #[test]
    fn schedules() {
        let p = plan(LrSchedule::Exponential { decay: 0.936 }, 0.0015);
        assert_eq!(p.lr_at(0), 0.0015);
        let end = p.lr_at(110);
        assert!((end - 1.0e-6).abs() / 1.0e-6 < 0.05, "{end}");
        let p = plan(
            LrSchedule::Step {
                milestones: vec![30, 60, 90],
                factor: 0.1,
            },
            0.02,
        );
        assert!((p.lr_at(45) - 0.002).abs() < 1e-15);
        assert_eq!(p.lr_at(29), 0.02);
        let d = TrainPlan::exponential_decay_to(0.0015, 1e-6, 110);
        assert!((0.0015 * powi_exact(d, 110) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn batch_phases() {
        let mut p = plan(LrSchedule::Constant, 0.1);
        p.max_physical_batch = 256;
        p.batch_schedule = vec![
            BatchPhase { from_epoch: 0, batch_size: 256 },
            BatchPhase { from_epoch: 10, batch_size: 2048 },
        ];
        p.validate().unwrap();
        assert_eq!(p.physical_batch_at(3), (256, 1));
        assert_eq!(p.physical_batch_at(10), (256, 8));
        p.batch_schedule[1].batch_size = 128;
        assert!(p.validate().is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(iteration_bound(0.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(iteration_bound(1.0, 2.0, 3.0, 0.5).unwrap(), 1444.0);
        let k1 = iteration_bound(0.3, 1.5, 2.0, 0.1).unwrap();
        let k2 = iteration_bound(0.3, 1.5, 2.0, 0.2).unwrap();
        assert!((k1 / k2 - 4.0).abs() < 1e-12);
        assert!(iteration_bound(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn virtual_batch_mean() {
        use crate::graph::NetworkBuilder;
        use crate::layers::LayerDef;
        let mut b = NetworkBuilder::new([2]);
        b.add("fc", LayerDef::linear(2, 1));
        let net = b.build::<f64>().unwrap();
        let mut g = Gradients::zeros_like(&net);
        for t in g.per_node.iter_mut().flatten() {
            *t = t.map(|_| 1.0);
        }
        let mut g3 = g.clone();
        g3.scale(3.0);
        let mut one = VirtualBatch::new(1);
        assert_eq!(one.push(g.clone()), Some(g.clone()));
        let mut vb = VirtualBatch::new(2);
        assert!(vb.push(g.clone()).is_none());
        let mut g2 = g.clone();
        g2.scale(2.0);
        assert_eq!(vb.push(g3), Some(g2));
        assert!(vb.flush().is_none());
    }

    proptest! {
        #[test]
        fn lr_non_increasing(decay in 0.5f64..1.0, factor in 0.05f64..1.0, e in 0usize..200) {
            let p = plan(LrSchedule::Exponential { decay }, 0.01);
            prop_assert!(p.lr_at(e + 1) <= p.lr_at(e));
            let p = plan(LrSchedule::Step { milestones: vec![5, 20, 80], factor }, 0.01);
            prop_assert!(p.lr_at(e + 1) <= p.lr_at(e));
        }

        #[test]
        fn bound_monotone(s in 0.0f64..10.0, l in 0.0f64..10.0, d in 0.0f64..10.0, e in 0.01f64..10.0, bump in 0.0f64..5.0) {
            let k = iteration_bound(s, l, d, e).unwrap();
            prop_assert!(iteration_bound(s + bump, l, d, e).unwrap() >= k);
            prop_assert!(iteration_bound(s, l + bump, d, e).unwrap() >= k);
            prop_assert!(iteration_bound(s, l, d + bump, e).unwrap() >= k);
            prop_assert!(iteration_bound(s, l, d, e + bump).unwrap() <= k);
        }
    }
}
