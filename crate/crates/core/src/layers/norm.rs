use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub mode: Mode,
    /// Statistics the output was normalized with (batch or running).
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, present in train mode for the running update.
    pub batch_var_unbiased: Option<Vec<T>>,
}

/// Per-channel biased mean and variance over `N, H, W`.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let &[n, c, h, w] = x.shape() else { unreachable!("batchnorm input is NCHW") };
    let hw = h * w;
    let count = T::from_usize(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                s += v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                let d = v - m;
                q += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Per-channel `(scale, shift)` such that the normalization equals
/// `scale * x + shift`.
pub fn fold_scale_shift<T: Scalar>(gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
    let scale: Vec<T> = gamma.iter().zip(inv_std).map(|(&g, &s)| g * s).collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

pub fn affine_per_channel<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let hw = h * w;
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut y.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = scale[ch] * *v + shift[ch];
            }
        }
    }
    y
}

/// Statistics a batchnorm layer normalizes with in `mode`.
pub(crate) fn stats_for<T: Scalar>(
    x: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> NormCache<T> {
    match mode {
        Mode::Train => {
            let (mean, var) = batch_stats(x);
            let &[n, _, h, w] = x.shape() else { unreachable!() };
            let m = n * h * w;
            let unbias = if m > 1 {
                T::from_usize(m) / T::from_usize(m - 1)
            } else {
                T::one()
            };
            NormCache {
                mode,
                inv_std: var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
                batch_var_unbiased: Some(var.iter().map(|&v| v * unbias).collect()),
                mean,
            }
        }
        Mode::Eval => NormCache {
            mode,
            mean: running_mean.data().to_vec(),
            inv_std: running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            batch_var_unbiased: None,
        },
    }
}

pub(super) fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> (Tensor<T>, NormCache<T>) {
    let cache = stats_for(x, running_mean, running_var, eps, mode);
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let hw = h * w;
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, be) = (cache.mean[ch], cache.inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for v in &mut y.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = (*v - m) * s * g + be;
            }
        }
    }
    (y, cache)
}

pub(super) fn backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let hw = h * w;
    let count = T::from_usize(n * hw);
    let mut dgamma = Tensor::zeros([c]);
    let mut dbeta = Tensor::zeros([c]);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    for ch in 0..c {
        let (m, s) = (cache.mean[ch], cache.inv_std[ch]);
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &v) in grad.data()[r.clone()].iter().zip(&x.data()[r]) {
                sg += g;
                sgx += g * (v - m) * s;
            }
        }
        dgamma.data_mut()[ch] = sgx;
        dbeta.data_mut()[ch] = sg;
        let k = gamma.data()[ch] * s;
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let dst = &mut dx.data_mut()[r.clone()];
            for ((d, &g), &v) in dst.iter_mut().zip(&grad.data()[r.clone()]).zip(&x.data()[r]) {
                *d = match cache.mode {
                    Mode::Train => {
                        let xhat = (v - m) * s;
                        k * (g - sg / count - xhat * sgx / count)
                    }
                    Mode::Eval => k * g,
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
