use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x W^T + b` for `x: [N, F]`, `W: [O, F]`.
pub(super) fn forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let n = x.batch();
    let f = x.row_len();
    let o = weight.shape()[0];
    let mut y = Tensor::zeros([n, o]);
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(n, f, o, T::one(), x.data(), f, 1, weight.data(), 1, f, beta, y.data_mut(), o, 1);
    y
}

#[allow(clippy::type_complexity)]
pub(super) fn backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad: &Tensor<T>,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let n = x.batch();
    let f = x.row_len();
    let o = weight.shape()[0];
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    // dW [o, f] = dY^T [o, n] * x [n, f]
    T::gemm(o, n, f, T::one(), grad.data(), 1, o, x.data(), f, 1, T::zero(), dw.data_mut(), f, 1);
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros([o]);
        for row in grad.data().chunks(o) {
            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                *d += g;
            }
        }
        db
    });
    let dx = need_input_grad.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        T::gemm(n, o, f, T::one(), grad.data(), o, 1, weight.data(), f, 1, T::zero(), dx.data_mut(), f, 1);
        dx
    });
    (dx, dw, db)
}
