use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn elu<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// Gradient of `elu` given the pre-activation input.
pub fn elu_backward<T: Scalar, D: Dimension>(pre: ArrayView<'_, T, D>, grad: ArrayView<'_, T, D>) -> Array<T, D> {
    Zip::from(&pre)
        .and(&grad)
        .map_collect(|&p, &g| if p > T::zero() { g } else { g * p.exp() })
}

pub fn leaky_relu<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    let slope = T::lit(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar, D: Dimension>(
    pre: ArrayView<'_, T, D>,
    grad: ArrayView<'_, T, D>,
) -> Array<T, D> {
    let slope = T::lit(LEAKY_SLOPE);
    Zip::from(&pre)
        .and(&grad)
        .map_collect(|&p, &g| if p > T::zero() { g } else { g * slope })
}

/// Gradient of `tanh` given its output.
pub fn tanh_backward<T: Scalar, D: Dimension>(out: ArrayView<'_, T, D>, grad: ArrayView<'_, T, D>) -> Array<T, D> {
    Zip::from(&out).and(&grad).map_collect(|&y, &g| g * (T::one() - y * y))
}
