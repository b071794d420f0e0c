use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::Params;
use crate::Scalar;

/// Fully connected layer, `y = x·Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: bias.then(|| Array1::zeros(outputs)),
        }
    }

    /// Weights and biases drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, bound: f64, bias: bool, rng: &mut R) -> Self {
        let mut draw = || T::lit(rng.random_range(-bound..=bound));
        let weight = Array2::from_shape_simple_fn((outputs, inputs), &mut draw);
        let bias = bias.then(|| Array1::from_shape_simple_fn(outputs, &mut draw));
        Self { weight, bias }
    }

    /// PyTorch's default `nn.Linear` initialization.
    pub fn default_init<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        Self::uniform(inputs, outputs, 1.0 / (inputs as f64).sqrt(), bias, rng)
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs(), self.bias.is_some())
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when asked for.
    pub fn backward(
        &self,
        x: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        grads: &mut Dense<T>,
        need_input_grad: bool,
    ) -> Option<Array2<T>> {
        general_mat_mul(T::one(), &grad_out.t(), &x, T::one(), &mut grads.weight);
        if let Some(gb) = grads.bias.as_mut() {
            *gb += &grad_out.sum_axis(Axis(0));
        }
        need_input_grad.then(|| grad_out.dot(&self.weight))
    }
}

impl<T: Scalar> Params<T> for Dense<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![("weight".to_string(), self.weight.view().into_dyn())];
        if let Some(b) = &self.bias {
            out.push(("bias".to_string(), b.view().into_dyn()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![("weight".to_string(), self.weight.view_mut().into_dyn())];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b.view_mut().into_dyn()));
        }
        out
    }
}
