//! Test doubles shared by the integration targets.
#![allow(dead_code)]

pub mod oracles;

use compass_core::metrics::PairClassifier;
use compass_core::{Deformator, Generator, ImageShape, InjectionSite, Result, Scalar};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

/// A "generator" whose image is the shifted latent code itself, laid out as
/// a one-row, single-channel picture. The difference of two of its images
/// is exactly the shift between them.
pub struct PassThrough {
    pub dim: usize,
}

impl<T: Scalar> Generator<T> for PassThrough {
    fn name(&self) -> &str {
        "pass-through"
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn shift_dim(&self) -> usize {
        self.dim
    }

    fn output_shape(&self) -> ImageShape {
        ImageShape {
            channels: 1,
            height: 1,
            width: self.dim,
        }
    }

    fn injection_site(&self) -> InjectionSite {
        InjectionSite::InputLatent
    }

    fn render(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>) -> Result<Array4<T>> {
        let sum = &z + &shift;
        Ok(Array4::from_shape_fn((z.nrows(), 1, 1, self.dim), |(n, _, _, j)| {
            sum[[n, j]]
        }))
    }

    fn shift_vjp(
        &self,
        _z: ArrayView2<'_, T>,
        _shift: ArrayView2<'_, T>,
        grad: ArrayView4<'_, T>,
    ) -> Result<Array2<T>> {
        Ok(Array2::from_shape_fn((grad.shape()[0], self.dim), |(n, j)| {
            grad[[n, 0, 0, j]]
        }))
    }

    fn latent_vjp(&self, _z: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>> {
        Ok(Array2::from_shape_fn((grad.shape()[0], self.dim), |(n, j)| {
            grad[[n, 0, 0, j]]
        }))
    }
}

/// Reads the pixel difference of two [`PassThrough`] images and scores each
/// direction by `|⟨diff, a_k⟩|` against the known columns `a_k`; then maps
/// the scores through `scale · s + offset`.
pub struct Oracle {
    pub columns: Array2<f64>,
    pub scale: f64,
    pub offset: f64,
}

impl Oracle {
    pub fn new<T: Scalar>(def: &Deformator<T>) -> Self {
        Self {
            columns: def.direction_vectors().mapv(|v| v.as_f64()),
            scale: 1.0,
            offset: 0.0,
        }
    }
}

impl<T: Scalar> PairClassifier<T> for Oracle {
    fn num_directions(&self) -> usize {
        self.columns.nrows()
    }

    fn classify(&self, before: ArrayView4<'_, T>, after: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let n = before.shape()[0];
        let w = before.shape()[3];
        let diff = Array2::from_shape_fn((n, w), |(i, j)| (after[[i, 0, 0, j]] - before[[i, 0, 0, j]]).as_f64());
        let scores = diff.dot(&self.columns.t()).mapv(f64::abs);
        Ok(scores.mapv(|s| T::lit(self.scale * s + self.offset)))
    }
}
