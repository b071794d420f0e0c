//! Differentiable image generators behind one interface.
//!
//! A generator renders `(batch, channels, height, width)` images in `[-1, 1]`
//! from a batch of latent codes plus a batch of shifts injected at its
//! injection site, and returns vector-Jacobian products so training can
//! backpropagate from pixels into the shifts.

mod blob;
mod conv;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

pub use blob::{BlobConfig, BlobGenerator, NUM_BLOB_FACTORS};
pub use conv::StyleConvGenerator;

use crate::latent::LatentCode;
use crate::{Error, Result, Scalar};

/// Images are `(batch, channels, height, width)`.
pub type ImageBatch<T> = Array4<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    /// The shift is added to the input latent code.
    #[default]
    InputLatent,
    /// The same shift is added to the style vector of every synthesis layer.
    PerLayerStyle,
}

pub trait Generator<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Width of the latent codes it samples from.
    fn latent_dim(&self) -> usize;

    /// Width of the vectors added at the injection site.
    fn shift_dim(&self) -> usize;

    fn output_shape(&self) -> ImageShape;

    fn injection_site(&self) -> InjectionSite;

    fn is_differentiable(&self) -> bool {
        true
    }

    /// Renders `z` with `shift` injected. Inputs are validated by the
    /// free functions in this module before reaching implementations.
    fn render(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>) -> Result<ImageBatch<T>>;

    /// `∂⟨grad, render(z, shift)⟩ / ∂shift`.
    fn shift_vjp(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>>;

    /// `∂⟨grad, render(z, 0)⟩ / ∂z`.
    fn latent_vjp(&self, z: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>>;

    /// Rows are the latent directions of the known generative factors, when
    /// the generator has them.
    fn factor_matrix(&self) -> Option<Array2<T>> {
        None
    }

    /// Frozen weights, exposed for inspection.
    fn weights(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        Vec::new()
    }
}

pub type GeneratorHandle<T> = Arc<dyn Generator<T>>;

fn check_batch<T: Scalar>(gen: &dyn Generator<T>, z: &ArrayView2<'_, T>, shift: &ArrayView2<'_, T>) -> Result<()> {
    if z.ncols() != gen.latent_dim() {
        return Err(Error::Shape(format!(
            "{} expects latent codes of width {}, got {}",
            gen.name(),
            gen.latent_dim(),
            z.ncols()
        )));
    }
    if shift.dim() != (z.nrows(), gen.shift_dim()) {
        return Err(Error::Shape(format!(
            "shift batch has shape {:?}, expected ({}, {})",
            shift.dim(),
            z.nrows(),
            gen.shift_dim()
        )));
    }
    if z.iter().chain(shift.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite latent code or shift".into()));
    }
    Ok(())
}

/// `G(z)` for each row of `z`.
pub fn generate<T: Scalar>(gen: &dyn Generator<T>, z: ArrayView2<'_, T>) -> Result<ImageBatch<T>> {
    let zero = Array2::zeros((z.nrows(), gen.shift_dim()));
    render(gen, z, zero.view())
}

pub fn render<T: Scalar>(
    gen: &dyn Generator<T>,
    z: ArrayView2<'_, T>,
    shift: ArrayView2<'_, T>,
) -> Result<ImageBatch<T>> {
    check_batch(gen, &z, &shift)?;
    gen.render(z, shift)
}

pub fn shift_vjp<T: Scalar>(
    gen: &dyn Generator<T>,
    z: ArrayView2<'_, T>,
    shift: ArrayView2<'_, T>,
    grad: ArrayView4<'_, T>,
) -> Result<Array2<T>> {
    check_batch(gen, &z, &shift)?;
    let s = gen.output_shape();
    if grad.dim() != (z.nrows(), s.channels, s.height, s.width) {
        return Err(Error::Shape(format!("image gradient has shape {:?}", grad.dim())));
    }
    if !gen.is_differentiable() {
        return Err(Error::Capability(format!("{} is not differentiable", gen.name())));
    }
    gen.shift_vjp(z, shift, grad)
}

/// Renders a single latent code with `shift` added at the generator's injection site.
pub fn inject_shift<T: Scalar>(
    gen: &dyn Generator<T>,
    z: &LatentCode<T>,
    shift: ArrayView1<'_, T>,
) -> Result<ImageBatch<T>> {
    if shift.len() != gen.shift_dim() {
        return Err(Error::Shape(format!(
            "shift has length {}, injection site width is {}",
            shift.len(),
            gen.shift_dim()
        )));
    }
    render(gen, z.view().insert_axis(Axis(0)), shift.insert_axis(Axis(0)))
}

/// How to construct a generator by registry name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub name: String,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub injection: InjectionSite,
    /// Style width for generators with a mapping network; 0 means `latent_dim`.
    pub style_dim: usize,
    /// Number of classes of a conditional generator (0 = unconditional).
    pub num_classes: usize,
    /// Class held fixed for conditional generators.
    pub fixed_class: Option<usize>,
    /// Optional weight file in the tensor container format.
    pub weights: Option<PathBuf>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            name: "blob".into(),
            resolution: 32,
            channels: 1,
            seed: 0,
            injection: InjectionSite::InputLatent,
            style_dim: 0,
            num_classes: 0,
            fixed_class: None,
            weights: None,
        }
    }
}

pub type GeneratorFactory<T> = Box<dyn Fn(&GeneratorSpec, usize) -> Result<GeneratorHandle<T>> + Send + Sync>;

/// Name-keyed constructors, so external models can be plugged in next to
/// the built-in `blob` and `conv` generators.
pub struct GeneratorRegistry<T> {
    factories: BTreeMap<String, GeneratorFactory<T>>,
}

impl<T: Scalar> GeneratorRegistry<T> {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("blob", |spec, d| {
            let mut cfg = BlobConfig::new(d, spec.resolution)?;
            cfg.channels = spec.channels;
            cfg.seed = spec.seed;
            cfg.injection = spec.injection;
            Ok(Arc::new(BlobGenerator::<T>::new(cfg)?) as GeneratorHandle<T>)
        });
        reg.register("conv", |spec, d| {
            let gen = StyleConvGenerator::<T>::from_spec(spec, d)?;
            Ok(Arc::new(gen) as GeneratorHandle<T>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&GeneratorSpec, usize) -> Result<GeneratorHandle<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &GeneratorSpec, latent_dim: usize) -> Result<GeneratorHandle<T>> {
        let factory = self.factories.get(&spec.name).ok_or_else(|| {
            Error::Config(format!(
                "unknown generator `{}` (registered: {})",
                spec.name,
                self.names().join(", ")
            ))
        })?;
        let gen = factory(spec, latent_dim)?;
        if gen.injection_site() != spec.injection {
            return Err(Error::Capability(format!(
                "generator `{}` does not support injection site {:?}",
                spec.name, spec.injection
            )));
        }
        Ok(gen)
    }
}
