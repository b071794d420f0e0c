//! Analytic "blob" generator with four known factors of variation.
//!
//! A fixed random orthonormal matrix `Q` maps a latent code to factors
//! `f = Qᵀz`. The first two factors set the blob centre, the third its
//! log-radius and the fourth its intensity; the remaining `d − 4` latent
//! directions have no visual effect.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, Axis};
use rand::SeedableRng;

use super::{Generator, ImageShape, InjectionSite};
use crate::{Error, Result, Scalar};

pub const NUM_BLOB_FACTORS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub latent_dim: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub injection: InjectionSite,
    /// Centre = 0.5 + 0.4·tanh(gain·f), in canvas units.
    pub position_gain: f64,
    /// Radius limits in canvas units; the log-radius interpolates between them.
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl BlobConfig {
    pub fn new(latent_dim: usize, resolution: usize) -> Result<Self> {
        let cfg = Self {
            latent_dim,
            resolution,
            channels: 1,
            seed: 0,
            injection: InjectionSite::InputLatent,
            position_gain: 0.5,
            radius_min: 0.06,
            radius_max: 0.25,
            intensity_min: 0.2,
            intensity_max: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < NUM_BLOB_FACTORS {
            return Err(Error::Config(format!(
                "blob generator needs latent_dim >= {NUM_BLOB_FACTORS}, got {}",
                self.latent_dim
            )));
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!(
                "blob generator needs resolution >= 8, got {}",
                self.resolution
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("blob generator needs at least one channel".into()));
        }
        if !(0.0 < self.radius_min && self.radius_min < self.radius_max) {
            return Err(Error::Config("blob radius limits must satisfy 0 < min < max".into()));
        }
        if !(0.0 <= self.intensity_min && self.intensity_min < self.intensity_max && self.intensity_max <= 1.0) {
            return Err(Error::Config(
                "blob intensity limits must satisfy 0 <= min < max <= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlobGenerator<T> {
    cfg: BlobConfig,
    /// `d × d` orthonormal; column `i` is the latent direction of factor `i`.
    q: Array2<T>,
}

/// Blob parameters for one sample plus the derivatives needed by the VJP.
struct Blob<T> {
    cx: T,
    cy: T,
    radius: T,
    intensity: T,
    dcx_df: T,
    dcy_df: T,
    dr_df: T,
    di_df: T,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> BlobGenerator<T> {
    pub fn new(cfg: BlobConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(cfg.seed, "blob-factors"));
        let q = orthonormal::<T>(crate::rng::normal_matrix(&mut rng, cfg.latent_dim, cfg.latent_dim));
        Ok(Self { cfg, q })
    }

    pub fn config(&self) -> &BlobConfig {
        &self.cfg
    }

    /// The full orthonormal matrix `Q`.
    pub fn q(&self) -> ArrayView2<'_, T> {
        self.q.view()
    }

    /// Factor values `f = Qᵀz` (first four) for each row of `z`.
    pub fn factors(&self, z: ArrayView2<'_, T>) -> Array2<T> {
        z.dot(&self.q.slice(ndarray::s![.., ..NUM_BLOB_FACTORS]))
    }

    fn blob(&self, f: ndarray::ArrayView1<'_, T>) -> Blob<T> {
        let c = &self.cfg;
        let gain = T::lit(c.position_gain);
        let span = T::lit(0.4);
        let half = T::lit(0.5);
        let tx = (gain * f[0]).tanh();
        let ty = (gain * f[1]).tanh();
        let log_span = T::lit((c.radius_max / c.radius_min).ln());
        let sr = sigmoid(f[2]);
        let radius = (T::lit(c.radius_min.ln()) + log_span * sr).exp();
        let i_span = T::lit(c.intensity_max - c.intensity_min);
        let si = sigmoid(f[3]);
        Blob {
            cx: half + span * tx,
            cy: half + span * ty,
            radius,
            intensity: T::lit(c.intensity_min) + i_span * si,
            dcx_df: span * gain * (T::one() - tx * tx),
            dcy_df: span * gain * (T::one() - ty * ty),
            dr_df: radius * log_span * sr * (T::one() - sr),
            di_df: i_span * si * (T::one() - si),
        }
    }

    fn pixel_coord(&self, i: usize) -> T {
        T::lit((i as f64 + 0.5) / self.cfg.resolution as f64)
    }

    fn render_codes(&self, codes: ArrayView2<'_, T>) -> Array4<T> {
        let n = self.cfg.resolution;
        let ch = self.cfg.channels;
        let factors = self.factors(codes);
        let two = T::lit(2.0);
        let mut out = Array4::zeros((codes.nrows(), ch, n, n));
        for (b, f) in factors.rows().into_iter().enumerate() {
            let blob = self.blob(f);
            let inv = T::one() / (two * blob.radius * blob.radius);
            for y in 0..n {
                let dy = self.pixel_coord(y) - blob.cy;
                for x in 0..n {
                    let dx = self.pixel_coord(x) - blob.cx;
                    let g = (-(dx * dx + dy * dy) * inv).exp();
                    let v = two * blob.intensity * g - T::one();
                    for c in 0..ch {
                        out[[b, c, y, x]] = v;
                    }
                }
            }
        }
        out
    }

    fn codes_vjp(&self, codes: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Array2<T> {
        let n = self.cfg.resolution;
        let factors = self.factors(codes);
        let two = T::lit(2.0);
        let mut grad_f = Array2::zeros((codes.nrows(), NUM_BLOB_FACTORS));
        let grad_px = grad.sum_axis(Axis(1));
        for (b, f) in factors.rows().into_iter().enumerate() {
            let blob = self.blob(f);
            let r2 = blob.radius * blob.radius;
            let inv = T::one() / (two * r2);
            let (mut gcx, mut gcy, mut gr, mut gi) = (T::zero(), T::zero(), T::zero(), T::zero());
            for y in 0..n {
                let dy = self.pixel_coord(y) - blob.cy;
                for x in 0..n {
                    let dx = self.pixel_coord(x) - blob.cx;
                    let d2 = dx * dx + dy * dy;
                    let g = (-d2 * inv).exp();
                    let up = grad_px[[b, y, x]];
                    let common = up * two * blob.intensity * g / r2;
                    gcx += common * dx;
                    gcy += common * dy;
                    gr += common * d2 / blob.radius;
                    gi += up * two * g;
                }
            }
            grad_f[[b, 0]] = gcx * blob.dcx_df;
            grad_f[[b, 1]] = gcy * blob.dcy_df;
            grad_f[[b, 2]] = gr * blob.dr_df;
            grad_f[[b, 3]] = gi * blob.di_df;
        }
        grad_f.dot(&self.q.slice(ndarray::s![.., ..NUM_BLOB_FACTORS]).t())
    }
}

/// Gram-Schmidt on the columns of a square matrix.
fn orthonormal<T: Scalar>(mut m: Array2<T>) -> Array2<T> {
    let d = m.ncols();
    for j in 0..d {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

impl<T: Scalar> Generator<T> for BlobGenerator<T> {
    fn name(&self) -> &str {
        "blob"
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// With style injection the blob has a single style layer, the latent
    /// code itself, so both sites have width `d`.
    fn shift_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn output_shape(&self) -> ImageShape {
        ImageShape {
            channels: self.cfg.channels,
            height: self.cfg.resolution,
            width: self.cfg.resolution,
        }
    }

    fn injection_site(&self) -> InjectionSite {
        self.cfg.injection
    }

    fn render(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>) -> Result<Array4<T>> {
        let codes = &z + &shift;
        Ok(self.render_codes(codes.view()))
    }

    fn shift_vjp(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let codes = &z + &shift;
        Ok(self.codes_vjp(codes.view(), grad))
    }

    fn latent_vjp(&self, z: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>> {
        Ok(self.codes_vjp(z, grad))
    }

    fn factor_matrix(&self) -> Option<Array2<T>> {
        Some(self.q.slice(ndarray::s![.., ..NUM_BLOB_FACTORS]).t().to_owned())
    }

    fn weights(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("q".to_string(), self.q.view().into_dyn())]
    }
}
