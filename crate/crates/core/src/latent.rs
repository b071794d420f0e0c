//! Latent-space primitives: shift requests and their one-hot encoding,
//! shift composition, cosine similarity and the per-direction centroid bank.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Number of discoverable directions `K` and the width `d` of the space the
/// shifts live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionSpec {
    pub num_directions: usize,
    pub latent_dim: usize,
}

impl DirectionSpec {
    pub fn new(num_directions: usize, latent_dim: usize) -> Result<Self> {
        if num_directions == 0 {
            return Err(Error::Config("num_directions must be at least 1".into()));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        Ok(Self {
            num_directions,
            latent_dim,
        })
    }

    pub fn check_direction(&self, k: usize) -> Result<()> {
        if k >= self.num_directions {
            return Err(Error::IndexOutOfRange {
                index: k,
                count: self.num_directions,
            });
        }
        Ok(())
    }
}

/// A point in the generator's latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T>(Array1<T>);

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent code has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }
}

/// User-facing edit command: move along direction `direction` by `magnitude`.
/// Direction indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRequest {
    pub direction: usize,
    pub magnitude: f64,
}

impl ShiftRequest {
    pub fn new(direction: usize, magnitude: f64) -> Self {
        Self { direction, magnitude }
    }
}

/// Training range of shift magnitudes: uniform on `[low, high]` with the
/// dead zone `|ε| < deadzone` rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRange {
    pub low: f64,
    pub high: f64,
    pub deadzone: f64,
}

impl Default for MagnitudeRange {
    fn default() -> Self {
        Self {
            low: -6.0,
            high: 6.0,
            deadzone: 0.5,
        }
    }
}

impl MagnitudeRange {
    pub fn validate(&self) -> Result<()> {
        let ok = self.deadzone >= 0.0
            && self.low < -self.deadzone
            && self.deadzone < self.high
            && self.low.is_finite()
            && self.high.is_finite();
        if !ok {
            return Err(Error::Config(format!(
                "magnitude range requires eps_low < -eps_deadzone < eps_deadzone < eps_high, got {} / {} / {}",
                self.low, self.deadzone, self.high
            )));
        }
        Ok(())
    }

    pub fn admits(&self, eps: f64) -> bool {
        eps >= self.low && eps <= self.high && eps.abs() >= self.deadzone
    }

    /// Draws by rejection; the range must be valid.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let eps = rng.random_range(self.low..=self.high);
            if eps.abs() >= self.deadzone {
                return eps;
            }
        }
    }

    /// `n` deterministic magnitudes spread over both admissible intervals.
    pub fn probe_grid(&self, n: usize) -> Vec<f64> {
        let half = (n / 2).max(1);
        let span = |a: f64, b: f64| -> Vec<f64> {
            (0..half)
                .map(|i| a + (b - a) * (i as f64 + 0.5) / half as f64)
                .collect()
        };
        let mut out = span(self.low, -self.deadzone);
        out.extend(span(self.deadzone, self.high));
        out
    }
}

/// `ε·e_k`, the deformator input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedShift<T>(Array1<T>);

impl<T: Scalar> EncodedShift<T> {
    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }
}

pub fn one_hot<T: Scalar>(k: usize, num_directions: usize) -> Result<Array1<T>> {
    if k >= num_directions {
        return Err(Error::IndexOutOfRange {
            index: k,
            count: num_directions,
        });
    }
    let mut v = Array1::zeros(num_directions);
    v[k] = T::one();
    Ok(v)
}

pub fn encode_shift<T: Scalar>(req: &ShiftRequest, num_directions: usize) -> Result<EncodedShift<T>> {
    if !req.magnitude.is_finite() {
        return Err(Error::Input(format!("shift magnitude {} is not finite", req.magnitude)));
    }
    let v = one_hot::<T>(req.direction, num_directions)? * T::lit(req.magnitude);
    Ok(EncodedShift(v))
}

/// Encodes a batch of requests into the rows of a `(batch, K)` matrix.
pub fn encode_batch<T: Scalar>(reqs: &[ShiftRequest], num_directions: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((reqs.len(), num_directions));
    for (row, req) in out.rows_mut().into_iter().zip(reqs) {
        let enc = encode_shift::<T>(req, num_directions)?;
        let mut row = row;
        row.assign(&enc.0);
    }
    Ok(out)
}

pub fn apply_shift<T: Scalar>(z: &LatentCode<T>, shift: ArrayView1<'_, T>) -> Result<LatentCode<T>> {
    if shift.len() != z.dim() {
        return Err(Error::Shape(format!(
            "shift has length {}, latent code has length {}",
            shift.len(),
            z.dim()
        )));
    }
    LatentCode::new(&z.0 + &shift)
}

pub fn dot<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: ArrayView1<'_, T>) -> T {
    dot(a, a).sqrt()
}

/// `a·b / (‖a‖‖b‖)`. Zero vectors are an error, never a silent 0.
pub fn cosine_similarity<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Running per-direction means of the shift vectors seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank<T> {
    centroids: Array2<T>,
    counts: Vec<u64>,
}

impl<T: Scalar> CentroidBank<T> {
    pub fn new(spec: DirectionSpec) -> Self {
        Self {
            centroids: Array2::zeros((spec.num_directions, spec.latent_dim)),
            counts: vec![0; spec.num_directions],
        }
    }

    pub fn from_parts(centroids: Array2<T>, counts: Vec<u64>) -> Result<Self> {
        if centroids.nrows() != counts.len() {
            return Err(Error::Shape(format!(
                "{} centroids but {} counts",
                centroids.nrows(),
                counts.len()
            )));
        }
        for (row, &n) in centroids.rows().into_iter().zip(&counts) {
            if n == 0 && row.iter().any(|v| *v != T::zero()) {
                return Err(Error::Input("unseeded direction has a nonzero centroid".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("centroid has non-finite entries".into()));
            }
        }
        Ok(Self { centroids, counts })
    }

    pub fn num_directions(&self) -> usize {
        self.counts.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn count(&self, k: usize) -> u64 {
        self.counts[k]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn centroids(&self) -> ArrayView2<'_, T> {
        self.centroids.view()
    }

    /// The centroid of direction `k`, or `None` before its first sample.
    pub fn centroid(&self, k: usize) -> Option<ArrayView1<'_, T>> {
        (self.counts[k] > 0).then(|| self.centroids.row(k))
    }

    pub fn update(&mut self, k: usize, shift: ArrayView1<'_, T>) -> Result<()> {
        if k >= self.counts.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                count: self.counts.len(),
            });
        }
        if shift.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "shift has length {}, centroids have length {}",
                shift.len(),
                self.latent_dim()
            )));
        }
        if shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite shift passed to centroid update".into()));
        }
        self.counts[k] += 1;
        let inv_n = T::one() / T::lit(self.counts[k] as f64);
        let mut c = self.centroids.row_mut(k);
        c.zip_mut_with(&shift, |c, &s| *c += (s - *c) * inv_n);
        Ok(())
    }

    /// Folds every row of `shifts` into the centroid of its label.
    pub fn update_batch(&mut self, labels: &[usize], shifts: ArrayView2<'_, T>) -> Result<()> {
        if labels.len() != shifts.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} shifts",
                labels.len(),
                shifts.nrows()
            )));
        }
        for (&k, s) in labels.iter().zip(shifts.rows()) {
            self.update(k, s)?;
        }
        Ok(())
    }
}
