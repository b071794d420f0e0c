//! Evaluation: reconstructor classification accuracy (RCA), perceptual path
//! length (PPL) along discovered directions, and, for generators with known
//! factors, how well the directions line up with them.

use ndarray::{Array2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformator::Deformator;
use crate::generators::{generate, render, Generator, ImageShape};
use crate::latent::{norm, MagnitudeRange, ShiftRequest};
use crate::nn::{leaky_relu, Conv2d, Fmap};
use crate::reconstructor::{argmax, Reconstructor};
use crate::rng::{normal_matrix, seeded_rng};
use crate::{Error, Result, Scalar};

/// Samples are pushed through the networks in chunks of this size.
const EVAL_CHUNK: usize = 64;

/// Default perturbation of ε for PPL.
pub const DEFAULT_PPL_DELTA: f64 = 0.1;

/// Label of the PPL normalization written into every report.
pub const PPL_NORMALIZATION: &str = "squared embedding distance divided by delta^2";

/// Anything that scores which direction separates two images.
pub trait PairClassifier<T: Scalar> {
    fn num_directions(&self) -> usize;

    /// One row of direction logits per pair.
    fn classify(&self, before: ArrayView4<'_, T>, after: ArrayView4<'_, T>) -> Result<Array2<T>>;
}

impl<T: Scalar> PairClassifier<T> for Reconstructor<T> {
    fn num_directions(&self) -> usize {
        self.spec().num_directions
    }

    fn classify(&self, before: ArrayView4<'_, T>, after: ArrayView4<'_, T>) -> Result<Array2<T>> {
        Ok(self.predict(before, after)?.logits)
    }
}

/// Maps images to flat feature vectors for PPL.
pub trait Embedding<T: Scalar>: Send + Sync {
    fn embed(&self, images: ArrayView4<'_, T>) -> Result<Array2<T>>;
}

/// A fixed, seeded, randomly initialized encoder of four stride-2 conv
/// blocks. Its distances are only meaningful relative to each other.
#[derive(Debug, Clone)]
pub struct EmbeddingNet<T> {
    input: ImageShape,
    blocks: Vec<Conv2d<T>>,
}

impl<T: Scalar> EmbeddingNet<T> {
    pub const WIDTHS: [usize; 4] = [16, 32, 32, 32];

    pub fn new(input: ImageShape, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "embedding");
        let mut channels = input.channels;
        let blocks = Self::WIDTHS
            .iter()
            .map(|&w| {
                let conv = Conv2d::he_uniform(channels, w, 3, 2, 1, &mut rng);
                channels = w;
                conv
            })
            .collect();
        Self { input, blocks }
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }
}

impl<T: Scalar> Embedding<T> for EmbeddingNet<T> {
    fn embed(&self, images: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let s = self.input;
        let (_, c, h, w) = images.dim();
        if (c, h, w) != (s.channels, s.height, s.width) {
            return Err(Error::Shape(format!(
                "embedding expects {}x{}x{} images, got {c}x{h}x{w}",
                s.channels, s.height, s.width
            )));
        }
        let mut x = Fmap::from_nchw(images);
        for conv in &self.blocks {
            let y = conv.forward_only(&x);
            x = y.with_data(leaky_relu(y.data.view()));
        }
        Ok(x.flatten())
    }
}

/// RCA with its per-direction breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcaReport {
    pub rca: f64,
    pub n_samples: usize,
    pub per_direction: Vec<f64>,
}

/// Direction `i mod K` for sample `i`, so every direction is equally
/// represented and the breakdown averages to the total.
fn balanced_requests<R: Rng + ?Sized>(
    start: usize,
    len: usize,
    k: usize,
    mags: &MagnitudeRange,
    rng: &mut R,
) -> Vec<ShiftRequest> {
    (start..start + len)
        .map(|i| ShiftRequest::new(i % k, mags.sample(rng)))
        .collect()
}

/// Fraction of single-pair samples `(G(z), G(z + A(ε e_k)))` on which the
/// classifier's top logit is `k`. Nothing is mutated.
pub fn eval_rca<T: Scalar, C: PairClassifier<T> + ?Sized, R: Rng + ?Sized>(
    deformator: &Deformator<T>,
    classifier: &C,
    gen: &dyn Generator<T>,
    n_samples: usize,
    mags: &MagnitudeRange,
    rng: &mut R,
) -> Result<RcaReport> {
    if n_samples == 0 {
        return Err(Error::Input("n_samples must be at least 1".into()));
    }
    mags.validate()?;
    let k = deformator.spec().num_directions;
    if classifier.num_directions() != k {
        return Err(Error::Shape(format!(
            "classifier scores {} directions, deformator has {k}",
            classifier.num_directions()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut start = 0;
    while start < n_samples {
        let len = EVAL_CHUNK.min(n_samples - start);
        let z = normal_matrix::<T, _>(rng, len, gen.latent_dim());
        let reqs = balanced_requests(start, len, k, mags, rng);
        let shifts = deformator.shifts_for(&reqs)?;
        let before = generate(gen, z.view())?;
        let after = render(gen, z.view(), shifts.view())?;
        let logits = classifier.classify(before.view(), after.view())?;
        for (row, req) in logits.outer_iter().zip(&reqs) {
            totals[req.direction] += 1;
            if argmax(row) == req.direction {
                hits[req.direction] += 1;
            }
        }
        start += len;
    }
    let per_direction = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok(RcaReport {
        rca: hits.iter().sum::<usize>() as f64 / n_samples as f64,
        n_samples,
        per_direction,
    })
}

/// Mean of `‖φ(G(z + A(ε e_k))) − φ(G(z + A((ε+δ) e_k)))‖² / δ²` over
/// `z ~ N(0, I)`, balanced directions and ε drawn from `mags`.
pub fn eval_ppl<T: Scalar, R: Rng + ?Sized>(
    deformator: &Deformator<T>,
    gen: &dyn Generator<T>,
    embed: &dyn Embedding<T>,
    n_samples: usize,
    delta: f64,
    mags: &MagnitudeRange,
    rng: &mut R,
) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Input(format!("delta must be positive, got {delta}")));
    }
    if n_samples == 0 {
        return Err(Error::Input("n_samples must be at least 1".into()));
    }
    mags.validate()?;
    let k = deformator.spec().num_directions;
    let mut total = 0.0;
    let mut start = 0;
    while start < n_samples {
        let len = EVAL_CHUNK.min(n_samples - start);
        let z = normal_matrix::<T, _>(rng, len, gen.latent_dim());
        let reqs = balanced_requests(start, len, k, mags, rng);
        let stepped: Vec<ShiftRequest> = reqs
            .iter()
            .map(|r| ShiftRequest::new(r.direction, r.magnitude + delta))
            .collect();
        let a = embed.embed(render(gen, z.view(), deformator.shifts_for(&reqs)?.view())?.view())?;
        let b = embed.embed(render(gen, z.view(), deformator.shifts_for(&stepped)?.view())?.view())?;
        let diff = a - b;
        total += diff
            .outer_iter()
            .map(|row| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum::<f64>();
        start += len;
    }
    Ok(total / (n_samples as f64 * delta * delta))
}

/// RCA and PPL together, as stored in training histories and printed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rca: f64,
    pub ppl: f64,
    pub delta: f64,
    pub n_samples: usize,
    pub per_direction: Vec<f64>,
    pub ppl_normalization: String,
}

/// RCA on the evaluation stream of `seed`: exactly the `rca` and
/// `per_direction` fields that [`evaluate`] reports for the same arguments.
pub fn seeded_rca<T: Scalar>(
    deformator: &Deformator<T>,
    reconstructor: &Reconstructor<T>,
    gen: &dyn Generator<T>,
    n_samples: usize,
    mags: &MagnitudeRange,
    seed: u64,
) -> Result<RcaReport> {
    eval_rca(
        deformator,
        reconstructor,
        gen,
        n_samples,
        mags,
        &mut seeded_rng(seed, "eval-rca"),
    )
}

/// Both metrics on independent streams derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    deformator: &Deformator<T>,
    reconstructor: &Reconstructor<T>,
    gen: &dyn Generator<T>,
    embed: &dyn Embedding<T>,
    n_samples: usize,
    delta: f64,
    mags: &MagnitudeRange,
    seed: u64,
) -> Result<MetricReport> {
    let rca = seeded_rca(deformator, reconstructor, gen, n_samples, mags, seed)?;
    let ppl = eval_ppl(
        deformator,
        gen,
        embed,
        n_samples,
        delta,
        mags,
        &mut seeded_rng(seed, "eval-ppl"),
    )?;
    Ok(MetricReport {
        rca: rca.rca,
        ppl,
        delta,
        n_samples,
        per_direction: rca.per_direction,
        ppl_normalization: PPL_NORMALIZATION.into(),
    })
}

/// How discovered directions line up with a generator's known factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAlignment {
    /// Mean |cos| over the greedy one-to-one direction/factor assignment.
    pub score: f64,
    /// For each direction, its best |cos| against any factor.
    pub per_direction: Vec<f64>,
    /// `(direction, factor, |cos|)` in the order the greedy matching chose them.
    pub assignment: Vec<(usize, usize, f64)>,
}

/// Compares the unit direction vectors of `deformator` with the factor rows
/// of `gen`. Fails with a capability error if the generator has none.
pub fn factor_alignment<T: Scalar>(deformator: &Deformator<T>, gen: &dyn Generator<T>) -> Result<FactorAlignment> {
    let factors = gen
        .factor_matrix()
        .ok_or_else(|| Error::Capability(format!("generator `{}` has no known factors", gen.name())))?;
    alignment_with(deformator.direction_vectors(), factors)
}

/// [`factor_alignment`] on explicit direction rows (K×d) and factor rows (F×d).
/// Zero-length directions align with nothing.
pub fn alignment_with<T: Scalar>(directions: Array2<T>, factors: Array2<T>) -> Result<FactorAlignment> {
    if directions.ncols() != factors.ncols() {
        return Err(Error::Shape(format!(
            "directions have width {}, factors have width {}",
            directions.ncols(),
            factors.ncols()
        )));
    }
    let unit = |m: Array2<T>| -> Array2<f64> {
        let mut out = m.mapv(|v| v.as_f64());
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = norm(row.view());
            if n > 0.0 {
                row /= n;
            }
        }
        out
    };
    let (d, f) = (unit(directions), unit(factors));
    let cos = d.dot(&f.t()).mapv(f64::abs);
    let per_direction = cos
        .outer_iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .collect();
    let picks = cos.nrows().min(cos.ncols());
    let mut used_d = vec![false; cos.nrows()];
    let mut used_f = vec![false; cos.ncols()];
    let mut assignment = Vec::with_capacity(picks);
    for _ in 0..picks {
        let mut best = (0, 0, -1.0);
        for ((i, j), &c) in cos.indexed_iter() {
            if !used_d[i] && !used_f[j] && c > best.2 {
                best = (i, j, c);
            }
        }
        used_d[best.0] = true;
        used_f[best.1] = true;
        assignment.push(best);
    }
    let score = if picks == 0 {
        0.0
    } else {
        assignment.iter().map(|a| a.2).sum::<f64>() / picks as f64
    };
    Ok(FactorAlignment {
        score,
        per_direction,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{BlobConfig, BlobGenerator};
    use crate::latent::DirectionSpec;
    use crate::DeformatorMode;
    use ndarray::{array, Array4};

    fn blob(res: usize) -> BlobGenerator<f64> {
        BlobGenerator::new(BlobConfig::new(8, res).unwrap()).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_with_expected_width() {
        let shape = ImageShape {
            channels: 1,
            height: 32,
            width: 32,
        };
        let a = EmbeddingNet::<f64>::new(shape, 3);
        let b = EmbeddingNet::<f64>::new(shape, 3);
        let imgs = Array4::from_shape_fn((2, 1, 32, 32), |(n, _, y, x)| ((n + y * x) as f64 * 0.01).sin());
        let ea = a.embed(imgs.view()).unwrap();
        assert_eq!(ea.dim(), (2, 2 * 2 * 32));
        assert_eq!(ea, b.embed(imgs.view()).unwrap());
        assert!(a.embed(Array4::zeros((1, 1, 16, 16)).view()).is_err());
    }

    #[test]
    fn zero_deformator_has_zero_ppl() {
        let gen = blob(16);
        let spec = DirectionSpec::new(4, 8).unwrap();
        let def = Deformator::<f64>::zeros(spec, DeformatorMode::Nonlinear, 16).unwrap();
        let embed = EmbeddingNet::new(gen.output_shape(), 0);
        let mut rng = seeded_rng(0, "t");
        let ppl = eval_ppl(&def, &gen, &embed, 50, 0.1, &MagnitudeRange::default(), &mut rng).unwrap();
        assert_eq!(ppl, 0.0);
        assert!(eval_ppl(&def, &gen, &embed, 50, 0.0, &MagnitudeRange::default(), &mut rng).is_err());
    }

    #[test]
    fn alignment_examples() {
        let factors = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let same = alignment_with(array![[0.0, -2.0, 0.0], [3.0, 0.0, 0.0]], factors.clone()).unwrap();
        assert!((same.score - 1.0).abs() < 1e-12);
        assert_eq!(same.assignment.len(), 2);
        let orth = alignment_with(array![[0.0, 0.0, 1.0], [0.0, 0.0, -5.0]], factors.clone()).unwrap();
        assert_eq!(orth.score, 0.0);
        assert_eq!(orth.per_direction, vec![0.0, 0.0]);
        // greedy takes the best pair first, then the best of what remains
        let g = alignment_with(array![[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]], factors).unwrap();
        assert_eq!((g.assignment[0].0, g.assignment[0].1), (1, 0));
        assert!((g.score - (1.0 + 0.5f64.sqrt()) / 2.0).abs() < 1e-12);
    }
}
