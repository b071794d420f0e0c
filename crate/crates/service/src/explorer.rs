use std::path::{Path, PathBuf};

use compass_core::generators::{render, GeneratorRegistry};
use compass_core::latent::norm;
use compass_core::metrics::{seeded_rca, MetricReport};
use compass_core::rng::latent_from_seed;
use compass_core::training::load_checkpoint;
use compass_core::viz::{image_png, linspace, sweep};
use compass_core::{CentroidBank, Deformator, GeneratorHandle, InjectionSite, ShiftRequest};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::api::ApiError;

/// Magnitudes are clamped to `[-EPS_LIMIT, EPS_LIMIT]`.
pub const EPS_LIMIT: f64 = 8.0;
/// Default maximum length of an edit stack.
pub const MAX_SHIFTS: usize = 8;
/// Maximum number of images in one strip.
pub const MAX_STRIP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftItem {
    pub k: usize,
    pub eps: f64,
}

/// A latent code (picked by seed) and the shifts applied to it, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStack {
    pub seed: u64,
    #[serde(default)]
    pub shifts: Vec<ShiftItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripRequest {
    pub seed: u64,
    #[serde(default)]
    pub shifts: Vec<ShiftItem>,
    pub sweep: Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionInfo {
    pub index: usize,
    /// Held-out reconstructor accuracy on this direction.
    pub score: f64,
    pub centroid_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub png: Vec<u8>,
    /// Norm of the latent code after the stack is applied (of `z` alone
    /// when shifts are injected into the style vectors).
    pub latent_norm: f64,
    /// Whether any magnitude had to be clamped.
    pub clamped: bool,
}

/// How to score directions when loading a checkpoint.
#[derive(Debug, Clone)]
pub struct ExplorerOptions {
    /// Evaluation samples for the per-direction scores.
    pub rca_samples: usize,
    /// Evaluation seed; the same samples and seed as `compass eval` give
    /// the same per-direction numbers.
    pub seed: u64,
    /// Take the scores from a saved evaluation report instead.
    pub report: Option<PathBuf>,
    pub max_shifts: usize,
}

impl Default for ExplorerOptions {
    fn default() -> Self {
        Self {
            rca_samples: 10_000,
            seed: 0,
            report: None,
            max_shifts: MAX_SHIFTS,
        }
    }
}

/// The immutable model state behind the service.
pub struct Explorer {
    deformator: Deformator<f32>,
    gen: GeneratorHandle<f32>,
    bank: CentroidBank<f32>,
    scores: Vec<f64>,
    checkpoint_id: String,
    max_shifts: usize,
}

impl Explorer {
    pub fn from_checkpoint(path: &Path, opts: &ExplorerOptions) -> compass_core::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| compass_core::Error::Input(format!("{}: {e}", path.display())))?;
        let checkpoint_id = hex::encode(&Sha256::digest(&bytes)[..8]);
        let ckpt = load_checkpoint::<f32>(path)?;
        let gen = GeneratorRegistry::with_builtins().build(&ckpt.config.generator, ckpt.config.latent_dim)?;
        let k = ckpt.spec().num_directions;
        let scores = match &opts.report {
            Some(report) => {
                let text = std::fs::read_to_string(report)
                    .map_err(|e| compass_core::Error::Input(format!("{}: {e}", report.display())))?;
                let report: MetricReport = serde_json::from_str(&text)?;
                if report.per_direction.len() != k {
                    return Err(compass_core::Error::Incompatible(format!(
                        "report scores {} directions, checkpoint has {k}",
                        report.per_direction.len()
                    )));
                }
                report.per_direction
            }
            None => {
                seeded_rca(
                    &ckpt.deformator,
                    &ckpt.reconstructor,
                    &*gen,
                    opts.rca_samples,
                    &ckpt.config.magnitudes(),
                    opts.seed,
                )?
                .per_direction
            }
        };
        Self::new(ckpt.deformator, gen, ckpt.bank, scores, checkpoint_id, opts.max_shifts)
    }

    pub fn new(
        deformator: Deformator<f32>,
        gen: GeneratorHandle<f32>,
        bank: CentroidBank<f32>,
        scores: Vec<f64>,
        checkpoint_id: String,
        max_shifts: usize,
    ) -> compass_core::Result<Self> {
        let spec = deformator.spec();
        if spec.latent_dim != gen.shift_dim()
            || bank.num_directions() != spec.num_directions
            || scores.len() != spec.num_directions
        {
            return Err(compass_core::Error::Shape(
                "deformator, generator, centroid bank and scores disagree in size".into(),
            ));
        }
        Ok(Self {
            deformator,
            gen,
            bank,
            scores,
            checkpoint_id,
            max_shifts,
        })
    }

    pub fn num_directions(&self) -> usize {
        self.deformator.spec().num_directions
    }

    pub fn latent_dim(&self) -> usize {
        self.gen.latent_dim()
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn generator_name(&self) -> &str {
        self.gen.name()
    }

    pub fn max_shifts(&self) -> usize {
        self.max_shifts
    }

    /// Directions sorted by score, best first; ties keep index order.
    pub fn directions(&self) -> Vec<DirectionInfo> {
        let mut out: Vec<DirectionInfo> = (0..self.num_directions())
            .map(|k| DirectionInfo {
                index: k,
                score: self.scores[k],
                centroid_norm: self.bank.centroid(k).map_or(0.0, |c| f64::from(norm(c))),
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        out
    }

    fn check_direction(&self, k: usize, field: String) -> Result<(), ApiError> {
        if k >= self.num_directions() {
            return Err(ApiError::unprocessable(
                field,
                format!("direction {k} out of range for {} directions", self.num_directions()),
            ));
        }
        Ok(())
    }

    /// Validated, clamped shift requests for a stack.
    fn resolve(&self, shifts: &[ShiftItem]) -> Result<(Vec<ShiftRequest>, bool), ApiError> {
        if shifts.len() > self.max_shifts {
            return Err(ApiError::unprocessable(
                "shifts".into(),
                format!("at most {} shifts per stack, got {}", self.max_shifts, shifts.len()),
            ));
        }
        let mut clamped = false;
        let mut reqs = Vec::with_capacity(shifts.len());
        for (i, s) in shifts.iter().enumerate() {
            self.check_direction(s.k, format!("shifts[{i}].k"))?;
            let (eps, c) = clamp_eps(s.eps);
            clamped |= c;
            reqs.push(ShiftRequest::new(s.k, eps));
        }
        Ok((reqs, clamped))
    }

    pub fn generate(&self, stack: &EditStack) -> Result<Rendered, ApiError> {
        let (reqs, clamped) = self.resolve(&stack.shifts)?;
        let z = latent_from_seed::<f32>(stack.seed, self.latent_dim());
        let shift = self.deformator.stacked_shift(&reqs).map_err(ApiError::internal)?;
        let images = render(
            &*self.gen,
            z.view().insert_axis(Axis(0)),
            shift.view().insert_axis(Axis(0)),
        )
        .map_err(ApiError::internal)?;
        let latent_norm = match self.gen.injection_site() {
            InjectionSite::InputLatent => f64::from(norm((&z.view() + &shift).view())),
            InjectionSite::PerLayerStyle => f64::from(norm(z.view())),
        };
        Ok(Rendered {
            png: image_png(images.index_axis(Axis(0), 0)).map_err(ApiError::internal)?,
            latent_norm,
            clamped,
        })
    }

    /// `n` images sweeping `sweep.k` over `[lo, hi]` on top of the stack.
    pub fn strip(&self, req: &StripRequest) -> Result<Vec<Vec<u8>>, ApiError> {
        let (base, _) = self.resolve(&req.shifts)?;
        let sw = req.sweep;
        self.check_direction(sw.k, "sweep.k".into())?;
        if sw.n == 0 || sw.n > MAX_STRIP {
            return Err(ApiError::unprocessable(
                "sweep.n".into(),
                format!("n must be between 1 and {MAX_STRIP}, got {}", sw.n),
            ));
        }
        let mags = linspace(clamp_eps(sw.lo).0, clamp_eps(sw.hi).0, sw.n);
        let z = latent_from_seed::<f32>(req.seed, self.latent_dim());
        let images = sweep(&self.deformator, &*self.gen, z.view(), &base, sw.k, &mags).map_err(ApiError::internal)?;
        images
            .iter()
            .map(|img| image_png(img.view()).map_err(ApiError::internal))
            .collect()
    }
}

fn clamp_eps(eps: f64) -> (f64, bool) {
    let c = eps.clamp(-EPS_LIMIT, EPS_LIMIT);
    (c, c != eps)
}
