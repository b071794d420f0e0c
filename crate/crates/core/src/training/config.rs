use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deformator::{DeformatorMode, DEFAULT_HIDDEN_WIDTH};
use crate::generators::GeneratorSpec;
use crate::latent::{DirectionSpec, MagnitudeRange};
use crate::nn::AdamConfig;
use crate::reconstructor::Backbone;
use crate::{Error, Result};

/// Every knob of a training run. Serialized as a flat JSON object whose
/// keys are exactly these field names; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the magnitude regression loss.
    pub lambda: f64,
    /// Weight of the centroid loss.
    pub gamma: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub eps_deadzone: f64,
    pub num_directions: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub allow_equal_directions: bool,
    /// Train on two consecutive shifts; `false` gives the single-pair objective.
    pub two_step: bool,
    pub deformator_mode: DeformatorMode,
    pub deformator_hidden: usize,
    pub backbone: Backbone,
    pub generator: GeneratorSpec,
    /// Steps between metric evaluations (0 disables them).
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub ppl_delta: f64,
    /// Steps between checkpoint writes when an output directory is given
    /// (0 writes only the final checkpoint).
    pub checkpoint_interval: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.25,
            learning_rate: 1e-4,
            steps: 5_000,
            batch_size: 32,
            eps_low: -6.0,
            eps_high: 6.0,
            eps_deadzone: 0.5,
            num_directions: 8,
            latent_dim: 8,
            seed: 0,
            allow_equal_directions: true,
            two_step: true,
            deformator_mode: DeformatorMode::Nonlinear,
            deformator_hidden: DEFAULT_HIDDEN_WIDTH,
            backbone: Backbone::Small,
            generator: GeneratorSpec::default(),
            eval_interval: 500,
            eval_samples: 1_000,
            ppl_delta: 0.1,
            checkpoint_interval: 1_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", format!("must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma", format!("must be a finite value >= 0, got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        self.magnitudes().validate()?;
        DirectionSpec::new(self.num_directions, self.latent_dim)?;
        if !self.allow_equal_directions && self.num_directions < 2 {
            return fail(
                "allow_equal_directions",
                "distinct directions need num_directions >= 2".into(),
            );
        }
        if self.deformator_mode == DeformatorMode::Nonlinear && self.deformator_hidden == 0 {
            return fail("deformator_hidden", "must be positive".into());
        }
        if !(self.ppl_delta > 0.0 && self.ppl_delta.is_finite()) {
            return fail("ppl_delta", format!("must be positive, got {}", self.ppl_delta));
        }
        if self.eval_interval > 0 && self.eval_samples == 0 {
            return fail("eval_samples", "must be at least 1 when evaluation is enabled".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam_beta1", "betas must lie in [0, 1)".into());
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon", "must be positive".into());
        }
        Ok(())
    }

    pub fn magnitudes(&self) -> MagnitudeRange {
        MagnitudeRange {
            low: self.eps_low,
            high: self.eps_high,
            deadzone: self.eps_deadzone,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Shifts per sample that enter the losses.
    pub fn shifts_per_sample(&self) -> usize {
        if self.two_step {
            2
        } else {
            1
        }
    }
}
