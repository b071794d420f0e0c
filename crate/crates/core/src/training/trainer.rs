use std::io::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::losses::{centroid_loss, classification_loss_grad, regression_loss_grad, total_loss};
use super::{sample_batch, save_checkpoint, Checkpoint, ShiftSample, TrainConfig};
use crate::deformator::Deformator;
use crate::generators::{generate, render, shift_vjp, GeneratorHandle, GeneratorRegistry};
use crate::latent::{encode_batch, CentroidBank, DirectionSpec, ShiftRequest};
use crate::metrics::{evaluate, EmbeddingNet, MetricReport};
use crate::nn::Adam;
use crate::reconstructor::Reconstructor;
use crate::rng::{derive_seed, seeded_rng, stream_rng};
use crate::{Error, Result, Scalar};

/// File name of the checkpoint written by [`train_loop`].
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
/// File name of the metric history written by [`train_loop`].
pub const HISTORY_FILE: &str = "history.csv";

/// The loss terms of one batch. All four keys are always present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub centroid: f64,
    pub total: f64,
}

/// Losses, gradients and the detached shifts of one batch, before any update.
#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    pub losses: LossBreakdown,
    pub deformator_grads: Deformator<T>,
    pub reconstructor_grads: Reconstructor<T>,
    /// Every shift that entered the losses, one row each.
    pub shifts: Array2<T>,
    pub labels: Vec<usize>,
    pub centroid_skipped_unseeded: usize,
    pub centroid_skipped_zero_norm: usize,
}

/// Joint optimization state of a deformator and a reconstructor against a
/// frozen generator.
pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    gen: GeneratorHandle<T>,
    deformator: Deformator<T>,
    reconstructor: Reconstructor<T>,
    bank: CentroidBank<T>,
    opt_deformator: Adam<T>,
    opt_reconstructor: Adam<T>,
    step: u64,
    embedding: EmbeddingNet<T>,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the generator named in the config from the built-in registry.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = GeneratorRegistry::with_builtins().build(&config.generator, config.latent_dim)?;
        Self::new(config, gen)
    }

    /// Fresh, seeded parameters for `config` against `gen`.
    pub fn new(config: TrainConfig, gen: GeneratorHandle<T>) -> Result<Self> {
        config.validate()?;
        check_generator(&config, &*gen)?;
        let spec = DirectionSpec::new(config.num_directions, gen.shift_dim())?;
        let deformator = Deformator::init(
            spec,
            config.deformator_mode,
            config.deformator_hidden,
            config.magnitudes(),
            &mut seeded_rng(config.seed, "deformator"),
        )?;
        let reconstructor = Reconstructor::init(
            spec,
            gen.output_shape(),
            config.backbone,
            &mut seeded_rng(config.seed, "reconstructor"),
        )?;
        let opt_deformator = Adam::new(&deformator, config.adam());
        let opt_reconstructor = Adam::new(&reconstructor, config.adam());
        let embedding = EmbeddingNet::new(gen.output_shape(), config.seed);
        Ok(Self {
            config,
            bank: CentroidBank::new(spec),
            gen,
            deformator,
            reconstructor,
            opt_deformator,
            opt_reconstructor,
            step: 0,
            embedding,
        })
    }

    /// Continues from a checkpoint. `gen` must be the generator it was trained against.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, gen: GeneratorHandle<T>) -> Result<Self> {
        check_generator(&ckpt.config, &*gen)?;
        if gen.shift_dim() != ckpt.deformator.spec().latent_dim
            || gen.output_shape() != ckpt.reconstructor.image_shape()
        {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained for shift width {} and images {:?}; generator `{}` has {} and {:?}",
                ckpt.deformator.spec().latent_dim,
                ckpt.reconstructor.image_shape(),
                gen.name(),
                gen.shift_dim(),
                gen.output_shape()
            )));
        }
        let (opt_deformator, opt_reconstructor) = match ckpt.optimizer {
            Some(state) => state,
            None => (
                Adam::new(&ckpt.deformator, ckpt.config.adam()),
                Adam::new(&ckpt.reconstructor, ckpt.config.adam()),
            ),
        };
        Ok(Self {
            embedding: EmbeddingNet::new(gen.output_shape(), ckpt.config.seed),
            config: ckpt.config,
            gen,
            deformator: ckpt.deformator,
            reconstructor: ckpt.reconstructor,
            bank: ckpt.bank,
            opt_deformator,
            opt_reconstructor,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorHandle<T> {
        &self.gen
    }

    pub fn deformator(&self) -> &Deformator<T> {
        &self.deformator
    }

    /// Direct parameter access, e.g. for finite-difference checks.
    pub fn deformator_mut(&mut self) -> &mut Deformator<T> {
        &mut self.deformator
    }

    pub fn reconstructor(&self) -> &Reconstructor<T> {
        &self.reconstructor
    }

    pub fn bank(&self) -> &CentroidBank<T> {
        &self.bank
    }

    pub fn embedding(&self) -> &EmbeddingNet<T> {
        &self.embedding
    }

    /// Number of completed optimization steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// The batch consumed by optimization step `step`.
    pub fn batch_for_step(&self, step: u64) -> Vec<ShiftSample<T>> {
        let mut rng = stream_rng(self.config.seed, "train", step);
        sample_batch(&self.config, self.gen.latent_dim(), &mut rng)
    }

    /// Owned snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            deformator: self.deformator.clone(),
            reconstructor: self.reconstructor.clone(),
            bank: self.bank.clone(),
            optimizer: Some((self.opt_deformator.clone(), self.opt_reconstructor.clone())),
        }
    }

    /// Forward and backward pass on `batch` with the current parameters.
    ///
    /// Each sample yields three images `G(z)`, `G(z+Δ₁)`, `G(z+Δ₁+Δ₂)` and
    /// two pairs; in single-step mode only the first pair is used. The
    /// classification and regression terms average over all pairs, and
    /// the centroid term over all shifts, treating centroids as constants.
    pub fn batch_outcome(&self, batch: &[ShiftSample<T>]) -> Result<BatchOutcome<T>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &self.config;
        let gen = &*self.gen;
        let k = cfg.num_directions;
        let b = batch.len();
        let two_step = cfg.two_step;

        let mut z = Array2::zeros((b, gen.latent_dim()));
        for (mut row, s) in z.outer_iter_mut().zip(batch) {
            row.assign(&s.z.view());
        }
        let mut reqs: Vec<ShiftRequest> = batch.iter().map(|s| s.first).collect();
        if two_step {
            reqs.extend(batch.iter().map(|s| s.second));
        }
        let labels: Vec<usize> = reqs.iter().map(|r| r.direction).collect();
        let targets: Array1<T> = reqs.iter().map(|r| T::lit(r.magnitude)).collect();

        let encoded = encode_batch::<T>(&reqs, k)?;
        let (shifts, def_cache) = self.deformator.forward_cached(encoded.view())?;
        if shifts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                dump: batch_dump(batch, None),
            });
        }
        let d1 = shifts.slice(s![..b, ..]);
        let img0 = generate(gen, z.view())?;
        let img1 = render(gen, z.view(), d1)?;
        let (sum12, img2) = if two_step {
            let sum12 = &d1 + &shifts.slice(s![b.., ..]);
            let img2 = render(gen, z.view(), sum12.view())?;
            (Some(sum12), Some(img2))
        } else {
            (None, None)
        };
        let pairs = match &img2 {
            Some(img2) => self.reconstructor.stack_pairs(
                concatenate![Axis(0), img0, img1].view(),
                concatenate![Axis(0), img1, *img2].view(),
            )?,
            None => self.reconstructor.stack_pairs(img0.view(), img1.view())?,
        };
        let (pred, rec_cache) = self.reconstructor.forward_pairs(pairs.view())?;

        let (cl, g_logits) = classification_loss_grad(pred.logits.view(), &labels)?;
        let (r, g_eps) = regression_loss_grad(pred.epsilon_hat.view(), targets.view())?;
        let centroid = centroid_loss(&self.bank, shifts.view(), &labels)?;
        let total = total_loss(cl, r, centroid.loss, cfg);
        let losses = LossBreakdown {
            classification: cl.as_f64(),
            regression: r.as_f64(),
            centroid: centroid.loss.as_f64(),
            total: total.as_f64(),
        };

        let lambda = T::lit(cfg.lambda);
        let (reconstructor_grads, g_pairs) =
            self.reconstructor
                .backward(&rec_cache, g_logits.view(), g_eps.mapv(|g| g * lambda).view(), true);
        let g_pairs = g_pairs.expect("input gradient requested");
        let c = gen.output_shape().channels;
        let g_before = g_pairs.slice(s![.., ..c, .., ..]);
        let g_after = g_pairs.slice(s![.., c.., .., ..]);

        // Image gradients flow back into the shifts through the frozen generator.
        let mut g_shifts = Array2::zeros(shifts.raw_dim());
        match (&sum12, two_step) {
            (Some(sum12), true) => {
                let g_img1 = &g_after.slice(s![..b, .., .., ..]) + &g_before.slice(s![b.., .., .., ..]);
                let g_img2 = g_after.slice(s![b.., .., .., ..]);
                let via_img1 = shift_vjp(gen, z.view(), d1, g_img1.view())?;
                let via_img2 = shift_vjp(gen, z.view(), sum12.view(), g_img2)?;
                g_shifts.slice_mut(s![..b, ..]).assign(&(&via_img1 + &via_img2));
                g_shifts.slice_mut(s![b.., ..]).assign(&via_img2);
            }
            _ => {
                let via_img1 = shift_vjp(gen, z.view(), d1, g_after)?;
                g_shifts.assign(&via_img1);
            }
        }
        let gamma = T::lit(cfg.gamma);
        g_shifts.zip_mut_with(&centroid.grad, |g, &c| *g += gamma * c);
        let deformator_grads = self.deformator.backward(&def_cache, g_shifts.view());

        Ok(BatchOutcome {
            losses,
            deformator_grads,
            reconstructor_grads,
            shifts,
            labels,
            centroid_skipped_unseeded: centroid.skipped_unseeded,
            centroid_skipped_zero_norm: centroid.skipped_zero_norm,
        })
    }

    /// One joint optimization step on the batch of the current step. The
    /// centroid bank is updated afterwards with the detached pre-step shifts.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch_for_step(self.step);
        let out = self.batch_outcome(&batch)?;
        let l = out.losses;
        if ![l.classification, l.regression, l.centroid, l.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                step: self.step,
                dump: batch_dump(&batch, Some(&l)),
            });
        }
        self.opt_deformator.step(&mut self.deformator, &out.deformator_grads);
        self.opt_reconstructor
            .step(&mut self.reconstructor, &out.reconstructor_grads);
        self.bank.update_batch(&out.labels, out.shifts.view())?;
        self.step += 1;
        Ok(l)
    }

    /// RCA and PPL on the held-out evaluation stream of this run.
    pub fn evaluate(&self, n_samples: usize) -> Result<MetricReport> {
        evaluate(
            &self.deformator,
            &self.reconstructor,
            &*self.gen,
            &self.embedding,
            n_samples,
            self.config.ppl_delta,
            &self.config.magnitudes(),
            derive_seed(self.config.seed, "held-out"),
        )
    }
}

fn check_generator<T: Scalar>(config: &TrainConfig, gen: &dyn crate::Generator<T>) -> Result<()> {
    if gen.latent_dim() != config.latent_dim {
        return Err(Error::Config(format!(
            "latent_dim: config has {}, generator `{}` samples {}",
            config.latent_dim,
            gen.name(),
            gen.latent_dim()
        )));
    }
    if !gen.is_differentiable() {
        return Err(Error::Capability(format!(
            "generator `{}` is not differentiable",
            gen.name()
        )));
    }
    Ok(())
}

fn batch_dump<T: Scalar>(batch: &[ShiftSample<T>], losses: Option<&LossBreakdown>) -> String {
    let samples: Vec<_> = batch
        .iter()
        .map(|s| {
            serde_json::json!({
                "z": s.z.view().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                "first": s.first,
                "second": s.second,
            })
        })
        .collect();
    serde_json::json!({ "losses": losses, "samples": samples }).to_string()
}

/// One line of the training history. Losses are averaged over the steps
/// since the previous row; metrics are evaluated at `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub classification: f64,
    pub regression: f64,
    pub centroid: f64,
    pub total: f64,
    pub rca: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Losses of the last step taken, if any.
    pub last_losses: Option<LossBreakdown>,
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("step,classification,regression,centroid,total,rca,ppl\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.classification, r.regression, r.centroid, r.total, r.rca, r.ppl
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs the trainer up to `config.steps`, evaluating every `eval_interval`
/// steps. With an output directory, the history and checkpoints are written
/// there; a failed checkpoint write aborts the run and leaves the previous
/// checkpoint file and the in-memory trainer intact. `on_row` sees each
/// history row as it is produced.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let mut window = [0.0f64; 4];
    let mut window_len = 0u32;
    let mut last_losses = None;
    while trainer.step < cfg.steps {
        let l = trainer.train_step()?;
        last_losses = Some(l);
        for (acc, v) in window
            .iter_mut()
            .zip([l.classification, l.regression, l.centroid, l.total])
        {
            *acc += v;
        }
        window_len += 1;
        let step = trainer.step;
        if cfg.eval_interval > 0 && step.is_multiple_of(cfg.eval_interval) {
            let report = trainer.evaluate(cfg.eval_samples)?;
            let n = f64::from(window_len);
            let row = HistoryRow {
                step,
                classification: window[0] / n,
                regression: window[1] / n,
                centroid: window[2] / n,
                total: window[3] / n,
                rca: report.rca,
                ppl: report.ppl,
            };
            on_row(&row);
            history.push(row);
            window = [0.0; 4];
            window_len = 0;
            if let Some(dir) = out_dir {
                write_history_csv(&dir.join(HISTORY_FILE), &history)?;
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && step.is_multiple_of(cfg.checkpoint_interval) && step < cfg.steps {
                save_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
        write_history_csv(&dir.join(HISTORY_FILE), &history)?;
    }
    Ok(TrainOutcome { history, last_losses })
}
