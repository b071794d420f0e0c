use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, Ix2};
use serde_json::json;

use super::TrainConfig;
use crate::container;
use crate::deformator::{Deformator, DeformatorMode};
use crate::generators::ImageShape;
use crate::latent::{CentroidBank, DirectionSpec};
use crate::nn::{assign_tensors, prefixed, Adam, Params};
use crate::reconstructor::{Backbone, Reconstructor};
use crate::rng::seeded_rng;
use crate::{Error, Result, Scalar};

/// Version of the checkpoint layout inside the tensor container.
pub const CHECKPOINT_VERSION: u32 = 1;

const BANK_TENSOR: &str = "bank.centroids";

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Completed optimization steps.
    pub step: u64,
    pub deformator: Deformator<T>,
    pub reconstructor: Reconstructor<T>,
    pub bank: CentroidBank<T>,
    /// Optimizer moments for the deformator and the reconstructor.
    pub optimizer: Option<(Adam<T>, Adam<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn spec(&self) -> DirectionSpec {
        self.deformator.spec()
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let spec = ckpt.deformator.spec();
    let meta = json!({
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "step": ckpt.step,
        "num_directions": spec.num_directions,
        "latent_dim": spec.latent_dim,
        "image_shape": ckpt.reconstructor.image_shape(),
        "deformator_mode": ckpt.deformator.mode(),
        "deformator_hidden": ckpt.deformator.hidden_width(),
        "backbone": ckpt.reconstructor.backbone(),
        "bank_counts": ckpt.bank.counts(),
        "adam_steps": ckpt.optimizer.as_ref().map(|(a, _)| a.steps_taken()),
    });
    let mut tensors = prefixed("deformator", ckpt.deformator.tensors());
    // Reconstructor tensor names already carry their prefix.
    tensors.extend(ckpt.reconstructor.tensors());
    tensors.push((BANK_TENSOR.to_string(), ckpt.bank.centroids().into_dyn()));
    if let Some((a, r)) = &ckpt.optimizer {
        tensors.extend(prefixed("adam.deformator", a.state_tensors()));
        tensors.extend(prefixed("adam.reconstructor", r.state_tensors()));
    }
    container::write(path, &meta, &tensors)
}

fn meta_field<'a>(meta: &'a serde_json::Value, key: &str) -> Result<&'a serde_json::Value> {
    meta.get(key)
        .ok_or_else(|| Error::Parse(format!("checkpoint header lacks `{key}`")))
}

fn meta_as<D: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<D> {
    serde_json::from_value(meta_field(meta, key)?.clone())
        .map_err(|e| Error::Parse(format!("checkpoint field `{key}`: {e}")))
}

fn take<T>(map: &mut HashMap<String, ArrayD<T>>, name: &str) -> Result<ArrayD<T>> {
    map.remove(name)
        .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks tensor `{name}`")))
}

fn restore_adam<T: Scalar, P: Params<T>>(
    params: &P,
    cfg: &TrainConfig,
    prefix: &str,
    steps: u64,
    map: &mut HashMap<String, ArrayD<T>>,
) -> Result<Adam<T>> {
    let mut adam = Adam::new(params, cfg.adam());
    for (name, mut slot) in adam.state_tensors_mut() {
        let t = take(map, &format!("{prefix}.{name}"))?;
        if t.shape() != slot.shape() {
            return Err(Error::Incompatible(format!(
                "optimizer tensor `{prefix}.{name}` has the wrong shape"
            )));
        }
        slot.assign(&t);
    }
    adam.set_steps_taken(steps);
    Ok(adam)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = container::read::<T>(path)?;
    let meta = file.meta.clone();
    if meta.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
        return Err(Error::Incompatible(format!(
            "{} is not a training checkpoint",
            path.display()
        )));
    }
    let version: u32 = meta_as(&meta, "checkpoint_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config: TrainConfig = meta_as(&meta, "config")?;
    let step: u64 = meta_as(&meta, "step")?;
    let spec = DirectionSpec::new(meta_as(&meta, "num_directions")?, meta_as(&meta, "latent_dim")?)?;
    let image_shape: ImageShape = meta_as(&meta, "image_shape")?;
    let mode: DeformatorMode = meta_as(&meta, "deformator_mode")?;
    let hidden: usize = meta_as(&meta, "deformator_hidden")?;
    let backbone: Backbone = meta_as(&meta, "backbone")?;
    let counts: Vec<u64> = meta_as(&meta, "bank_counts")?;
    let adam_steps: Option<u64> = meta_as(&meta, "adam_steps")?;

    let mut map = file.into_map();
    let mut deformator = Deformator::zeros(spec, mode, hidden)?;
    let def_tensors: HashMap<String, ArrayD<T>> = deformator
        .tensors()
        .iter()
        .map(|(name, _)| {
            let full = format!("deformator.{name}");
            take(&mut map, &full).map(|t| (name.clone(), t))
        })
        .collect::<Result<_>>()?;
    assign_tensors(&mut deformator, &def_tensors)?;

    // The initializer's values are overwritten, so any stream will do.
    let mut reconstructor = Reconstructor::init(spec, image_shape, backbone, &mut seeded_rng(0, "unused"))?;
    let rec_tensors: HashMap<String, ArrayD<T>> = reconstructor
        .tensors()
        .iter()
        .map(|(name, _)| take(&mut map, name).map(|t| (name.clone(), t)))
        .collect::<Result<_>>()?;
    assign_tensors(&mut reconstructor, &rec_tensors)?;

    let centroids = take(&mut map, BANK_TENSOR)?
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Incompatible(format!("{BANK_TENSOR}: {e}")))?;
    if centroids.dim() != (spec.num_directions, spec.latent_dim) {
        return Err(Error::Incompatible(format!(
            "{BANK_TENSOR} has shape {:?}",
            centroids.dim()
        )));
    }
    let bank = CentroidBank::from_parts(centroids, counts)?;

    let optimizer = match adam_steps {
        Some(steps) => Some((
            restore_adam(&deformator, &config, "adam.deformator", steps, &mut map)?,
            restore_adam(&reconstructor, &config, "adam.reconstructor", steps, &mut map)?,
        )),
        None => None,
    };
    Ok(Checkpoint {
        config,
        step,
        deformator,
        reconstructor,
        bank,
        optimizer,
    })
}

/// Loads a checkpoint and checks it against the direction count of `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &TrainConfig) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    let k = ckpt.spec().num_directions;
    if k != expected.num_directions {
        return Err(Error::Incompatible(format!(
            "checkpoint has num_directions = {k} but the configuration asks for {}",
            expected.num_directions
        )));
    }
    Ok(ckpt)
}
