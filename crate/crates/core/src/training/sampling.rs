use rand::Rng;

use super::TrainConfig;
use crate::latent::{LatentCode, ShiftRequest};
use crate::rng::standard_normal;
use crate::Scalar;

/// A latent code and the two consecutive shifts applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSample<T> {
    pub z: LatentCode<T>,
    pub first: ShiftRequest,
    pub second: ShiftRequest,
}

/// `z ~ N(0, I)`, directions uniform over `[0, K)`, magnitudes uniform over
/// the configured range with the dead zone resampled.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    cfg: &TrainConfig,
    latent_dim: usize,
    rng: &mut R,
) -> Vec<ShiftSample<T>> {
    let k = cfg.num_directions;
    let mags = cfg.magnitudes();
    (0..cfg.batch_size)
        .map(|_| {
            let z = (0..latent_dim).map(|_| standard_normal(rng)).collect();
            let k1 = rng.random_range(0..k);
            let e1 = mags.sample(rng);
            let mut k2 = rng.random_range(0..k);
            while !cfg.allow_equal_directions && k2 == k1 {
                k2 = rng.random_range(0..k);
            }
            let e2 = mags.sample(rng);
            ShiftSample {
                z: LatentCode::from_vec(z).expect("normal draws are finite"),
                first: ShiftRequest::new(k1, e1),
                second: ShiftRequest::new(k2, e2),
            }
        })
        .collect()
}
