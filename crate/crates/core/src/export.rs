//! A JSON description of the discovered directions.

use serde::{Deserialize, Serialize};

use crate::deformator::{Deformator, DeformatorMode};
use crate::latent::{norm, CentroidBank};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionEntry {
    pub index: usize,
    /// `A(e_k)`.
    pub vector: Vec<f64>,
    pub norm: f64,
    /// Running mean of the training shifts, if the direction was ever sampled.
    pub centroid: Option<Vec<f64>>,
    pub centroid_count: u64,
    pub centroid_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionExport {
    pub num_directions: usize,
    pub latent_dim: usize,
    pub mode: DeformatorMode,
    pub directions: Vec<DirectionEntry>,
    /// The deformator's layers in application order; a single bias-free
    /// `d × K` matrix in linear mode.
    pub layers: Vec<LayerExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExport {
    /// `outputs × inputs`.
    pub weight: Vec<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn export_directions<T: Scalar>(deformator: &Deformator<T>, bank: &CentroidBank<T>) -> DirectionExport {
    let spec = deformator.spec();
    let vectors = deformator.direction_vectors();
    let directions = vectors
        .outer_iter()
        .enumerate()
        .map(|(k, v)| {
            let centroid = bank.centroid(k);
            DirectionEntry {
                index: k,
                vector: v.iter().map(|x| x.as_f64()).collect(),
                norm: norm(v).as_f64(),
                centroid: centroid.map(|c| c.iter().map(|x| x.as_f64()).collect()),
                centroid_count: bank.count(k),
                centroid_norm: centroid.map_or(0.0, |c| norm(c).as_f64()),
            }
        })
        .collect();
    DirectionExport {
        num_directions: spec.num_directions,
        latent_dim: spec.latent_dim,
        mode: deformator.mode(),
        directions,
        layers: deformator
            .layers()
            .iter()
            .map(|l| LayerExport {
                weight: l
                    .weight
                    .outer_iter()
                    .map(|row| row.iter().map(|x| x.as_f64()).collect())
                    .collect(),
                bias: l.bias.as_ref().map(|b| b.iter().map(|x| x.as_f64()).collect()),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::DirectionSpec;
    use ndarray::array;

    #[test]
    fn linear_export_lists_columns() {
        let def = Deformator::from_linear_matrix(array![[3.0f64, 0.0], [4.0, 1.0]]).unwrap();
        let mut bank = CentroidBank::new(DirectionSpec::new(2, 2).unwrap());
        bank.update(1, array![0.0, 2.0].view()).unwrap();
        let out = export_directions(&def, &bank);
        assert_eq!(out.directions[0].vector, vec![3.0, 4.0]);
        assert_eq!(out.directions[0].norm, 5.0);
        assert_eq!(out.directions[0].centroid, None);
        assert_eq!(out.directions[1].centroid_norm, 2.0);
        assert_eq!(out.directions[1].centroid_count, 1);
        assert_eq!(out.layers[0].weight, vec![vec![3.0, 0.0], vec![4.0, 1.0]]);
        assert_eq!(out.layers[0].bias, None);
        let json = serde_json::to_string(&out).unwrap();
        assert_eq!(serde_json::from_str::<DirectionExport>(&json).unwrap(), out);
    }
}
