//! The deformator: a learnable map from `ε·e_k` to a latent shift.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::latent::{encode_shift, DirectionSpec, EncodedShift, MagnitudeRange, ShiftRequest};
use crate::nn::{elu, elu_backward, prefixed, Dense, Params};
use crate::{Error, Result, Scalar};

pub const DEFAULT_HIDDEN_WIDTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformatorMode {
    /// `K → hidden → hidden → d` with ELU between layers.
    Nonlinear,
    /// A single bias-free `d × K` matrix.
    Linear,
}

impl std::fmt::Display for DeformatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeformatorMode::Nonlinear => "nonlinear",
            DeformatorMode::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deformator<T> {
    spec: DirectionSpec,
    mode: DeformatorMode,
    layers: Vec<Dense<T>>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct DeformatorCache<T> {
    /// Whether a zero row was appended to anchor the output at the origin.
    anchored: bool,
    inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
}

impl<T: Scalar> Deformator<T> {
    /// Random initialization. Layers use the usual fan-in uniform bounds
    /// with zero biases; the output layer is rescaled so
    /// that shifts for magnitudes drawn from `magnitudes` have mean norm 1.
    pub fn init<R: Rng + ?Sized>(
        spec: DirectionSpec,
        mode: DeformatorMode,
        hidden_width: usize,
        magnitudes: MagnitudeRange,
        rng: &mut R,
    ) -> Result<Self> {
        let mut def = Self::zeros(spec, mode, hidden_width)?;
        let (k, d) = (spec.num_directions, spec.latent_dim);
        match mode {
            DeformatorMode::Linear => {
                def.layers[0] = Dense::uniform(k, d, 1.0, false, rng);
            }
            DeformatorMode::Nonlinear => {
                let mut first = Dense::default_init(k, hidden_width, true, rng);
                let mut second = Dense::default_init(hidden_width, hidden_width, true, rng);
                let mut last = Dense::uniform(hidden_width, d, 1.0, true, rng);
                for layer in [&mut first, &mut second, &mut last] {
                    if let Some(b) = layer.bias.as_mut() {
                        b.fill(T::zero());
                    }
                }
                def.layers = vec![first, second, last];
            }
        }
        let probe = magnitudes.probe_grid(16);
        let reqs: Vec<ShiftRequest> = (0..k)
            .flat_map(|dir| probe.iter().map(move |&e| ShiftRequest::new(dir, e)))
            .collect();
        let x = crate::latent::encode_batch::<T>(&reqs, k)?;
        let shifts = def.forward(x.view())?;
        let mean_norm = shifts
            .rows()
            .into_iter()
            .map(|r| crate::latent::norm(r).as_f64())
            .sum::<f64>()
            / reqs.len() as f64;
        if mean_norm > 0.0 && mean_norm.is_finite() {
            let last = def.layers.last_mut().expect("at least one layer");
            last.weight.mapv_inplace(|w| w / T::lit(mean_norm));
        }
        Ok(def)
    }

    /// All-zero parameters: every shift is the zero vector.
    pub fn zeros(spec: DirectionSpec, mode: DeformatorMode, hidden_width: usize) -> Result<Self> {
        let (k, d) = (spec.num_directions, spec.latent_dim);
        let layers = match mode {
            DeformatorMode::Linear => vec![Dense::zeros(k, d, false)],
            DeformatorMode::Nonlinear => {
                if hidden_width == 0 {
                    return Err(Error::Config("deformator hidden width must be positive".into()));
                }
                vec![
                    Dense::zeros(k, hidden_width, true),
                    Dense::zeros(hidden_width, hidden_width, true),
                    Dense::zeros(hidden_width, d, true),
                ]
            }
        };
        Ok(Self { spec, mode, layers })
    }

    /// Linear deformator whose `k`-th column is the shift for `e_k`.
    pub fn from_linear_matrix(matrix: Array2<T>) -> Result<Self> {
        let spec = DirectionSpec::new(matrix.ncols(), matrix.nrows())?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("deformator matrix has non-finite entries".into()));
        }
        Ok(Self {
            spec,
            mode: DeformatorMode::Linear,
            layers: vec![Dense {
                weight: matrix,
                bias: None,
            }],
        })
    }

    pub fn spec(&self) -> DirectionSpec {
        self.spec
    }

    pub fn mode(&self) -> DeformatorMode {
        self.mode
    }

    pub fn hidden_width(&self) -> usize {
        match self.mode {
            DeformatorMode::Linear => 0,
            DeformatorMode::Nonlinear => self.layers[0].outputs(),
        }
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    /// The `d × K` matrix in linear mode.
    pub fn linear_matrix(&self) -> Option<ArrayView2<'_, T>> {
        (self.mode == DeformatorMode::Linear).then(|| self.layers[0].weight.view())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec,
            mode: self.mode,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.spec.num_directions {
            return Err(Error::Shape(format!(
                "deformator expects inputs of width {}, got {}",
                self.spec.num_directions,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Maps each row of `x` (an encoded shift) to a latent shift.
    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// The nonlinear map is evaluated as `net(x) − net(0)`, so that a zero
    /// magnitude always means a zero shift even once the biases are trained.
    pub fn forward_cached(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, DeformatorCache<T>)> {
        self.check_input(&x)?;
        let anchored = self.mode == DeformatorMode::Nonlinear;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = if anchored {
            concatenate![Axis(0), x, Array2::zeros((1, x.ncols()))]
        } else {
            x.to_owned()
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(h.view());
            inputs.push(h);
            if i == last {
                h = pre;
            } else {
                h = elu(pre.view());
                pre_activations.push(pre);
            }
        }
        if anchored {
            let b = x.nrows();
            let origin = h.row(b).to_owned();
            h = h.slice_move(s![..b, ..]);
            h -= &origin;
        }
        Ok((
            h,
            DeformatorCache {
                anchored,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Parameter gradients for the upstream gradient `grad_out` of the shifts.
    pub fn backward(&self, cache: &DeformatorCache<T>, grad_out: ArrayView2<'_, T>) -> Self {
        let mut grads = self.zeros_like();
        let mut g = if cache.anchored {
            let origin = grad_out.sum_axis(Axis(0)).mapv(|v| -v).insert_axis(Axis(0));
            concatenate![Axis(0), grad_out, origin]
        } else {
            grad_out.to_owned()
        };
        for i in (0..self.layers.len()).rev() {
            let need_input = i > 0;
            let gin = self.layers[i].backward(cache.inputs[i].view(), g.view(), &mut grads.layers[i], need_input);
            if let Some(gin) = gin {
                g = elu_backward(cache.pre_activations[i - 1].view(), gin.view());
            }
        }
        grads
    }

    pub fn shift(&self, enc: &EncodedShift<T>) -> Result<Array1<T>> {
        let x = enc.view().insert_axis(ndarray::Axis(0));
        let out = self.forward(x)?;
        Ok(out.row(0).to_owned())
    }

    pub fn shift_for(&self, req: &ShiftRequest) -> Result<Array1<T>> {
        self.shift(&encode_shift(req, self.spec.num_directions)?)
    }

    /// Shifts for a list of requests, one row each.
    pub fn shifts_for(&self, reqs: &[ShiftRequest]) -> Result<Array2<T>> {
        let x = crate::latent::encode_batch::<T>(reqs, self.spec.num_directions)?;
        self.forward(x.view())
    }

    /// Sum of the shifts of an edit stack, applied in order. An empty stack
    /// is the zero shift.
    pub fn stacked_shift(&self, reqs: &[ShiftRequest]) -> Result<Array1<T>> {
        if reqs.is_empty() {
            return Ok(Array1::zeros(self.spec.latent_dim));
        }
        Ok(self.shifts_for(reqs)?.sum_axis(Axis(0)))
    }

    /// One representative vector per direction: the unit-magnitude shift
    /// `A(e_k)`, row `k`. Exactly the `k`-th column in linear mode.
    pub fn direction_vectors(&self) -> Array2<T> {
        let reqs: Vec<ShiftRequest> = (0..self.spec.num_directions)
            .map(|i| ShiftRequest::new(i, 1.0))
            .collect();
        self.shifts_for(&reqs).expect("valid direction indices")
    }
}

impl<T: Scalar> Params<T> for Deformator<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("deformator.{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("deformator.{i}"), l.tensors_mut()))
            .collect()
    }
}
