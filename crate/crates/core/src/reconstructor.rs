//! The reconstructor: a pair network that looks at an image and its edited
//! version (stacked along channels) and predicts which direction was applied
//! and by how much.

use ndarray::{
    concatenate, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::generators::ImageShape;
use crate::latent::DirectionSpec;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, prefixed, Conv2d, Dense, Fmap, Params,
};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Four stride-2 conv blocks and global average pooling.
    #[default]
    Small,
    /// Residual stem plus four stages of two basic blocks.
    #[serde(alias = "resnet18")]
    Resnet,
}

impl Backbone {
    pub fn min_resolution(self) -> usize {
        match self {
            Backbone::Small => 8,
            Backbone::Resnet => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    proj: Option<Conv2d<T>>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum Unit<T> {
    Plain(Conv2d<T>),
    Residual(ResBlock<T>),
}

/// Unnormalized direction logits `(batch, K)` and magnitudes `(batch,)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction<T> {
    pub logits: Array2<T>,
    pub epsilon_hat: Array1<T>,
}

impl<T: Scalar> PairPrediction<T> {
    pub fn predicted_directions(&self) -> Vec<usize> {
        self.logits.rows().into_iter().map(argmax).collect()
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor<T> {
    spec: DirectionSpec,
    image_shape: ImageShape,
    backbone: Backbone,
    units: Vec<Unit<T>>,
    logits_head: Dense<T>,
    magnitude_head: Dense<T>,
}

#[allow(clippy::large_enum_variant)]
enum UnitCache<T> {
    Plain {
        dims: (usize, usize, usize),
        cols: Array2<T>,
        pre: Fmap<T>,
    },
    Residual {
        dims: (usize, usize, usize),
        cols1: Array2<T>,
        pre1: Fmap<T>,
        mid_dims: (usize, usize, usize),
        cols2: Array2<T>,
        proj_cols: Option<Array2<T>>,
        sum: Fmap<T>,
    },
}

/// Activations kept from `forward_pairs` for `backward`.
pub struct ReconstructorCache<T> {
    units: Vec<UnitCache<T>>,
    pooled: Array2<T>,
    final_dims: (usize, usize, usize),
}

fn relu_map<T: Scalar>(x: &Fmap<T>) -> Fmap<T> {
    x.with_data(leaky_relu(x.data.view()))
}

impl<T: Scalar> Reconstructor<T> {
    pub fn init<R: Rng + ?Sized>(
        spec: DirectionSpec,
        image_shape: ImageShape,
        backbone: Backbone,
        rng: &mut R,
    ) -> Result<Self> {
        let min = backbone.min_resolution();
        if image_shape.height < min || image_shape.width < min {
            return Err(Error::Config(format!(
                "{backbone:?} backbone needs images of at least {min}x{min}, got {}x{}",
                image_shape.height, image_shape.width
            )));
        }
        if image_shape.channels == 0 {
            return Err(Error::Config("images need at least one channel".into()));
        }
        let cin = 2 * image_shape.channels;
        let (units, features) = match backbone {
            Backbone::Small => {
                let widths = [16, 32, 64, 64];
                let mut prev = cin;
                let mut units = Vec::new();
                for &w in &widths {
                    units.push(Unit::Plain(Conv2d::he_uniform(prev, w, 3, 2, 1, rng)));
                    prev = w;
                }
                (units, prev)
            }
            Backbone::Resnet => {
                let mut units = vec![Unit::Plain(Conv2d::he_uniform(cin, 16, 3, 1, 1, rng))];
                let mut prev = 16;
                for (stage, &w) in [16usize, 32, 64, 128].iter().enumerate() {
                    for block in 0..2 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        let proj = (stride != 1 || prev != w).then(|| Conv2d::he_uniform(prev, w, 1, stride, 0, rng));
                        units.push(Unit::Residual(ResBlock {
                            conv1: Conv2d::he_uniform(prev, w, 3, stride, 1, rng),
                            conv2: Conv2d::he_uniform(w, w, 3, 1, 1, rng),
                            proj,
                        }));
                        prev = w;
                    }
                }
                (units, prev)
            }
        };
        Ok(Self {
            spec,
            image_shape,
            backbone,
            units,
            logits_head: Dense::default_init(features, spec.num_directions, true, rng),
            magnitude_head: Dense::default_init(features, 1, true, rng),
        })
    }

    pub fn spec(&self) -> DirectionSpec {
        self.spec
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn input_channels(&self) -> usize {
        2 * self.image_shape.channels
    }

    pub fn logits_width(&self) -> usize {
        self.logits_head.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        let units = self
            .units
            .iter()
            .map(|u| match u {
                Unit::Plain(c) => Unit::Plain(c.zeros_like()),
                Unit::Residual(b) => Unit::Residual(ResBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                    proj: b.proj.as_ref().map(Conv2d::zeros_like),
                }),
            })
            .collect();
        Self {
            spec: self.spec,
            image_shape: self.image_shape,
            backbone: self.backbone,
            units,
            logits_head: self.logits_head.zeros_like(),
            magnitude_head: self.magnitude_head.zeros_like(),
        }
    }

    /// Stacks `before` and `after` along channels into one pair batch.
    pub fn stack_pairs(&self, before: ArrayView4<'_, T>, after: ArrayView4<'_, T>) -> Result<Array4<T>> {
        if before.dim() != after.dim() {
            return Err(Error::Shape(format!(
                "pair images differ in shape: {:?} vs {:?}",
                before.dim(),
                after.dim()
            )));
        }
        Ok(concatenate![Axis(1), before, after])
    }

    pub fn predict(&self, before: ArrayView4<'_, T>, after: ArrayView4<'_, T>) -> Result<PairPrediction<T>> {
        let pairs = self.stack_pairs(before, after)?;
        Ok(self.forward_pairs(pairs.view())?.0)
    }

    pub fn forward_pairs(&self, pairs: ArrayView4<'_, T>) -> Result<(PairPrediction<T>, ReconstructorCache<T>)> {
        let s = self.image_shape;
        let (_, c, h, w) = pairs.dim();
        if (c, h, w) != (self.input_channels(), s.height, s.width) {
            return Err(Error::Shape(format!(
                "reconstructor expects pairs of shape (_, {}, {}, {}), got {:?}",
                self.input_channels(),
                s.height,
                s.width,
                pairs.dim()
            )));
        }
        let mut x = Fmap::from_nchw(pairs);
        let mut caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let dims = (x.batch, x.height, x.width);
            match unit {
                Unit::Plain(conv) => {
                    let (pre, cols) = conv.forward(&x);
                    x = relu_map(&pre);
                    caches.push(UnitCache::Plain { dims, cols, pre });
                }
                Unit::Residual(block) => {
                    let (pre1, cols1) = block.conv1.forward(&x);
                    let mid = relu_map(&pre1);
                    let mid_dims = (mid.batch, mid.height, mid.width);
                    let (pre2, cols2) = block.conv2.forward(&mid);
                    let (skip, proj_cols) = match &block.proj {
                        Some(p) => {
                            let (s, cols) = p.forward(&x);
                            (s.data, Some(cols))
                        }
                        None => (x.data.clone(), None),
                    };
                    let sum = pre2.with_data(&pre2.data + &skip);
                    x = relu_map(&sum);
                    caches.push(UnitCache::Residual {
                        dims,
                        cols1,
                        pre1,
                        mid_dims,
                        cols2,
                        proj_cols,
                        sum,
                    });
                }
            }
        }
        let final_dims = (x.batch, x.height, x.width);
        let pooled = global_avg_pool(&x);
        let logits = self.logits_head.forward(pooled.view());
        let epsilon_hat = self.magnitude_head.forward(pooled.view()).column(0).to_owned();
        Ok((
            PairPrediction { logits, epsilon_hat },
            ReconstructorCache {
                units: caches,
                pooled,
                final_dims,
            },
        ))
    }

    /// Parameter gradients and, if requested, the gradient w.r.t. the
    /// stacked pair input `(batch, 2C, H, W)`.
    pub fn backward(
        &self,
        cache: &ReconstructorCache<T>,
        grad_logits: ArrayView2<'_, T>,
        grad_epsilon: ArrayView1<'_, T>,
        need_input_grad: bool,
    ) -> (Self, Option<Array4<T>>) {
        let mut grads = self.zeros_like();
        let g_eps = grad_epsilon.insert_axis(Axis(1));
        let mut g_pooled = self
            .logits_head
            .backward(cache.pooled.view(), grad_logits, &mut grads.logits_head, true)
            .expect("input gradient requested");
        g_pooled += &self
            .magnitude_head
            .backward(cache.pooled.view(), g_eps, &mut grads.magnitude_head, true)
            .expect("input gradient requested");
        let (b, h, w) = cache.final_dims;
        let mut g = global_avg_pool_backward(g_pooled.view(), b, h, w);
        for (i, (unit, uc)) in self.units.iter().zip(&cache.units).enumerate().rev() {
            let need = need_input_grad || i > 0;
            let next = match (unit, uc, &mut grads.units[i]) {
                (Unit::Plain(conv), UnitCache::Plain { dims, cols, pre }, Unit::Plain(gconv)) => {
                    let g_pre = pre.with_data(leaky_relu_backward(pre.data.view(), g.data.view()));
                    conv.backward(*dims, cols, &g_pre, gconv, need)
                }
                (
                    Unit::Residual(block),
                    UnitCache::Residual {
                        dims,
                        cols1,
                        pre1,
                        mid_dims,
                        cols2,
                        proj_cols,
                        sum,
                    },
                    Unit::Residual(gblock),
                ) => {
                    let g_sum = sum.with_data(leaky_relu_backward(sum.data.view(), g.data.view()));
                    let g_mid = block
                        .conv2
                        .backward(*mid_dims, cols2, &g_sum, &mut gblock.conv2, true)
                        .expect("input gradient requested");
                    let g_pre1 = pre1.with_data(leaky_relu_backward(pre1.data.view(), g_mid.data.view()));
                    let g_main = block.conv1.backward(*dims, cols1, &g_pre1, &mut gblock.conv1, need);
                    let g_skip = match (&block.proj, proj_cols, gblock.proj.as_mut()) {
                        (Some(p), Some(pc), Some(gp)) => p.backward(*dims, pc, &g_sum, gp, need),
                        _ => need.then(|| g_sum.clone()),
                    };
                    match (g_main, g_skip) {
                        (Some(a), Some(s)) => Some(a.with_data(&a.data + &s.data)),
                        _ => None,
                    }
                }
                _ => unreachable!("cache layout follows unit layout"),
            };
            match next {
                Some(n) => g = n,
                None => break,
            }
        }
        let input_grad = need_input_grad.then(|| g.to_nchw());
        (grads, input_grad)
    }
}

impl<T: Scalar> Params<T> for Reconstructor<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, unit) in self.units.iter().enumerate() {
            match unit {
                Unit::Plain(c) => out.extend(prefixed(&format!("reconstructor.unit.{i}"), c.tensors())),
                Unit::Residual(b) => {
                    out.extend(prefixed(&format!("reconstructor.unit.{i}.conv1"), b.conv1.tensors()));
                    out.extend(prefixed(&format!("reconstructor.unit.{i}.conv2"), b.conv2.tensors()));
                    if let Some(p) = &b.proj {
                        out.extend(prefixed(&format!("reconstructor.unit.{i}.proj"), p.tensors()));
                    }
                }
            }
        }
        out.extend(prefixed("reconstructor.logits", self.logits_head.tensors()));
        out.extend(prefixed("reconstructor.magnitude", self.magnitude_head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, unit) in self.units.iter_mut().enumerate() {
            match unit {
                Unit::Plain(c) => out.extend(prefixed(&format!("reconstructor.unit.{i}"), c.tensors_mut())),
                Unit::Residual(b) => {
                    out.extend(prefixed(
                        &format!("reconstructor.unit.{i}.conv1"),
                        b.conv1.tensors_mut(),
                    ));
                    out.extend(prefixed(
                        &format!("reconstructor.unit.{i}.conv2"),
                        b.conv2.tensors_mut(),
                    ));
                    if let Some(p) = &mut b.proj {
                        out.extend(prefixed(&format!("reconstructor.unit.{i}.proj"), p.tensors_mut()));
                    }
                }
            }
        }
        out.extend(prefixed("reconstructor.logits", self.logits_head.tensors_mut()));
        out.extend(prefixed("reconstructor.magnitude", self.magnitude_head.tensors_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn shape(c: usize, n: usize) -> ImageShape {
        ImageShape {
            channels: c,
            height: n,
            width: n,
        }
    }

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn head_and_input_widths() {
        let r = Reconstructor::<f32>::init(
            DirectionSpec::new(8, 8).unwrap(),
            shape(1, 32),
            Backbone::Small,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(r.logits_width(), 8);
        assert_eq!(r.input_channels(), 2);
        let r = Reconstructor::<f32>::init(
            DirectionSpec::new(128, 8).unwrap(),
            shape(3, 32),
            Backbone::Small,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(r.input_channels(), 6);
        assert_eq!(r.logits_width(), 128);
    }

    #[test]
    fn deterministic_init_and_resolution_errors() {
        let spec = DirectionSpec::new(4, 4).unwrap();
        let a = Reconstructor::<f64>::init(spec, shape(1, 16), Backbone::Resnet, &mut rng(3)).unwrap();
        let b = Reconstructor::<f64>::init(spec, shape(1, 16), Backbone::Resnet, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            Reconstructor::<f64>::init(spec, shape(1, 8), Backbone::Resnet, &mut rng(3)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Reconstructor::<f64>::init(spec, shape(1, 4), Backbone::Small, &mut rng(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shapes_and_totality() {
        let spec = DirectionSpec::new(5, 4).unwrap();
        for backbone in [Backbone::Small, Backbone::Resnet] {
            let r = Reconstructor::<f64>::init(spec, shape(2, 16), backbone, &mut rng(1)).unwrap();
            let mut g = rng(2);
            let img = Array4::from_shape_simple_fn((3, 2, 16, 16), || g.random_range(-1.0..1.0));
            let p = r.predict(img.view(), img.view()).unwrap();
            assert_eq!(p.logits.dim(), (3, 5));
            assert_eq!(p.epsilon_hat.len(), 3);
            assert!(p.logits.iter().chain(p.epsilon_hat.iter()).all(|v| v.is_finite()));
            let other = Array4::zeros((3, 2, 16, 8));
            assert!(matches!(r.predict(img.view(), other.view()), Err(Error::Shape(_))));
        }
    }

    /// Gradient of (mean logit + mean magnitude) w.r.t. input pixels and a
    /// few parameters, against central differences.
    #[test]
    fn gradients_match_central_differences() {
        let spec = DirectionSpec::new(3, 4).unwrap();
        for backbone in [Backbone::Small, Backbone::Resnet] {
            let r = Reconstructor::<f64>::init(spec, shape(1, 16), backbone, &mut rng(5)).unwrap();
            let mut g = rng(6);
            let pairs = Array4::from_shape_simple_fn((2, 2, 16, 16), || g.random_range(-1.0..1.0));
            let objective = |r: &Reconstructor<f64>, x: &Array4<f64>| {
                let (p, _) = r.forward_pairs(x.view()).unwrap();
                p.logits.mean().unwrap() + p.epsilon_hat.mean().unwrap()
            };
            let (p, cache) = r.forward_pairs(pairs.view()).unwrap();
            let gl = Array2::from_elem(p.logits.dim(), 1.0 / p.logits.len() as f64);
            let ge = Array1::from_elem(2, 0.5);
            let (grads, gin) = r.backward(&cache, gl.view(), ge.view(), true);
            let gin = gin.unwrap();
            let h = 1e-6;
            for idx in [[0, 0, 3, 4], [1, 1, 15, 15], [0, 1, 8, 0], [1, 0, 7, 9]] {
                let mut xp = pairs.clone();
                xp[idx] += h;
                let mut xm = pairs.clone();
                xm[idx] -= h;
                let fd = (objective(&r, &xp) - objective(&r, &xm)) / (2.0 * h);
                let a = gin[idx];
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-4),
                    "{backbone:?} pixel {idx:?}: {a} vs {fd}"
                );
            }
            let names: Vec<String> = r.tensors().into_iter().map(|(n, _)| n).collect();
            let grad_map: std::collections::HashMap<String, ndarray::ArrayD<f64>> =
                crate::nn::collect_tensors(&grads).into_iter().collect();
            for name in [&names[0], &names[names.len() / 2], &names[names.len() - 4]] {
                let mut rp = r.clone();
                let mut rm = r.clone();
                for (n, mut t) in rp.tensors_mut() {
                    if &n == name {
                        *t.iter_mut().next().unwrap() += h;
                    }
                }
                for (n, mut t) in rm.tensors_mut() {
                    if &n == name {
                        *t.iter_mut().next().unwrap() -= h;
                    }
                }
                let fd = (objective(&rp, &pairs) - objective(&rm, &pairs)) / (2.0 * h);
                let gt = &grad_map[name];
                let a = *gt.iter().next().unwrap();
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-4),
                    "{backbone:?} {name}: {a} vs {fd}"
                );
            }
        }
    }
}
