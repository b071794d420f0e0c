//! Small style-modulated convolutional generator (DCGAN-sized).
//!
//! A two-layer mapping network turns `z` (plus an optional class one-hot)
//! into a style vector `w`. Synthesis starts from a 4×4 map produced from
//! the first style, then each upsampling block convolves and scales its
//! channels by `1 + affine(style)`. With per-layer style injection the same
//! shift is added to the style of every layer.

use std::path::Path;

use ndarray::{concatenate, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;

use super::{Generator, GeneratorSpec, ImageShape, InjectionSite};
use crate::container;
use crate::nn::{
    assign_tensors, leaky_relu, leaky_relu_backward, prefixed, tanh_backward, upsample2, upsample2_backward, Conv2d,
    Dense, Fmap, Params,
};
use crate::{Error, Result, Scalar};

const BASE_CHANNELS: usize = 64;
const MIN_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
struct StyleBlock<T> {
    conv: Conv2d<T>,
    style: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleConvGenerator<T> {
    latent_dim: usize,
    style_dim: usize,
    num_classes: usize,
    class: Option<usize>,
    injection: InjectionSite,
    shape: ImageShape,
    map_hidden: Dense<T>,
    map_out: Dense<T>,
    input: Dense<T>,
    blocks: Vec<StyleBlock<T>>,
    to_image: Conv2d<T>,
}

struct BlockCache<T> {
    input_dims: (usize, usize, usize),
    cols: Array2<T>,
    conv_out: Fmap<T>,
    modulation: Array2<T>,
    pre_act: Fmap<T>,
}

struct Cache<T> {
    map_in: Array2<T>,
    map_pre: Array2<T>,
    map_act: Array2<T>,
    styles: Vec<Array2<T>>,
    input_pre: Fmap<T>,
    blocks: Vec<BlockCache<T>>,
    last_dims: (usize, usize, usize),
    image_cols: Array2<T>,
    out: Fmap<T>,
}

/// Multiplies every position of sample `b` by `m[b, ·]`.
fn modulate<T: Scalar>(x: &Fmap<T>, m: &Array2<T>) -> Fmap<T> {
    let hw = x.height * x.width;
    let mut out = x.data.clone();
    for (b, mrow) in m.rows().into_iter().enumerate() {
        for mut row in out.slice_mut(ndarray::s![b * hw..(b + 1) * hw, ..]).rows_mut() {
            row *= &mrow;
        }
    }
    x.with_data(out)
}

/// Per-sample channel sums of `a ⊙ b`.
fn channel_dot<T: Scalar>(a: &Fmap<T>, b: &Fmap<T>) -> Array2<T> {
    let hw = a.height * a.width;
    let prod = &a.data * &b.data;
    let view = prod
        .view()
        .into_shape_with_order((a.batch, hw, a.channels()))
        .expect("standard layout");
    view.sum_axis(Axis(1))
}

impl<T: Scalar> StyleConvGenerator<T> {
    /// Random weights from `spec.seed`, or the weight file in `spec.weights`.
    pub fn from_spec(spec: &GeneratorSpec, latent_dim: usize) -> Result<Self> {
        let mut gen = Self::random(spec, latent_dim)?;
        if let Some(path) = &spec.weights {
            gen.load_weights(path)?;
        }
        Ok(gen)
    }

    pub fn random(spec: &GeneratorSpec, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("conv generator needs latent_dim >= 1".into()));
        }
        let res = spec.resolution;
        if res < 8 || !res.is_power_of_two() {
            return Err(Error::Config(format!(
                "conv generator resolution must be a power of two >= 8, got {res}"
            )));
        }
        if spec.channels == 0 {
            return Err(Error::Config("conv generator needs at least one channel".into()));
        }
        match (spec.num_classes, spec.fixed_class) {
            (0, Some(c)) => {
                return Err(Error::Config(format!(
                    "fixed_class {c} given for an unconditional generator"
                )))
            }
            (n, None) if n > 0 => {
                return Err(Error::Config(
                    "conditional generator needs a fixed_class to be captured at construction".into(),
                ))
            }
            (n, Some(c)) if c >= n => return Err(Error::IndexOutOfRange { index: c, count: n }),
            _ => {}
        }
        let style_dim = if spec.style_dim == 0 {
            latent_dim
        } else {
            spec.style_dim
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(spec.seed, "conv-generator"));
        let map_in = latent_dim + spec.num_classes;
        let map_hidden = Dense::default_init(map_in, style_dim, true, &mut rng);
        let map_out = Dense::default_init(style_dim, style_dim, true, &mut rng);
        let input = Dense::default_init(style_dim, 16 * BASE_CHANNELS, true, &mut rng);
        let num_blocks = res.trailing_zeros() as usize - 2;
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut ch = BASE_CHANNELS;
        for _ in 0..num_blocks {
            let next = (ch / 2).max(MIN_CHANNELS);
            let conv = Conv2d::he_uniform(ch, next, 3, 1, 1, &mut rng);
            let mut style = Dense::default_init(style_dim, next, true, &mut rng);
            style.weight.mapv_inplace(|w| w * T::lit(0.1));
            if let Some(b) = style.bias.as_mut() {
                b.fill(T::zero());
            }
            blocks.push(StyleBlock { conv, style });
            ch = next;
        }
        let to_image = Conv2d::he_uniform(ch, spec.channels, 1, 1, 0, &mut rng);
        Ok(Self {
            latent_dim,
            style_dim,
            num_classes: spec.num_classes,
            class: spec.fixed_class,
            injection: spec.injection,
            shape: ImageShape {
                channels: spec.channels,
                height: res,
                width: res,
            },
            map_hidden,
            map_out,
            input,
            blocks,
            to_image,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn fixed_class(&self) -> Option<usize> {
        self.class
    }

    /// Number of style layers the injected shift is added to.
    pub fn num_style_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "conv-generator",
            "latent_dim": self.latent_dim,
            "style_dim": self.style_dim,
            "num_classes": self.num_classes,
            "resolution": self.shape.height,
            "channels": self.shape.channels,
        })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        container::write(path, &self.meta(), &self.tensors())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let file = container::read::<T>(path)?;
        let want = self.meta();
        for key in [
            "kind",
            "latent_dim",
            "style_dim",
            "num_classes",
            "resolution",
            "channels",
        ] {
            if file.meta.get(key) != want.get(key) {
                return Err(Error::Incompatible(format!(
                    "weight file has {key} = {}, generator expects {}",
                    file.meta.get(key).unwrap_or(&serde_json::Value::Null),
                    want[key]
                )));
            }
        }
        assign_tensors(self, &file.into_map())
    }

    fn forward_cached(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>) -> Result<(Array4<T>, Cache<T>)> {
        let batch = z.nrows();
        let mut map_in = match self.injection {
            InjectionSite::InputLatent => &z + &shift,
            InjectionSite::PerLayerStyle => z.to_owned(),
        };
        if self.num_classes > 0 {
            let class = self
                .class
                .ok_or_else(|| Error::Capability("conditional generator has no fixed class".into()))?;
            let mut onehot = Array2::zeros((batch, self.num_classes));
            onehot.column_mut(class).fill(T::one());
            map_in = concatenate![Axis(1), map_in, onehot];
        }
        let map_pre = self.map_hidden.forward(map_in.view());
        let map_act = leaky_relu(map_pre.view());
        let w = self.map_out.forward(map_act.view());
        let style = match self.injection {
            InjectionSite::InputLatent => w,
            InjectionSite::PerLayerStyle => &w + &shift,
        };
        let styles = vec![style; self.num_style_layers()];

        let pre = self.input.forward(styles[0].view());
        let input_pre = Fmap::new(
            pre.into_shape_with_order((batch * 16, BASE_CHANNELS))
                .expect("contiguous"),
            batch,
            4,
            4,
        );
        let mut act = input_pre.with_data(leaky_relu(input_pre.data.view()));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, style) in self.blocks.iter().zip(&styles[1..]) {
            let up = upsample2(&act);
            let input_dims = (up.batch, up.height, up.width);
            let (conv_out, cols) = block.conv.forward(&up);
            let modulation = block.style.forward(style.view()).mapv(|v| v + T::one());
            let pre_act = modulate(&conv_out, &modulation);
            act = pre_act.with_data(leaky_relu(pre_act.data.view()));
            blocks.push(BlockCache {
                input_dims,
                cols,
                conv_out,
                modulation,
                pre_act,
            });
        }
        let last_dims = (act.batch, act.height, act.width);
        let (logits, image_cols) = self.to_image.forward(&act);
        let out = logits.with_data(logits.data.mapv(|v| v.tanh()));
        let images = out.to_nchw();
        Ok((
            images,
            Cache {
                map_in,
                map_pre,
                map_act,
                styles,
                input_pre,
                blocks,
                last_dims,
                image_cols,
                out,
            },
        ))
    }

    /// Returns parameter gradients, the gradient of the mapping input and
    /// the summed gradient over all layer styles.
    fn backward(&self, cache: &Cache<T>, grad: ArrayView4<'_, T>) -> (Self, Array2<T>, Array2<T>) {
        let mut grads = self.zeros_like();
        let g = Fmap::from_nchw(grad);
        let g = g.with_data(tanh_backward(cache.out.data.view(), g.data.view()));
        let mut g_act = self
            .to_image
            .backward(cache.last_dims, &cache.image_cols, &g, &mut grads.to_image, true)
            .expect("input gradient requested");
        let mut g_style = Array2::zeros((cache.map_in.nrows(), self.style_dim));
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let g_pre = bc
                .pre_act
                .with_data(leaky_relu_backward(bc.pre_act.data.view(), g_act.data.view()));
            let g_mod = channel_dot(&g_pre, &bc.conv_out);
            let g_conv = modulate(&g_pre, &bc.modulation);
            let gs = block
                .style
                .backward(
                    cache.styles[i + 1].view(),
                    g_mod.view(),
                    &mut grads.blocks[i].style,
                    true,
                )
                .expect("input gradient requested");
            g_style += &gs;
            let g_up = block
                .conv
                .backward(bc.input_dims, &bc.cols, &g_conv, &mut grads.blocks[i].conv, true)
                .expect("input gradient requested");
            g_act = upsample2_backward(&g_up);
        }
        let batch = cache.map_in.nrows();
        let g_in = leaky_relu_backward(cache.input_pre.data.view(), g_act.data.view())
            .into_shape_with_order((batch, 16 * BASE_CHANNELS))
            .expect("contiguous");
        let gs0 = self
            .input
            .backward(cache.styles[0].view(), g_in.view(), &mut grads.input, true)
            .expect("input gradient requested");
        g_style += &gs0;
        let g_act_map = self
            .map_out
            .backward(cache.map_act.view(), g_style.view(), &mut grads.map_out, true)
            .expect("input gradient requested");
        let g_map_pre = leaky_relu_backward(cache.map_pre.view(), g_act_map.view());
        let g_map_in = self
            .map_hidden
            .backward(cache.map_in.view(), g_map_pre.view(), &mut grads.map_hidden, true)
            .expect("input gradient requested");
        (grads, g_map_in, g_style)
    }

    /// Parameter gradients of `⟨grad, render(z, shift)⟩`.
    pub fn parameter_gradients(
        &self,
        z: ArrayView2<'_, T>,
        shift: ArrayView2<'_, T>,
        grad: ArrayView4<'_, T>,
    ) -> Result<Self> {
        let (_, cache) = self.forward_cached(z, shift)?;
        Ok(self.backward(&cache, grad).0)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map_hidden: self.map_hidden.zeros_like(),
            map_out: self.map_out.zeros_like(),
            input: self.input.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| StyleBlock {
                    conv: b.conv.zeros_like(),
                    style: b.style.zeros_like(),
                })
                .collect(),
            to_image: self.to_image.zeros_like(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            latent_dim: self.latent_dim,
            style_dim: self.style_dim,
            num_classes: self.num_classes,
            class: self.class,
            injection: self.injection,
            shape: self.shape,
            map_hidden: Dense::zeros(0, 0, false),
            map_out: Dense::zeros(0, 0, false),
            input: Dense::zeros(0, 0, false),
            blocks: Vec::new(),
            to_image: Conv2d::zeros(0, 0, 1, 1, 0),
        }
    }
}

impl<T: Scalar> Params<T> for StyleConvGenerator<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = prefixed("map.0", self.map_hidden.tensors());
        out.extend(prefixed("map.1", self.map_out.tensors()));
        out.extend(prefixed("input", self.input.tensors()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block.{i}.conv"), b.conv.tensors()));
            out.extend(prefixed(&format!("block.{i}.style"), b.style.tensors()));
        }
        out.extend(prefixed("to_image", self.to_image.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = prefixed("map.0", self.map_hidden.tensors_mut());
        out.extend(prefixed("map.1", self.map_out.tensors_mut()));
        out.extend(prefixed("input", self.input.tensors_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("block.{i}.conv"), b.conv.tensors_mut()));
            out.extend(prefixed(&format!("block.{i}.style"), b.style.tensors_mut()));
        }
        out.extend(prefixed("to_image", self.to_image.tensors_mut()));
        out
    }
}

impl<T: Scalar> Generator<T> for StyleConvGenerator<T> {
    fn name(&self) -> &str {
        "conv"
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn shift_dim(&self) -> usize {
        match self.injection {
            InjectionSite::InputLatent => self.latent_dim,
            InjectionSite::PerLayerStyle => self.style_dim,
        }
    }

    fn output_shape(&self) -> ImageShape {
        self.shape
    }

    fn injection_site(&self) -> InjectionSite {
        self.injection
    }

    fn render(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>) -> Result<Array4<T>> {
        Ok(self.forward_cached(z, shift)?.0)
    }

    fn shift_vjp(&self, z: ArrayView2<'_, T>, shift: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let (_, cache) = self.forward_cached(z, shift)?;
        let (_, g_map_in, g_style) = self.backward(&cache, grad);
        Ok(match self.injection {
            InjectionSite::InputLatent => g_map_in.slice(ndarray::s![.., ..self.latent_dim]).to_owned(),
            InjectionSite::PerLayerStyle => g_style,
        })
    }

    fn latent_vjp(&self, z: ArrayView2<'_, T>, grad: ArrayView4<'_, T>) -> Result<Array2<T>> {
        let zero = Array2::zeros((z.nrows(), self.shift_dim()));
        let (_, cache) = self.forward_cached(z, zero.view())?;
        let (_, g_map_in, _) = self.backward(&cache, grad);
        Ok(g_map_in.slice(ndarray::s![.., ..self.latent_dim]).to_owned())
    }

    fn weights(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.tensors()
    }
}
