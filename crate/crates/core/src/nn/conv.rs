use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::Params;
use crate::Scalar;

/// A batch of channels-last feature maps stored as `(batch·height·width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap<T> {
    pub data: Array2<T>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> Fmap<T> {
    pub fn new(data: Array2<T>, batch: usize, height: usize, width: usize) -> Self {
        debug_assert_eq!(data.nrows(), batch * height * width);
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Self {
            data,
            batch,
            height,
            width,
        }
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self::new(Array2::zeros((batch * height * width, channels)), batch, height, width)
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn from_nchw(x: ArrayView4<'_, T>) -> Self {
        let (b, c, h, w) = x.dim();
        let data = x
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * h * w, c))
            .expect("contiguous permuted copy");
        Self::new(data, b, h, w)
    }

    pub fn to_nchw(&self) -> Array4<T> {
        let c = self.channels();
        self.data
            .view()
            .into_shape_with_order((self.batch, self.height, self.width, c))
            .expect("standard layout")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
    }

    pub fn with_data(&self, data: Array2<T>) -> Self {
        Self::new(data, self.batch, self.height, self.width)
    }

    /// Flattens each sample to one row, `(batch, height·width·channels)`.
    pub fn flatten(&self) -> Array2<T> {
        let per = self.height * self.width * self.channels();
        self.data
            .clone()
            .into_shape_with_order((self.batch, per))
            .expect("standard layout")
    }
}

/// 2-D convolution with square kernels, zero padding and a per-channel bias.
/// Weights are stored as `(out_channels, kernel·kernel·in_channels)` in
/// `(ky, kx, c)` order to match the im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array2::zeros((out_channels, kernel * kernel * in_channels)),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// He-uniform weights for a leaky-ReLU successor; zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (kernel * kernel * in_channels) as f64;
        let gain2 = 2.0 / (1.0 + super::LEAKY_SLOPE * super::LEAKY_SLOPE);
        let bound = (3.0 * gain2 / fan_in).sqrt();
        conv.weight.mapv_inplace(|_| T::lit(rng.random_range(-bound..=bound)));
        conv
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.in_channels,
            self.out_channels(),
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(height), span(width))
    }

    fn im2col(&self, x: &Fmap<T>) -> Array2<T> {
        let (oh, ow) = self.output_size(x.height, x.width);
        let c = x.channels();
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = vec![T::zero(); x.batch * oh * ow * row_len];
        let src = x.data.as_slice().expect("standard layout");
        let (h, w) = (x.height as isize, x.width as isize);
        let mut row = 0;
        for b in 0..x.batch {
            let base = b * x.height * x.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut cols[row * row_len..(row + 1) * row_len];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let s = (base + iy as usize * x.width + ix as usize) * c;
                            let d = (ky * k + kx) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                    row += 1;
                }
            }
        }
        Array2::from_shape_vec((x.batch * oh * ow, row_len), cols).expect("im2col shape")
    }

    fn col2im(&self, cols: ArrayView2<'_, T>, batch: usize, height: usize, width: usize) -> Fmap<T> {
        let (oh, ow) = self.output_size(height, width);
        let c = self.in_channels;
        let k = self.kernel;
        let row_len = k * k * c;
        let mut out = vec![T::zero(); batch * height * width * c];
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let (h, w) = (height as isize, width as isize);
        let mut row = 0;
        for b in 0..batch {
            let base = b * height * width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let s_row = &src[row * row_len..(row + 1) * row_len];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let d = (base + iy as usize * width + ix as usize) * c;
                            let s = (ky * k + kx) * c;
                            for (o, &g) in out[d..d + c].iter_mut().zip(&s_row[s..s + c]) {
                                *o += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Fmap::new(
            Array2::from_shape_vec((batch * height * width, c), out).expect("col2im shape"),
            batch,
            height,
            width,
        )
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &Fmap<T>) -> (Fmap<T>, Array2<T>) {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (oh, ow) = self.output_size(x.height, x.width);
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.weight.t());
        y += &self.bias;
        (Fmap::new(y, x.batch, oh, ow), cols)
    }

    pub fn forward_only(&self, x: &Fmap<T>) -> Fmap<T> {
        self.forward(x).0
    }

    /// `input_dims` is `(batch, height, width)` of the forward input.
    pub fn backward(
        &self,
        input_dims: (usize, usize, usize),
        cols: &Array2<T>,
        grad_out: &Fmap<T>,
        grads: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Fmap<T>> {
        general_mat_mul(T::one(), &grad_out.data.t(), cols, T::one(), &mut grads.weight);
        grads.bias += &grad_out.data.sum_axis(Axis(0));
        need_input_grad.then(|| {
            let gcols = grad_out.data.dot(&self.weight);
            let (b, h, w) = input_dims;
            self.col2im(gcols.view(), b, h, w)
        })
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("weight".to_string(), self.weight.view().into_dyn()),
            ("bias".to_string(), self.bias.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("weight".to_string(), self.weight.view_mut().into_dyn()),
            ("bias".to_string(), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Mean over spatial positions: `(batch, channels)`.
pub fn global_avg_pool<T: Scalar>(x: &Fmap<T>) -> Array2<T> {
    let c = x.channels();
    let hw = x.height * x.width;
    let view = x
        .data
        .view()
        .into_shape_with_order((x.batch, hw, c))
        .expect("standard layout");
    view.sum_axis(Axis(1)) / T::lit(hw as f64)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad: ArrayView2<'_, T>,
    batch: usize,
    height: usize,
    width: usize,
) -> Fmap<T> {
    let c = grad.ncols();
    let hw = height * width;
    let scale = T::one() / T::lit(hw as f64);
    let mut out = Array2::zeros((batch * hw, c));
    for (b, g) in grad.rows().into_iter().enumerate() {
        let scaled = g.mapv(|v| v * scale);
        for mut row in out.slice_mut(ndarray::s![b * hw..(b + 1) * hw, ..]).rows_mut() {
            row.assign(&scaled);
        }
    }
    Fmap::new(out, batch, height, width)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Fmap<T>) -> Fmap<T> {
    let (h2, w2) = (x.height * 2, x.width * 2);
    let c = x.channels();
    let mut out = Array2::zeros((x.batch * h2 * w2, c));
    for b in 0..x.batch {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = (b * x.height + y / 2) * x.width + xx / 2;
                let dst = (b * h2 + y) * w2 + xx;
                out.row_mut(dst).assign(&x.data.row(src));
            }
        }
    }
    Fmap::new(out, x.batch, h2, w2)
}

pub fn upsample2_backward<T: Scalar>(grad: &Fmap<T>) -> Fmap<T> {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let c = grad.channels();
    let mut out = Array2::zeros((grad.batch * h * w, c));
    for b in 0..grad.batch {
        for y in 0..grad.height {
            for xx in 0..grad.width {
                let src = (b * grad.height + y) * grad.width + xx;
                let dst = (b * h + y / 2) * w + xx / 2;
                let mut row = out.row_mut(dst);
                row += &grad.data.row(src);
            }
        }
    }
    Fmap::new(out, grad.batch, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution over NCHW arrays.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Array4::zeros((b, conv.out_channels(), oh, ow));
        for n in 0..b {
            for o in 0..conv.out_channels() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc +=
                                        conv.weight[[o, (ky * k + kx) * c + ci]] * x[[n, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                        y[[n, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops_and_input_gradient_matches_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::he_uniform(3, 4, 3, 2, 1, &mut rng);
        conv.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array4::from_shape_simple_fn((2, 3, 7, 6), || rng.random_range(-1.0..1.0));
        let fm = Fmap::from_nchw(x.view());
        let (y, cols) = conv.forward(&fm);
        let reference = naive_conv(&conv, &x);
        let got = y.to_nchw();
        assert_eq!(got.dim(), reference.dim());
        for (a, b) in got.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // loss = sum(y * r) for fixed random r
        let r = Array4::from_shape_simple_fn(reference.dim(), || rng.random_range(-1.0..1.0));
        let loss = |x: &Array4<f64>| (naive_conv(&conv, x) * &r).sum();
        let gout = Fmap::from_nchw(r.view());
        let mut grads = conv.zeros_like();
        let gx = conv
            .backward((2, 7, 6), &cols, &gout, &mut grads, true)
            .unwrap()
            .to_nchw();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 2, 6, 5], [0, 1, 3, 2], [1, 0, 4, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "{fd} vs {}", gx[idx]);
        }
        // weight gradient
        for (o, j) in [(0, 0), (3, 26), (2, 13)] {
            let mut cp = conv.clone();
            cp.weight[[o, j]] += h;
            let mut cm = conv.clone();
            cm.weight[[o, j]] -= h;
            let fd = ((naive_conv(&cp, &x) * &r).sum() - (naive_conv(&cm, &x) * &r).sum()) / (2.0 * h);
            assert!((fd - grads.weight[[o, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn nchw_roundtrip_and_pool() {
        let x = Array4::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| (a * 1000 + b * 100 + c * 10 + d) as f64);
        let fm = Fmap::from_nchw(x.view());
        assert_eq!(fm.to_nchw(), x);
        let pooled = global_avg_pool(&fm);
        assert_eq!(pooled[[1, 2]], x.slice(ndarray::s![1, 2, .., ..]).mean().unwrap());
        let up = upsample2(&fm);
        assert_eq!(up.to_nchw()[[1, 2, 7, 9]], x[[1, 2, 3, 4]]);
        let back = upsample2_backward(&up);
        assert_eq!(back.to_nchw(), x * 4.0);
    }
}
