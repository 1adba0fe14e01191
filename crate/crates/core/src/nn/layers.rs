//! Layer primitives with explicit forward and backward passes.
//!
//! Convolutions run as im2col followed by one matrix product per layer, so
//! the heavy lifting stays inside the gemm kernel.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

/// Fan-in-scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), drawn in
/// row-major order from the given stream.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-limit, limit);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// 3x3-style convolution, square kernel, configurable stride and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = fan_in_uniform(rng, out_c * fan_in, fan_in);
        Conv2d {
            weight: Array4::from_shape_vec((out_c, in_c, k, k), w).expect("conv shape"),
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (b, _, h, w) = x.dim();
        let (out_c, in_c, k, _) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, k, self.stride, self.padding);
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let mut y2 = cols.dot(&wmat.t());
        y2 += &self.bias;
        let y = y2
            .into_shape_with_order((b, oh, ow, out_c))
            .expect("conv output shape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (y, cols)
    }

    /// Gradients given the cached im2col matrix and the upstream gradient.
    /// Returns (dx, dweight, dbias).
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        x_dim: (usize, usize, usize, usize),
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
        let (out_c, in_c, k, _) = self.weight.dim();
        let (b, _, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * oh * ow, out_c))
            .expect("dy shape");
        let dwmat = dy2.t().dot(cols); // (out_c, in_c*k*k)
        let dw = dwmat
            .into_shape_with_order((out_c, in_c, k, k))
            .expect("dw shape");
        let db = dy2.sum_axis(Axis(0));
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("contiguous weight");
        let dcols = dy2.dot(&wmat);
        let dx = col2im(&dcols, x_dim, k, self.stride, self.padding);
        (dx, dw, db)
    }
}

/// Unfold (B, C, H, W) into (B*OH*OW, C*k*k) patches.
pub fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xs = x.as_slice().expect("standard layout input");
    let mut cols = Array2::<f64>::zeros((b * oh * ow, c * k * k));
    let cs = cols.as_slice_mut().expect("fresh array");
    let row_len = c * k * k;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let yy = (oy * stride + ky) as isize - pad as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let src_row = ((bi * c + ci) * h + yy as usize) * w;
                        let dst = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            cs[dst + kx] = xs[src_row + xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch gradients back onto the input (scatter-add inverse of im2col).
pub fn col2im(
    dcols: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = x_dim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let ds = dcols.as_slice().expect("standard layout dcols");
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let xs = dx.as_slice_mut().expect("fresh array");
    let row_len = c * k * k;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let yy = (oy * stride + ky) as isize - pad as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let dst_row = ((bi * c + ci) * h + yy as usize) * w;
                        let src = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            xs[dst_row + xx as usize] += ds[src + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Fully connected layer, weight shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let w = fan_in_uniform(rng, out_dim * in_dim, in_dim);
        Dense {
            weight: Array2::from_shape_vec((out_dim, in_dim), w).expect("dense shape"),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        (dx, dw, db)
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the cached pre-activation.
pub fn relu_backward<D: ndarray::Dimension>(
    z: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(z).for_each(|d, &zv| {
        if zv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let v = x[[bi, ci, yi, xi]];
                    y[[bi, ci, 2 * yi, 2 * xi]] = v;
                    y[[bi, ci, 2 * yi + 1, 2 * xi]] = v;
                    y[[bi, ci, 2 * yi, 2 * xi + 1]] = v;
                    y[[bi, ci, 2 * yi + 1, 2 * xi + 1]] = v;
                }
            }
        }
    }
    y
}

/// Backward of nearest 2x upsampling: sum each 2x2 block.
pub fn upsample2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    dx[[bi, ci, yi, xi]] = dy[[bi, ci, 2 * yi, 2 * xi]]
                        + dy[[bi, ci, 2 * yi + 1, 2 * xi]]
                        + dy[[bi, ci, 2 * yi, 2 * xi + 1]]
                        + dy[[bi, ci, 2 * yi + 1, 2 * xi + 1]];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching spatial dims")
        .as_standard_layout()
        .to_owned()
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(dy: &Array4<f64>, c_first: usize) -> (Array4<f64>, Array4<f64>) {
    let a = dy
        .slice(ndarray::s![.., ..c_first, .., ..])
        .as_standard_layout()
        .to_owned();
    let b = dy
        .slice(ndarray::s![.., c_first.., .., ..])
        .as_standard_layout()
        .to_owned();
    (a, b)
}
