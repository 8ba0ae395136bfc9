//! Neural network layers with explicit forward and backward passes.
//!
//! Every layer returns analytic parameter and input gradients; there is no
//! tape. Reductions over the batch run in a fixed order so training is
//! bit-reproducible, and per-item work (convolution) is parallelised with
//! ordered reassembly.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, s};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scalar::Scalar;

/// Kaiming-uniform bound for a leaky-ReLU fan-in.
fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, bound: f64) -> T {
    T::from_f64(rng.gen_range(-bound..bound))
}

/// Gather sliding 2-D patches into a column matrix `[C·KH·KW, OH·OW]`.
/// Flat-slice loops; the stride-1 inner span degenerates to a memcpy.
fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("contiguous input");
    let mut col = Array2::<T>::zeros((c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[(ii as usize) * w..(ii as usize) * w + w];
                    let dst = &mut cs[row_base + oi * ow..row_base + oi * ow + ow];
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(
                                &src[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<T> {
    let cs = col.as_slice().expect("contiguous columns");
    let mut img = Array3::<T>::zeros((c, h, w));
    let is = img.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        let plane_base = ci * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &cs[row_base + oi * ow..row_base + oi * ow + ow];
                    let dst_base = plane_base + (ii as usize) * w;
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        for oj in lo..hi {
                            let jj = (oj as isize + shift) as usize;
                            is[dst_base + jj] = is[dst_base + jj] + src[oj];
                        }
                    } else {
                        for (oj, &v) in src.iter().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                is[dst_base + jj as usize] =
                                    is[dst_base + jj as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution, weight layout `[OC, IC, KH, KW]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad<T: Scalar> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let wb = kaiming_bound(fan_in, slope);
        let weight = Array4::from_shape_simple_fn((out_c, in_c, k, k), || uniform(rng, wb));
        let bb = 1.0 / (fan_in as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(out_c, || uniform(rng, bb));
        Self { weight, bias, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight2(&self) -> Array2<T> {
        let (oc, ic, kh, kw) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        );
        self.weight.view().into_shape_with_order((oc, ic * kh * kw)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (b, _ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let oc = self.weight.shape()[0];
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self.weight2();
        let items: Vec<Array3<T>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(&x.index_axis(Axis(0), bi), kh, kw, self.stride, self.pad, oh, ow);
                let mut y2 = w2.dot(&col);
                for (mut row, &bv) in y2.rows_mut().into_iter().zip(self.bias.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
                y2.into_shape_with_order((oc, oh, ow)).unwrap()
            })
            .collect();
        let mut y = Array4::<T>::zeros((b, oc, oh, ow));
        for (bi, item) in items.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), bi).assign(&item);
        }
        y
    }

    /// Returns (dx, grads); gradients are summed over the batch in index
    /// order.
    pub fn backward(&self, x: &Array4<T>, dy: &Array4<T>) -> (Array4<T>, Conv2dGrad<T>) {
        let (b, ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let oc = self.weight.shape()[0];
        let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
        let w2 = self.weight2();
        let per_item: Vec<(Array3<T>, Array2<T>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(&x.index_axis(Axis(0), bi), kh, kw, self.stride, self.pad, oh, ow);
                let dy2 = dy
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((oc, oh * ow))
                    .unwrap()
                    .to_owned();
                let dw2 = dy2.dot(&col.t());
                let dcol = w2.t().dot(&dy2);
                let dx = col2im(&dcol, ic, h, w, kh, kw, self.stride, self.pad, oh, ow);
                (dx, dw2)
            })
            .collect();
        let mut dx = Array4::<T>::zeros((b, ic, h, w));
        let mut dw2 = Array2::<T>::zeros((oc, ic * kh * kw));
        for (bi, (dxb, dwb)) in per_item.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), bi).assign(&dxb);
            dw2 = dw2 + dwb;
        }
        let mut dbias = Array1::<T>::zeros(oc);
        for bi in 0..b {
            for c in 0..oc {
                let mut acc = T::zero();
                for v in dy.slice(s![bi, c, .., ..]).iter() {
                    acc = acc + *v;
                }
                dbias[c] = dbias[c] + acc;
            }
        }
        let dweight = dw2.into_shape_with_order((oc, ic, kh, kw)).unwrap();
        (dx, Conv2dGrad { weight: dweight, bias: dbias })
    }
}

// ---------------------------------------------------------------------------
// Transposed Conv2d
// ---------------------------------------------------------------------------

/// Transposed 2-D convolution, weight layout `[IC, OC, KH, KW]`. The output
/// size is stored explicitly, which subsumes output padding.
#[derive(Debug, Clone)]
pub struct TConv2d<T: Scalar> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TConv2dGrad<T: Scalar> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> TConv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let wb = kaiming_bound(fan_in, slope);
        let weight = Array4::from_shape_simple_fn((in_c, out_c, k, k), || uniform(rng, wb));
        let bb = 1.0 / (fan_in as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(out_c, || uniform(rng, bb));
        Self { weight, bias, stride, pad, out_hw }
    }

    fn weight2(&self) -> Array2<T> {
        let (ic, oc, kh, kw) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
            self.weight.shape()[3],
        );
        self.weight.view().into_shape_with_order((ic, oc * kh * kw)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (b, ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, kh, kw) = (self.weight.shape()[1], self.weight.shape()[2], self.weight.shape()[3]);
        let (oh, ow) = self.out_hw;
        let w2 = self.weight2();
        let items: Vec<Array3<T>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let x2 = x
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((ic, ih * iw))
                    .unwrap()
                    .to_owned();
                let col = w2.t().dot(&x2); // [OC·KH·KW, IH·IW]
                let mut y = col2im(&col, oc, oh, ow, kh, kw, self.stride, self.pad, ih, iw);
                for (mut plane, &bv) in y.outer_iter_mut().zip(self.bias.iter()) {
                    plane.mapv_inplace(|v| v + bv);
                }
                y
            })
            .collect();
        let mut y = Array4::<T>::zeros((b, oc, oh, ow));
        for (bi, item) in items.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), bi).assign(&item);
        }
        y
    }

    pub fn backward(&self, x: &Array4<T>, dy: &Array4<T>) -> (Array4<T>, TConv2dGrad<T>) {
        let (b, ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, kh, kw) = (self.weight.shape()[1], self.weight.shape()[2], self.weight.shape()[3]);
        let w2 = self.weight2();
        let per_item: Vec<(Array3<T>, Array2<T>)> = (0..b)
            .into_par_iter()
            .map(|bi| {
                // dcol gathers dy exactly where forward scattered
                let dcol =
                    im2col(&dy.index_axis(Axis(0), bi), kh, kw, self.stride, self.pad, ih, iw);
                let dx2 = w2.dot(&dcol); // [IC, IH·IW]
                let x2 = x
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((ic, ih * iw))
                    .unwrap()
                    .to_owned();
                let dw2 = x2.dot(&dcol.t()); // [IC, OC·KH·KW]
                (dx2.into_shape_with_order((ic, ih, iw)).unwrap(), dw2)
            })
            .collect();
        let mut dx = Array4::<T>::zeros((b, ic, ih, iw));
        let mut dw2 = Array2::<T>::zeros((ic, oc * kh * kw));
        for (bi, (dxb, dwb)) in per_item.into_iter().enumerate() {
            dx.index_axis_mut(Axis(0), bi).assign(&dxb);
            dw2 = dw2 + dwb;
        }
        let mut dbias = Array1::<T>::zeros(oc);
        for bi in 0..b {
            for c in 0..oc {
                let mut acc = T::zero();
                for v in dy.slice(s![bi, c, .., ..]).iter() {
                    acc = acc + *v;
                }
                dbias[c] = dbias[c] + acc;
            }
        }
        let dweight = dw2.into_shape_with_order((ic, oc, kh, kw)).unwrap();
        (dx, TConv2dGrad { weight: dweight, bias: dbias })
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation
// ---------------------------------------------------------------------------

/// Channel-wise batch normalisation over `[B, C, H, W]`.
///
/// Training mode normalises with batch statistics (biased variance) and
/// updates the running averages; eval mode uses the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub xhat: Array4<T>,
    pub invstd: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct BnGrad<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let n = (b * hw) as f64;
        let xs = x.as_slice().expect("contiguous input");
        let mut xhat = Array4::<T>::zeros(x.raw_dim());
        let mut invstd = Array1::<T>::zeros(c);
        let mut y = Array4::<T>::zeros(x.raw_dim());
        let xh_s = xhat.as_slice_mut().expect("freshly allocated");
        let y_s = y.as_slice_mut().expect("freshly allocated");
        for ci in 0..c {
            // accumulate in f64 regardless of T for stable statistics
            let mut sum = 0.0f64;
            for bi in 0..b {
                let lane = &xs[(bi * c + ci) * hw..(bi * c + ci) * hw + hw];
                for v in lane {
                    sum += v.as_f64();
                }
            }
            let mean = sum / n;
            let mut var_sum = 0.0f64;
            for bi in 0..b {
                let lane = &xs[(bi * c + ci) * hw..(bi * c + ci) * hw + hw];
                for v in lane {
                    let d = v.as_f64() - mean;
                    var_sum += d * d;
                }
            }
            let var = var_sum / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[ci] = T::from_f64(istd);
            let (g, bta) = (self.gamma[ci], self.beta[ci]);
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for k in 0..hw {
                    let xh = T::from_f64((xs[off + k].as_f64() - mean) * istd);
                    xh_s[off + k] = xh;
                    y_s[off + k] = g * xh + bta;
                }
            }
            let m = self.momentum;
            self.running_mean[ci] =
                T::from_f64(self.running_mean[ci].as_f64() * (1.0 - m) + mean * m);
            self.running_var[ci] =
                T::from_f64(self.running_var[ci].as_f64() * (1.0 - m) + var * m);
        }
        (y, BnCache { xhat, invstd })
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let mut y = x.clone();
        let y_s = y.as_slice_mut().expect("contiguous output");
        for ci in 0..c {
            let mean = self.running_mean[ci].as_f64();
            let istd = 1.0 / (self.running_var[ci].as_f64() + self.eps).sqrt();
            let (g, bta) = (self.gamma[ci].as_f64(), self.beta[ci].as_f64());
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for v in &mut y_s[off..off + hw] {
                    *v = T::from_f64((v.as_f64() - mean) * istd * g + bta);
                }
            }
        }
        y
    }

    /// Backward through the batch statistics.
    pub fn backward_train(&self, dy: &Array4<T>, cache: &BnCache<T>) -> (Array4<T>, BnGrad<T>) {
        let (b, c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
        let hw = h * w;
        let n = (b * hw) as f64;
        let dy_s = dy.as_slice().expect("contiguous gradient");
        let xh_s = cache.xhat.as_slice().expect("contiguous cache");
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = Array4::<T>::zeros(dy.raw_dim());
        let dx_s = dx.as_slice_mut().expect("freshly allocated");
        for ci in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for k in 0..hw {
                    let d = dy_s[off + k].as_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * xh_s[off + k].as_f64();
                }
            }
            dgamma[ci] = T::from_f64(sum_dy_xhat);
            dbeta[ci] = T::from_f64(sum_dy);
            let g = self.gamma[ci].as_f64();
            let istd = cache.invstd[ci].as_f64();
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for k in 0..hw {
                    let d = dy_s[off + k].as_f64();
                    let xh = xh_s[off + k].as_f64();
                    dx_s[off + k] =
                        T::from_f64(g * istd * (d - sum_dy / n - xh * sum_dy_xhat / n));
                }
            }
        }
        (dx, BnGrad { gamma: dgamma, beta: dbeta })
    }

    /// Backward in eval mode (running statistics are constants).
    pub fn backward_eval(&self, dy: &Array4<T>) -> Array4<T> {
        let c = dy.shape()[1];
        let mut dx = dy.clone();
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci].as_f64() + self.eps).sqrt();
            let g = self.gamma[ci].as_f64();
            dx.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| T::from_f64(v.as_f64() * g * istd));
        }
        dx
    }

    /// Re-apply the affine part to a cached normalised tensor; cheaper than
    /// caching the layer output.
    pub fn affine_of_xhat(&self, xhat: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = (
            xhat.shape()[0],
            xhat.shape()[1],
            xhat.shape()[2],
            xhat.shape()[3],
        );
        let hw = h * w;
        let mut y = xhat.clone();
        let y_s = y.as_slice_mut().expect("contiguous output");
        for ci in 0..c {
            let (g, bta) = (self.gamma[ci], self.beta[ci]);
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for v in &mut y_s[off..off + hw] {
                    *v = g * *v + bta;
                }
            }
        }
        y
    }
}

/// Feature-wise batch normalisation over `[B, F]`.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Bn1dCache<T: Scalar> {
    pub xhat: Array2<T>,
    pub invstd: Array1<T>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::from_elem(features, T::one()),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::from_elem(features, T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Array2<T>) -> (Array2<T>, Bn1dCache<T>) {
        let (b, f) = (x.shape()[0], x.shape()[1]);
        let n = b as f64;
        let mut xhat = Array2::<T>::zeros(x.raw_dim());
        let mut invstd = Array1::<T>::zeros(f);
        let mut y = Array2::<T>::zeros(x.raw_dim());
        for fi in 0..f {
            let mut sum = 0.0f64;
            for bi in 0..b {
                sum += x[[bi, fi]].as_f64();
            }
            let mean = sum / n;
            let mut var_sum = 0.0f64;
            for bi in 0..b {
                let d = x[[bi, fi]].as_f64() - mean;
                var_sum += d * d;
            }
            let var = var_sum / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[fi] = T::from_f64(istd);
            for bi in 0..b {
                let xh = T::from_f64((x[[bi, fi]].as_f64() - mean) * istd);
                xhat[[bi, fi]] = xh;
                y[[bi, fi]] = self.gamma[fi] * xh + self.beta[fi];
            }
            let m = self.momentum;
            self.running_mean[fi] =
                T::from_f64(self.running_mean[fi].as_f64() * (1.0 - m) + mean * m);
            self.running_var[fi] = T::from_f64(self.running_var[fi].as_f64() * (1.0 - m) + var * m);
        }
        (y, Bn1dCache { xhat, invstd })
    }

    pub fn forward_eval(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.clone();
        for fi in 0..x.shape()[1] {
            let mean = self.running_mean[fi].as_f64();
            let istd = 1.0 / (self.running_var[fi].as_f64() + self.eps).sqrt();
            let (g, bta) = (self.gamma[fi].as_f64(), self.beta[fi].as_f64());
            y.slice_mut(s![.., fi])
                .mapv_inplace(|v| T::from_f64((v.as_f64() - mean) * istd * g + bta));
        }
        y
    }

    pub fn backward_train(&self, dy: &Array2<T>, cache: &Bn1dCache<T>) -> (Array2<T>, BnGrad<T>) {
        let (b, f) = (dy.shape()[0], dy.shape()[1]);
        let n = b as f64;
        let mut dgamma = Array1::<T>::zeros(f);
        let mut dbeta = Array1::<T>::zeros(f);
        let mut dx = Array2::<T>::zeros(dy.raw_dim());
        for fi in 0..f {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for bi in 0..b {
                let d = dy[[bi, fi]].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat[[bi, fi]].as_f64();
            }
            dgamma[fi] = T::from_f64(sum_dy_xhat);
            dbeta[fi] = T::from_f64(sum_dy);
            let g = self.gamma[fi].as_f64();
            let istd = cache.invstd[fi].as_f64();
            for bi in 0..b {
                let d = dy[[bi, fi]].as_f64();
                let xh = cache.xhat[[bi, fi]].as_f64();
                dx[[bi, fi]] = T::from_f64(g * istd * (d - sum_dy / n - xh * sum_dy_xhat / n));
            }
        }
        (dx, BnGrad { gamma: dgamma, beta: dbeta })
    }

    pub fn backward_eval(&self, dy: &Array2<T>) -> Array2<T> {
        let mut dx = dy.clone();
        for fi in 0..dy.shape()[1] {
            let istd = 1.0 / (self.running_var[fi].as_f64() + self.eps).sqrt();
            let g = self.gamma[fi].as_f64();
            dx.slice_mut(s![.., fi]).mapv_inplace(|v| T::from_f64(v.as_f64() * g * istd));
        }
        dx
    }

    pub fn affine_of_xhat(&self, xhat: &Array2<T>) -> Array2<T> {
        let mut y = xhat.clone();
        for fi in 0..xhat.shape()[1] {
            let (g, bta) = (self.gamma[fi], self.beta[fi]);
            y.slice_mut(s![.., fi]).mapv_inplace(|v| g * v + bta);
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Activations, pooling, dropout, linear
// ---------------------------------------------------------------------------

pub fn leaky_relu<T: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
    slope: f64,
) -> ndarray::Array<T, D> {
    let a = T::from_f64(slope);
    x.mapv(|v| if v > T::zero() { v } else { a * v })
}

/// dL/dx given the pre-activation input.
pub fn leaky_relu_backward<T: Scalar, D: ndarray::Dimension>(
    preact: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
    slope: f64,
) -> ndarray::Array<T, D> {
    let a = T::from_f64(slope);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(preact).for_each(|d, &p| {
        if p <= T::zero() {
            *d = *d * a;
        }
    });
    dx
}

/// Mean over the spatial axes: `[B, C, H, W]` → `[B, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut y = Array2::<T>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = T::zero();
            for v in x.slice(s![bi, ci, .., ..]).iter() {
                acc = acc + *v;
            }
            y[[bi, ci]] = acc * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(
    dy: &Array2<T>,
    h: usize,
    w: usize,
) -> Array4<T> {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let v = dy[[bi, ci]] * scale;
            dx.slice_mut(s![bi, ci, .., ..]).fill(v);
        }
    }
    dx
}

/// Inverted dropout; returns the output and the scaled keep-mask used by the
/// backward pass. A probability of zero yields the identity.
pub fn dropout_forward<T: Scalar>(
    x: &Array2<T>,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<T>, Array2<T>) {
    if p <= 0.0 {
        return (x.clone(), Array2::from_elem(x.raw_dim(), T::one()));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward<T: Scalar>(dy: &Array2<T>, mask: &Array2<T>) -> Array2<T> {
    dy * mask
}

/// Fully connected layer, weight layout `[OUT, IN]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad<T: Scalar> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_f: usize, out_f: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let wb = kaiming_bound(in_f, slope);
        let weight = Array2::from_shape_simple_fn((out_f, in_f), || uniform(rng, wb));
        let bb = 1.0 / (in_f as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(out_f, || uniform(rng, bb));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
            ndarray::Zip::from(&mut row).and(&self.bias).for_each(|v, &b| *v = *v + b);
        }
        y
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>) -> (Array2<T>, LinearGrad<T>) {
        let dx = dy.dot(&self.weight);
        let dweight = dy.t().dot(x);
        let mut dbias = Array1::<T>::zeros(self.bias.len());
        for row in dy.rows() {
            ndarray::Zip::from(&mut dbias).and(&row).for_each(|d, &v| *d = *d + v);
        }
        (dx, LinearGrad { weight: dweight, bias: dbias })
    }
}
