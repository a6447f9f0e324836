use rand::Rng;
use rayon::prelude::*;

use crate::featuremap::{bilinear_taps, BilinearTaps, NormalizedPoint};
use crate::real::{axpy, dot, Real};

use super::{Param, Tensor};

/// 2D convolution with square kernels, zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// What a convolution keeps from its forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// `(in_c * k * k) x (out_h * out_w)` patch matrix; the input itself for 1x1 kernels.
    cols: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// Uniform init in `[-bound, bound]` with `bound = sqrt(gain / fan_in)`.
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (gain / fan_in).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let w = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], w),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let plane = out_h * out_w;
        let mut cols = vec![T::zero(); self.in_channels * k * k * plane];
        cols.par_chunks_mut(plane).enumerate().for_each(|(r, row)| {
            let ci = r / (k * k);
            let ky = (r / k) % k;
            let kx = r % k;
            let src = x.channel(ci);
            for oy in 0..out_h {
                let iy = (oy * s) as isize + ky as isize - p;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                let dst = &mut row[oy * out_w..(oy + 1) * out_w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * s) as isize + kx as isize - p;
                    if ix >= 0 && ix < x.w as isize {
                        *d = src_row[ix as usize];
                    }
                }
            }
        });
        cols
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (out_h, out_w) = self.out_dims(x.h, x.w);
        let plane = out_h * out_w;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x, out_h, out_w)
        };
        let r = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(self.out_channels, out_h, out_w);
        out.data.par_chunks_mut(plane).enumerate().for_each(|(oc, o)| {
            o.fill(self.bias.value[oc]);
            let wrow = &self.weight.value[oc * r..(oc + 1) * r];
            for (ri, &wv) in wrow.iter().enumerate() {
                if wv != T::zero() {
                    axpy(o, wv, &cols[ri * plane..(ri + 1) * plane]);
                }
            }
        });
        let cache = ConvCache { in_h: x.h, in_w: x.w, out_h, out_w, cols };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache<T>, dout: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let plane = cache.out_h * cache.out_w;
        let r = self.in_channels * self.kernel * self.kernel;
        let cols = &cache.cols;
        let dw: Vec<T> = (0..self.out_channels)
            .into_par_iter()
            .flat_map_iter(|oc| {
                let d = dout.channel(oc);
                (0..r).map(move |ri| dot(d, &cols[ri * plane..(ri + 1) * plane]))
            })
            .collect();
        for (g, v) in self.weight.grad.iter_mut().zip(dw) {
            *g += v;
        }
        for oc in 0..self.out_channels {
            let s: f64 = dout.channel(oc).iter().map(|v| v.f64()).sum();
            self.bias.grad[oc] += T::of(s);
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); r * plane];
        let weight = &self.weight.value;
        dcols.par_chunks_mut(plane).enumerate().for_each(|(ri, row)| {
            for oc in 0..self.out_channels {
                let wv = weight[oc * r + ri];
                if wv != T::zero() {
                    axpy(row, wv, dout.channel(oc));
                }
            }
        });
        if self.kernel == 1 && self.stride == 1 {
            return Some(Tensor { c: self.in_channels, h: cache.in_h, w: cache.in_w, data: dcols });
        }
        Some(self.col2im(&dcols, cache))
    }

    fn col2im(&self, dcols: &[T], cache: &ConvCache<T>) -> Tensor<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let (in_h, in_w, out_h, out_w) = (cache.in_h, cache.in_w, cache.out_h, cache.out_w);
        let plane = out_h * out_w;
        let mut dx = Tensor::zeros(self.in_channels, in_h, in_w);
        dx.data.par_chunks_mut(in_h * in_w).enumerate().for_each(|(ci, dst)| {
            for ky in 0..k {
                for kx in 0..k {
                    let ri = (ci * k + ky) * k + kx;
                    let row = &dcols[ri * plane..(ri + 1) * plane];
                    for oy in 0..out_h {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * in_w..(iy as usize + 1) * in_w];
                        for ox in 0..out_w {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < in_w as isize {
                                drow[ix as usize] += row[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        });
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` where the (post-activation) output was not positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Per-sample, per-channel normalization with a learned affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let n = (x.h * x.w) as f64;
        let mut normalized = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let src = x.channel(c);
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma.value[c].f64(), self.beta.value[c].f64());
            for ((nv, ov), &xv) in normalized.channel_mut(c).iter_mut().zip(out.channel_mut(c)).zip(src) {
                let xh = (xv.f64() - mean) * is;
                *nv = T::of(xh);
                *ov = T::of(g * xh + b);
            }
        }
        (out, NormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dout: &Tensor<T>) -> Tensor<T> {
        let n = (dout.h * dout.w) as f64;
        let mut dx = Tensor::zeros(dout.c, dout.h, dout.w);
        for c in 0..dout.c {
            let dy = dout.channel(c);
            let xh = cache.normalized.channel(c);
            let g = self.gamma.value[c].f64();
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for (&d, &h) in dy.iter().zip(xh) {
                sum_dy += d.f64();
                sum_dy_xh += d.f64() * h.f64();
            }
            self.gamma.grad[c] += T::of(sum_dy_xh);
            self.beta.grad[c] += T::of(sum_dy);
            let k = g * cache.inv_std[c] / n;
            for ((o, &d), &h) in dx.channel_mut(c).iter_mut().zip(dy).zip(xh) {
                *o = T::of(k * (n * d.f64() - sum_dy - h.f64() * sum_dy_xh));
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Bilinear resampling of a stride-`k` map to full resolution, using the
/// same half-texel-center convention as [`crate::featuremap::FeatureMap`].
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<BilinearTaps>,
}

impl Upsampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let taps = (0..out_h)
            .flat_map(|r| (0..out_w).map(move |c| (r, c)))
            .map(|(r, c)| {
                let p = NormalizedPoint::new((c as f64 + 0.5) / out_w as f64, (r as f64 + 0.5) / out_h as f64);
                bilinear_taps(&p, in_h, in_w)
            })
            .collect();
        Self { in_h, in_w, out_h, out_w, taps }
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(x.c, self.out_h, self.out_w);
        let plane = self.out_h * self.out_w;
        out.data.par_chunks_mut(plane).enumerate().for_each(|(c, dst)| {
            let src = x.channel(c);
            for (d, t) in dst.iter_mut().zip(&self.taps) {
                let mut v = 0.0;
                for (&i, &w) in t.index.iter().zip(&t.weight) {
                    v += w * src[i].f64();
                }
                *d = T::of(v);
            }
        });
        out
    }

    pub fn backward<T: Real>(&self, dout: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(dout.c, self.in_h, self.in_w);
        let plane = self.in_h * self.in_w;
        dx.data.par_chunks_mut(plane).enumerate().for_each(|(c, dst)| {
            let g = dout.channel(c);
            for (&gv, t) in g.iter().zip(&self.taps) {
                for (&i, &w) in t.index.iter().zip(&t.weight) {
                    dst[i] += T::of(w * gv.f64());
                }
            }
        });
        dx
    }
}

/// Scales every spatial position of a `C x H x W` tensor to unit L2 norm across channels.
pub fn l2_normalize<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<f64>) {
    let plane = x.h * x.w;
    let mut norms = vec![0.0; plane];
    for c in 0..x.c {
        for (n, v) in norms.iter_mut().zip(x.channel(c)) {
            *n += v.f64() * v.f64();
        }
    }
    for n in &mut norms {
        *n = n.sqrt().max(1e-12);
    }
    let mut out = x.clone();
    for c in 0..x.c {
        for (o, n) in out.channel_mut(c).iter_mut().zip(&norms) {
            *o = T::of(o.f64() / n);
        }
    }
    (out, norms)
}

pub fn l2_normalize_backward<T: Real>(output: &Tensor<T>, norms: &[f64], dout: &Tensor<T>) -> Tensor<T> {
    let plane = output.h * output.w;
    let mut proj = vec![0.0; plane];
    for c in 0..output.c {
        for ((p, y), g) in proj.iter_mut().zip(output.channel(c)).zip(dout.channel(c)) {
            *p += y.f64() * g.f64();
        }
    }
    let mut dx = Tensor::zeros(output.c, output.h, output.w);
    for c in 0..output.c {
        let (y, g) = (output.channel(c), dout.channel(c));
        for (k, d) in dx.channel_mut(c).iter_mut().enumerate() {
            *d = T::of((g[k].f64() - y[k].f64() * proj[k]) / norms[k]);
        }
    }
    dx
}
