//! Dense descriptor maps and sub-texel bilinear sampling.
//!
//! Texel `(i, j)` of an `Hf x Wf` map has its center at normalized
//! `((j + 0.5) / Wf, (i + 0.5) / Hf)`. Samples outside the span of texel
//! centers clamp to the border centers.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::Pt2;
use crate::real::Real;

/// A point in normalized image coordinates (`u = x / width`, `v = y / height`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub u: f64,
    pub v: f64,
}

impl NormalizedPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

pub fn to_normalized(x: &Pt2, width: f64, height: f64) -> Result<NormalizedPoint> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    Ok(NormalizedPoint::new(x.x / width, x.y / height))
}

pub fn from_normalized(p: &NormalizedPoint, width: f64, height: f64) -> Pt2 {
    Pt2::new(p.u * width, p.v * height)
}

/// The (up to) four texels contributing to a bilinear sample and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    /// Linear texel indices `i * Wf + j`.
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

/// Taps of a half-texel-center bilinear sample on an `h x w` grid (`h, w >= 2`).
pub fn bilinear_taps(p: &NormalizedPoint, h: usize, w: usize) -> BilinearTaps {
    let tx = (p.u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let ty = (p.v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let j0 = (tx.floor() as usize).min(w - 2);
    let i0 = (ty.floor() as usize).min(h - 2);
    let fx = tx - j0 as f64;
    let fy = ty - i0 as f64;
    let base = i0 * w + j0;
    BilinearTaps {
        index: [base, base + 1, base + w, base + w + 1],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

/// Gradient with respect to a single texel.
#[derive(Debug, Clone, PartialEq)]
pub struct TexelGrad<T> {
    pub row: usize,
    pub col: usize,
    pub grad: Vec<T>,
}

/// `Hf x Wf x C` descriptor grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, stride: usize, data: Vec<T>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!(
                "feature map must be at least 2x2, got {height}x{width}"
            )));
        }
        if stride == 0 || channels == 0 {
            return Err(Error::invalid("stride and channel count must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "feature data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self { height, width, channels, stride, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            channels,
            stride,
            data: vec![T::zero(); height * width * channels],
        }
    }

    /// Builds a map from a channel-major (`C x Hf x Wf`) buffer.
    pub fn from_chw(channels: usize, height: usize, width: usize, stride: usize, chw: &[T]) -> Result<Self> {
        if chw.len() != channels * height * width {
            return Err(Error::invalid("channel-major buffer has the wrong size"));
        }
        let plane = height * width;
        let mut data = vec![T::zero(); chw.len()];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = chw[c * plane + p];
            }
        }
        Self::new(height, width, channels, stride, data)
    }

    pub fn to_chw(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); self.data.len()];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Size of the image this map describes, in pixels.
    pub fn image_size(&self) -> (f64, f64) {
        ((self.width * self.stride) as f64, (self.height * self.stride) as f64)
    }

    pub fn texel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn texel_by_index(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn texel_mut_by_index(&mut self, index: usize) -> &mut [T] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Normalized coordinates of the center of texel `(row, col)`.
    pub fn texel_center(&self, row: usize, col: usize) -> NormalizedPoint {
        NormalizedPoint::new(
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    pub fn taps(&self, p: &NormalizedPoint) -> Result<BilinearTaps> {
        if !p.is_finite() {
            return Err(Error::invalid("sample point is not finite"));
        }
        Ok(bilinear_taps(p, self.height, self.width))
    }

    /// Interpolates the descriptor at `p` into `out` (length `C`).
    pub fn sample_into(&self, taps: &BilinearTaps, out: &mut [T]) {
        let c = self.channels;
        let rows = taps.index.map(|i| &self.data[i * c..(i + 1) * c]);
        let [w0, w1, w2, w3] = taps.weight;
        for k in 0..c {
            let v = w0 * rows[0][k].f64()
                + w1 * rows[1][k].f64()
                + w2 * rows[2][k].f64()
                + w3 * rows[3][k].f64();
            out[k] = T::of(v);
        }
    }

    pub fn sample_bilinear(&self, p: &NormalizedPoint) -> Result<Vec<T>> {
        let taps = self.taps(p)?;
        let mut out = vec![T::zero(); self.channels];
        self.sample_into(&taps, &mut out);
        Ok(out)
    }

    /// Adjoint of [`FeatureMap::sample_bilinear`], returned as per-texel gradients
    /// (zero-weight taps omitted).
    pub fn sample_bilinear_backward(&self, p: &NormalizedPoint, upstream: &[T]) -> Result<Vec<TexelGrad<T>>> {
        if upstream.len() != self.channels {
            return Err(Error::invalid("upstream gradient length differs from channel count"));
        }
        let taps = self.taps(p)?;
        let mut out: Vec<TexelGrad<T>> = Vec::with_capacity(4);
        for (&idx, &w) in taps.index.iter().zip(&taps.weight) {
            if w == 0.0 {
                continue;
            }
            out.push(TexelGrad {
                row: idx / self.width,
                col: idx % self.width,
                grad: upstream.iter().map(|&g| T::of(w * g.f64())).collect(),
            });
        }
        Ok(out)
    }

    /// Adds `weight * upstream` into this map at the given taps; used with a
    /// zero map as a dense gradient buffer.
    pub fn accumulate(&mut self, taps: &BilinearTaps, upstream: &[f64]) {
        let c = self.channels;
        for (&idx, &w) in taps.index.iter().zip(&taps.weight) {
            if w == 0.0 {
                continue;
            }
            let dst = &mut self.data[idx * c..(idx + 1) * c];
            for (d, &g) in dst.iter_mut().zip(upstream) {
                *d += T::of(w * g);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            stride: self.stride,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

const PFM_MAGIC: &[u8; 4] = b"PFM1";

impl FeatureMap<f32> {
    /// Writes the little-endian `PFM1` format.
    pub fn write_pfm1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PFM_MAGIC)?;
        for v in [self.height, self.width, self.channels, self.stride] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pfm1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PFM_MAGIC {
            return Err(Error::format("PFM1", "bad magic"));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let [h, w, c, stride] = dims;
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::format("PFM1", "dimensions overflow"))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(h, w, c, stride, data)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
