//! Line-to-window correspondence search.
//!
//! A query descriptor is first compared against `N_line` candidates spread
//! along its epipolar line in the other image; the most probable candidate
//! fixes the center of a local window (offset by training noise), and a
//! softmax-weighted expectation over a regular lattice inside that window
//! gives a differentiable correspondence together with its spread.

use crate::error::{Error, Result};
use crate::featuremap::{BilinearTaps, FeatureMap, NormalizedPoint};
use crate::geometry::LineSegment;
use crate::real::Real;

/// Candidate points with their interpolated descriptors (`N x C`, row-major).
#[derive(Debug, Clone)]
pub struct Candidates<T> {
    pub points: Vec<NormalizedPoint>,
    pub taps: Vec<BilinearTaps>,
    pub descriptors: Vec<T>,
    pub channels: usize,
}

impl<T: Real> Candidates<T> {
    fn sample(points: Vec<NormalizedPoint>, fmap: &FeatureMap<T>) -> Result<Self> {
        let c = fmap.channels();
        let mut descriptors = vec![T::zero(); points.len() * c];
        let mut taps = Vec::with_capacity(points.len());
        for (p, out) in points.iter().zip(descriptors.chunks_exact_mut(c)) {
            let t = fmap.taps(p)?;
            fmap.sample_into(&t, out);
            taps.push(t);
        }
        Ok(Self { points, taps, descriptors, channels: c })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor(&self, k: usize) -> &[T] {
        &self.descriptors[k * self.channels..(k + 1) * self.channels]
    }
}

/// `n_line` evenly spaced samples along a pixel-space segment of image 2.
pub fn build_line_candidates<T: Real>(segment: &LineSegment, n_line: usize, fmap: &FeatureMap<T>) -> Result<Candidates<T>> {
    if n_line < 2 {
        return Err(Error::invalid("n_line must be >= 2"));
    }
    if !(segment.length() >= 1.0) {
        return Err(Error::invalid("segment shorter than one pixel"));
    }
    let (w, h) = fmap.image_size();
    let d = segment.p1 - segment.p0;
    let denom = (n_line - 1) as f64;
    let points = (0..n_line)
        .map(|k| {
            let kf = k as f64;
            NormalizedPoint::new(
                (segment.p0.x + d.x * kf / denom) / w,
                (segment.p0.y + d.y * kf / denom) / h,
            )
        })
        .collect();
    Candidates::sample(points, fmap)
}

/// Every texel center of the map: the coarse stage of the coarse-to-fine baseline.
pub fn build_grid_candidates<T: Real>(fmap: &FeatureMap<T>) -> Result<Candidates<T>> {
    let points = (0..fmap.height())
        .flat_map(|i| (0..fmap.width()).map(move |j| (i, j)))
        .map(|(i, j)| fmap.texel_center(i, j))
        .collect();
    Candidates::sample(points, fmap)
}

/// Probabilities over a set of candidate points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDistribution {
    pub probs: Vec<f64>,
    pub support: Vec<NormalizedPoint>,
}

/// Max-shifted softmax.
pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Softmax over raw dot products between the query and each candidate.
pub fn match_distribution<T: Real>(query: &[T], candidates: &[T], support: &[NormalizedPoint]) -> Result<MatchDistribution> {
    let c = query.len();
    if support.is_empty() {
        return Err(Error::invalid("match distribution needs at least one candidate"));
    }
    if c == 0 || candidates.len() != support.len() * c {
        return Err(Error::invalid("candidate descriptor matrix has the wrong shape"));
    }
    if query.iter().chain(candidates).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite descriptor"));
    }
    let mut probs: Vec<f64> = candidates
        .chunks_exact(c)
        .map(|d| crate::real::dot_f64(query, d))
        .collect();
    softmax_in_place(&mut probs);
    Ok(MatchDistribution {
        probs,
        support: support.to_vec(),
    })
}

/// Index of the most probable candidate; ties resolve to the lowest index.
pub fn argmax_index(dist: &MatchDistribution) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in dist.probs.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((k, p));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::invalid("empty distribution"))
}

pub fn line_argmax(dist: &MatchDistribution) -> Result<NormalizedPoint> {
    Ok(dist.support[argmax_index(dist)?])
}

/// Window center: `coarse + 0.5 * w_patch * noise` per axis.
pub fn window_center(coarse: &NormalizedPoint, w_patch: f64, noise: [f64; 2]) -> Result<NormalizedPoint> {
    if !(w_patch > 0.0) {
        return Err(Error::invalid("w_patch must be positive"));
    }
    if noise.iter().any(|n| !(0.0..=1.0).contains(n)) {
        return Err(Error::invalid("window noise must lie in [0, 1]"));
    }
    Ok(NormalizedPoint::new(
        coarse.u + 0.5 * w_patch * noise[0],
        coarse.v + 0.5 * w_patch * noise[1],
    ))
}

/// Regular `s x s` lattice of samples spanning `center +/- w_patch / 2`.
#[derive(Debug, Clone)]
pub struct WindowPatch<T> {
    pub center: NormalizedPoint,
    pub half_extent: f64,
    pub s: usize,
    pub samples: Candidates<T>,
}

impl<T: Real> WindowPatch<T> {
    pub fn new(center: NormalizedPoint, w_patch: f64, s: usize, fmap: &FeatureMap<T>) -> Result<Self> {
        if s < 2 {
            return Err(Error::invalid("window lattice needs s >= 2"));
        }
        if !(w_patch > 0.0) || !center.is_finite() {
            return Err(Error::invalid("window needs a finite center and positive size"));
        }
        let h = 0.5 * w_patch;
        let offsets: Vec<f64> = (0..s)
            .map(|a| -h + 2.0 * h * a as f64 / (s - 1) as f64)
            .collect();
        let points = offsets
            .iter()
            .flat_map(|&dv| offsets.iter().map(move |&du| NormalizedPoint::new(center.u + du, center.v + dv)))
            .collect();
        Ok(Self {
            center,
            half_extent: h,
            s,
            samples: Candidates::sample(points, fmap)?,
        })
    }
}

/// Differentiable correspondence inside a window.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatch {
    /// Expected location over the window lattice.
    pub point: NormalizedPoint,
    /// Per-axis variance of the distribution (normalized units squared).
    pub variance: [f64; 2],
    /// Euclidean norm of the per-axis variances.
    pub sigma: f64,
    pub distribution: MatchDistribution,
}

impl SoftMatch {
    /// Spread in pixel units for an image of the given size.
    pub fn sigma_pixels(&self, width: f64, height: f64) -> f64 {
        (self.variance[0] * width * width).hypot(self.variance[1] * height * height)
    }
}

pub fn soft_match<T: Real>(query: &[T], patch: &WindowPatch<T>) -> Result<SoftMatch> {
    let distribution = match_distribution(query, &patch.samples.descriptors, &patch.samples.points)?;
    let (mut mu, mut mv) = (0.0, 0.0);
    for (p, y) in distribution.probs.iter().zip(&distribution.support) {
        mu += p * y.u;
        mv += p * y.v;
    }
    let (mut vu, mut vv) = (0.0, 0.0);
    for (p, y) in distribution.probs.iter().zip(&distribution.support) {
        vu += p * (y.u - mu) * (y.u - mu);
        vv += p * (y.v - mv) * (y.v - mv);
    }
    Ok(SoftMatch {
        point: NormalizedPoint::new(mu, mv),
        variance: [vu, vv],
        sigma: vu.hypot(vv),
        distribution,
    })
}

/// Gradients of a scalar loss with respect to the query descriptor and each
/// lattice descriptor (`s^2 x C`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatchGrad {
    pub query: Vec<f64>,
    pub samples: Vec<f64>,
}

/// Backward pass of [`soft_match`] given `upstream = dL/d(point)` in normalized units.
///
/// With `s_j = q . d_j` and `point = sum_j p_j y_j`:
/// `dL/ds_j = p_j (y_j - point) . upstream`.
pub fn soft_match_backward<T: Real>(query: &[T], patch: &WindowPatch<T>, matched: &SoftMatch, upstream: [f64; 2]) -> SoftMatchGrad {
    let c = query.len();
    let n = patch.samples.len();
    let mut gq = vec![0.0; c];
    let mut gs = vec![0.0; n * c];
    for j in 0..n {
        let y = matched.distribution.support[j];
        let p = matched.distribution.probs[j];
        let ds = p * ((y.u - matched.point.u) * upstream[0] + (y.v - matched.point.v) * upstream[1]);
        if ds == 0.0 {
            continue;
        }
        let d = patch.samples.descriptor(j);
        for k in 0..c {
            gq[k] += ds * d[k].f64();
            gs[j * c + k] = ds * query[k].f64();
        }
    }
    SoftMatchGrad { query: gq, samples: gs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pt2;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(h, w, c, 4, data).unwrap()
    }

    #[test]
    fn line_candidates_are_evenly_spaced() {
        let m = FeatureMap::<f32>::zeros(25, 25, 2, 4);
        let seg = LineSegment { p0: Pt2::new(0.0, 7.0), p1: Pt2::new(99.0, 7.0) };
        let c = build_line_candidates(&seg, 100, &m).unwrap();
        assert_eq!(c.len(), 100);
        for (k, p) in c.points.iter().enumerate() {
            assert_abs_diff_eq!(p.u * 100.0, k as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(p.v * 100.0, 7.0, epsilon = 1e-9);
        }
        let c = build_line_candidates(&seg, 2, &m).unwrap();
        assert_abs_diff_eq!(c.points[0].u * 100.0, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.points[1].u * 100.0, 99.0, epsilon = 1e-9);
        assert!(build_line_candidates(&seg, 1, &m).is_err());
    }

    #[test]
    fn distribution_examples() {
        let support = vec![NormalizedPoint::new(0.0, 0.0); 3];
        let d = match_distribution(&[1.0f64], &[2.0, 2.0, 2.0], &support).unwrap();
        for p in &d.probs {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = match_distribution(&[1.0f64], &[5.0], &support[..1]).unwrap();
        assert_eq!(d.probs, vec![1.0]);
        let d = match_distribution(&[1.0f64], &[10.0, 0.0, 0.0], &support).unwrap();
        let e = (-10.0f64).exp();
        assert_abs_diff_eq!(d.probs[0], 1.0 / (1.0 + 2.0 * e), epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[1], e / (1.0 + 2.0 * e), epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[0], 0.99991, epsilon = 1e-5);
        assert!(match_distribution(&[f64::NAN], &[1.0], &support[..1]).is_err());
        assert!(match_distribution::<f64>(&[1.0], &[], &[]).is_err());
    }

    #[test]
    fn argmax_examples() {
        let pts: Vec<_> = (0..3).map(|k| NormalizedPoint::new(k as f64, 0.0)).collect();
        let mk = |probs: Vec<f64>| MatchDistribution { probs, support: pts.clone() };
        assert_eq!(line_argmax(&mk(vec![0.0, 1.0, 0.0])).unwrap(), pts[1]);
        assert_eq!(line_argmax(&mk(vec![1.0 / 3.0; 3])).unwrap(), pts[0]);
        assert_eq!(line_argmax(&mk(vec![0.2, 0.5, 0.3])).unwrap(), pts[1]);
    }

    #[test]
    fn window_center_examples() {
        let c = NormalizedPoint::new(0.5, 0.5);
        assert_eq!(window_center(&c, 0.1, [0.0, 0.0]).unwrap(), c);
        let w = window_center(&c, 0.1, [1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(w.u, 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(w.v, 0.55, epsilon = 1e-15);
        let w = window_center(&c, 0.1, [0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(w.u, 0.525, epsilon = 1e-15);
        assert_eq!(w.v, 0.5);
        assert!(window_center(&c, 0.1, [1.5, 0.0]).is_err());
    }

    #[test]
    fn uniform_two_by_two_lattice() {
        // Constant descriptors -> uniform weights over the four lattice corners.
        let m = FeatureMap::<f64>::new(4, 4, 1, 4, vec![1.0; 16]).unwrap();
        let patch = WindowPatch::new(NormalizedPoint::new(0.5, 0.5), 0.2, 2, &m).unwrap();
        let sm = soft_match(&[1.0], &patch).unwrap();
        assert_abs_diff_eq!(sm.point.u, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sm.point.v, 0.5, epsilon = 1e-15);
        // Brute force over the four points (+-h, +-h).
        let h: f64 = 0.1;
        let pts = [(-h, -h), (h, -h), (-h, h), (h, h)];
        let var_u: f64 = pts.iter().map(|p| 0.25 * p.0 * p.0).sum();
        assert_abs_diff_eq!(sm.variance[0], var_u, epsilon = 1e-15);
        assert_abs_diff_eq!(sm.sigma, h * h * 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn point_mass_has_zero_sigma() {
        // One lattice texel carries a huge descriptor; all others are zero.
        let mut m = FeatureMap::<f64>::zeros(8, 8, 2, 4);
        m.texel_mut_by_index(3 * 8 + 4).copy_from_slice(&[400.0, 0.0]);
        let center = m.texel_center(3, 4);
        // 3x3 lattice one texel apart, so every sample sits on a texel center.
        let patch = WindowPatch::new(center, 0.25, 3, &m).unwrap();
        let sm = soft_match(&[1.0, 0.0], &patch).unwrap();
        assert_abs_diff_eq!(sm.point.u, center.u, epsilon = 1e-3);
        assert_abs_diff_eq!(sm.point.v, center.v, epsilon = 1e-3);
        assert!(sm.sigma < 1e-7);
        // Saturated distribution: gradients vanish.
        let g = soft_match_backward(&[1.0, 0.0], &patch, &sm, [1.0, 1.0]);
        assert!(g.query.iter().chain(&g.samples).all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_map(&mut rng, 8, 8, 4);
        let patch = WindowPatch::new(NormalizedPoint::new(0.4, 0.6), 0.1, 8, &m).unwrap();
        let q = vec![0.3, -0.2, 0.5, 0.1];
        let sm = soft_match(&q, &patch).unwrap();
        let g = soft_match_backward(&q, &patch, &sm, [0.0, 0.0]);
        assert!(g.query.iter().chain(&g.samples).all(|&v| v == 0.0));
    }

    #[test]
    fn expectation_stays_in_lattice_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = random_map(&mut rng, 6, 6, 3);
            let center = NormalizedPoint::new(rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1));
            let patch = WindowPatch::new(center, 0.1, 8, &m).unwrap();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let sm = soft_match(&q, &patch).unwrap();
            let tol = 1e-12;
            assert!((sm.point.u - center.u).abs() <= 0.05 + tol);
            assert!((sm.point.v - center.v).abs() <= 0.05 + tol);
            assert!(sm.sigma >= 0.0);
            let total: f64 = sm.distribution.probs.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn shift_invariance_of_scores() {
        // Adding a constant to every score: realized through a query component
        // that multiplies a constant channel.
        let support = vec![NormalizedPoint::new(0.0, 0.0); 3];
        let a = match_distribution(&[1.0f64, 0.0], &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0], &support).unwrap();
        let b = match_distribution(&[1.0f64, 7.5], &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0], &support).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}
