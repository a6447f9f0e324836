//! Test-time keypoint extraction and descriptor matching.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ExtractConfig;
use crate::error::{Error, Result};
use crate::featuremap::{read_u32, to_normalized, FeatureMap};
use crate::geometry::Pt2;
use crate::image::GrayImage;
use crate::real::{dot_f64, Real};
use crate::tinynet::{DescriptorNet, DetectorNet, Tensor};

/// Keeps pixels strictly greater than every other pixel in their
/// `window x window` neighbourhood (clipped at the border). Ties suppress all tied pixels.
pub fn nms(heat: &[f32], height: usize, width: usize, window: usize) -> Result<Vec<bool>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("NMS window must be odd and >= 1, got {window}")));
    }
    if heat.len() != height * width {
        return Err(Error::invalid("heatmap size mismatch"));
    }
    let r = window / 2;
    // Separable running maximum: rows, then columns.
    let mut row_max = vec![f32::NEG_INFINITY; heat.len()];
    for y in 0..height {
        for x in 0..width {
            let (a, b) = (x.saturating_sub(r), (x + r).min(width - 1));
            row_max[y * width + x] = heat[y * width + a..=y * width + b].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        }
    }
    let mut keep = vec![false; heat.len()];
    for y in 0..height {
        let (a, b) = (y.saturating_sub(r), (y + r).min(height - 1));
        for x in 0..width {
            let m = (a..=b).map(|yy| row_max[yy * width + x]).fold(f32::NEG_INFINITY, f32::max);
            let v = heat[y * width + x];
            if v < m || v.is_nan() {
                continue;
            }
            // v is the window maximum; keep it only if no other pixel ties.
            let (c0, c1) = (x.saturating_sub(r), (x + r).min(width - 1));
            let tied = (a..=b).any(|yy| (c0..=c1).any(|xx| (yy, xx) != (y, x) && heat[yy * width + xx] == v));
            keep[y * width + x] = !tied;
        }
    }
    Ok(keep)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Each `channels`-long row scaled to unit length; zero rows stay zero.
pub fn l2_normalized_rows<T: Real>(d: &[T], channels: usize) -> Vec<T> {
    let mut out = d.to_vec();
    for row in out.chunks_exact_mut(channels.max(1)) {
        let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if n > 0.0 {
            let inv = T::of(1.0 / n);
            for v in row {
                *v *= inv;
            }
        }
    }
    out
}

/// Keypoints ordered by descending score, with `K x C` descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Pt2>,
    pub scores: Vec<f32>,
    pub descriptors: Vec<f32>,
    pub channels: usize,
}

impl KeypointSet {
    pub fn empty(channels: usize) -> Self {
        Self { points: Vec::new(), scores: Vec::new(), descriptors: Vec::new(), channels }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor(&self, k: usize) -> &[f32] {
        &self.descriptors[k * self.channels..(k + 1) * self.channels]
    }

    /// Keypoints at the given pixel locations with descriptors sampled from
    /// `fmap` and scaled to unit length.
    pub fn from_points(points: Vec<Pt2>, scores: Vec<f32>, fmap: &FeatureMap<f32>) -> Result<Self> {
        let c = fmap.channels();
        let (w, h) = fmap.image_size();
        let mut descriptors = vec![0.0f32; points.len() * c];
        for (p, out) in points.iter().zip(descriptors.chunks_exact_mut(c)) {
            let taps = fmap.taps(&to_normalized(p, w, h)?)?;
            fmap.sample_into(&taps, out);
        }
        Ok(Self { points, scores, descriptors: l2_normalized_rows(&descriptors, c), channels: c })
    }

    /// PFK1: magic, u32 K, u32 C, then K records of `x, y, score, C` f32, little-endian.
    pub fn write_pfk1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"PFK1")?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for k in 0..self.len() {
            w.write_all(&(self.points[k].x as f32).to_le_bytes())?;
            w.write_all(&(self.points[k].y as f32).to_le_bytes())?;
            w.write_all(&self.scores[k].to_le_bytes())?;
            for v in self.descriptor(k) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pfk1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::format("pfk1", "truncated header"))?;
        if &magic != b"PFK1" {
            return Err(Error::format("pfk1", "bad magic"));
        }
        let k = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let mut bytes = vec![0u8; k.checked_mul(c + 3).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::format("pfk1", "size overflow"))?];
        r.read_exact(&mut bytes).map_err(|_| Error::format("pfk1", "truncated records"))?;
        let f: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut set = KeypointSet::empty(c);
        for rec in f.chunks_exact(c + 3) {
            set.points.push(Pt2::new(rec[0] as f64, rec[1] as f64));
            set.scores.push(rec[2]);
            set.descriptors.extend_from_slice(&rec[3..]);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_pfk1(BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_pfk1(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Sigmoid, NMS, score threshold, then the top `max_keypoints` by score
/// (ties broken by row-major position). Keypoints sit at pixel centers.
pub fn select_keypoints(logits: &[f32], height: usize, width: usize, cfg: &ExtractConfig) -> Result<(Vec<Pt2>, Vec<f32>)> {
    let scores: Vec<f32> = logits.iter().map(|&v| sigmoid(v)).collect();
    let keep = nms(&scores, height, width, cfg.nms_size)?;
    let mut cands: Vec<(usize, f32)> = keep
        .iter()
        .enumerate()
        .filter(|(i, &k)| k && cfg.score_threshold.is_none_or(|t| scores[*i] >= t))
        .map(|(i, _)| (i, scores[i]))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(cfg.max_keypoints);
    let points = cands.iter().map(|&(i, _)| Pt2::new((i % width) as f64 + 0.5, (i / width) as f64 + 0.5)).collect();
    Ok((points, cands.iter().map(|c| c.1).collect()))
}

/// Frozen descriptor and detector networks.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub desc: DescriptorNet<f32>,
    pub det: DetectorNet<f32>,
}

impl Extractor {
    pub fn new(desc: DescriptorNet<f32>, det: DetectorNet<f32>) -> Result<Self> {
        if det.desc_channels() != desc.channels() {
            return Err(Error::invalid("detector and descriptor disagree on descriptor width"));
        }
        Ok(Self { desc, det })
    }

    /// Dense descriptor map and pre-sigmoid heatmap.
    pub fn dense(&self, image: &GrayImage) -> Result<(FeatureMap<f32>, Tensor<f32>)> {
        let t = image.to_tensor();
        let (out, _) = self.desc.forward(&t)?;
        let (heat, _) = self.det.forward(&t, &out.fmap, &out.mid)?;
        Ok((out.fmap, heat))
    }

    pub fn extract(&self, image: &GrayImage, cfg: &ExtractConfig) -> Result<KeypointSet> {
        let (fmap, heat) = self.dense(image)?;
        let (points, scores) = select_keypoints(&heat.data, heat.h, heat.w, cfg)?;
        KeypointSet::from_points(points, scores, &fmap)
    }
}

/// A match between keypoint `i` of set 1 and `j` of set 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub sim: f32,
}

fn argmax_first(v: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, x) in v.enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((k, x));
        }
    }
    best
}

/// Mutual nearest neighbours under dot-product similarity (ties resolve to
/// the lowest index). With `ratio`, a match also needs
/// `d_best < ratio * d_second` in Euclidean distance, checked from both sides.
pub fn mutual_nn_match<T: Real>(d1: &[T], d2: &[T], channels: usize, ratio: Option<f64>) -> Vec<Match> {
    if channels == 0 || d1.is_empty() || d2.is_empty() {
        return Vec::new();
    }
    let (n1, n2) = (d1.len() / channels, d2.len() / channels);
    let row = |i: usize| &d1[i * channels..(i + 1) * channels];
    let col = |j: usize| &d2[j * channels..(j + 1) * channels];
    let sim: Vec<f64> = (0..n1).flat_map(|i| (0..n2).map(move |j| dot_f64(row(i), col(j)))).collect();
    let best12: Vec<usize> = (0..n1).map(|i| argmax_first((0..n2).map(|j| sim[i * n2 + j])).unwrap().0).collect();
    let best21: Vec<usize> = (0..n2).map(|j| argmax_first((0..n1).map(|i| sim[i * n2 + j])).unwrap().0).collect();
    let sq = |a: &[T]| a.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
    let norms1: Vec<f64> = (0..n1).map(|i| sq(row(i))).collect();
    let norms2: Vec<f64> = (0..n2).map(|j| sq(col(j))).collect();
    let dist = |i: usize, j: usize| (norms1[i] + norms2[j] - 2.0 * sim[i * n2 + j]).max(0.0).sqrt();
    let passes_ratio = |i: usize, j: usize, r: f64| {
        let d = dist(i, j);
        let second12 = (0..n2).filter(|&k| k != j).map(|k| dist(i, k)).fold(f64::INFINITY, f64::min);
        let second21 = (0..n1).filter(|&k| k != i).map(|k| dist(k, j)).fold(f64::INFINITY, f64::min);
        d < r * second12 && d < r * second21
    };
    (0..n1)
        .filter_map(|i| {
            let j = best12[i];
            if best21[j] != i {
                return None;
            }
            if let Some(r) = ratio {
                if !passes_ratio(i, j, r) {
                    return None;
                }
            }
            Some(Match { i, j, sim: sim[i * n2 + j] as f32 })
        })
        .collect()
}

/// `i,j,sim` lines with a header.
pub fn matches_csv(matches: &[Match]) -> String {
    let mut s = String::from("i,j,sim\n");
    for m in matches {
        s.push_str(&format!("{},{},{}\n", m.i, m.j, m.sim));
    }
    s
}

pub fn parse_matches_csv(text: &str) -> Result<Vec<Match>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with('i')) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("matches", format!("line {}: {line:?}", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Match {
            i: f[0].trim().parse().map_err(|_| bad())?,
            j: f[1].trim().parse().map_err(|_| bad())?,
            sim: f[2].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nms(h: &[f32], hh: usize, ww: usize, win: usize) -> Vec<bool> {
        let r = win as isize / 2;
        (0..hh * ww)
            .map(|p| {
                let (y, x) = ((p / ww) as isize, (p % ww) as isize);
                let mut ok = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= hh as isize || xx >= ww as isize {
                            continue;
                        }
                        if h[yy as usize * ww + xx as usize] >= h[p] {
                            ok = false;
                        }
                    }
                }
                ok
            })
            .collect()
    }

    #[test]
    fn nms_examples() {
        let mut h = vec![0.0f32; 25];
        h[12] = 1.0;
        let k = nms(&h, 5, 5, 3).unwrap();
        assert_eq!(k.iter().filter(|&&v| v).count(), 1);
        assert!(k[12]);
        assert!(nms(&[0.5; 25], 5, 5, 3).unwrap().iter().all(|&v| !v));
        assert!(nms(&h, 5, 5, 2).is_err());
    }

    #[test]
    fn nms_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for win in [1, 3, 5, 7] {
            // Coarse quantization forces ties.
            let h: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0..6) as f32).collect();
            assert_eq!(nms(&h, 32, 32, win).unwrap(), brute_nms(&h, 32, 32, win));
        }
    }

    #[test]
    fn selection_threshold_and_cap() {
        let mut logits = vec![-5.0f32; 64];
        logits[9] = 3.0;
        logits[50] = 2.0;
        let cfg = ExtractConfig { nms_size: 3, score_threshold: None, max_keypoints: 1, ratio: None };
        let (p, s) = select_keypoints(&logits, 8, 8, &cfg).unwrap();
        assert_eq!(p, vec![Pt2::new(1.5, 1.5)]);
        assert_eq!(s.len(), 1);
        let cfg = ExtractConfig { score_threshold: Some(1.0), max_keypoints: 10, ..cfg };
        assert!(select_keypoints(&logits, 8, 8, &cfg).unwrap().0.is_empty());
        let cfg = ExtractConfig { score_threshold: None, ..cfg };
        let (_, s) = select_keypoints(&logits, 8, 8, &cfg).unwrap();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn identical_sets_match_identically() {
        let d: Vec<f32> = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = mutual_nn_match(&d, &d, 3, None);
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn duplicates_leave_one_mutual_match() {
        let d1 = vec![1.0f32, 0.0, 1.0, 0.0];
        let d2 = vec![1.0f32, 0.0];
        let m = mutual_nn_match(&d1, &d2, 2, None);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].i, m[0].j), (0, 0));
    }

    #[test]
    fn ratio_test_rejects_ambiguous() {
        // Distances from the query: 1.0 to the best, 1.1 to the second.
        let d1 = vec![0.0f32, 0.0];
        let d2 = vec![1.0f32, 0.0, 0.0, 1.1];
        assert_eq!(mutual_nn_match(&d1, &d2, 2, None).len(), 1);
        assert!(mutual_nn_match(&d1, &d2, 2, Some(0.8)).is_empty());
        // A lone candidate has no second neighbour and passes.
        assert_eq!(mutual_nn_match(&d1, &d2[..2], 2, Some(0.8)).len(), 1);
    }

    #[test]
    fn empty_inputs_give_no_matches() {
        assert!(mutual_nn_match::<f32>(&[], &[1.0], 1, None).is_empty());
    }

    #[test]
    fn pfk1_round_trip_and_csv() {
        let set = KeypointSet { points: vec![Pt2::new(1.5, 2.5)], scores: vec![0.75], descriptors: vec![0.5, -1.0], channels: 2 };
        let mut b = Vec::new();
        set.write_pfk1(&mut b).unwrap();
        assert_eq!(KeypointSet::read_pfk1(&b[..]).unwrap(), set);
        assert!(KeypointSet::read_pfk1(&b[..b.len() - 1]).is_err());
        let m = vec![Match { i: 0, j: 3, sim: 0.25 }];
        assert_eq!(parse_matches_csv(&matches_csv(&m)).unwrap(), m);
    }
}
