//! Weakly supervised descriptor training from relative pose.
//!
//! Each query in image 1 is searched along its epipolar line in image 2;
//! the soft correspondence is penalized by its distance to that line, and
//! queries are weighted by the inverse spread of their match distribution.

use log::{debug, info};

use crate::config::{SearchStrategy, TrainConfig};
use crate::error::{Error, Result};
use crate::featuremap::{from_normalized, to_normalized, FeatureMap, NormalizedPoint};
use crate::geometry::{clip_line_to_image, epipolar_line, point_line_distance, EpipolarLine, FundamentalMatrix, Pt2};
use crate::image::GrayImage;
use crate::inference::{l2_normalized_rows, mutual_nn_match};
use crate::real::Real;
use crate::sampling::{derive_seed, grid_random_queries, CounterRng};
use crate::search::{
    argmax_index, build_grid_candidates, build_line_candidates, match_distribution, soft_match, soft_match_backward, window_center, WindowPatch,
};
use crate::tinynet::{Checkpoint, DescriptorNet, Module, SgdNesterov};

const QUERY_TAG: u64 = 1;
const NOISE_TAG: u64 = 2;
const SIGMA_FLOOR: f64 = 1e-6;

/// Per-query loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLossItem {
    /// Distance of the soft correspondence to the epipolar line, in pixels.
    pub loss: f64,
    /// Spread of the window distribution, in squared pixels.
    pub sigma: f64,
    pub mask: bool,
    pub query: Pt2,
    pub soft_point: Pt2,
}

/// Point-to-line distance and its gradient with respect to the point.
pub fn epipolar_loss(soft_point: &Pt2, line: &EpipolarLine) -> (f64, [f64; 2]) {
    let r = line.signed_distance(soft_point);
    let s = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    (point_line_distance(line, soft_point), [s * line.a, s * line.b])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescAggregate {
    pub loss: f64,
    /// `dL/dloss_i`: normalized weights `(M_i / sigma_i) / sum_k (M_k / sigma_k)`.
    pub weights: Vec<f64>,
    pub skipped: bool,
}

/// Inverse-spread weighted mean of the masked per-query losses.
pub fn aggregate_desc_loss(items: &[QueryLossItem]) -> Result<DescAggregate> {
    if items.is_empty() {
        return Err(Error::invalid("aggregate_desc_loss needs at least one item"));
    }
    let raw: Vec<f64> = items
        .iter()
        .map(|it| if it.mask { 1.0 / it.sigma.max(SIGMA_FLOOR) } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Ok(DescAggregate { loss: 0.0, weights: vec![0.0; items.len()], skipped: true });
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let loss = weights.iter().zip(items).map(|(w, it)| w * it.loss).sum();
    Ok(DescAggregate { loss, weights, skipped: false })
}

/// One image pair with its epipolar supervision (`F` maps image-1 points to image-2 lines).
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub image1: GrayImage,
    pub image2: GrayImage,
    pub fundamental: FundamentalMatrix,
}

/// Query points and window noise for one pair at one iteration.
pub fn pair_queries(cfg: &TrainConfig, width: usize, height: usize, pair_index: u64, iteration: u64) -> Result<(Vec<Pt2>, Vec<[f64; 2]>)> {
    let q = grid_random_queries(width, height, cfg.g_d, derive_seed(cfg.seed, QUERY_TAG, pair_index), iteration)?;
    let mut rng = CounterRng::new(derive_seed(cfg.seed, NOISE_TAG, pair_index), iteration);
    let noise = (0..q.len()).map(|i| rng.unit_pair(i as u64)).collect();
    Ok((q.points, noise))
}

/// Loss and feature-map gradients for one pair.
#[derive(Debug, Clone)]
pub struct PairLoss<T> {
    pub items: Vec<QueryLossItem>,
    /// Coarse selection per query; `None` where the query was masked.
    pub coarse: Vec<Option<NormalizedPoint>>,
    pub aggregate: DescAggregate,
    pub grad1: FeatureMap<T>,
    pub grad2: FeatureMap<T>,
}

/// Runs the search for every query and backpropagates the aggregate loss to
/// both feature maps. `coarse_override` pins the coarse selections (used to
/// probe the loss surface without argmax flips).
pub fn pair_loss<T: Real>(
    fmap1: &FeatureMap<T>,
    fmap2: &FeatureMap<T>,
    fundamental: &FundamentalMatrix,
    queries: &[Pt2],
    noise: &[[f64; 2]],
    cfg: &TrainConfig,
    coarse_override: Option<&[Option<NormalizedPoint>]>,
) -> Result<PairLoss<T>> {
    if noise.len() != queries.len() {
        return Err(Error::invalid("one noise vector per query required"));
    }
    let (w1, h1) = fmap1.image_size();
    let (w2, h2) = fmap2.image_size();
    let c = fmap1.channels();
    if fmap2.channels() != c {
        return Err(Error::invalid("feature maps disagree on channel count"));
    }
    let grid = match cfg.search {
        SearchStrategy::CoarseToFine if coarse_override.is_none() => Some(build_grid_candidates(fmap2)?),
        _ => None,
    };

    struct Live<T> {
        query_desc: Vec<T>,
        query_taps: crate::featuremap::BilinearTaps,
        patch: WindowPatch<T>,
        matched: crate::search::SoftMatch,
        line: EpipolarLine,
    }

    let mut items = Vec::with_capacity(queries.len());
    let mut coarse_out = Vec::with_capacity(queries.len());
    let mut live: Vec<Option<Live<T>>> = Vec::with_capacity(queries.len());
    for (i, x) in queries.iter().enumerate() {
        let masked = |items: &mut Vec<QueryLossItem>| {
            items.push(QueryLossItem { loss: 0.0, sigma: 0.0, mask: false, query: *x, soft_point: *x });
        };
        let line = match epipolar_line(fundamental, x) {
            Ok(l) => l,
            Err(_) => {
                masked(&mut items);
                coarse_out.push(None);
                live.push(None);
                continue;
            }
        };
        let segment = clip_line_to_image(&line, w2, h2);
        let Some(segment) = segment else {
            masked(&mut items);
            coarse_out.push(None);
            live.push(None);
            continue;
        };
        let xn = to_normalized(x, w1, h1)?;
        let query_taps = fmap1.taps(&xn)?;
        let mut query_desc = vec![T::zero(); c];
        fmap1.sample_into(&query_taps, &mut query_desc);

        let coarse = match coarse_override {
            Some(o) => match o.get(i).copied().flatten() {
                Some(p) => p,
                None => {
                    masked(&mut items);
                    coarse_out.push(None);
                    live.push(None);
                    continue;
                }
            },
            None => {
                let cands = match &grid {
                    Some(g) => g.clone(),
                    None => build_line_candidates(&segment, cfg.n_line, fmap2)?,
                };
                let dist = match_distribution(&query_desc, &cands.descriptors, &cands.points)?;
                dist.support[argmax_index(&dist)?]
            }
        };
        let center = window_center(&coarse, cfg.w_patch, noise[i])?;
        let patch = WindowPatch::new(center, cfg.w_patch, cfg.patch_lattice_s, fmap2)?;
        let matched = soft_match(&query_desc, &patch)?;
        let soft_point = from_normalized(&matched.point, w2, h2);
        let (loss, _) = epipolar_loss(&soft_point, &line);
        items.push(QueryLossItem { loss, sigma: matched.sigma_pixels(w2, h2), mask: true, query: *x, soft_point });
        coarse_out.push(Some(coarse));
        live.push(Some(Live { query_desc, query_taps, patch, matched, line }));
    }

    let aggregate = aggregate_desc_loss(&items)?;
    let mut grad1 = FeatureMap::zeros(fmap1.height(), fmap1.width(), c, fmap1.stride());
    let mut grad2 = FeatureMap::zeros(fmap2.height(), fmap2.width(), c, fmap2.stride());
    if !aggregate.skipped {
        for ((l, it), &wgt) in live.iter().zip(&items).zip(&aggregate.weights) {
            let Some(l) = l else { continue };
            if wgt == 0.0 {
                continue;
            }
            let (_, g) = epipolar_loss(&it.soft_point, &l.line);
            // Pixel gradient to normalized-coordinate gradient.
            let upstream = [wgt * g[0] * w2, wgt * g[1] * h2];
            let sg = soft_match_backward(&l.query_desc, &l.patch, &l.matched, upstream);
            grad1.accumulate(&l.query_taps, &sg.query);
            for (j, taps) in l.patch.samples.taps.iter().enumerate() {
                grad2.accumulate(taps, &sg.samples[j * c..(j + 1) * c]);
            }
        }
    }
    Ok(PairLoss { items, coarse: coarse_out, aggregate, grad1, grad2 })
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub skipped: bool,
}

/// Scales every entry of a feature-map gradient.
fn scale_map<T: Real>(m: &mut FeatureMap<T>, s: f64) {
    let s = T::of(s);
    for v in m.data_mut() {
        *v *= s;
    }
}

/// Loss and parameter gradients for one pair, accumulated into `net`'s grads
/// after scaling by `scale`.
pub fn accumulate_pair_gradients<T: Real>(
    net: &mut DescriptorNet<T>,
    pair: &TrainingPair,
    cfg: &TrainConfig,
    pair_index: u64,
    iteration: u64,
    scale: f64,
) -> Result<PairLoss<T>> {
    let to_t = |img: &GrayImage| img.to_tensor().cast::<T>();
    let (img1, img2) = (to_t(&pair.image1), to_t(&pair.image2));
    let (out1, cache1) = net.forward(&img1)?;
    let (out2, cache2) = net.forward(&img2)?;
    let (queries, noise) = pair_queries(cfg, pair.image1.width, pair.image1.height, pair_index, iteration)?;
    let mut pl = pair_loss(&out1.fmap, &out2.fmap, &pair.fundamental, &queries, &noise, cfg, None)?;
    if !pl.aggregate.skipped {
        scale_map(&mut pl.grad1, scale);
        scale_map(&mut pl.grad2, scale);
        net.backward(&cache1, &pl.grad1, None, false);
        net.backward(&cache2, &pl.grad2, None, false);
    }
    Ok(pl)
}

/// Descriptor network, optimizer state and schedule position.
#[derive(Debug, Clone)]
pub struct DescTrainer {
    pub net: DescriptorNet<f32>,
    pub opt: SgdNesterov<f32>,
    pub cfg: TrainConfig,
    pub iteration: u64,
}

impl DescTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = DescriptorNet::new(cfg.descriptor_channels, cfg.normalize_descriptors, derive_seed(cfg.seed, 0, 0));
        let opt = SgdNesterov::new(cfg.lr, cfg.momentum);
        Ok(Self { net, opt, cfg, iteration: 0 })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { net: ckpt.descriptor()?, opt: ckpt.optimizer(), cfg: ckpt.meta.config.clone(), iteration: ckpt.meta.iteration })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_descriptor(&self.net, Some(&self.opt), &self.cfg, self.iteration)
    }

    /// Pair indices used at a given iteration: consecutive, cycling through the set.
    pub fn batch_indices(&self, n_pairs: usize, iteration: u64) -> Vec<usize> {
        let b = self.cfg.batch_size;
        (0..b).map(|k| ((iteration as usize) * b + k) % n_pairs).collect()
    }

    /// One optimizer step over `batch_size` pairs. All-masked batches are skipped.
    pub fn step(&mut self, pairs: &[TrainingPair]) -> Result<LossRecord> {
        if pairs.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        let it = self.iteration;
        let batch = self.batch_indices(pairs.len(), it);
        self.net.zero_grad();
        // Gradients are accumulated unscaled, then normalized by the count of valid pairs.
        let mut losses = Vec::with_capacity(batch.len());
        for &k in &batch {
            let pl = accumulate_pair_gradients(&mut self.net, &pairs[k], &self.cfg, k as u64, it, 1.0)?;
            if pl.aggregate.skipped {
                debug!("iteration {it}: pair {k} fully masked");
            } else {
                losses.push(pl.aggregate.loss);
            }
        }
        self.iteration += 1;
        if losses.is_empty() {
            info!("iteration {it}: all queries masked, step skipped");
            return Ok(LossRecord { iteration: it, loss: 0.0, skipped: true });
        }
        let inv = 1.0 / losses.len() as f32;
        for p in self.net.params_mut() {
            for g in &mut p.grad {
                *g *= inv;
            }
        }
        self.opt.step(self.net.params_mut());
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok(LossRecord { iteration: it, loss, skipped: false })
    }

    pub fn train(&mut self, pairs: &[TrainingPair], iterations: usize, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut curve = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let r = self.step(pairs)?;
            on_step(&r);
            curve.push(r);
        }
        Ok(curve)
    }
}

/// `iteration,loss` lines; skipped iterations are omitted.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration,loss\n");
    for r in records.iter().filter(|r| !r.skipped) {
        s.push_str(&format!("{},{:.9}\n", r.iteration, r.loss));
    }
    s
}

/// Mean epipolar distance of mutual-nearest-neighbour matches between the
/// unit-length texel-center descriptors of each pair. Texels whose epipolar line misses
/// image 2 are excluded. Returns `(mean distance, match count)`.
pub fn dense_epipolar_distance(net: &DescriptorNet<f32>, pairs: &[TrainingPair]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let (o1, _) = net.forward(&pair.image1.to_tensor())?;
        let (o2, _) = net.forward(&pair.image2.to_tensor())?;
        let (w, h) = o2.fmap.image_size();
        let centers = |m: &FeatureMap<f32>| -> Vec<Pt2> {
            (0..m.height())
                .flat_map(|r| (0..m.width()).map(move |c| (r, c)))
                .map(|(r, c)| from_normalized(&m.texel_center(r, c), w, h))
                .collect()
        };
        let (p1, p2) = (centers(&o1.fmap), centers(&o2.fmap));
        let visible: Vec<usize> = p1
            .iter()
            .enumerate()
            .filter(|(_, x)| epipolar_line(&pair.fundamental, x).ok().and_then(|l| clip_line_to_image(&l, w, h)).is_some())
            .map(|(i, _)| i)
            .collect();
        let c = o1.fmap.channels();
        let d1: Vec<f32> = visible.iter().flat_map(|&i| o1.fmap.texel_by_index(i).iter().copied()).collect();
        let d2 = l2_normalized_rows(o2.fmap.data(), c);
        let matches = mutual_nn_match(&l2_normalized_rows(&d1, c), &d2, c, None);
        for m in matches {
            let line = epipolar_line(&pair.fundamental, &p1[visible[m.i]])?;
            total += point_line_distance(&line, &p2[m.j]);
            count += 1;
        }
    }
    if count == 0 {
        return Ok((f64::INFINITY, 0));
    }
    Ok((total / count as f64, count))
}
