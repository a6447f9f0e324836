//! Policy-gradient training of the keypoint detector on frozen descriptors.
//!
//! Keypoint candidates are drawn from a per-cell distribution, paired by a
//! dual-softmax match probability, and rewarded by their epipolar
//! consistency. The reward-weighted log-probabilities form the loss.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::desc_train::{pair_loss, pair_queries, TrainingPair};
use crate::error::{Error, Result};
use crate::featuremap::{to_normalized, BilinearTaps, FeatureMap};
use crate::geometry::{epipolar_line, epipolar_reward, point_line_distance, FundamentalMatrix, Pt2};
use crate::inference::{l2_normalized_rows, mutual_nn_match};
use crate::real::{dot_f64, Real};
use crate::sampling::derive_seed;
use crate::search::softmax_in_place;
use crate::tinynet::{Checkpoint, DescOutput, DescriptorNet, DetectorNet, Module, SgdNesterov, Tensor};

const SAMPLE_TAG: u64 = 3;

/// Per-pixel keypoint probability: softmax within each `g_k x g_k` cell
/// times the sigmoid of the same score.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDistribution {
    pub height: usize,
    pub width: usize,
    pub g_k: usize,
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl KeypointDistribution {
    pub fn cells(&self) -> (usize, usize) {
        (self.height / self.g_k, self.width / self.g_k)
    }

    /// Pixel indices of cell `cell` in row-major order.
    pub fn cell_pixels(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (_, cols) = self.cells();
        let (cr, cc) = (cell / cols, cell % cols);
        let g = self.g_k;
        (0..g).flat_map(move |dy| (0..g).map(move |dx| (cr * g + dy) * self.width + cc * g + dx))
    }

    pub fn p_kp(&self, index: usize) -> f64 {
        self.local[index] * self.global[index]
    }
}

pub fn keypoint_distribution<T: Real>(heat: &[T], height: usize, width: usize, g_k: usize) -> Result<KeypointDistribution> {
    if g_k == 0 || !height.is_multiple_of(g_k) || !width.is_multiple_of(g_k) {
        return Err(Error::invalid(format!("heatmap {width}x{height} is not divisible by cell size {g_k}")));
    }
    if heat.len() != height * width {
        return Err(Error::invalid("heatmap size mismatch"));
    }
    let s: Vec<f64> = heat.iter().map(|v| v.f64()).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("heatmap contains NaN"));
    }
    let mut dist = KeypointDistribution {
        height,
        width,
        g_k,
        local: vec![0.0; s.len()],
        global: s.iter().map(|&v| sigmoid(v)).collect(),
    };
    let (rows, cols) = dist.cells();
    for cell in 0..rows * cols {
        let idx: Vec<usize> = dist.cell_pixels(cell).collect();
        let mut v: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        if v.iter().all(|x| x.is_infinite() && *x < 0.0) {
            v.fill(0.0);
        }
        softmax_in_place(&mut v);
        for (&i, p) in idx.iter().zip(v) {
            dist.local[i] = p;
        }
    }
    Ok(dist)
}

/// Sampled keypoints, at most one per cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    /// Pixel centers.
    pub points: Vec<Pt2>,
    pub indices: Vec<usize>,
    pub cells: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_indices(dist: &KeypointDistribution, heat: &[f64], indices: Vec<usize>) -> Self {
        let w = dist.width;
        let cells = indices.iter().map(|&i| (i / w / dist.g_k) * (w / dist.g_k) + (i % w) / dist.g_k).collect();
        let points = indices.iter().map(|&i| Pt2::new((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)).collect();
        let log_probs = indices.iter().map(|&i| dist.local[i].ln() + log_sigmoid(heat[i])).collect();
        Self { points, indices, cells, log_probs }
    }
}

/// Per cell: a position from the local softmax, accepted with the probability of its sigmoid.
pub fn sample_candidates<T: Real, R: Rng>(dist: &KeypointDistribution, heat: &[T], rng: &mut R) -> CandidateSet {
    let (rows, cols) = dist.cells();
    let mut chosen = Vec::new();
    for cell in 0..rows * cols {
        let u: f64 = rng.gen();
        let accept: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        let mut last = 0;
        for i in dist.cell_pixels(cell) {
            acc += dist.local[i];
            last = i;
            if u < acc {
                pick = Some(i);
                break;
            }
        }
        let i = pick.unwrap_or(last);
        if accept < dist.global[i] {
            chosen.push(i);
        }
    }
    let h: Vec<f64> = heat.iter().map(|v| v.f64()).collect();
    CandidateSet::from_indices(dist, &h, chosen)
}

/// Candidate descriptors bilinearly sampled from a frozen map (`n x C`).
pub fn candidate_descriptors<T: Real>(fmap: &FeatureMap<T>, cands: &CandidateSet) -> Result<(Vec<T>, Vec<BilinearTaps>)> {
    let c = fmap.channels();
    let (w, h) = fmap.image_size();
    let mut out = vec![T::zero(); cands.len() * c];
    let mut taps = Vec::with_capacity(cands.len());
    for (p, d) in cands.points.iter().zip(out.chunks_exact_mut(c)) {
        let t = fmap.taps(&to_normalized(p, w, h)?)?;
        fmap.sample_into(&t, d);
        taps.push(t);
    }
    Ok((out, taps))
}

/// `S[i][j] = d1_i . d2_j`, row-major `n1 x n2`.
pub fn similarity_matrix<T: Real>(d1: &[T], d2: &[T], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || d1.is_empty() || d2.is_empty() || !d1.len().is_multiple_of(channels) || !d2.len().is_multiple_of(channels) {
        return Err(Error::invalid("similarity needs non-empty descriptor sets"));
    }
    let (n1, n2) = (d1.len() / channels, d2.len() / channels);
    Ok((0..n1)
        .flat_map(|i| (0..n2).map(move |j| dot_f64(&d1[i * channels..(i + 1) * channels], &d2[j * channels..(j + 1) * channels])))
        .collect())
}

/// Dual softmax with its two factors kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbability {
    pub n1: usize,
    pub n2: usize,
    pub pm: Vec<f64>,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

/// Row-wise softmax times column-wise softmax of `S`.
pub fn match_probability(s: &[f64], n1: usize, n2: usize) -> Result<MatchProbability> {
    if s.len() != n1 * n2 || n1 == 0 || n2 == 0 {
        return Err(Error::invalid("similarity matrix shape mismatch"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("similarity matrix is not finite"));
    }
    let mut row = s.to_vec();
    for r in row.chunks_exact_mut(n2) {
        softmax_in_place(r);
    }
    let mut col = vec![0.0; s.len()];
    let mut buf = vec![0.0; n1];
    for j in 0..n2 {
        for i in 0..n1 {
            buf[i] = s[i * n2 + j];
        }
        softmax_in_place(&mut buf);
        for i in 0..n1 {
            col[i * n2 + j] = buf[i];
        }
    }
    let pm = row.iter().zip(&col).map(|(a, b)| a * b).collect();
    Ok(MatchProbability { n1, n2, pm, row, col })
}

/// `dL/dS` given `dL/dP_m`.
pub fn match_probability_backward(mp: &MatchProbability, grad_pm: &[f64]) -> Vec<f64> {
    let (n1, n2) = (mp.n1, mp.n2);
    let da: Vec<f64> = grad_pm.iter().zip(&mp.col).map(|(g, b)| g * b).collect();
    let db: Vec<f64> = grad_pm.iter().zip(&mp.row).map(|(g, a)| g * a).collect();
    let mut ds = vec![0.0; n1 * n2];
    for i in 0..n1 {
        let r = i * n2..(i + 1) * n2;
        let inner: f64 = mp.row[r.clone()].iter().zip(&da[r.clone()]).map(|(a, d)| a * d).sum();
        for k in r {
            ds[k] += mp.row[k] * (da[k] - inner);
        }
    }
    for j in 0..n2 {
        let inner: f64 = (0..n1).map(|i| mp.col[i * n2 + j] * db[i * n2 + j]).sum();
        for i in 0..n1 {
            let k = i * n2 + j;
            ds[k] += mp.col[k] * (db[k] - inner);
        }
    }
    ds
}

/// `lambda_p` where `y_j` lies within `epsilon` of the epipolar line of `x_i`, else `lambda_n`.
pub fn reward_matrix(q1: &[Pt2], q2: &[Pt2], fundamental: &FundamentalMatrix, cfg: &TrainConfig) -> Vec<f64> {
    q1.iter()
        .flat_map(|x| {
            let line = epipolar_line(fundamental, x).ok();
            q2.iter().map(move |y| match &line {
                Some(l) => epipolar_reward(point_line_distance(l, y), cfg),
                None => cfg.lambda_n,
            })
        })
        .collect()
}

/// Zeroes positive-reward entries whose probability is below `threshold`.
pub fn truncate_pm(pm: &[f64], reward: &[f64], lambda_p: f64, threshold: f64) -> Vec<f64> {
    pm.iter().zip(reward).map(|(&p, &r)| if r == lambda_p && p < threshold { 0.0 } else { p }).collect()
}

/// Loss value and its gradient with respect to each candidate's log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub loss: f64,
    pub dlogp1: Vec<f64>,
    pub dlogp2: Vec<f64>,
}

/// `-(1/(n1+n2)) (sum_ij W_ij (lp1_i + lp2_j) + lambda_reg (sum lp1 + sum lp2))`
/// with `W = P_m R` held constant.
pub fn detection_loss(pm_truncated: &[f64], reward: &[f64], logp1: &[f64], logp2: &[f64], lambda_reg: f64) -> Result<DetectionLoss> {
    let (n1, n2) = (logp1.len(), logp2.len());
    if n1 == 0 || n2 == 0 {
        debug!("empty candidate set; detection loss is zero");
        return Ok(DetectionLoss { loss: 0.0, dlogp1: vec![0.0; n1], dlogp2: vec![0.0; n2] });
    }
    if pm_truncated.len() != n1 * n2 || reward.len() != n1 * n2 {
        return Err(Error::invalid("reward and probability matrices must be n1 x n2"));
    }
    let norm = 1.0 / (n1 + n2) as f64;
    let w: Vec<f64> = pm_truncated.iter().zip(reward).map(|(p, r)| p * r).collect();
    let row_w: Vec<f64> = (0..n1).map(|i| w[i * n2..(i + 1) * n2].iter().sum()).collect();
    let col_w: Vec<f64> = (0..n2).map(|j| (0..n1).map(|i| w[i * n2 + j]).sum()).collect();
    let mut total = 0.0;
    for i in 0..n1 {
        total += (row_w[i] + lambda_reg) * logp1[i];
    }
    for j in 0..n2 {
        total += (col_w[j] + lambda_reg) * logp2[j];
    }
    Ok(DetectionLoss {
        loss: -norm * total,
        dlogp1: row_w.iter().map(|r| -norm * (r + lambda_reg)).collect(),
        dlogp2: col_w.iter().map(|c| -norm * (c + lambda_reg)).collect(),
    })
}

/// Chains `dL/dlog P_kp` at the candidates into `dL/dheatmap`.
pub fn log_prob_backward(dist: &KeypointDistribution, cands: &CandidateSet, dlogp: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; dist.height * dist.width];
    for ((&idx, &cell), &d) in cands.indices.iter().zip(&cands.cells).zip(dlogp) {
        if d == 0.0 {
            continue;
        }
        for k in dist.cell_pixels(cell) {
            g[k] -= d * dist.local[k];
        }
        g[idx] += d;
        g[idx] += d * (1.0 - dist.global[idx]);
    }
    g
}

/// Everything computed for one pair in one detector step.
#[derive(Debug, Clone)]
pub struct PairDetection {
    pub cands1: CandidateSet,
    pub cands2: CandidateSet,
    pub reward: Vec<f64>,
    pub pm: MatchProbability,
    pub pm_truncated: Vec<f64>,
    pub loss: DetectionLoss,
    pub grad_heat1: Vec<f64>,
    pub grad_heat2: Vec<f64>,
}

impl PairDetection {
    /// Reward collected by the truncated match probability, per candidate.
    pub fn mean_reward(&self) -> f64 {
        let n = (self.cands1.len() + self.cands2.len()) as f64;
        self.pm_truncated.iter().zip(&self.reward).map(|(p, r)| p * r).sum::<f64>() / n
    }

    /// Fraction of all candidate pairs whose reward is positive.
    pub fn positive_fraction(&self, lambda_p: f64) -> f64 {
        self.reward.iter().filter(|&&r| r == lambda_p).count() as f64 / self.reward.len() as f64
    }
}

fn candidate_rng(cfg: &TrainConfig, pair_index: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, SAMPLE_TAG, pair_index), iteration, 0))
}

/// Sampling, matching, reward and loss for one pair. `None` when either view
/// produced no candidates.
pub fn detect_pair<T: Real>(
    heat1: &Tensor<T>,
    heat2: &Tensor<T>,
    fmap1: &FeatureMap<T>,
    fmap2: &FeatureMap<T>,
    fundamental: &FundamentalMatrix,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Option<(PairDetection, KeypointDistribution, KeypointDistribution)>> {
    let dist1 = keypoint_distribution(&heat1.data, heat1.h, heat1.w, cfg.g_k)?;
    let dist2 = keypoint_distribution(&heat2.data, heat2.h, heat2.w, cfg.g_k)?;
    let cands1 = sample_candidates(&dist1, &heat1.data, rng);
    let cands2 = sample_candidates(&dist2, &heat2.data, rng);
    if cands1.is_empty() || cands2.is_empty() {
        debug!("empty candidate set ({} / {})", cands1.len(), cands2.len());
        return Ok(None);
    }
    let (d1, _) = candidate_descriptors(fmap1, &cands1)?;
    let (d2, _) = candidate_descriptors(fmap2, &cands2)?;
    let s = similarity_matrix(&d1, &d2, fmap1.channels())?;
    let pm = match_probability(&s, cands1.len(), cands2.len())?;
    let reward = reward_matrix(&cands1.points, &cands2.points, fundamental, cfg);
    let pm_truncated = truncate_pm(&pm.pm, &reward, cfg.lambda_p, cfg.pm_truncation);
    let loss = detection_loss(&pm_truncated, &reward, &cands1.log_probs, &cands2.log_probs, cfg.lambda_reg)?;
    let grad_heat1 = log_prob_backward(&dist1, &cands1, &loss.dlogp1);
    let grad_heat2 = log_prob_backward(&dist2, &cands2, &loss.dlogp2);
    Ok(Some((PairDetection { cands1, cands2, reward, pm, pm_truncated, loss, grad_heat1, grad_heat2 }, dist1, dist2)))
}

/// One row of the reward curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    pub iteration: u64,
    pub mean_reward: f64,
    pub loss: f64,
    pub skipped: bool,
}

pub fn reward_csv(records: &[RewardRecord]) -> String {
    let mut s = String::from("iteration,mean_reward,loss\n");
    for r in records.iter().filter(|r| !r.skipped) {
        s.push_str(&format!("{},{:.9},{:.9}\n", r.iteration, r.mean_reward, r.loss));
    }
    s
}

fn heat_tensor(g: &[f64], h: usize, w: usize, scale: f64) -> Tensor<f32> {
    Tensor::from_vec(1, h, w, g.iter().map(|v| (v * scale) as f32).collect())
}

fn batch_indices(cfg: &TrainConfig, n_pairs: usize, iteration: u64) -> Vec<usize> {
    let b = cfg.batch_size;
    (0..b).map(|k| ((iteration as usize) * b + k) % n_pairs).collect()
}

fn scale_grads<T: Real>(params: Vec<&mut crate::tinynet::Param<T>>, s: f64) {
    let s = T::of(s);
    for p in params {
        for g in &mut p.grad {
            *g *= s;
        }
    }
}

/// Detector training against a frozen descriptor network.
#[derive(Debug, Clone)]
pub struct DetTrainer {
    pub det: DetectorNet<f32>,
    pub opt: SgdNesterov<f32>,
    pub cfg: TrainConfig,
    pub iteration: u64,
    desc: DescriptorNet<f32>,
    frozen: Vec<Option<(DescOutput<f32>, DescOutput<f32>)>>,
}

impl DetTrainer {
    pub fn new(desc: DescriptorNet<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if desc.channels() != cfg.descriptor_channels {
            return Err(Error::invalid("descriptor checkpoint width disagrees with the config"));
        }
        let det = DetectorNet::new(desc.channels(), derive_seed(cfg.seed, 0, 1));
        let opt = SgdNesterov::new(cfg.lr, cfg.momentum);
        Ok(Self { det, opt, cfg, iteration: 0, desc, frozen: Vec::new() })
    }

    pub fn resume(desc: DescriptorNet<f32>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(desc, ckpt.meta.config.clone())?;
        t.det = ckpt.detector()?;
        t.opt = ckpt.optimizer();
        t.iteration = ckpt.meta.iteration;
        Ok(t)
    }

    pub fn descriptor(&self) -> &DescriptorNet<f32> {
        &self.desc
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_detector(&self.det, Some(&self.opt), &self.cfg, self.iteration)
    }

    fn frozen_maps(&mut self, pairs: &[TrainingPair], k: usize) -> Result<&(DescOutput<f32>, DescOutput<f32>)> {
        if self.frozen.len() != pairs.len() {
            self.frozen = vec![None; pairs.len()];
        }
        if self.frozen[k].is_none() {
            let (a, _) = self.desc.forward(&pairs[k].image1.to_tensor())?;
            let (b, _) = self.desc.forward(&pairs[k].image2.to_tensor())?;
            self.frozen[k] = Some((a, b));
        }
        Ok(self.frozen[k].as_ref().expect("filled above"))
    }

    pub fn step(&mut self, pairs: &[TrainingPair]) -> Result<RewardRecord> {
        if pairs.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        let it = self.iteration;
        self.det.zero_grad();
        let mut rewards = Vec::new();
        let mut losses = Vec::new();
        for k in batch_indices(&self.cfg, pairs.len(), it) {
            let (o1, o2) = self.frozen_maps(pairs, k)?.clone();
            let (img1, img2) = (pairs[k].image1.to_tensor(), pairs[k].image2.to_tensor());
            let (heat1, c1) = self.det.forward(&img1, &o1.fmap, &o1.mid)?;
            let (heat2, c2) = self.det.forward(&img2, &o2.fmap, &o2.mid)?;
            let mut rng = candidate_rng(&self.cfg, k as u64, it);
            let Some((pd, _, _)) = detect_pair(&heat1, &heat2, &o1.fmap, &o2.fmap, &pairs[k].fundamental, &self.cfg, &mut rng)? else {
                continue;
            };
            self.det.backward(&c1, &heat_tensor(&pd.grad_heat1, heat1.h, heat1.w, 1.0), false);
            self.det.backward(&c2, &heat_tensor(&pd.grad_heat2, heat2.h, heat2.w, 1.0), false);
            rewards.push(pd.mean_reward());
            losses.push(pd.loss.loss);
        }
        self.iteration += 1;
        if losses.is_empty() {
            debug!("iteration {it}: no candidates in any pair, step skipped");
            return Ok(RewardRecord { iteration: it, mean_reward: 0.0, loss: 0.0, skipped: true });
        }
        let n = losses.len() as f64;
        scale_grads(self.det.params_mut(), 1.0 / n);
        self.opt.step(self.det.params_mut());
        Ok(RewardRecord { iteration: it, mean_reward: rewards.iter().sum::<f64>() / n, loss: losses.iter().sum::<f64>() / n, skipped: false })
    }

    pub fn train(&mut self, pairs: &[TrainingPair], iterations: usize, mut on_step: impl FnMut(&RewardRecord)) -> Result<Vec<RewardRecord>> {
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let r = self.step(pairs)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Descriptor and detector optimized together from scratch: the descriptor
/// receives the epipolar loss, the detector loss through the detector's
/// inputs, and the reward-weighted match probability through the dual softmax.
#[derive(Debug, Clone)]
pub struct JointTrainer {
    pub desc: DescriptorNet<f32>,
    pub det: DetectorNet<f32>,
    pub desc_opt: SgdNesterov<f32>,
    pub det_opt: SgdNesterov<f32>,
    pub cfg: TrainConfig,
    pub iteration: u64,
}

impl JointTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let desc = DescriptorNet::new(cfg.descriptor_channels, cfg.normalize_descriptors, derive_seed(cfg.seed, 0, 0));
        let det = DetectorNet::new(cfg.descriptor_channels, derive_seed(cfg.seed, 0, 1));
        Ok(Self {
            desc,
            det,
            desc_opt: SgdNesterov::new(cfg.lr, cfg.momentum),
            det_opt: SgdNesterov::new(cfg.lr, cfg.momentum),
            cfg,
            iteration: 0,
        })
    }

    pub fn step(&mut self, pairs: &[TrainingPair]) -> Result<RewardRecord> {
        if pairs.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        let it = self.iteration;
        self.desc.zero_grad();
        self.det.zero_grad();
        let (mut n_desc, mut n_det) = (0usize, 0usize);
        let mut rewards = Vec::new();
        let mut losses = Vec::new();
        let c = self.desc.channels();
        for k in batch_indices(&self.cfg, pairs.len(), it) {
            let pair = &pairs[k];
            let (img1, img2) = (pair.image1.to_tensor(), pair.image2.to_tensor());
            let (o1, dc1) = self.desc.forward(&img1)?;
            let (o2, dc2) = self.desc.forward(&img2)?;
            let (queries, noise) = pair_queries(&self.cfg, pair.image1.width, pair.image1.height, k as u64, it)?;
            let pl = pair_loss(&o1.fmap, &o2.fmap, &pair.fundamental, &queries, &noise, &self.cfg, None)?;
            let mut g1 = pl.grad1;
            let mut g2 = pl.grad2;
            if !pl.aggregate.skipped {
                n_desc += 1;
            }
            let (heat1, c1) = self.det.forward(&img1, &o1.fmap, &o1.mid)?;
            let (heat2, c2) = self.det.forward(&img2, &o2.fmap, &o2.mid)?;
            let mut rng = candidate_rng(&self.cfg, k as u64, it);
            let mut mid_grads = (None, None);
            if let Some((pd, _, _)) = detect_pair(&heat1, &heat2, &o1.fmap, &o2.fmap, &pair.fundamental, &self.cfg, &mut rng)? {
                n_det += 1;
                let in1 = self.det.backward(&c1, &heat_tensor(&pd.grad_heat1, heat1.h, heat1.w, 1.0), true).expect("input grads");
                let in2 = self.det.backward(&c2, &heat_tensor(&pd.grad_heat2, heat2.h, heat2.w, 1.0), true).expect("input grads");
                add_map(&mut g1, &in1.fmap);
                add_map(&mut g2, &in2.fmap);
                mid_grads = (Some(in1.mid), Some(in2.mid));
                // Differentiable reward term: -(1/(n1+n2)) sum P_m R over the kept entries.
                let (n1, n2) = (pd.cands1.len(), pd.cands2.len());
                let norm = -1.0 / (n1 + n2) as f64;
                let grad_pm: Vec<f64> = pd
                    .reward
                    .iter()
                    .zip(&pd.pm_truncated)
                    .zip(&pd.pm.pm)
                    .map(|((r, t), p)| if t == p { norm * r } else { 0.0 })
                    .collect();
                let ds = match_probability_backward(&pd.pm, &grad_pm);
                let (d1, t1) = candidate_descriptors(&o1.fmap, &pd.cands1)?;
                let (d2, t2) = candidate_descriptors(&o2.fmap, &pd.cands2)?;
                for i in 0..n1 {
                    let mut gd = vec![0.0; c];
                    for j in 0..n2 {
                        let s = ds[i * n2 + j];
                        for (g, v) in gd.iter_mut().zip(&d2[j * c..(j + 1) * c]) {
                            *g += s * v.f64();
                        }
                    }
                    g1.accumulate(&t1[i], &gd);
                }
                for j in 0..n2 {
                    let mut gd = vec![0.0; c];
                    for i in 0..n1 {
                        let s = ds[i * n2 + j];
                        for (g, v) in gd.iter_mut().zip(&d1[i * c..(i + 1) * c]) {
                            *g += s * v.f64();
                        }
                    }
                    g2.accumulate(&t2[j], &gd);
                }
                let extra: f64 = grad_pm.iter().zip(&pd.pm.pm).map(|(g, p)| g * p).sum();
                rewards.push(pd.mean_reward());
                losses.push(pd.loss.loss + extra + pl.aggregate.loss);
            } else if !pl.aggregate.skipped {
                losses.push(pl.aggregate.loss);
            }
            self.desc.backward(&dc1, &g1, mid_grads.0.as_ref(), false);
            self.desc.backward(&dc2, &g2, mid_grads.1.as_ref(), false);
        }
        self.iteration += 1;
        if n_desc + n_det == 0 {
            return Ok(RewardRecord { iteration: it, mean_reward: 0.0, loss: 0.0, skipped: true });
        }
        let nb = self.cfg.batch_size.max(1) as f64;
        scale_grads(self.desc.params_mut(), 1.0 / nb);
        scale_grads(self.det.params_mut(), 1.0 / nb);
        self.desc_opt.step(self.desc.params_mut());
        self.det_opt.step(self.det.params_mut());
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(RewardRecord { iteration: it, mean_reward: mean(&rewards), loss: mean(&losses), skipped: false })
    }

    pub fn train(&mut self, pairs: &[TrainingPair], iterations: usize, mut on_step: impl FnMut(&RewardRecord)) -> Result<Vec<RewardRecord>> {
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let r = self.step(pairs)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

fn add_map<T: Real>(a: &mut FeatureMap<T>, b: &FeatureMap<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Fraction of mutual-NN matches (unit-length descriptors) among sampled candidates whose epipolar
/// distance is within `epsilon`, pooled over `pairs`. Sampling is seeded by
/// `seed` and repeated `draws` times per pair. Returns `(fraction, matches)`.
pub fn candidate_match_precision(
    desc: &DescriptorNet<f32>,
    det: &DetectorNet<f32>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    seed: u64,
    draws: usize,
) -> Result<(f64, usize)> {
    let (mut good, mut total) = (0usize, 0usize);
    for (k, pair) in pairs.iter().enumerate() {
        let (img1, img2) = (pair.image1.to_tensor(), pair.image2.to_tensor());
        let (o1, _) = desc.forward(&img1)?;
        let (o2, _) = desc.forward(&img2)?;
        let (h1, _) = det.forward(&img1, &o1.fmap, &o1.mid)?;
        let (h2, _) = det.forward(&img2, &o2.fmap, &o2.mid)?;
        let dist1 = keypoint_distribution(&h1.data, h1.h, h1.w, cfg.g_k)?;
        let dist2 = keypoint_distribution(&h2.data, h2.h, h2.w, cfg.g_k)?;
        for d in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, d as u64));
            let c1 = sample_candidates(&dist1, &h1.data, &mut rng);
            let c2 = sample_candidates(&dist2, &h2.data, &mut rng);
            if c1.is_empty() || c2.is_empty() {
                continue;
            }
            let (d1, _) = candidate_descriptors(&o1.fmap, &c1)?;
            let (d2, _) = candidate_descriptors(&o2.fmap, &c2)?;
            let c = o1.fmap.channels();
            for m in mutual_nn_match(&l2_normalized_rows(&d1, c), &l2_normalized_rows(&d2, c), c, None) {
                total += 1;
                if let Ok(line) = epipolar_line(&pair.fundamental, &c1.points[m.i]) {
                    if point_line_distance(&line, &c2.points[m.j]) <= cfg.epsilon {
                        good += 1;
                    }
                }
            }
        }
    }
    Ok((if total == 0 { 0.0 } else { good as f64 / total as f64 }, total))
}
