//! End-to-end acceptance criteria A1-A8. Runs as a plain binary so every
//! criterion prints its verdict line even when it passes.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use posfeat::config::{Profile, SearchStrategy, TrainConfig};
use posfeat::desc_train::{aggregate_desc_loss, dense_epipolar_distance, pair_loss, pair_queries, DescTrainer, QueryLossItem, TrainingPair};
use posfeat::det_train::{
    candidate_match_precision, detection_loss, keypoint_distribution, log_prob_backward, truncate_pm, CandidateSet, DetTrainer, JointTrainer,
};
use posfeat::eval::{aggregate, match_errors, mma, mmascore, mmascore_weights, EvalRow};
use posfeat::featuremap::{FeatureMap, NormalizedPoint};
use posfeat::geometry::{epipolar_line, epipolar_reward, point_line_distance, Pt2};
use posfeat::inference::{mutual_nn_match, nms, Extractor, KeypointSet};
use posfeat::sampling::grid_random_queries;
use posfeat::search::{soft_match, soft_match_backward, WindowPatch};
use posfeat::synth::{make_planar_pair, make_two_view_scene, planar_suite, sample_correspondences, PoseRange, SynthScene, TextureConfig};
use posfeat::tinynet::{Checkpoint, DescriptorNet, DetectorNet, Module};

// Shared synthetic suite.
const SIZE: usize = 64;
const TRAIN_PAIRS: usize = 20;
const HELD_OUT_PAIRS: usize = 5;
const REPETITIVE_FRACTION: f64 = 0.15;
const STAGE1_ITERATIONS: usize = 1000;
const STAGE2_ITERATIONS: usize = 1000;
const SEEDS: [u64; 3] = [0, 1, 2];

// Pinned tolerances.
const FD_REL_TOL: f64 = 1e-3;
const FD_REL_FLOOR: f64 = 1e-5;
const A3_TARGET_PX: f64 = 3.0;
const A4_MIN_RELATIVE_GAIN: f64 = 0.20;
const A4_DRAWS: usize = 16;

fn texture() -> TextureConfig {
    TextureConfig { repetitive_fraction: REPETITIVE_FRACTION, ..TextureConfig::default() }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 1, seed, ..TrainConfig::default() }
}

struct Suite {
    train: Vec<TrainingPair>,
    held_scenes: Vec<SynthScene>,
    held: Vec<TrainingPair>,
}

fn to_pair(s: &SynthScene) -> TrainingPair {
    TrainingPair { image1: s.image1.clone(), image2: s.image2.clone(), fundamental: s.fundamental().unwrap() }
}

fn suite(seed: u64) -> Suite {
    let range = PoseRange::default();
    let train = planar_suite(100 + 1000 * seed, TRAIN_PAIRS, SIZE, SIZE, &texture(), &range).unwrap();
    let held_scenes = planar_suite(50_000 + 1000 * seed, HELD_OUT_PAIRS, SIZE, SIZE, &texture(), &range).unwrap();
    Suite { train: train.iter().map(to_pair).collect(), held: held_scenes.iter().map(to_pair).collect(), held_scenes }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_REL_FLOOR)
}

fn checkpoint_hash(ckpt: &Checkpoint) -> String {
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    format!("{:x}", Sha256::digest(&bytes))
}

/// Outcome of one criterion: verdict plus a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- A1

fn a1_soft_match(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..50 {
        let (h, w, c) = (rng.gen_range(4..10), rng.gen_range(4..10), rng.gen_range(2..8));
        let fmap = FeatureMap::<f64>::new(h, w, c, 4, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let center = NormalizedPoint::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        let s = rng.gen_range(3..7);
        let patch = WindowPatch::new(center, rng.gen_range(0.05..0.3), s, &fmap).unwrap();
        let query: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let up = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let value = |q: &[f64], p: &WindowPatch<f64>| {
            let m = soft_match(q, p).unwrap();
            up[0] * m.point.u + up[1] * m.point.v
        };
        let m = soft_match(&query, &patch).unwrap();
        let g = soft_match_backward(&query, &patch, &m, up);
        let eps = 1e-6;
        for k in 0..c {
            let (mut a, mut b) = (query.clone(), query.clone());
            a[k] += eps;
            b[k] -= eps;
            let numeric = (value(&a, &patch) - value(&b, &patch)) / (2.0 * eps);
            worst = worst.max(rel_err(numeric, g.query[k]));
            checks += 1;
        }
        for _ in 0..5 {
            let k = rng.gen_range(0..patch.samples.descriptors.len());
            let (mut a, mut b) = (patch.clone(), patch.clone());
            a.samples.descriptors[k] += eps;
            b.samples.descriptors[k] -= eps;
            let numeric = (value(&query, &a) - value(&query, &b)) / (2.0 * eps);
            worst = worst.max(rel_err(numeric, g.samples[k]));
            checks += 1;
        }
    }
    (checks, worst)
}

fn a1_descriptor_loss(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let cfg = TrainConfig { g_d: 8, ..TrainConfig::default() };
    for scene_seed in 0..10u64 {
        let scene = make_planar_pair(900 + scene_seed, 32, 32, &TextureConfig::default(), &PoseRange::default(), None).unwrap();
        let f = scene.fundamental().unwrap();
        let mut net: DescriptorNet<f64> = DescriptorNet::<f32>::new(16, false, 40 + scene_seed).cast();
        let (i1, i2) = (scene.image1.to_tensor().cast::<f64>(), scene.image2.to_tensor().cast::<f64>());
        let (q, noise) = pair_queries(&cfg, 32, 32, scene_seed, 0).unwrap();
        let (o1, c1) = net.forward(&i1).unwrap();
        let (o2, c2) = net.forward(&i2).unwrap();
        let base = pair_loss(&o1.fmap, &o2.fmap, &f, &q, &noise, &cfg, None).unwrap();
        assert!(!base.aggregate.skipped);
        net.zero_grad();
        net.backward(&c1, &base.grad1, None, false);
        net.backward(&c2, &base.grad2, None, false);
        // Coarse selections and spreads are constants of the step.
        let pin = base.coarse.clone();
        let weights = base.aggregate.weights.clone();
        let value = |n: &DescriptorNet<f64>| {
            let (a, _) = n.forward(&i1).unwrap();
            let (b, _) = n.forward(&i2).unwrap();
            let pl = pair_loss(&a.fmap, &b.fmap, &f, &q, &noise, &cfg, Some(&pin)).unwrap();
            pl.items.iter().zip(&weights).map(|(it, w)| w * it.loss).sum::<f64>()
        };
        let eps = 1e-6;
        for _ in 0..5 {
            let n_params = net.params().len();
            let pi = rng.gen_range(0..n_params);
            let k = rng.gen_range(0..net.params()[pi].len());
            let analytic = net.params()[pi].grad[k];
            let mut plus = net.clone();
            plus.params_mut()[pi].value[k] += eps;
            let mut minus = net.clone();
            minus.params_mut()[pi].value[k] -= eps;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * eps);
            worst = worst.max(rel_err(numeric, analytic));
            checks += 1;
        }
    }
    (checks, worst)
}

fn a1_detection_loss(rng: &mut ChaCha8Rng) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..50 {
        let g = [2usize, 4, 8][rng.gen_range(0..3)];
        let (h, w) = (g * rng.gen_range(1..4), g * rng.gen_range(1..4));
        let heat: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dist = keypoint_distribution(&heat, h, w, g).unwrap();
        let pick = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let (rows, cols) = (h / g, w / g);
            let mut out = Vec::new();
            for cell in 0..rows * cols {
                if rng.gen_bool(0.7) {
                    let (r, c) = (cell / cols * g + rng.gen_range(0..g), cell % cols * g + rng.gen_range(0..g));
                    out.push(r * w + c);
                }
            }
            out
        };
        let (mut s1, mut s2) = (pick(rng), pick(rng));
        if s1.is_empty() {
            s1.push(0);
        }
        if s2.is_empty() {
            s2.push(w - 1);
        }
        let c1 = CandidateSet::from_indices(&dist, &heat, s1);
        let c2 = CandidateSet::from_indices(&dist, &heat, s2);
        let n = c1.len() * c2.len();
        let pm: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let reward: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { -0.25 }).collect();
        let lambda_reg = -0.001;
        let loss = detection_loss(&pm, &reward, &c1.log_probs, &c2.log_probs, lambda_reg).unwrap();
        let g1 = log_prob_backward(&dist, &c1, &loss.dlogp1);
        let g2 = log_prob_backward(&dist, &c2, &loss.dlogp2);
        let surrogate = |hm: &[f64]| {
            let d = keypoint_distribution(hm, h, w, g).unwrap();
            let a = CandidateSet::from_indices(&d, hm, c1.indices.clone());
            let b = CandidateSet::from_indices(&d, hm, c2.indices.clone());
            detection_loss(&pm, &reward, &a.log_probs, &b.log_probs, lambda_reg).unwrap().loss
        };
        let eps = 1e-6;
        for k in 0..h * w {
            let (mut a, mut b) = (heat.clone(), heat.clone());
            a[k] += eps;
            b[k] -= eps;
            let numeric = (surrogate(&a) - surrogate(&b)) / (2.0 * eps);
            worst = worst.max(rel_err(numeric, g1[k] + g2[k]));
            checks += 1;
        }
    }
    (checks, worst)
}

fn a1() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (na, wa) = a1_soft_match(&mut rng);
    let (nb, wb) = a1_descriptor_loss(&mut rng);
    let (nc, wc) = a1_detection_loss(&mut rng);
    let secs = t.elapsed().as_secs_f64();
    let pass = wa < FD_REL_TOL && wb < FD_REL_TOL && wc < FD_REL_TOL && secs < 60.0;
    verdict(
        pass,
        format!(
            "max rel err soft_match {wa:.2e} ({na} checks), descriptor loss through net {wb:.2e} ({nb}), detection surrogate {wc:.2e} ({nc}); tol {FD_REL_TOL:.0e}; {secs:.1}s (< 60s)"
        ),
    )
}

// ---------------------------------------------------------------- A2

fn a2() -> Verdict {
    let t = Instant::now();
    let (mut worst_res, mut worst_hf) = (0.0f64, 0.0f64);
    let mut n_corr = 0;
    let range = PoseRange::default();
    for seed in 0..100u64 {
        let scene = if seed % 2 == 0 {
            make_planar_pair(seed, SIZE, SIZE, &TextureConfig::default(), &range, None).unwrap()
        } else {
            make_two_view_scene(seed, SIZE, SIZE, (2.0, 4.0), &range, &TextureConfig::default(), None).unwrap()
        };
        let f = scene.fundamental().unwrap();
        for (x1, x2) in sample_correspondences(&scene, 50, seed) {
            worst_res = worst_res.max(f.residual(&x1, &x2).abs() / f.matrix().norm());
            n_corr += 1;
        }
        if let Some(h) = &scene.homography {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let x = Pt2::new(rng.gen_range(0.0..SIZE as f64), rng.gen_range(0.0..SIZE as f64));
                let y = h.apply(&x).unwrap();
                worst_hf = worst_hf.max(point_line_distance(&epipolar_line(&f, &x).unwrap(), &y));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_res < 1e-9 && worst_hf < 1e-8 && secs < 30.0 && n_corr > 0;
    verdict(pass, format!("max normalized residual {worst_res:.2e} (< 1e-9, {n_corr} correspondences), planar H/F distance {worst_hf:.2e}px (< 1e-8); {secs:.1}s (< 30s)"))
}

// ---------------------------------------------------------------- A3 / A4

struct Stage1 {
    suite: Suite,
    net: DescriptorNet<f32>,
    ckpt: Checkpoint,
    untrained: (f64, usize),
    curve: Vec<(usize, f64, usize)>,
    deterministic: bool,
    elapsed: Duration,
}

fn stage1(seed: u64, suite: Suite, search: SearchStrategy, track: bool) -> Stage1 {
    let t = Instant::now();
    let cfg = TrainConfig { search, ..train_config(seed) };
    let mut trainer = DescTrainer::new(cfg.clone()).unwrap();
    let untrained = dense_epipolar_distance(&trainer.net, &suite.held).unwrap();
    let mut curve = Vec::new();
    let mut deterministic = true;
    let window = 200;
    let mut done = 0;
    while done < STAGE1_ITERATIONS {
        // The first 50 iterations double as a determinism probe.
        let next = if track && done == 0 { 50 } else { (done / window + 1) * window }.min(STAGE1_ITERATIONS);
        trainer.train(&suite.train, next - done, |_| {}).unwrap();
        done = next;
        if track && done == 50 {
            let mut again = DescTrainer::new(cfg.clone()).unwrap();
            again.train(&suite.train, 50, |_| {}).unwrap();
            deterministic = checkpoint_hash(&again.checkpoint()) == checkpoint_hash(&trainer.checkpoint());
        }
        if track && done % window == 0 {
            let (d, m) = dense_epipolar_distance(&trainer.net, &suite.held).unwrap();
            curve.push((done, d, m));
        }
    }
    let ckpt = trainer.checkpoint();
    Stage1 { suite, net: trainer.net, ckpt, untrained, curve, deterministic, elapsed: t.elapsed() }
}

fn a3(s1: &Stage1) -> Verdict {
    let (d0, m0) = s1.untrained;
    let (_, d, m) = *s1.curve.last().unwrap();
    let curve: Vec<String> = s1.curve.iter().map(|(i, d, _)| format!("{i}:{d:.2}")).collect();
    let mut monotone = true;
    for w in s1.curve.windows(2) {
        if w[0].1 >= A3_TARGET_PX && w[1].1 >= w[0].1 {
            monotone = false;
        }
    }
    let secs = s1.elapsed.as_secs_f64();
    let pass = d < A3_TARGET_PX && d < d0 && s1.deterministic && secs < 600.0;
    verdict(
        pass,
        format!(
            "held-out mutual-NN epipolar distance {d0:.2}px ({m0} matches) untrained -> {d:.2}px ({m} matches) after {STAGE1_ITERATIONS} its (< {A3_TARGET_PX}px); 200-it curve [{}] monotone-until-target={monotone}; deterministic={}; {secs:.0}s (< 600s)",
            curve.join(" "),
            s1.deterministic
        ),
    )
}

struct Stage2 {
    det: DetectorNet<f32>,
    before: (f64, usize),
    after: (f64, usize),
    desc_unchanged: bool,
    elapsed: Duration,
}

fn stage2(seed: u64, s1: &Stage1) -> Stage2 {
    let t = Instant::now();
    let cfg = train_config(seed);
    let hash_before = checkpoint_hash(&s1.ckpt);
    let frozen = s1.ckpt.descriptor().unwrap();
    let mut trainer = DetTrainer::new(frozen, cfg.clone()).unwrap();
    let before = candidate_match_precision(&s1.net, &trainer.det, &s1.suite.held, &cfg, 7, A4_DRAWS).unwrap();
    trainer.train(&s1.suite.train, STAGE2_ITERATIONS, |_| {}).unwrap();
    let after = candidate_match_precision(&s1.net, &trainer.det, &s1.suite.held, &cfg, 7, A4_DRAWS).unwrap();
    let hash_after = checkpoint_hash(&Checkpoint::from_descriptor(trainer.descriptor(), None, &s1.ckpt.meta.config, s1.ckpt.meta.iteration));
    let hash_stored = checkpoint_hash(&Checkpoint::from_descriptor(&s1.ckpt.descriptor().unwrap(), None, &s1.ckpt.meta.config, s1.ckpt.meta.iteration));
    Stage2 {
        det: trainer.det,
        before,
        after,
        desc_unchanged: hash_after == hash_stored && hash_before == checkpoint_hash(&s1.ckpt),
        elapsed: t.elapsed(),
    }
}

fn a4(s2: &Stage2) -> Verdict {
    let ((p0, n0), (p1, n1)) = (s2.before, s2.after);
    let gain = if p0 > 0.0 { p1 / p0 - 1.0 } else { f64::NAN };
    let secs = s2.elapsed.as_secs_f64();
    let pass = n1 > 0 && gain >= A4_MIN_RELATIVE_GAIN && s2.desc_unchanged && secs < 600.0;
    verdict(
        pass,
        format!(
            "fraction of matched candidate pairs within eps=2px {p0:.3} ({n0} matches) untrained -> {p1:.3} ({n1} matches) after {STAGE2_ITERATIONS} its, relative gain {:+.1}% (needs >= +{:.0}%); descriptor hash unchanged={}; {secs:.0}s (< 600s)",
            100.0 * gain,
            100.0 * A4_MIN_RELATIVE_GAIN,
            s2.desc_unchanged
        ),
    )
}

// ---------------------------------------------------------------- A5

fn grid_keypoints() -> Vec<Pt2> {
    (0..SIZE / 4).flat_map(|r| (0..SIZE / 4).map(move |c| Pt2::new(c as f64 * 4.0 + 2.0, r as f64 * 4.0 + 2.0))).collect()
}

fn score_pairs(held: &[SynthScene], mut keypoints: impl FnMut(&SynthScene) -> (KeypointSet, KeypointSet)) -> f64 {
    let rows: Vec<EvalRow> = held
        .iter()
        .map(|s| {
            let (k1, k2) = keypoints(s);
            let m = mutual_nn_match(&k1.descriptors, &k2.descriptors, k1.channels, None);
            EvalRow::new(s.seed.to_string(), &match_errors(&m, &k1.points, &k2.points, s.homography.as_ref().unwrap()).unwrap())
        })
        .collect();
    aggregate(&rows).score
}

/// Descriptor-only score with a fixed keypoint set shared by all models.
fn fixed_keypoint_score(net: &DescriptorNet<f32>, held: &[SynthScene]) -> f64 {
    score_pairs(held, |s| {
        let (o1, _) = net.forward(&s.image1.to_tensor()).unwrap();
        let (o2, _) = net.forward(&s.image2.to_tensor()).unwrap();
        let pts = grid_keypoints();
        let ones = vec![1.0; pts.len()];
        (KeypointSet::from_points(pts.clone(), ones.clone(), &o1.fmap).unwrap(), KeypointSet::from_points(pts, ones, &o2.fmap).unwrap())
    })
}

fn pipeline_score(desc: &DescriptorNet<f32>, det: &DetectorNet<f32>, held: &[SynthScene]) -> f64 {
    let ex = Extractor::new(desc.clone(), det.clone()).unwrap();
    let cfg = Profile::Hpatches.extract_config();
    score_pairs(held, |s| (ex.extract(&s.image1, &cfg).unwrap(), ex.extract(&s.image2, &cfg).unwrap()))
}

struct SeedScores {
    seed: u64,
    l2w: f64,
    c2f: f64,
    decoupled: f64,
    joint: f64,
}

fn a5_seed(seed: u64, reuse: Option<(&Stage1, &Stage2)>) -> SeedScores {
    let owned;
    let (l2w, det) = match reuse {
        Some((s1, s2)) => (s1, s2.det.clone()),
        None => {
            owned = stage1(seed, suite(seed), SearchStrategy::LineToWindow, false);
            let s2 = stage2(seed, &owned);
            (&owned, s2.det)
        }
    };
    let held = &l2w.suite.held_scenes;
    let c2f = stage1(seed, suite(seed), SearchStrategy::CoarseToFine, false);
    let mut joint = JointTrainer::new(train_config(seed)).unwrap();
    joint.train(&l2w.suite.train, STAGE1_ITERATIONS, |_| {}).unwrap();
    SeedScores {
        seed,
        l2w: fixed_keypoint_score(&l2w.net, held),
        c2f: fixed_keypoint_score(&c2f.net, held),
        decoupled: pipeline_score(&l2w.net, &det, held),
        joint: pipeline_score(&joint.desc, &joint.det, held),
    }
}

fn a5(scores: &[SeedScores], rep: f64) -> Verdict {
    let n = scores.len() as f64;
    let dj = scores.iter().map(|s| s.decoupled - s.joint).sum::<f64>() / n;
    let lc = scores.iter().map(|s| s.l2w - s.c2f).sum::<f64>() / n;
    let per: Vec<String> = scores
        .iter()
        .map(|s| format!("seed {}: decoupled {:.3} joint {:.3} l2w {:.3} c2f {:.3}", s.seed, s.decoupled, s.joint, s.l2w, s.c2f))
        .collect();
    let pass = dj > 0.0 && lc > 0.0 && rep >= 0.10;
    verdict(
        pass,
        format!(
            "held-out MMAscore margins over {} seeds: decoupled-joint {dj:+.4}, line-to-window-coarse-to-fine {lc:+.4} (both need > 0); repetitive fraction {rep:.3}; [{}]",
            scores.len(),
            per.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- A6

fn a6() -> Verdict {
    let t = Instant::now();
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let w = mmascore_weights();
    check("weights sum 14.5", (w.iter().sum::<f64>() - 14.5).abs() < 1e-12);
    check("all-ones mmascore", (mmascore(&mma(&[0.5; 7])) - 1.0).abs() < 1e-12);
    let errors: Vec<f64> = (1..=10).map(|t| t as f64 - 0.5).collect();
    let curve = mma(&errors);
    check("t/10 curve", curve.values.iter().enumerate().all(|(k, v)| (v - (k + 1) as f64 / 10.0).abs() < 1e-12));
    check("t/10 mmascore", (mmascore(&curve) - 0.493103).abs() < 1e-6);
    let item = |loss: f64, sigma: f64| QueryLossItem { loss, sigma, mask: true, query: Pt2::new(0.0, 0.0), soft_point: Pt2::new(0.0, 0.0) };
    check("weighted loss 8/3", (aggregate_desc_loss(&[item(2.0, 1.0), item(4.0, 2.0)]).unwrap().loss - 8.0 / 3.0).abs() < 1e-9);
    check(
        "truncation table",
        truncate_pm(&[0.5, 0.95, 0.5, 0.9], &[1.0, 1.0, -0.25, 1.0], 1.0, 0.9) == vec![0.0, 0.95, 0.5, 0.9],
    );
    let cfg = TrainConfig::default();
    check("reward at eps", epipolar_reward(2.0, &cfg) == 1.0);
    check("reward inside", epipolar_reward(1.999, &cfg) == 1.0);
    check("reward outside", epipolar_reward(2.0 + 1e-9, &cfg) == -0.25);
    let s: f64 = 0.37;
    let d = keypoint_distribution(&[s; 64], 8, 8, 8).unwrap();
    let expect = 1.0 / (1.0 + (-s).exp()) / 64.0;
    check("uniform cell P_kp", (0..64).all(|i| (d.p_kp(i) - expect).abs() < 1e-15));
    let secs = t.elapsed().as_secs_f64();
    let pass = fails.is_empty() && secs < 5.0;
    verdict(pass, format!("mmascore/weights/8-3/truncation/reward/P_kp checks, failures: {fails:?}; {secs:.2}s (< 5s)"))
}

// ---------------------------------------------------------------- A7

fn nms_reference(heat: &[f32], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = k as i64 / 2;
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let mut keep = true;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    if (yy, xx) == (y, x) || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    if heat[yy as usize * w + xx as usize] >= heat[i] {
                        keep = false;
                    }
                }
            }
            keep
        })
        .collect()
}

fn mutual_reference(d1: &[f32], d2: &[f32], c: usize) -> Vec<(usize, usize)> {
    let (n1, n2) = (d1.len() / c, d2.len() / c);
    let sim = |i: usize, j: usize| (0..c).map(|k| d1[i * c + k] as f64 * d2[j * c + k] as f64).sum::<f64>();
    let table: Vec<Vec<f64>> = (0..n1).map(|i| (0..n2).map(|j| sim(i, j)).collect()).collect();
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for (k, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = k;
            }
        }
        best
    };
    let mut out = Vec::new();
    for (i, row) in table.iter().enumerate() {
        let j = argmax(row);
        let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
        if argmax(&col) == i {
            out.push((i, j));
        }
    }
    out
}

fn a7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut nms_bad = 0;
    for t in 0..100 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let k = [1, 3, 5, 7][t % 4];
        // Coarse quantization produces plateaus and ties.
        let levels = if t % 2 == 0 { 5 } else { 1000 };
        let heat: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0..levels) as f32 / levels as f32).collect();
        if nms(&heat, h, w, k).unwrap() != nms_reference(&heat, h, w, k) {
            nms_bad += 1;
        }
    }
    let mut nn_bad = 0;
    for t in 0..50 {
        let c = rng.gen_range(1..9);
        let (n1, n2) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let levels = if t % 2 == 0 { 3 } else { 10_000 };
        let mut gen = |n: usize| -> Vec<f32> { (0..n * c).map(|_| rng.gen_range(0..levels) as f32 / levels as f32 - 0.5).collect() };
        let (d1, d2) = (gen(n1), gen(n2));
        let got: Vec<(usize, usize)> = mutual_nn_match(&d1, &d2, c, None).iter().map(|m| (m.i, m.j)).collect();
        if got != mutual_reference(&d1, &d2, c) {
            nn_bad += 1;
        }
    }
    let mut occ_bad = 0;
    for t in 0..100u64 {
        let q = grid_random_queries(SIZE, SIZE, 16, t, t * 3).unwrap();
        let mut counts = BTreeMap::new();
        for p in &q.points {
            *counts.entry(((p.y / 16.0).floor() as i64, (p.x / 16.0).floor() as i64)).or_insert(0) += 1;
        }
        let cells = (SIZE / 16) * (SIZE / 16);
        if counts.len() != cells || counts.values().any(|&v| v != 1) || counts.keys().any(|&(r, c)| r < 0 || c < 0 || r >= 4 || c >= 4) {
            occ_bad += 1;
        }
    }
    verdict(
        nms_bad == 0 && nn_bad == 0 && occ_bad == 0,
        format!("NMS mismatches {nms_bad}/100, mutual-NN mismatches {nn_bad}/50, grid occupancy violations {occ_bad}/100"),
    )
}

// ---------------------------------------------------------------- A8

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_posfeat")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline_hashes(root: &Path) -> BTreeMap<String, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let (desc, det) = (root.join("desc.pfw"), root.join("det.pfw"));
    let scene = data.join("scene_0000");
    run_cli(&["synth", "--seed", "100", "--count", "20", "--repetitive", "0.15", "--out", &s(&data)]);
    run_cli(&["train-desc", "--seed", "0", "--data", &s(&data), "--out", &s(&desc), "--iterations", "100", "--batch-size", "1"]);
    run_cli(&["train-det", "--seed", "0", "--data", &s(&data), "--desc", &s(&desc), "--out", &s(&det), "--iterations", "100", "--batch-size", "1"]);
    for (img, out) in [("img1.pgm", "a.pfk"), ("img2.pgm", "b.pfk")] {
        run_cli(&["extract", "--image", &s(&scene.join(img)), "--desc", &s(&desc), "--det", &s(&det), "--out", &s(&root.join(out))]);
    }
    run_cli(&["match", "--feat1", &s(&root.join("a.pfk")), "--feat2", &s(&root.join("b.pfk")), "--out", &s(&root.join("m.csv"))]);
    run_cli(&[
        "eval",
        "--feat1",
        &s(&root.join("a.pfk")),
        "--feat2",
        &s(&root.join("b.pfk")),
        "--matches",
        &s(&root.join("m.csv")),
        "--homography",
        &s(&scene.join("H.txt")),
        "--out",
        &s(&root.join("e.csv")),
        "--dat",
        &s(&root.join("e.dat")),
    ]);
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, format!("{:x}", Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn a8() -> Verdict {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = pipeline_hashes(a.path());
    let hb = pipeline_hashes(b.path());
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    let pass = ha.len() == hb.len() && differing.is_empty() && ha.len() > 20;
    verdict(
        pass,
        format!("synth/train-desc/train-det/extract/match/eval run twice: {} files, differing {differing:?}; {:.0}s", ha.len(), t.elapsed().as_secs_f64()),
    )
}

// ---------------------------------------------------------------- driver

fn report(id: &str, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!("{id} {title}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() {
    // `cargo test` forwards harness flags; listing must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report("A1", "gradient fidelity", a1);
    ok &= report("A2", "geometry oracle", a2);
    ok &= report("A6", "exact-arithmetic units", a6);
    ok &= report("A7", "brute-force equivalences", a7);

    let s1 = stage1(SEEDS[0], suite(SEEDS[0]), SearchStrategy::LineToWindow, true);
    ok &= report("A3", "stage-1 learning", || a3(&s1));
    let s2 = stage2(SEEDS[0], &s1);
    ok &= report("A4", "stage-2 learning", || a4(&s2));
    ok &= report("A5", "decoupling ablation", || {
        let rep = suite(SEEDS[0]).held_scenes.iter().map(|s| s.repetitive_fraction()).sum::<f64>() / HELD_OUT_PAIRS as f64;
        let mut scores = vec![a5_seed(SEEDS[0], Some((&s1, &s2)))];
        for &seed in &SEEDS[1..] {
            scores.push(a5_seed(seed, None));
        }
        a5(&scores, rep)
    });
    ok &= report("A8", "reproducibility", a8);
    if !ok {
        std::process::exit(1);
    }
}
