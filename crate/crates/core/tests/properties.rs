use proptest::prelude::*;

use posfeat::det_train::{keypoint_distribution, match_probability, truncate_pm};
use posfeat::eval::{mma, mmascore};
use posfeat::featuremap::{bilinear_taps, FeatureMap, NormalizedPoint};
use posfeat::geometry::{EpipolarLine, Pt2};
use posfeat::inference::mutual_nn_match;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
}

proptest! {
    #[test]
    fn line_normalization_ignores_projective_scale(
        a in -10.0f64..10.0, b in -10.0f64..10.0, c in -100.0f64..100.0, k in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
    ) {
        prop_assume!(a.hypot(b) > 1e-3);
        let l = EpipolarLine::from_coefficients(a, b, c).unwrap();
        let m = EpipolarLine::from_coefficients(k * a, k * b, k * c).unwrap();
        prop_assert!((l.a.hypot(l.b) - 1.0).abs() < 1e-12);
        prop_assert!((l.a - m.a).abs() < 1e-9 && (l.b - m.b).abs() < 1e-9 && (l.c - m.c).abs() < 1e-9);
        let p = l.project(&Pt2::new(c, a));
        prop_assert!(l.signed_distance(&p).abs() < 1e-9);
    }

    #[test]
    fn bilinear_sampling_is_adjoint_to_accumulation(
        (h, w) in (2usize..7, 2usize..7), u in -0.2f64..1.2, v in -0.2f64..1.2, seed in any::<u64>(),
    ) {
        let c = 3;
        let vals: Vec<f64> = (0..h * w * c).map(|i| ((seed.wrapping_add(i as u64 * 2654435761) % 1000) as f64) / 500.0 - 1.0).collect();
        let fmap = FeatureMap::new(h, w, c, 4, vals.clone()).unwrap();
        let p = NormalizedPoint::new(u, v);
        let taps = bilinear_taps(&p, h, w);
        prop_assert!((taps.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(taps.weight.iter().all(|&x| x >= -1e-15));
        let g = [0.3, -1.1, 0.7];
        let sample = fmap.sample_bilinear(&p).unwrap();
        let lhs: f64 = sample.iter().zip(&g).map(|(s, g)| s * g).sum();
        let mut acc = FeatureMap::<f64>::zeros(h, w, c, 4);
        acc.accumulate(&taps, &g);
        let rhs: f64 = acc.data().iter().zip(&vals).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn match_probability_is_bounded_and_shift_invariant(
        (n1, n2) in (1usize..6, 1usize..6), s in matrix(6, 6), shift in -20.0f64..20.0,
    ) {
        let s = &s[..n1 * n2];
        let mp = match_probability(s, n1, n2).unwrap();
        for i in 0..n1 {
            prop_assert!(mp.pm[i * n2..(i + 1) * n2].iter().sum::<f64>() <= 1.0 + 1e-12);
        }
        for j in 0..n2 {
            prop_assert!((0..n1).map(|i| mp.pm[i * n2 + j]).sum::<f64>() <= 1.0 + 1e-12);
        }
        prop_assert!(mp.pm.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
        let mq = match_probability(&shifted, n1, n2).unwrap();
        for (a, b) in mp.pm.iter().zip(&mq.pm) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_is_idempotent_and_only_removes_positive_entries(
        pm in prop::collection::vec(0.0f64..1.0, 1..40), flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let r: Vec<f64> = pm.iter().zip(&flips).map(|(_, &f)| if f { 1.0 } else { -0.25 }).collect();
        let t = truncate_pm(&pm, &r, 1.0, 0.9);
        prop_assert_eq!(&truncate_pm(&t, &r, 1.0, 0.9), &t);
        for ((p, q), r) in pm.iter().zip(&t).zip(&r) {
            prop_assert!(q == p || (*q == 0.0 && *r == 1.0 && *p < 0.9));
        }
    }

    #[test]
    fn keypoint_distribution_is_normalized_per_cell(
        heat in prop::collection::vec(-30.0f64..30.0, 64), g_k in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let d = keypoint_distribution(&heat, 8, 8, g_k).unwrap();
        let (rows, cols) = d.cells();
        for cell in 0..rows * cols {
            let total: f64 = d.cell_pixels(cell).map(|i| d.local[i]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        prop_assert!((0..64).all(|i| (0.0..=1.0).contains(&d.p_kp(i))));
    }

    #[test]
    fn mutual_nearest_neighbours_are_symmetric(
        (n1, n2) in (1usize..8, 1usize..8), d1 in matrix(8, 4), d2 in matrix(8, 4), ratio in prop::option::of(0.5f64..1.0),
    ) {
        let (a, b) = (&d1[..n1 * 4], &d2[..n2 * 4]);
        let mut fwd: Vec<(usize, usize)> = mutual_nn_match(a, b, 4, ratio).iter().map(|m| (m.i, m.j)).collect();
        let mut back: Vec<(usize, usize)> = mutual_nn_match(b, a, 4, ratio).iter().map(|m| (m.j, m.i)).collect();
        fwd.sort_unstable();
        back.sort_unstable();
        prop_assert_eq!(fwd, back);
    }

    #[test]
    fn mma_is_monotone_and_rewards_closer_matches(errors in prop::collection::vec(0.0f64..15.0, 1..50), k in 0usize..50) {
        let curve = mma(&errors);
        prop_assert!(curve.values.windows(2).all(|w| w[0] <= w[1]));
        let score = mmascore(&curve);
        prop_assert!((0.0..=1.0).contains(&score));
        let mut better = errors.clone();
        let k = k % errors.len();
        better[k] *= 0.5;
        prop_assert!(mmascore(&mma(&better)) >= score);
    }
}
