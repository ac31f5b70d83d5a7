use std::collections::BTreeMap;

use fsad_core::backbone::{DualEncoderOutput, FeatureGrid};
use fsad_core::eval::{auroc, pixel_auroc, pro, DEFAULT_FPR_CAP};
use fsad_core::memory::build_memory;
use fsad_core::scoring::{fuse, gaussian_smooth, upsample_bilinear};
use fsad_core::training::{clip_contrastive_loss, eam_loss};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn grid(side: usize, dim: usize, values: &[f64]) -> FeatureGrid<f64> {
    let cells = Array2::from_shape_vec((side * side, dim), values.to_vec()).unwrap();
    FeatureGrid::new(side, side, cells).unwrap()
}

fn shot(side: usize, dim: usize, a: &[f64], b: &[f64]) -> DualEncoderOutput<f64> {
    let mut layer_taps = BTreeMap::new();
    layer_taps.insert(3, grid(side, dim, a));
    layer_taps.insert(8, grid(side, dim, b));
    DualEncoderOutput {
        cls_feature: Array1::zeros(dim),
        patch_map: grid(side, dim, a),
        layer_taps,
    }
}

fn arb_shot(side: usize, dim: usize) -> impl Strategy<Value = DualEncoderOutput<f64>> {
    let n = side * side * dim;
    (prop::collection::vec(0.05f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))
        .prop_map(move |(a, b)| shot(side, dim, &a, &b))
}

fn unit(v: Vec<f64>) -> Array1<f64> {
    let a = Array1::from(v);
    let n = a.dot(&a).sqrt().max(1e-9);
    a / n
}

fn brute_force(query: &DualEncoderOutput<f64>, shots: &[DualEncoderOutput<f64>]) -> Array2<f64> {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let g = &query.layer_taps[&3];
    let mut out = Array2::zeros((g.height, g.width));
    for layer in [3, 8] {
        let q = &query.layer_taps[&layer];
        for r in 0..q.height {
            for c in 0..q.width {
                let mut best = f64::INFINITY;
                for s in shots {
                    for m in s.layer_taps[&layer].cells.rows() {
                        best = best.min(0.5 * (1.0 - cos(q.cell(r, c), m)));
                    }
                }
                out[[r, c]] += best / 2.0;
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn memory_matches_brute_force(shots in prop::collection::vec(arb_shot(3, 4), 1..4), query in arb_shot(3, 4)) {
        let mem = build_memory(&shots).unwrap();
        let fast = mem.vision_score_map(&query).unwrap();
        let slow = brute_force(&query, &shots);
        for (a, b) in fast.iter().zip(slow.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn memory_shots_score_zero_against_themselves(shots in prop::collection::vec(arb_shot(3, 4), 1..3)) {
        let mem = build_memory(&shots).unwrap();
        for s in &shots {
            prop_assert!(mem.vision_score_map(s).unwrap().iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn adding_memory_never_raises_scores(shots in prop::collection::vec(arb_shot(2, 3), 1..3),
                                         extra in arb_shot(2, 3), query in arb_shot(2, 3)) {
        let mut mem = build_memory(&shots).unwrap();
        let before = mem.vision_score_map(&query).unwrap();
        for layer in [3, 8] {
            mem.extend(layer, &extra.layer_taps[&layer].cells).unwrap();
        }
        let after = mem.vision_score_map(&query).unwrap();
        for (b, a) in before.iter().zip(after.iter()) {
            prop_assert!(*a <= *b + 1e-12);
        }
    }

    #[test]
    fn fuse_is_symmetric_bounded_and_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, d in 0.0f64..0.5) {
        let f = fuse(a, b);
        prop_assert_eq!(f, fuse(b, a));
        prop_assert!(f <= a.min(b) + 1e-12);
        prop_assert!(fuse(a + d, b) >= f - 1e-15);
        prop_assert!((fuse(a, a) - a / 2.0).abs() < 1e-9);
    }

    #[test]
    fn resampling_stays_in_unit_interval(v in prop::collection::vec(0.0f64..=1.0, 9), sigma in 0.0f64..5.0) {
        let m = Array2::from_shape_vec((3, 3), v).unwrap();
        let up = upsample_bilinear(&m, 17, 13);
        let s = gaussian_smooth(&up, sigma);
        prop_assert!(up.iter().chain(s.iter()).all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
    }

    #[test]
    fn losses_are_nonnegative_and_eam_is_bounded(
        z in prop::collection::vec(-1.0f64..1.0, 4),
        wn in prop::collection::vec(-1.0f64..1.0, 4),
        wa in prop::collection::vec(-1.0f64..1.0, 4),
        others in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..5),
        tau in 0.01f64..1.0,
    ) {
        let (z, wn, wa) = (unit(z), unit(wn), unit(wa));
        let anomaly: Vec<Array1<f64>> = others.into_iter().map(unit).collect();
        let clip = clip_contrastive_loss(z.view(), wn.view(), &anomaly, tau).unwrap();
        prop_assert!(clip >= 0.0);
        let mut reversed = anomaly.clone();
        reversed.reverse();
        let clip_rev = clip_contrastive_loss(z.view(), wn.view(), &reversed, tau).unwrap();
        prop_assert!((clip - clip_rev).abs() < 1e-9);
        let eam = eam_loss(z.view(), wn.view(), wa.view());
        let d_n = (&z - &wn).dot(&(&z - &wn)).sqrt();
        prop_assert!(eam >= 0.0 && eam <= d_n + 1e-12);
    }

    #[test]
    fn auroc_flips_under_negation_and_ignores_monotone_maps(
        scores in prop::collection::hash_set(-1000i32..1000, 4..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 100.0).collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| flips[i] ^ (i % 2 == 0)).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert!((a - auroc(&warped, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pixel_metrics_ignore_monotone_maps(v in prop::collection::vec(0.0f64..1.0, 36), m in prop::collection::vec(any::<bool>(), 36)) {
        prop_assume!(m.iter().any(|&x| x) && m.iter().any(|&x| !x));
        let map = Array2::from_shape_vec((6, 6), v).unwrap();
        let mask = Array2::from_shape_vec((6, 6), m.iter().map(|&b| b as u8).collect()).unwrap();
        let warped = map.mapv(|x| x.powi(3) * 5.0 - 2.0);
        let a = pixel_auroc(std::slice::from_ref(&map), std::slice::from_ref(&mask)).unwrap();
        let b = pixel_auroc(std::slice::from_ref(&warped), std::slice::from_ref(&mask)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let p = pro(&[map], std::slice::from_ref(&mask), DEFAULT_FPR_CAP).unwrap();
        let q = pro(&[warped], &[mask], DEFAULT_FPR_CAP).unwrap();
        prop_assert!((p - q).abs() < 1e-9 && (0.0..=1.0).contains(&p));
    }
}
