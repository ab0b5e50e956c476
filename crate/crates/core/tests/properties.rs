use proptest::collection::vec;
use proptest::prelude::*;

use synomaly::imgrid::{binarize, connected_components, normalize_unit, percentile_clip};
use synomaly::inference::{has_converged, masked_fusion, relative_change};
use synomaly::metrics::{auroc, auroc_trapezoid, pixel_metrics};
use synomaly::tensor_io::{decode_tensor, encode_tensor, Tensor};
use synomaly::{BinaryMask, Image2D};

fn mask8() -> impl Strategy<Value = BinaryMask> {
    vec(any::<bool>(), 64).prop_map(|b| BinaryMask::new(8, 8, b).unwrap())
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image2D> {
    vec(-3.0f32..3.0, w * h).prop_map(move |d| Image2D::new(w, h, d).unwrap())
}

fn pair_enumeration(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &h) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if a > h { 1.0 } else if a == h { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            // coarse grid so ties are common
            vec((0u32..12).prop_map(|v| v as f64 / 4.0), n),
            vec(any::<bool>(), n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
}

proptest! {
    #[test]
    fn overlap_scores_match_counting(p in mask8(), g in mask8()) {
        let m = pixel_metrics(&p, &g).unwrap();
        let tp = (0..64).filter(|&i| p.data()[i] && g.data()[i]).count() as f64;
        let np = p.count() as f64;
        let ng = g.count() as f64;
        if np > 0.0 && ng > 0.0 {
            prop_assert_eq!(m.dice, 2.0 * tp / (np + ng));
            prop_assert_eq!(m.precision, tp / np);
            prop_assert_eq!(m.recall, tp / ng);
        }
        if m.precision + m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.dice - h).abs() < 1e-12);
        }
        for v in [m.dice, m.precision, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn auroc_formulations_agree((s, l) in scored()) {
        let a = auroc(&s, &l).unwrap();
        prop_assert!((a - pair_enumeration(&s, &l)).abs() < 1e-9);
        prop_assert!((a - auroc_trapezoid(&s, &l).unwrap()).abs() < 1e-9);
        let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert!((auroc(&warped, &l).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn fusion_restores_outside_the_mask(a in image(8, 8), b in image(8, 8), m in mask8()) {
        let f = masked_fusion(&a, &b, &m).unwrap();
        for i in 0..64 {
            let want = if m.data()[i] { b.data()[i] } else { a.data()[i] };
            prop_assert_eq!(f.data()[i].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn stop_rule_is_total(counts in vec(0usize..50, 1..30), eps in 0.0f64..0.5) {
        for w in counts.windows(2) {
            let (prev, cur) = (w[0], w[1]);
            match relative_change(prev, cur) {
                Some(r) => {
                    prop_assert!(r.is_finite() && r >= 0.0);
                    prop_assert_eq!(has_converged(prev, cur, eps), r <= eps);
                }
                None => {
                    prop_assert!(prev == 0 && cur > 0);
                    prop_assert!(!has_converged(prev, cur, eps));
                }
            }
            if prev == 0 {
                prop_assert_eq!(has_converged(prev, cur, eps), cur == 0);
            }
        }
    }

    #[test]
    fn binarize_is_monotone_in_threshold(img in image(8, 8), t1 in -3.0f32..3.0, t2 in -3.0f32..3.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(binarize(&img, hi).is_subset_of(&binarize(&img, lo)));
    }

    #[test]
    fn components_partition_the_mask(m in mask8()) {
        let comps = connected_components(&m);
        let mut seen = [false; 64];
        for c in &comps {
            for &i in c {
                prop_assert!(m.data()[i] && !seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(seen.iter().filter(|&&s| s).count(), m.count());
    }

    #[test]
    fn clip_then_normalize_lands_in_unit_range(img in image(7, 5), p in 50.0f64..100.0) {
        let out = normalize_unit(&percentile_clip(&img, p).unwrap());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tensor_bytes_round_trip(img in image(6, 4)) {
        let t = Tensor::from_image(&img);
        let mut buf = Vec::new();
        encode_tensor(&mut buf, &t);
        prop_assert_eq!(decode_tensor(&buf).unwrap(), t);
    }
}
