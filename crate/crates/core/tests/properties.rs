use proptest::prelude::*;

use rcssfl::aggregate::{geometric_median, median_objective, weiszfeld, DEFAULT_MAX_ITER};
use rcssfl::model::ParamVector;
use rcssfl::quant::{self, QuantizedUpdate};
use rcssfl::selection::{cosine_score, fit_gaussian, wasserstein2_gaussian};

fn pv(values: Vec<f64>) -> ParamVector {
    let n = values.len();
    // a single-layer shape [1, n/2] has exactly n parameters for even n
    ParamVector::from_values(&[1, n / 2], values).unwrap()
}

fn even_vec(range: std::ops::Range<f64>, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    len.prop_flat_map(move |n| prop::collection::vec(range.clone(), 2 * n))
}

fn points(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), 1..8)
}

fn bits() -> impl Strategy<Value = u8> {
    prop::sample::select(quant::SUPPORTED_BITS.to_vec())
}

fn median_of(pts: &[Vec<f64>]) -> Vec<f64> {
    let views: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    weiszfeld(&views, 1e-11, 5_000).unwrap().0
}

// Nearly collinear inputs leave the minimizer ill-conditioned, so these
// compare objective values rather than positions.
fn objective(y: &[f64], pts: &[Vec<f64>]) -> f64 {
    let views: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    median_objective(y, &views)
}

proptest! {
    #[test]
    fn median_moves_with_translation(pts in points(3), shift in prop::collection::vec(-5.0..5.0f64, 3)) {
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        let a: Vec<f64> = median_of(&pts).iter().zip(&shift).map(|(a, s)| a + s).collect();
        let b = median_of(&moved);
        let (fa, fb) = (objective(&a, &moved), objective(&b, &moved));
        prop_assert!((fa - fb).abs() <= 1e-9 * (1.0 + fb));
    }

    #[test]
    fn median_ignores_point_order(pts in points(2)) {
        let mut rev = pts.clone();
        rev.reverse();
        let (fa, fb) = (objective(&median_of(&pts), &pts), objective(&median_of(&rev), &pts));
        prop_assert!((fa - fb).abs() <= 1e-9 * (1.0 + fb));
    }

    #[test]
    fn median_objective_never_increases(pts in points(4)) {
        let views: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let (_, objectives) = weiszfeld(&views, 1e-12, 1_000).unwrap();
        prop_assert!(objectives.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn median_of_copies_is_the_copy(v in even_vec(-3.0..3.0, 1..6), n in 1usize..6) {
        let p = pv(v.clone());
        let gm = geometric_median(&vec![p; n], 1e-10, DEFAULT_MAX_ITER).unwrap();
        for (a, b) in gm.as_slice().iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_within_half_step(
        bits in bits(),
        alpha in 0.01..5.0f64,
        unit in prop::collection::vec(-1.0..=1.0f64, 1..200),
    ) {
        let alpha = f64::from(alpha as f32);
        let w: Vec<f64> = unit.iter().map(|u| u * alpha).collect();
        let back = quant::dequantize(&quant::quantize(&w, bits, alpha).unwrap());
        let bound = alpha / f64::from((1u32 << bits) - 1);
        for (a, b) in back.iter().zip(&w) {
            prop_assert!((a - b).abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn out_of_range_entries_land_on_the_ends(bits in bits(), excess in prop::collection::vec(0.0..10.0f64, 1..50)) {
        let alpha = 0.5;
        let w: Vec<f64> = excess.iter().enumerate().map(|(i, e)| {
            let v = alpha + e;
            if i % 2 == 0 { v } else { -v }
        }).collect();
        let back = quant::dequantize(&quant::quantize(&w, bits, alpha).unwrap());
        for (i, v) in back.iter().enumerate() {
            prop_assert_eq!(*v, if i % 2 == 0 { alpha } else { -alpha });
        }
    }

    #[test]
    fn negation_commutes_within_one_step(bits in bits(), w in prop::collection::vec(-1.0..1.0f64, 1..100)) {
        let alpha = 0.75;
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let a = quant::dequantize(&quant::quantize(&w, bits, alpha).unwrap());
        let b = quant::dequantize(&quant::quantize(&neg, bits, alpha).unwrap());
        let step = 2.0 * alpha / f64::from((1u32 << bits) - 1);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x + y).abs() <= step * (1.0 + 1e-12));
        }
    }

    #[test]
    fn wire_format_round_trips(bits in bits(), alpha in 0.001..100.0f32, raw in prop::collection::vec(any::<u16>(), 0..300)) {
        let top = ((1u32 << bits) - 1) as u16;
        let codes: Vec<u16> = raw.iter().map(|c| c & top).collect();
        let q = QuantizedUpdate::from_codes(bits, alpha, codes).unwrap();
        let bytes = q.to_bytes();
        prop_assert_eq!(bytes.len(), quant::payload_bytes(&q));
        let back = QuantizedUpdate::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_wire_is_rejected(bits in bits(), n in 1usize..100) {
        let q = quant::quantize(&vec![0.1; n], bits, 0.5).unwrap();
        let bytes = q.to_bytes();
        prop_assert!(QuantizedUpdate::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn wasserstein_is_a_symmetric_square_distance(
        m1 in -5.0..5.0f64, m2 in -5.0..5.0f64, v1 in 0.0..9.0f64, v2 in 0.0..9.0f64,
    ) {
        let ab = wasserstein2_gaussian(m1, v1, m2, v2).unwrap();
        let ba = wasserstein2_gaussian(m2, v2, m1, v1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(wasserstein2_gaussian(m1, v1, m1, v1).unwrap(), 0.0);
    }

    #[test]
    fn fitted_gaussian_shifts_with_the_data(v in prop::collection::vec(-5.0..5.0f64, 2..100), c in -3.0..3.0f64) {
        let (m, s) = fit_gaussian(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (m2, s2) = fit_gaussian(&shifted).unwrap();
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
    }

    #[test]
    fn mmd_is_symmetric(x in prop::collection::vec(-2.0..2.0f64, 2..30), y in prop::collection::vec(-2.0..2.0f64, 2..30)) {
        let a = quant::mmd2(&x, &y, 0.7).unwrap();
        let b = quant::mmd2(&y, &x, 0.7).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        pair in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-1.0..1.0f64, 2 * n),
            prop::collection::vec(-1.0..1.0f64, 2 * n),
        )),
        c in 0.001..1000.0f64,
    ) {
        let (a, b) = (pv(pair.0), pv(pair.1));
        let base = cosine_score(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((cosine_score(&a, &b.scaled(c)).unwrap() - base).abs() < 1e-9);
        prop_assert!((cosine_score(&b, &a).unwrap() - base).abs() < 1e-12);
    }
}
