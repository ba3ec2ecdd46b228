//! Property tests for the numeric invariants: masked softmax row sums,
//! finite-difference agreement on random programs, selection laws of the
//! top-k picker, and saliency-grid reshape bijectivity.

use flowscope::cam::SaliencyMap;
use flowscope::tape::{causal_mask, Tape};
use flowscope::tensor::Tensor;
use flowscope::truncation::argtop;
use proptest::prelude::*;

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_under_causal_mask(
        s in 1usize..7,
        seed_vals in finite_vals(49),
    ) {
        let vals: Vec<f64> = seed_vals.into_iter().take(s * s).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([s, s], vals).unwrap());
        let mask = causal_mask(s);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        for i in 0..s {
            let sum: f64 = tape.value(y).row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in (i + 1)..s {
                prop_assert_eq!(tape.value(y).at2(i, j), 0.0);
            }
        }
    }

    #[test]
    fn reverse_mode_matches_finite_differences(
        m in 1usize..4,
        k in 1usize..4,
        vals in finite_vals(9),
        wvals in finite_vals(16),
    ) {
        let xs: Vec<f64> = vals.into_iter().take(m * k).map(|v| v * 0.4).collect();
        let ws: Vec<f64> = wvals.into_iter().take(k * k).map(|v| v * 0.3).collect();
        let eval = |xv: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new([m, k], xv.to_vec()).unwrap().with_grad());
            let w = tape.leaf(Tensor::new([k, k], ws.clone()).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let g = tape.gelu(y);
            let p = tape.softmax_rows(g, None).unwrap();
            let q = tape.mul(p, g).unwrap();
            let out = tape.sum_all(q);
            (tape.value(out).item().unwrap(), tape.backward(out).unwrap().wrt(x).unwrap().clone())
        };
        let (_, grad) = eval(&xs);
        let h = 1e-5;
        for i in 0..xs.len() {
            let mut hi = xs.clone();
            hi[i] += h;
            let mut lo = xs.clone();
            lo[i] -= h;
            let fd = (eval(&hi).0 - eval(&lo).0) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
            prop_assert!(rel < 1e-4, "coord {}: ad={} fd={}", i, ad, fd);
        }
    }

    #[test]
    fn argtop_containment_scale_and_ties(
        raw in prop::collection::vec(0u8..5, 1..24),
        k in 0usize..26,
        scale in 0.01f64..100.0,
    ) {
        // Coarse integer levels force ties.
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 4.0).collect();
        let picked = argtop(&scores, k);
        prop_assert_eq!(picked.len(), k.min(scores.len()));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        // Monotone containment.
        let next = argtop(&scores, k + 1);
        prop_assert!(picked.iter().all(|i| next.contains(i)));
        // Positive scaling never changes the selection.
        let scaled: Vec<f64> = scores.iter().map(|v| v * scale).collect();
        prop_assert_eq!(argtop(&scaled, k), picked);
    }

    #[test]
    fn saliency_reshape_is_bijective(
        rows in 1usize..5,
        cols in 1usize..5,
        vals in finite_vals(16),
    ) {
        let values: Vec<f64> = vals.into_iter().take(rows * cols).map(f64::abs).collect();
        let map = SaliencyMap::from_vector(values.clone(), rows, cols).unwrap();
        prop_assert_eq!(map.values(), values.as_slice());
        let mut rebuilt = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                rebuilt.push(map.get(r, c));
            }
        }
        prop_assert_eq!(rebuilt, values);
    }

    #[test]
    fn normalized_maps_live_in_unit_interval(
        rows in 1usize..4,
        cols in 1usize..4,
        vals in finite_vals(9),
    ) {
        let values: Vec<f64> = vals.into_iter().take(rows * cols).map(f64::abs).collect();
        let map = SaliencyMap::from_vector(values.clone(), rows, cols).unwrap().normalized();
        prop_assert!(map.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = map.max_value();
        if values.iter().any(|&v| v > 0.0) {
            prop_assert_eq!(max, 1.0);
        } else {
            prop_assert_eq!(max, 0.0);
        }
    }
}
