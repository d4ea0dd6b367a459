//! CMC verification against an independent brute-force ranking oracle, plus
//! the order-invariance properties ranking must satisfy.

use proptest::prelude::*;
use rand::Rng;
use svreid_core::eval::{compute_cmc, CmcCurve, ScoreMatrix};
use svreid_core::rng::stream_rng;

/// Brute-force rank computation: no sorting, just counting, with the same
/// tie rule (equal scores rank by ascending gallery index).
fn oracle_cmc(scores: &ScoreMatrix) -> Vec<f64> {
    let (q, g) = (scores.n_queries(), scores.n_gallery());
    let mut ranks = Vec::with_capacity(q);
    for i in 0..q {
        let qid = scores.query_ids[i];
        let true_j = (0..g)
            .find(|&j| scores.gallery_ids[j] == qid)
            .expect("query identity present");
        let s_true = scores.at(i, true_j);
        let mut rank = 1usize;
        for j in 0..g {
            if j == true_j {
                continue;
            }
            let s = scores.at(i, j);
            if s > s_true || (s == s_true && j < true_j) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    (1..=g)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64)
        .collect()
}

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, quantized: bool) -> ScoreMatrix {
    let q = rng.random_range(1..=20);
    let g = rng.random_range(1..=20);
    let gallery_ids: Vec<u32> = (0..g as u32).collect();
    // Every query id must exist in the gallery.
    let query_ids: Vec<u32> = (0..q).map(|_| rng.random_range(0..g as u32)).collect();
    let values: Vec<f64> = (0..q * g)
        .map(|_| {
            if quantized {
                // Coarse grid to force plenty of ties.
                rng.random_range(0..5) as f64 / 4.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    ScoreMatrix::new(values, query_ids, gallery_ids).unwrap()
}

#[test]
fn matches_brute_force_oracle_on_1000_random_matrices() {
    let mut rng = stream_rng(5, "cmc");
    for case in 0..1000 {
        let quantized = case % 2 == 0;
        let m = random_matrix(&mut rng, quantized);
        let got = compute_cmc(&m).unwrap();
        let expect = oracle_cmc(&m);
        assert_eq!(got.values(), expect.as_slice(), "case {case}");
    }
}

#[test]
fn curves_are_monotone_and_terminal() {
    let mut rng = stream_rng(6, "cmc");
    for _ in 0..200 {
        let m = random_matrix(&mut rng, true);
        let cmc = compute_cmc(&m).unwrap();
        for w in cmc.values().windows(2) {
            assert!(w[0] <= w[1]);
        }
        // Single-shot gallery contains every query identity, so the curve
        // ends at 1.
        assert_eq!(cmc.values().last().copied(), Some(1.0));
    }
}

#[test]
fn gallery_permutation_with_distinct_scores_is_invariant() {
    let mut rng = stream_rng(7, "cmc");
    for _ in 0..100 {
        let g = rng.random_range(2..12usize);
        let q = rng.random_range(1..12usize);
        let gallery_ids: Vec<u32> = (0..g as u32).collect();
        let query_ids: Vec<u32> = (0..q).map(|_| rng.random_range(0..g as u32)).collect();
        // Distinct scores per row via a shuffled grid.
        let mut values = Vec::with_capacity(q * g);
        for _ in 0..q {
            let mut row: Vec<f64> = (0..g).map(|j| (j as f64 + 0.5) / (g as f64 + 1.0)).collect();
            for j in (1..g).rev() {
                let k = rng.random_range(0..=j);
                row.swap(j, k);
            }
            values.extend_from_slice(&row);
        }
        let base = ScoreMatrix::new(values.clone(), query_ids.clone(), gallery_ids.clone()).unwrap();

        // Random permutation of gallery columns (ids move with scores).
        let mut perm: Vec<usize> = (0..g).collect();
        for j in (1..g).rev() {
            let k = rng.random_range(0..=j);
            perm.swap(j, k);
        }
        let permuted_ids: Vec<u32> = perm.iter().map(|&j| gallery_ids[j]).collect();
        let mut permuted_values = Vec::with_capacity(q * g);
        for i in 0..q {
            for &j in &perm {
                permuted_values.push(base.at(i, j));
            }
        }
        let permuted = ScoreMatrix::new(permuted_values, query_ids, permuted_ids).unwrap();

        assert_eq!(
            compute_cmc(&base).unwrap().values(),
            compute_cmc(&permuted).unwrap().values()
        );
    }
}

#[test]
fn curve_constructor_rejects_decreasing_values() {
    assert!(CmcCurve::new(vec![0.5, 0.4]).is_err());
    assert!(CmcCurve::new(vec![0.5, 1.1]).is_err());
    assert!(CmcCurve::new(vec![0.25, 0.5, 1.0]).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Applying a strictly increasing function to all scores leaves the
    /// ranks, hence the curve, unchanged.
    #[test]
    fn strictly_increasing_rescale_preserves_cmc(seed in 0u64..10_000) {
        let mut rng = stream_rng(seed, "cmc-mono");
        let m = random_matrix(&mut rng, false);
        let rescaled_values: Vec<f64> = (0..m.n_queries())
            .flat_map(|i| (0..m.n_gallery()).map(move |j| (i, j)))
            .map(|(i, j)| {
                let x = m.at(i, j);
                x * x * x * 0.5 + x * 0.25 // strictly increasing on [0, 1]
            })
            .collect();
        let rescaled = ScoreMatrix::new(
            rescaled_values,
            m.query_ids.clone(),
            m.gallery_ids.clone(),
        )
        .unwrap();
        prop_assert_eq!(
            compute_cmc(&m).unwrap().values(),
            compute_cmc(&rescaled).unwrap().values()
        );
    }
}
