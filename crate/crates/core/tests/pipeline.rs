//! Data pipeline oracles: an independently coded resampler, randomized
//! augmentation properties, pair-count enumeration and sampler audits.

use proptest::prelude::*;
use rand::Rng;
use svreid_core::data::augment::{augment, bilinear_resize, AugmentConfig};
use svreid_core::data::sampler::{sample_pair_batch, SamplerConfig};
use svreid_core::data::synthetic::{generate_synthetic, separation_stats};
use svreid_core::data::{Camera, IdentityDataset, Record, SplitTag};
use svreid_core::head::PairLabel;
use svreid_core::rng::stream_rng;
use svreid_core::tensor::Tensor;

/// Naive reference resampler, written independently of the library path:
/// plain double loops, no plane slicing, same sampling convention.
fn oracle_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Vec<f32> {
    let (c, h, w) = (
        image.shape()[0],
        image.shape()[1],
        image.shape()[2],
    );
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let fy = ((oy as f32 + 0.5) * h as f32 / out_h as f32 - 0.5)
                    .clamp(0.0, (h - 1) as f32);
                let fx = ((ox as f32 + 0.5) * w as f32 / out_w as f32 - 0.5)
                    .clamp(0.0, (w - 1) as f32);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                let v = |yy: usize, xx: usize| image.data()[(ch * h + yy) * w + xx];
                out[(ch * out_h + oy) * out_w + ox] = v(y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + v(y0, x1) * (1.0 - ty) * tx
                    + v(y1, x0) * ty * (1.0 - tx)
                    + v(y1, x1) * ty * tx;
            }
        }
    }
    out
}

#[test]
fn bilinear_matches_oracle_on_block_checkerboard() {
    // 2x2-pixel blocks alternating dark/light, downscaled by 2.
    let img = Tensor::from_fn(vec![3, 8, 8], |i| {
        let rem = i % 64;
        let (y, x) = (rem / 8, rem % 8);
        if ((y / 2) + (x / 2)) % 2 == 0 {
            0.25
        } else {
            0.75
        }
    });
    let resized = bilinear_resize(&img, 4, 4).unwrap();
    let expect = oracle_bilinear(&img, 4, 4);
    for (a, b) in resized.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn bilinear_matches_oracle_on_random_images() {
    let mut rng = stream_rng(4, "pipeline");
    for _ in 0..20 {
        let h = rng.random_range(2..24);
        let w = rng.random_range(2..24);
        let oh = rng.random_range(1..20);
        let ow = rng.random_range(1..20);
        let img = Tensor::<f32>::rand_uniform(vec![3, h, w], 0.0, 1.0, &mut rng);
        let got = bilinear_resize(&img, oh, ow).unwrap();
        let expect = oracle_bilinear(&img, oh, ow);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn one_identity_yields_four_cross_camera_pairs() {
    let mut records = Vec::new();
    for cam in [Camera::A, Camera::B] {
        for _ in 0..2 {
            records.push(Record {
                identity: 0,
                camera: cam,
                image: Tensor::full(vec![3, 4, 2], 0.5),
            });
        }
    }
    let ds = IdentityDataset::from_records(SplitTag::Full, records).unwrap();
    assert_eq!(ds.positive_pair_count(), 4);
}

#[test]
fn sampler_audit_over_ten_thousand_pairs() {
    let ds = generate_synthetic(8, 2, 41).unwrap();
    let cfg = SamplerConfig {
        batch_size: 48,
        pos_ratio: 0.5,
        resolution: (32, 16),
    };
    let aug = AugmentConfig::identity();
    let mut rp = stream_rng(42, "sampler");
    let mut ra = stream_rng(42, "augment");
    let mut pairs_seen = 0usize;
    while pairs_seen < 10_000 {
        let batch = sample_pair_batch(&ds, &cfg, &aug, &mut rp, &mut ra).unwrap();
        assert_eq!(batch.positive_count(), 24);
        assert_eq!(batch.len() - batch.positive_count(), 24);
        for (label, p) in batch.labels.iter().zip(&batch.provenance) {
            match label {
                PairLabel::Same => {
                    assert_eq!(p.id1, p.id2, "positive pair must share identity");
                    assert!(
                        p.cam1 == Camera::A && p.cam2 == Camera::B,
                        "positive pair must be cross-camera"
                    );
                }
                PairLabel::Different => assert_ne!(p.id1, p.id2),
            }
        }
        pairs_seen += batch.len();
    }
}

#[test]
fn synthetic_set_separates_identities() {
    let ds = generate_synthetic(16, 2, 6).unwrap();
    let stats = separation_stats(&ds, 1500);
    assert!(
        stats.mean_intra < 0.8 * stats.mean_inter,
        "weak separation: intra {} inter {}",
        stats.mean_intra,
        stats.mean_inter
    );
}

#[test]
fn epoch_sequence_is_one_seed_deterministic() {
    let ds = generate_synthetic(6, 2, 8).unwrap();
    let cfg = SamplerConfig {
        batch_size: 12,
        pos_ratio: 0.5,
        resolution: (32, 16),
    };
    let aug = AugmentConfig::default();
    let run = |seed: u64| {
        let mut rp = stream_rng(seed, "sampler");
        let mut ra = stream_rng(seed, "augment");
        (0..5)
            .map(|_| sample_pair_batch(&ds, &cfg, &aug, &mut rp, &mut ra).unwrap())
            .collect::<Vec<_>>()
    };
    for (a, b) in run(3).iter().zip(run(3).iter()) {
        assert!(a.images1.bit_eq(&b.images1));
        assert!(a.images2.bit_eq(&b.images2));
        assert_eq!(a.labels, b.labels);
    }
    let differs = run(3)
        .iter()
        .zip(run(4).iter())
        .any(|(a, b)| !a.images1.bit_eq(&b.images1));
    assert!(differs);
}

fn augment_strategy() -> impl Strategy<Value = AugmentConfig> {
    (0.0f64..=1.0, 0.5f64..1.5, 0.0f64..=0.4).prop_map(|(flip, zmin, extra)| AugmentConfig {
        flip_prob: flip,
        zoom: (zmin, zmin + extra),
        shift_frac: extra,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Augmentation never changes the tensor shape and never produces values
    /// outside [0, 1].
    #[test]
    fn augment_preserves_shape_and_range(cfg in augment_strategy(), seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "augment");
        let img = Tensor::<f32>::rand_uniform(vec![3, 12, 6], 0.0, 1.0, &mut stream_rng(seed, "img"));
        let out = augment(&img, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
