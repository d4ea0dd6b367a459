//! Cross-route and property checks for the tensor engine.

use proptest::prelude::*;
use svreid_core::rng::stream_rng;
use svreid_core::tensor::ops;
use svreid_core::tensor::Tensor;

/// A pointwise convolution is a per-pixel linear map: reshaping the input to
/// (N*H*W) x Cin and applying `linear` with the same weights must agree.
#[test]
fn pointwise_conv_equals_linear_on_reshaped_data() {
    let mut rng = stream_rng(31, "props");
    for _ in 0..10 {
        let (n, cin, cout, h, w) = (2usize, 3usize, 5usize, 4usize, 3usize);
        let input = Tensor::<f32>::randn(vec![n, cin, h, w], 1.0, &mut rng);
        let weight = Tensor::<f32>::randn(vec![cout, cin, 1, 1], 1.0, &mut rng);

        let conv = ops::conv2d(&input, &weight, None, 1, 0).unwrap();

        // Rearrange N x Cin x H x W into (N*H*W) x Cin rows.
        let mut rows = vec![0.0f32; n * h * w * cin];
        for i in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for x in 0..w {
                        let row = (i * h + y) * w + x;
                        rows[row * cin + c] = input.data()[((i * cin + c) * h + y) * w + x];
                    }
                }
            }
        }
        let flat_in = Tensor::<f32>::new(vec![n * h * w, cin], rows).unwrap();
        let flat_w = Tensor::<f32>::new(vec![cout, cin], weight.data().to_vec()).unwrap();
        let lin = ops::linear(&flat_in, &flat_w, None).unwrap();

        for i in 0..n {
            for c in 0..cout {
                for y in 0..h {
                    for x in 0..w {
                        let a = conv.data()[((i * cout + c) * h + y) * w + x];
                        let b = lin.data()[((i * h + y) * w + x) * cout + c];
                        let denominator = (a.abs() + b.abs()).max(1e-12);
                        assert!(
                            ((a - b).abs() / denominator) < 1e-6,
                            "conv {a} vs linear {b}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let mut rng = stream_rng(32, "props");
    let input = Tensor::<f32>::randn(vec![2, 4, 6, 5], 1.0, &mut rng);
    let weight = Tensor::<f32>::randn(vec![8, 4, 3, 3], 0.5, &mut rng);
    let a = ops::conv2d(&input, &weight, None, 2, 1).unwrap();
    let b = ops::conv2d(&input, &weight, None, 2, 1).unwrap();
    assert!(a.bit_eq(&b));

    let ga = ops::conv2d_backward(&input, &weight, false, 2, 1, &a).unwrap();
    let gb = ops::conv2d_backward(&input, &weight, false, 2, 1, &b).unwrap();
    assert!(ga.0.bit_eq(&gb.0) && ga.1.bit_eq(&gb.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax rows always sum to one and stay inside [0, 1], including for
    /// extreme logits.
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(
            (any::<i16>(), any::<i16>()),
            1..12
        )
    ) {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * 2);
        for (a, b) in &rows {
            data.push(*a as f32);
            data.push(*b as f32);
        }
        let logits = Tensor::<f32>::new(vec![n, 2], data).unwrap();
        let probs = ops::softmax_rows(&logits).unwrap();
        for i in 0..n {
            let p0 = probs.data()[i * 2];
            let p1 = probs.data()[i * 2 + 1];
            prop_assert!((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&p1));
            prop_assert!((p0 + p1 - 1.0).abs() <= 1e-6);
        }
    }

    /// The square layer is exactly symmetric for arbitrary finite inputs.
    #[test]
    fn squared_diff_swap_symmetry(
        pairs in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 1..64)
    ) {
        let n = pairs.len();
        let a = Tensor::<f32>::new(vec![1, n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let b = Tensor::<f32>::new(vec![1, n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let ab = ops::squared_diff(&a, &b).unwrap();
        let ba = ops::squared_diff(&b, &a).unwrap();
        prop_assert!(ab.bit_eq(&ba));
    }
}
