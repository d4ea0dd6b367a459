//! The standard gradient-check suite: every differentiable primitive plus an
//! MBConv block and the full micro Siamese network, each with its pinned
//! pass threshold. Used by the `gradcheck` command and the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    build_model, forward_features, mbconv_forward, BackboneConfig, ModelParams, StatUpdates,
};
use crate::error::Result;
use crate::head::{square_layer, verification_logits, PairLabel, VerificationHead};
use crate::rng::stream_rng;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::tape::Mode;
use crate::tensor::Tensor;

pub struct SuiteCase {
    pub name: &'static str,
    pub threshold: f64,
    runner: fn() -> Result<GradCheckReport>,
}

impl SuiteCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        (self.runner)()
    }
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

fn check_linear() -> Result<GradCheckReport> {
    let mut rng = stream_rng(101, "suite");
    let inputs = vec![
        named("x", Tensor::randn(vec![3, 4], 1.0, &mut rng)),
        named("w", Tensor::randn(vec![2, 4], 1.0, &mut rng)),
        named("b", Tensor::randn(vec![2], 1.0, &mut rng)),
    ];
    let coeff = Tensor::randn(vec![3, 2], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let w = tape.param("w", &ins[1].1)?;
            let b = tape.param("b", &ins[2].1)?;
            let y = tape.linear(x, w, Some(b))?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_conv2d() -> Result<GradCheckReport> {
    let mut rng = stream_rng(102, "suite");
    let inputs = vec![
        named("x", Tensor::randn(vec![2, 3, 6, 5], 1.0, &mut rng)),
        named("w", Tensor::randn(vec![4, 3, 3, 3], 0.5, &mut rng)),
        named("b", Tensor::randn(vec![4], 0.5, &mut rng)),
    ];
    let coeff = Tensor::randn(vec![2, 4, 3, 3], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let w = tape.param("w", &ins[1].1)?;
            let b = tape.param("b", &ins[2].1)?;
            let y = tape.conv2d(x, w, Some(b), 2, 1)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_depthwise() -> Result<GradCheckReport> {
    let mut rng = stream_rng(103, "suite");
    let inputs = vec![
        named("x", Tensor::randn(vec![2, 4, 6, 5], 1.0, &mut rng)),
        named("w", Tensor::randn(vec![4, 1, 3, 3], 0.5, &mut rng)),
    ];
    let coeff = Tensor::randn(vec![2, 4, 6, 5], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let w = tape.param("w", &ins[1].1)?;
            let y = tape.depthwise_conv2d(x, w, 1, 1)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_batch_norm() -> Result<GradCheckReport> {
    let mut rng = stream_rng(104, "suite");
    let inputs = vec![
        named("x", Tensor::randn(vec![2, 3, 4, 3], 1.0, &mut rng)),
        named("gamma", Tensor::randn(vec![3], 0.3, &mut rng).map(|v| v + 1.0)),
        named("beta", Tensor::randn(vec![3], 0.3, &mut rng)),
    ];
    let coeff = Tensor::randn(vec![2, 3, 4, 3], 1.0, &mut rng);
    let zeros = Tensor::zeros(vec![3]);
    let ones = Tensor::full(vec![3], 1.0);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let gamma = tape.param("gamma", &ins[1].1)?;
            let beta = tape.param("beta", &ins[2].1)?;
            let (y, _) = tape.batch_norm(x, gamma, beta, &zeros, &ones, Mode::Train, 1e-3)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_swish() -> Result<GradCheckReport> {
    let mut rng = stream_rng(105, "suite");
    let inputs = vec![named("x", Tensor::randn(vec![10], 2.0, &mut rng))];
    let coeff = Tensor::randn(vec![10], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let y = tape.swish(x);
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_global_avg_pool() -> Result<GradCheckReport> {
    let mut rng = stream_rng(106, "suite");
    let inputs = vec![named("x", Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng))];
    let coeff = Tensor::randn(vec![2, 3], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            let y = tape.global_avg_pool(x)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_dropout() -> Result<GradCheckReport> {
    let mut rng = stream_rng(107, "suite");
    let inputs = vec![named("x", Tensor::randn(vec![4, 5], 1.0, &mut rng))];
    let coeff = Tensor::randn(vec![4, 5], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let x = tape.param("x", &ins[0].1)?;
            // Fixed seed: the mask is identical across perturbed evaluations.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(9);
            let y = tape.dropout(x, 0.5, Mode::Train, &mut mask_rng)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_softmax_xent() -> Result<GradCheckReport> {
    let mut rng = stream_rng(108, "suite");
    let inputs = vec![named("logits", Tensor::randn(vec![6, 2], 2.0, &mut rng))];
    let targets = vec![0usize, 1, 0, 1, 1, 0];
    grad_check(
        &move |tape, ins| {
            let logits = tape.param("logits", &ins[0].1)?;
            let (loss, _) = tape.softmax_xent(logits, &targets)?;
            Ok(loss)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_square_layer() -> Result<GradCheckReport> {
    let mut rng = stream_rng(109, "suite");
    let inputs = vec![
        named("a", Tensor::randn(vec![3, 5], 1.0, &mut rng)),
        named("b", Tensor::randn(vec![3, 5], 1.0, &mut rng)),
    ];
    let coeff = Tensor::randn(vec![3, 5], 1.0, &mut rng);
    grad_check(
        &move |tape, ins| {
            let a = tape.param("a", &ins[0].1)?;
            let b = tape.param("b", &ins[1].1)?;
            let y = tape.squared_diff(a, b)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_mbconv_block() -> Result<GradCheckReport> {
    let config = BackboneConfig::test_micro();
    let plan = config.plan();
    let block = plan.blocks[1].clone(); // the expanding, downsampling block
    let base = build_model::<f64>(&config, 42)?;

    let mut rng = stream_rng(110, "suite");
    let mut inputs = vec![named(
        "x",
        Tensor::randn(vec![2, block.in_ch, 6, 5], 1.0, &mut rng),
    )];
    for (name, tensor) in base.iter() {
        if name.starts_with(&block.name) && ModelParams::<f64>::is_trainable(name) {
            inputs.push((name.clone(), tensor.clone()));
        }
    }
    let coeff = Tensor::randn(vec![2, block.out_ch, 3, 3], 1.0, &mut rng);

    grad_check(
        &move |tape, ins| {
            let mut params = base.clone();
            let x = tape.param("x", &ins[0].1)?;
            for (name, tensor) in &ins[1..] {
                params.set(name, tensor.clone())?;
            }
            let mut stats = StatUpdates::new();
            let y = mbconv_forward(tape, &params, &block, x, Mode::Train, &mut stats)?;
            tape.weighted_sum(y, &coeff)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
}

fn check_siamese_micro() -> Result<GradCheckReport> {
    let config = BackboneConfig::test_micro();
    let head = VerificationHead::new(config.descriptor_dim, 0.5)?;
    let mut base = build_model::<f64>(&config, 43)?;
    head.init_params(&mut base)?;
    // A zero head would block gradient flow into the backbone; use random
    // weights for the check.
    let mut rng = stream_rng(111, "suite");
    base.set(
        crate::head::THETA_WEIGHT,
        Tensor::randn(vec![2, config.descriptor_dim], 0.7, &mut rng).with_requires_grad(true),
    )?;
    base.set(
        crate::head::THETA_BIAS,
        Tensor::randn(vec![2], 0.3, &mut rng).with_requires_grad(true),
    )?;

    let (h, w) = config.resolution;
    let mut inputs = vec![
        named("images1", Tensor::randn(vec![2, 3, h, w], 1.0, &mut rng)),
        named("images2", Tensor::randn(vec![2, 3, h, w], 1.0, &mut rng)),
    ];
    for (name, tensor) in base.iter() {
        if ModelParams::<f64>::is_trainable(name) {
            inputs.push((name.clone(), tensor.clone()));
        }
    }
    let targets = [PairLabel::Same, PairLabel::Different];

    grad_check(
        &move |tape, ins| {
            let mut params = base.clone();
            let im1 = tape.param("images1", &ins[0].1)?;
            let im2 = tape.param("images2", &ins[1].1)?;
            for (name, tensor) in &ins[2..] {
                params.set(name, tensor.clone())?;
            }
            let mut stats = StatUpdates::new();
            let d1 = forward_features(tape, &params, &config, im1, Mode::Train, &mut stats)?;
            let d2 = forward_features(tape, &params, &config, im2, Mode::Train, &mut stats)?;
            let f_s = square_layer(tape, d1, d2)?;
            let mut mask_rng = ChaCha8Rng::seed_from_u64(17);
            let logits =
                verification_logits(tape, &params, &head, f_s, Mode::Train, &mut mask_rng)?;
            let (loss, _) = tape.softmax_xent(
                logits,
                &targets.iter().map(|l| l.class_index()).collect::<Vec<_>>(),
            )?;
            Ok(loss)
        },
        &inputs,
        &GradCheckOptions {
            eps: 1e-3,
            max_coords_per_input: Some(3),
            seed: 5,
            ..Default::default()
        },
    )
}

/// All cases with their pinned thresholds. Smooth elementwise ops check at
/// 1e-7, structural/linear ops at 1e-8 or 1e-6, normalization at 1e-5, the
/// full network at 1e-4.
pub fn standard_suite() -> Vec<SuiteCase> {
    vec![
        SuiteCase { name: "linear", threshold: 1e-8, runner: check_linear },
        SuiteCase { name: "conv2d", threshold: 1e-6, runner: check_conv2d },
        SuiteCase { name: "depthwise_conv2d", threshold: 1e-6, runner: check_depthwise },
        SuiteCase { name: "batch_norm", threshold: 1e-5, runner: check_batch_norm },
        SuiteCase { name: "swish", threshold: 1e-7, runner: check_swish },
        SuiteCase { name: "global_avg_pool", threshold: 1e-8, runner: check_global_avg_pool },
        SuiteCase { name: "dropout", threshold: 1e-8, runner: check_dropout },
        SuiteCase { name: "softmax_cross_entropy", threshold: 1e-6, runner: check_softmax_xent },
        SuiteCase { name: "square_layer", threshold: 1e-7, runner: check_square_layer },
        SuiteCase { name: "mbconv_block", threshold: 1e-5, runner: check_mbconv_block },
        SuiteCase { name: "siamese_micro", threshold: 1e-4, runner: check_siamese_micro },
    ]
}
