//! Verification head: the comparison path between twin descriptors.
//!
//! Descriptors are compared elementwise by a parameterless square layer,
//! `f_s = (f_1 - f_2)^2`, then passed through dropout and an affine map to
//! two logits (same / different) whose softmax is the pair probability. The
//! affine map is initialized to zero so an untrained head scores every pair
//! at exactly 0.5 and the initial loss is ln 2.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{forward_features, BackboneConfig, ModelParams, StatUpdates};
use crate::error::{ensure_contract, Result};
use crate::tensor::ops;
use crate::tensor::tape::{Mode, NodeId, Tape};
use crate::tensor::{Element, Tensor};

pub const THETA_WEIGHT: &str = "head.theta.weight";
pub const THETA_BIAS: &str = "head.theta.bias";

/// Pair target: class 0 is "same person", class 1 is "different".
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PairLabel {
    Same,
    Different,
}

impl PairLabel {
    pub fn class_index(self) -> usize {
        match self {
            PairLabel::Same => 0,
            PairLabel::Different => 1,
        }
    }

    /// One-hot target `q`: (1, 0) for same, (0, 1) for different.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            PairLabel::Same => [1.0, 0.0],
            PairLabel::Different => [0.0, 1.0],
        }
    }
}

pub fn labels_to_targets(labels: &[PairLabel]) -> Vec<usize> {
    labels.iter().map(|l| l.class_index()).collect()
}

/// Configuration of the affine map from `f_s` to the two logits, plus the
/// dropout applied before it. The weights live in the shared parameter map
/// under the `head.` prefix.
#[derive(Clone, Debug)]
pub struct VerificationHead {
    pub descriptor_dim: usize,
    pub dropout_p: f64,
}

impl VerificationHead {
    pub fn new(descriptor_dim: usize, dropout_p: f64) -> Result<Self> {
        const OP: &str = "VerificationHead";
        ensure_contract!(descriptor_dim > 0, OP, "descriptor dimension must be positive");
        ensure_contract!(
            (0.0..1.0).contains(&dropout_p),
            OP,
            "dropout probability must satisfy 0 <= p < 1, got {dropout_p}"
        );
        Ok(VerificationHead {
            descriptor_dim,
            dropout_p,
        })
    }

    /// Adds the zero-initialized head parameters to the map.
    pub fn init_params<T: Element>(&self, params: &mut ModelParams<T>) -> Result<()> {
        params.insert(
            THETA_WEIGHT,
            Tensor::zeros(vec![2, self.descriptor_dim]).with_requires_grad(true),
        )?;
        params.insert(
            THETA_BIAS,
            Tensor::zeros(vec![2]).with_requires_grad(true),
        )?;
        Ok(())
    }

    pub fn validate_params<T: Element>(&self, params: &ModelParams<T>) -> Result<()> {
        let w = params.get(THETA_WEIGHT)?;
        ensure_contract!(
            w.shape() == [2, self.descriptor_dim],
            "VerificationHead",
            "weight shape {:?} does not match 2x{}",
            w.shape(),
            self.descriptor_dim
        );
        ensure_contract!(
            w.all_finite() && params.get(THETA_BIAS)?.all_finite(),
            "VerificationHead",
            "head parameters must be finite"
        );
        Ok(())
    }
}

/// `f_s = (f_1 - f_2)^2`, exactly symmetric under argument swap.
pub fn square_layer<T: Element>(tape: &mut Tape<T>, f1: NodeId, f2: NodeId) -> Result<NodeId> {
    tape.squared_diff(f1, f2)
}

/// Dropout followed by the affine map to two logits.
pub fn verification_logits<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    head: &VerificationHead,
    f_s: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let (_, d) = tape.value(f_s).dims2("verification_forward")?;
    ensure_contract!(
        d == head.descriptor_dim,
        "verification_forward",
        "descriptor width {d} does not match head width {}",
        head.descriptor_dim
    );
    let dropped = tape.dropout(f_s, head.dropout_p, mode, rng)?;
    let w = tape.param(THETA_WEIGHT, params.get(THETA_WEIGHT)?)?;
    let b = tape.param(THETA_BIAS, params.get(THETA_BIAS)?)?;
    tape.linear(dropped, w, Some(b))
}

/// Row probabilities `q_hat = softmax(theta . f_s)`.
pub fn verification_forward<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    head: &VerificationHead,
    f_s: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let logits = verification_logits(tape, params, head, f_s, mode, rng)?;
    ops::softmax_rows(tape.value(logits))
}

/// Mean cross-entropy of already-computed probabilities; a metric helper,
/// the differentiable path uses the fused softmax + cross-entropy op.
pub fn verification_loss_from_probs<T: Element>(
    probs: &Tensor<T>,
    labels: &[PairLabel],
) -> Result<f64> {
    let (n, k) = probs.dims2("verification_loss")?;
    ensure_contract!(k == 2, "verification_loss", "expected 2 columns, got {k}");
    ensure_contract!(
        labels.len() == n,
        "verification_loss",
        "{} labels for {n} rows",
        labels.len()
    );
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        loss -= probs.data()[i * 2 + label.class_index()].to_f64().ln();
    }
    Ok(loss / n as f64)
}

/// Probability that two descriptors belong to the same person: square layer,
/// affine head, softmax. Eval path, no dropout.
pub fn pair_score_from_descriptors<T: Element>(
    params: &ModelParams<T>,
    head: &VerificationHead,
    f1: &Tensor<T>,
    f2: &Tensor<T>,
) -> Result<f64> {
    let f_s = ops::squared_diff(f1, f2)?;
    let (_, d) = f_s.dims2("pair_score")?;
    ensure_contract!(
        d == head.descriptor_dim,
        "pair_score",
        "descriptor width {d} does not match head width {}",
        head.descriptor_dim
    );
    let logits = ops::linear(&f_s, params.get(THETA_WEIGHT)?, Some(params.get(THETA_BIAS)?))?;
    let probs = ops::softmax_rows(&logits)?;
    Ok(probs.data()[0].to_f64())
}

/// Scores one image pair in eval mode. Both images must be preprocessed
/// `3 x H x W` tensors at the configured resolution. The score is symmetric:
/// swapping the arguments returns the bit-identical probability.
pub fn pair_score<T: Element>(
    params: &ModelParams<T>,
    config: &BackboneConfig,
    head: &VerificationHead,
    img_a: &Tensor<T>,
    img_b: &Tensor<T>,
) -> Result<f64> {
    const OP: &str = "pair_score";
    for img in [img_a, img_b] {
        ensure_contract!(
            img.shape().len() == 3
                && img.shape()[0] == 3
                && (img.shape()[1], img.shape()[2]) == config.resolution,
            OP,
            "image shape {:?} does not match 3x{}x{}",
            img.shape(),
            config.resolution.0,
            config.resolution.1
        );
    }
    let batch = Tensor::stack(&[img_a, img_b])?;
    let mut tape = Tape::no_grad();
    let images = tape.leaf(&batch);
    let mut stats = StatUpdates::new();
    let descriptors = forward_features(&mut tape, params, config, images, Mode::Eval, &mut stats)?;
    let d = tape.value(descriptors);
    pair_score_from_descriptors(params, head, &d.row(0)?, &d.row(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_model;
    use crate::rng::stream_rng;

    #[test]
    fn square_layer_arithmetic() {
        let a = Tensor::<f64>::new(vec![1, 2], vec![3.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let fs = ops::squared_diff(&a, &b).unwrap();
        assert_eq!(fs.data(), &[4.0, 1.0]);
        let zero = ops::squared_diff(&a, &a).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        assert!(ops::squared_diff(&a, &Tensor::zeros(vec![1, 3])).is_err());
    }

    #[test]
    fn square_layer_is_bit_symmetric() {
        let mut rng = stream_rng(3, "head");
        for _ in 0..32 {
            let a = Tensor::<f32>::randn(vec![1, 16], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(vec![1, 16], 1.0, &mut rng);
            let ab = ops::squared_diff(&a, &b).unwrap();
            let ba = ops::squared_diff(&b, &a).unwrap();
            assert!(ab.bit_eq(&ba));
        }
    }

    #[test]
    fn zero_head_scores_half() {
        let head = VerificationHead::new(8, 0.5).unwrap();
        let mut params = ModelParams::<f64>::new();
        head.init_params(&mut params).unwrap();
        let mut rng = stream_rng(0, "dropout");
        let f_s = Tensor::<f64>::rand_uniform(vec![4, 8], 0.0, 2.0, &mut stream_rng(1, "head"));
        let mut tape = Tape::no_grad();
        let fs_id = tape.leaf(&f_s);
        let probs = verification_forward(&mut tape, &params, &head, fs_id, Mode::Eval, &mut rng)
            .unwrap();
        for row in 0..4 {
            assert_eq!(probs.data()[row * 2], 0.5);
            assert_eq!(probs.data()[row * 2 + 1], 0.5);
        }
    }

    #[test]
    fn loss_examples_from_probabilities() {
        let probs = Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let loss = verification_loss_from_probs(&probs, &[PairLabel::Same]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        let perfect = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss0 = verification_loss_from_probs(&perfect, &[PairLabel::Same]).unwrap();
        assert_eq!(loss0, 0.0);

        let two = Tensor::<f64>::new(vec![2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let mean =
            verification_loss_from_probs(&two, &[PairLabel::Same, PairLabel::Same]).unwrap();
        assert!((mean - 0.346_574).abs() < 1e-6);
    }

    #[test]
    fn pair_score_is_symmetric_and_half_for_zero_head() {
        let config = crate::backbone::BackboneConfig::test_micro();
        let mut params = build_model::<f32>(&config, 21).unwrap();
        let head = VerificationHead::new(config.descriptor_dim, 0.5).unwrap();
        head.init_params(&mut params).unwrap();

        let mut rng = stream_rng(5, "images");
        let img_a = Tensor::<f32>::randn(vec![3, 8, 8], 1.0, &mut rng);
        let img_b = Tensor::<f32>::randn(vec![3, 8, 8], 1.0, &mut rng);

        let same = pair_score(&params, &config, &head, &img_a, &img_a).unwrap();
        assert_eq!(same, 0.5);

        let ab = pair_score(&params, &config, &head, &img_a, &img_b).unwrap();
        let ba = pair_score(&params, &config, &head, &img_b, &img_a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }
}
