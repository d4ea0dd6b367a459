//! MBConv feature extractor with compound scaling.
//!
//! The stage table describes an inverted-bottleneck network: pointwise
//! expand, depthwise convolution, pointwise project, with an identity skip
//! when the block preserves stride and channel count. A width/depth
//! multiplier pair rescales the whole table at a fixed ratio. The default
//! configuration is a laptop-sized analogue of the usual B0 layout for
//! 160x80 pedestrian crops.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_contract, Error, Result};
use crate::tensor::ops::BnBatchStats;
use crate::tensor::tape::{Mode, NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// Epsilon inside every batch-norm denominator.
pub const BN_EPSILON: f64 = 1e-3;

/// One stage of the backbone: `layers` MBConv blocks sharing a kernel size
/// and expansion ratio. Only the first block of a stage may downsample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub kernel: usize,
    pub stride: usize,
    pub expand: usize,
    pub channels: usize,
    pub layers: usize,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "StageSpec";
        ensure_contract!(
            self.kernel == 3 || self.kernel == 5,
            OP,
            "kernel must be 3 or 5, got {}",
            self.kernel
        );
        ensure_contract!(
            self.stride == 1 || self.stride == 2,
            OP,
            "stride must be 1 or 2, got {}",
            self.stride
        );
        ensure_contract!(self.expand >= 1, OP, "expansion ratio must be >= 1");
        ensure_contract!(self.channels > 0, OP, "channels must be positive");
        ensure_contract!(self.layers >= 1, OP, "layer count must be >= 1");
        Ok(())
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k{}s{}e{}c{}l{}",
            self.kernel, self.stride, self.expand, self.channels, self.layers
        )
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// Parses the compact `k3s2e4c24l2` form used in config files.
    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::contract("StageSpec", format!("cannot parse stage spec {s:?}"));
        let mut fields = [0usize; 5];
        let mut chars = s.chars().peekable();
        for (i, key) in ['k', 's', 'e', 'c', 'l'].into_iter().enumerate() {
            if chars.next() != Some(key) {
                return Err(err());
            }
            let mut digits = String::new();
            while let Some(c) = chars.peek() {
                if c.is_ascii_digit() {
                    digits.push(*c);
                    chars.next();
                } else {
                    break;
                }
            }
            fields[i] = digits.parse().map_err(|_| err())?;
        }
        if chars.next().is_some() {
            return Err(err());
        }
        let spec = StageSpec {
            kernel: fields[0],
            stride: fields[1],
            expand: fields[2],
            channels: fields[3],
            layers: fields[4],
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub top_channels: usize,
    /// Width of the descriptor each image is reduced to.
    pub descriptor_dim: usize,
    /// Input resolution as (height, width).
    pub resolution: (usize, usize),
    /// Cumulative multipliers applied via [`scale_config`], recorded for
    /// config echoes.
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Reserved: squeeze-and-excitation inside each block is not implemented.
    pub squeeze_excite: bool,
}

impl BackboneConfig {
    /// Default micro configuration ("B0-micro"): the usual block topology at
    /// a size a laptop trains in minutes.
    pub fn b0_micro() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stages: vec![
                StageSpec { kernel: 3, stride: 1, expand: 1, channels: 16, layers: 1 },
                StageSpec { kernel: 3, stride: 2, expand: 4, channels: 24, layers: 2 },
                StageSpec { kernel: 5, stride: 2, expand: 4, channels: 40, layers: 2 },
                StageSpec { kernel: 3, stride: 2, expand: 4, channels: 64, layers: 2 },
            ],
            top_channels: 128,
            descriptor_dim: 64,
            resolution: (160, 80),
            width_mult: 1.0,
            depth_mult: 1.0,
            squeeze_excite: false,
        }
    }

    /// Tiny configuration used by gradient checks and fast tests.
    pub fn test_micro() -> Self {
        BackboneConfig {
            stem_channels: 4,
            stages: vec![
                StageSpec { kernel: 3, stride: 1, expand: 1, channels: 4, layers: 1 },
                StageSpec { kernel: 3, stride: 2, expand: 2, channels: 8, layers: 1 },
            ],
            top_channels: 8,
            descriptor_dim: 4,
            resolution: (8, 8),
            width_mult: 1.0,
            depth_mult: 1.0,
            squeeze_excite: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "BackboneConfig";
        ensure_contract!(self.stem_channels > 0, OP, "stem channels must be positive");
        ensure_contract!(self.top_channels > 0, OP, "top channels must be positive");
        ensure_contract!(
            self.descriptor_dim > 0,
            OP,
            "descriptor dimension must be positive"
        );
        ensure_contract!(!self.stages.is_empty(), OP, "at least one stage required");
        for stage in &self.stages {
            stage.validate()?;
        }
        ensure_contract!(
            self.resolution.0 > 0 && self.resolution.1 > 0,
            OP,
            "resolution must be positive, got {:?}",
            self.resolution
        );
        ensure_contract!(
            !self.squeeze_excite,
            OP,
            "squeeze-and-excitation blocks are reserved and not implemented"
        );
        Ok(())
    }

    /// Convolutional layer count: stem + one per block + top, matching the
    /// coarse counting where an MBConv block is one layer.
    pub fn conv_layer_count(&self) -> usize {
        1 + self.stages.iter().map(|s| s.layers).sum::<usize>() + 1
    }

    /// Flattens the stage table into per-block build instructions.
    pub fn plan(&self) -> NetPlan {
        let mut blocks = Vec::new();
        let mut in_ch = self.stem_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.layers {
                let stride = if bi == 0 { stage.stride } else { 1 };
                blocks.push(BlockPlan {
                    name: format!("stages.{si}.{bi}"),
                    in_ch,
                    out_ch: stage.channels,
                    exp_ch: in_ch * stage.expand,
                    kernel: stage.kernel,
                    stride,
                });
                in_ch = stage.channels;
            }
        }
        NetPlan {
            stem_out: self.stem_channels,
            top_in: in_ch,
            top_out: self.top_channels,
            descriptor_dim: self.descriptor_dim,
            blocks,
        }
    }
}

/// Build instructions for one MBConv block.
#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub exp_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct NetPlan {
    pub stem_out: usize,
    pub blocks: Vec<BlockPlan>,
    pub top_in: usize,
    pub top_out: usize,
    pub descriptor_dim: usize,
}

/// Rounds a scaled channel count to the nearest multiple of 8, never going
/// below 90% of the unrounded value.
pub fn round_channels(channels: f64) -> usize {
    let rounded = usize::max(8, ((channels + 4.0) as usize / 8) * 8);
    if (rounded as f64) < 0.9 * channels {
        rounded + 8
    } else {
        rounded
    }
}

/// Uniformly rescales width (channels) and depth (layers per stage). The
/// input resolution is a config field the caller sets separately.
pub fn scale_config(
    base: &BackboneConfig,
    width_mult: f64,
    depth_mult: f64,
) -> Result<BackboneConfig> {
    const OP: &str = "scale_config";
    ensure_contract!(
        width_mult > 0.0 && depth_mult > 0.0,
        OP,
        "multipliers must be positive, got width {width_mult}, depth {depth_mult}"
    );
    let stages = base
        .stages
        .iter()
        .map(|s| StageSpec {
            channels: round_channels(s.channels as f64 * width_mult),
            layers: (s.layers as f64 * depth_mult).ceil() as usize,
            ..s.clone()
        })
        .collect();
    let scaled = BackboneConfig {
        stem_channels: round_channels(base.stem_channels as f64 * width_mult),
        top_channels: round_channels(base.top_channels as f64 * width_mult),
        stages,
        width_mult: base.width_mult * width_mult,
        depth_mult: base.depth_mult * depth_mult,
        ..base.clone()
    };
    scaled.validate()?;
    Ok(scaled)
}

/// Named parameter map with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<T: Element = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        ensure_contract!(
            !self.map.contains_key(name),
            "ModelParams::insert",
            "parameter {name:?} already exists"
        );
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let current = self.get(name)?;
        ensure_contract!(
            current.shape() == tensor.shape(),
            "ModelParams::set",
            "shape change for {name:?}: {:?} -> {:?}",
            current.shape(),
            tensor.shape()
        );
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract("ModelParams::get", format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Running statistics are carried in the map but are not optimized.
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            map: self
                .map
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}

fn insert_bn<T: Element>(params: &mut ModelParams<T>, prefix: &str, channels: usize) -> Result<()> {
    params.insert(
        &format!("{prefix}.gamma"),
        Tensor::full(vec![channels], T::ONE).with_requires_grad(true),
    )?;
    params.insert(
        &format!("{prefix}.beta"),
        Tensor::zeros(vec![channels]).with_requires_grad(true),
    )?;
    params.insert(&format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]))?;
    params.insert(
        &format!("{prefix}.running_var"),
        Tensor::full(vec![channels], T::ONE),
    )?;
    Ok(())
}

fn conv_init<T: Element>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape, std, rng).with_requires_grad(true)
}

/// Instantiates all parameters of the backbone: fan-in-scaled normal conv
/// weights, unit gamma / zero beta norms, zero/one running statistics.
/// Deterministic for a given seed.
pub fn build_model<T: Element>(config: &BackboneConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let plan = config.plan();
    let mut rng = crate::rng::stream_rng(seed, "init");
    let mut params = ModelParams::new();

    params.insert(
        "stem.conv.weight",
        conv_init(vec![plan.stem_out, 3, 3, 3], 3 * 3 * 3, &mut rng),
    )?;
    insert_bn(&mut params, "stem.bn", plan.stem_out)?;

    for block in &plan.blocks {
        if block.exp_ch != block.in_ch {
            params.insert(
                &format!("{}.expand.conv.weight", block.name),
                conv_init(vec![block.exp_ch, block.in_ch, 1, 1], block.in_ch, &mut rng),
            )?;
            insert_bn(&mut params, &format!("{}.expand.bn", block.name), block.exp_ch)?;
        }
        params.insert(
            &format!("{}.depthwise.conv.weight", block.name),
            conv_init(
                vec![block.exp_ch, 1, block.kernel, block.kernel],
                block.kernel * block.kernel,
                &mut rng,
            ),
        )?;
        insert_bn(&mut params, &format!("{}.depthwise.bn", block.name), block.exp_ch)?;
        params.insert(
            &format!("{}.project.conv.weight", block.name),
            conv_init(vec![block.out_ch, block.exp_ch, 1, 1], block.exp_ch, &mut rng),
        )?;
        insert_bn(&mut params, &format!("{}.project.bn", block.name), block.out_ch)?;
    }

    params.insert(
        "top.conv.weight",
        conv_init(vec![plan.top_out, plan.top_in, 1, 1], plan.top_in, &mut rng),
    )?;
    insert_bn(&mut params, "top.bn", plan.top_out)?;
    params.insert(
        "top.proj.weight",
        conv_init(vec![plan.descriptor_dim, plan.top_out], plan.top_out, &mut rng),
    )?;
    params.insert(
        "top.proj.bias",
        Tensor::zeros(vec![plan.descriptor_dim]).with_requires_grad(true),
    )?;

    debug_assert!(params.all_finite());
    Ok(params)
}

/// Batch statistics produced by train-mode forward passes, keyed by the
/// batch-norm prefix that produced them.
pub type StatUpdates<T> = Vec<(String, BnBatchStats<T>)>;

/// Folds collected batch statistics into the running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_stat_updates<T: Element>(
    params: &mut ModelParams<T>,
    updates: &StatUpdates<T>,
    momentum: f64,
) -> Result<()> {
    let keep = T::from_f64(momentum);
    let take = T::from_f64(1.0 - momentum);
    for (prefix, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let current = params.get(&name)?;
            let blended: Vec<T> = current
                .data()
                .iter()
                .zip(batch.data())
                .map(|(&r, &b)| keep * r + take * b)
                .collect();
            let tensor = Tensor::new(current.shape().to_vec(), blended)?;
            params.set(&name, tensor)?;
        }
    }
    Ok(())
}

fn conv_bn_act<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    prefix: &str,
    x: NodeId,
    stride: usize,
    padding: usize,
    depthwise: bool,
    activate: bool,
    mode: Mode,
    stats: &mut StatUpdates<T>,
) -> Result<NodeId> {
    let weight = tape.param(
        &format!("{prefix}.conv.weight"),
        params.get(&format!("{prefix}.conv.weight"))?,
    )?;
    let h = if depthwise {
        tape.depthwise_conv2d(x, weight, stride, padding)?
    } else {
        tape.conv2d(x, weight, None, stride, padding)?
    };
    let gamma = tape.param(
        &format!("{prefix}.bn.gamma"),
        params.get(&format!("{prefix}.bn.gamma"))?,
    )?;
    let beta = tape.param(
        &format!("{prefix}.bn.beta"),
        params.get(&format!("{prefix}.bn.beta"))?,
    )?;
    let (h, batch_stats) = tape.batch_norm(
        h,
        gamma,
        beta,
        params.get(&format!("{prefix}.bn.running_mean"))?,
        params.get(&format!("{prefix}.bn.running_var"))?,
        mode,
        BN_EPSILON,
    )?;
    if let Some(s) = batch_stats {
        stats.push((format!("{prefix}.bn"), s));
    }
    Ok(if activate { tape.swish(h) } else { h })
}

/// One inverted-bottleneck block: expand (when the ratio exceeds one),
/// depthwise, project, plus the identity skip for stride-1 channel-preserving
/// blocks. Norm and swish follow expand and depthwise; project is norm-only.
pub fn mbconv_forward<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    block: &BlockPlan,
    x: NodeId,
    mode: Mode,
    stats: &mut StatUpdates<T>,
) -> Result<NodeId> {
    let skip = block.stride == 1 && block.in_ch == block.out_ch;
    let mut h = x;
    if block.exp_ch != block.in_ch {
        h = conv_bn_act(
            tape,
            params,
            &format!("{}.expand", block.name),
            h,
            1,
            0,
            false,
            true,
            mode,
            stats,
        )?;
    }
    h = conv_bn_act(
        tape,
        params,
        &format!("{}.depthwise", block.name),
        h,
        block.stride,
        block.kernel / 2,
        true,
        true,
        mode,
        stats,
    )?;
    h = conv_bn_act(
        tape,
        params,
        &format!("{}.project", block.name),
        h,
        1,
        0,
        false,
        false,
        mode,
        stats,
    )?;
    if skip {
        h = tape.add(h, x)?;
    }
    Ok(h)
}

/// Full feature extraction: stem, stages, top pointwise conv, global average
/// pool, projection to the descriptor.
pub fn forward_features<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    config: &BackboneConfig,
    images: NodeId,
    mode: Mode,
    stats: &mut StatUpdates<T>,
) -> Result<NodeId> {
    const OP: &str = "forward_features";
    let (_, c, h, w) = tape.value(images).dims4(OP)?;
    ensure_contract!(c == 3, OP, "expected 3 input channels, got {c}");
    ensure_contract!(
        (h, w) == config.resolution,
        OP,
        "input resolution {h}x{w} does not match configured {}x{}",
        config.resolution.0,
        config.resolution.1
    );

    let plan = config.plan();
    let mut x = conv_bn_act(tape, params, "stem", images, 2, 1, false, true, mode, stats)?;
    for block in &plan.blocks {
        x = mbconv_forward(tape, params, block, x, mode, stats)?;
    }
    x = conv_bn_act(tape, params, "top", x, 1, 0, false, true, mode, stats)?;
    let pooled = tape.global_avg_pool(x)?;
    let proj_w = tape.param("top.proj.weight", params.get("top.proj.weight")?)?;
    let proj_b = tape.param("top.proj.bias", params.get("top.proj.bias")?)?;
    tape.linear(pooled, proj_w, Some(proj_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_identity_leaves_config_unchanged() {
        let base = BackboneConfig::b0_micro();
        let scaled = scale_config(&base, 1.0, 1.0).unwrap();
        assert_eq!(base, scaled);
    }

    #[test]
    fn rounding_rule_matches_hand_evaluation() {
        // 32 * 1.1 = 35.2 rounds down to 32, and 32 >= 0.9 * 35.2.
        assert_eq!(round_channels(32.0 * 1.1), 32);
        // Below-floor case bumps to the next multiple of 8.
        assert_eq!(round_channels(30.0), 32);
        assert_eq!(round_channels(3.0), 8);
    }

    #[test]
    fn depth_scaling_uses_ceil() {
        let base = BackboneConfig::b0_micro();
        let scaled = scale_config(&base, 1.0, 1.2).unwrap();
        assert_eq!(scaled.stages[1].layers, 3); // ceil(2 * 1.2)
        assert_eq!(scaled.stages[0].layers, 2); // ceil(1 * 1.2)
    }

    #[test]
    fn build_is_deterministic_and_finite() {
        let config = BackboneConfig::test_micro();
        let a = build_model::<f32>(&config, 9).unwrap();
        let b = build_model::<f32>(&config, 9).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "{na} differs between builds");
        }
        assert!(a.all_finite());
        let c = build_model::<f32>(&config, 10).unwrap();
        assert!(!a.get("stem.conv.weight").unwrap().bit_eq(c.get("stem.conv.weight").unwrap()));
    }

    #[test]
    fn stage_spec_round_trips_through_display() {
        let s = StageSpec { kernel: 5, stride: 2, expand: 4, channels: 40, layers: 2 };
        let parsed: StageSpec = s.to_string().parse().unwrap();
        assert_eq!(s, parsed);
        assert!("k4s1e1c8l1".parse::<StageSpec>().is_err());
        assert!("x3s1e1c8l1".parse::<StageSpec>().is_err());
    }

    #[test]
    fn forward_rejects_wrong_resolution() {
        let config = BackboneConfig::test_micro();
        let params = build_model::<f32>(&config, 1).unwrap();
        let mut tape = Tape::no_grad();
        let images = tape.leaf(&Tensor::zeros(vec![1, 3, 16, 16]));
        let mut stats = StatUpdates::new();
        let err = forward_features(&mut tape, &params, &config, images, Mode::Eval, &mut stats)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16x16") && msg.contains("8x8"), "message: {msg}");
    }

    #[test]
    fn conv_layer_count_matches_stage_table() {
        let config = BackboneConfig::b0_micro();
        // stem + (1 + 2 + 2 + 2) blocks + top
        assert_eq!(config.conv_layer_count(), 9);
    }
}
