//! Image augmentation (horizontal flip, zoom, width shift) and the
//! resize-plus-standardize step that feeds the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_contract, Result};
use crate::tensor::Tensor;

/// Fixed standardization constants, applied per channel after scaling to
/// `[0, 1]`: `(x - MEAN) / STD`. Dataset-independent so checkpoints are too.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Uniform zoom range as (min, max) scale factors.
    pub zoom: (f64, f64),
    /// Horizontal shift range as a fraction of the image width.
    pub shift_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            zoom: (0.9, 1.1),
            shift_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            zoom: (1.0, 1.0),
            shift_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "AugmentConfig";
        ensure_contract!(
            (0.0..=1.0).contains(&self.flip_prob),
            OP,
            "flip probability must be in [0, 1], got {}",
            self.flip_prob
        );
        ensure_contract!(
            self.zoom.0 > 0.0 && self.zoom.0 <= self.zoom.1,
            OP,
            "zoom range must satisfy 0 < min <= max, got {:?}",
            self.zoom
        );
        ensure_contract!(
            (0.0..=0.5).contains(&self.shift_frac),
            OP,
            "shift fraction must be in [0, 0.5], got {}",
            self.shift_frac
        );
        Ok(())
    }
}

/// Bilinear sample with edge replication outside the image.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = y - y0 as f32;
    let tx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

fn horizontal_flip(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0f32; image.numel()];
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * h + y) * w;
            for x in 0..w {
                out[base + x] = image.data()[base + (w - 1 - x)];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Rescales about the image center; zoom-out regions are filled by edge
/// replication through coordinate clamping.
fn zoom_about_center(image: &Tensor<f32>, scale: f32) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let cy = (h - 1) as f32 / 2.0;
    let cx = (w - 1) as f32 / 2.0;
    let mut out = vec![0.0f32; image.numel()];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = cy + (y as f32 - cy) / scale;
            for x in 0..w {
                let sx = cx + (x as f32 - cx) / scale;
                out[(ch * h + y) * w + x] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

fn shift_horizontal(image: &Tensor<f32>, dx: f32) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0f32; image.numel()];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = sample_bilinear(plane, h, w, y as f32, x as f32 - dx);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Applies flip (with its probability), a uniform-random zoom and a
/// uniform-random horizontal shift. Output shape equals input shape and
/// values stay in `[0, 1]`. Always consumes exactly three random draws.
pub fn augment(image: &Tensor<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    config.validate()?;
    ensure_contract!(
        image.shape().len() == 3,
        "augment",
        "expected a 3 x H x W image, got {:?}",
        image.shape()
    );
    let flip_u: f64 = rng.random();
    let zoom_u: f64 = rng.random();
    let shift_u: f64 = rng.random();

    let mut out = if flip_u < config.flip_prob {
        horizontal_flip(image)
    } else {
        image.clone()
    };
    let scale = config.zoom.0 + zoom_u * (config.zoom.1 - config.zoom.0);
    if scale != 1.0 {
        out = zoom_about_center(&out, scale as f32);
    }
    let width = image.shape()[2] as f64;
    let dx = (2.0 * shift_u - 1.0) * config.shift_frac * width;
    if dx != 0.0 {
        out = shift_horizontal(&out, dx as f32);
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Bilinear resize of a `3 x H x W` image. Samples at
/// `src = (dst + 0.5) * in/out - 0.5` with edge clamping, so a same-size
/// resize is exact.
pub fn bilinear_resize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    const OP: &str = "bilinear_resize";
    ensure_contract!(
        image.shape().len() == 3,
        OP,
        "expected rank-3 input, got {:?}",
        image.shape()
    );
    ensure_contract!(out_h > 0 && out_w > 0, OP, "output size must be positive");
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let src_y = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                let src_x = (x as f32 + 0.5) * sx - 0.5;
                out[(ch * out_h + y) * out_w + x] = sample_bilinear(plane, h, w, src_y, src_x);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Resizes to the network resolution and standardizes with the fixed
/// per-channel constants.
pub fn resize_normalize(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    ensure_contract!(
        image.shape().len() == 3 && image.shape()[0] == 3,
        "resize_normalize",
        "expected a 3-channel image, got shape {:?}",
        image.shape()
    );
    let resized = bilinear_resize(image, out_h, out_w)?;
    Ok(resized.map(|v| (v - NORM_MEAN) / NORM_STD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn identity_config_is_identity() {
        let mut rng = stream_rng(1, "augment");
        let img = Tensor::from_fn(vec![3, 6, 4], |i| (i % 7) as f32 / 7.0);
        let out = augment(&img, &AugmentConfig::identity(), &mut rng).unwrap();
        assert!(img.bit_eq(&out));
    }

    #[test]
    fn double_flip_restores_original() {
        let img = Tensor::from_fn(vec![3, 4, 5], |i| (i % 11) as f32 / 11.0);
        let once = horizontal_flip(&img);
        let twice = horizontal_flip(&once);
        assert!(img.bit_eq(&twice));
        assert!(!img.bit_eq(&once));
    }

    #[test]
    fn standardized_mid_gray_is_zero() {
        let img = Tensor::full(vec![3, 160, 80], 0.5);
        let out = resize_normalize(&img, 160, 80).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_changes_shape_only() {
        let img = Tensor::from_fn(vec![3, 320, 160], |i| (i % 3) as f32 / 3.0);
        let out = resize_normalize(&img, 160, 80).unwrap();
        assert_eq!(out.shape(), &[3, 160, 80]);
        assert!(resize_normalize(&Tensor::full(vec![1, 8, 8], 0.1), 160, 80).is_err());
    }
}
