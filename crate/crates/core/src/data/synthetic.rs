//! Synthetic pedestrian dataset: a desk-scale stand-in for camera-pair
//! re-identification data.
//!
//! Each identity gets a random appearance (head, torso and leg color blocks
//! with per-identity proportions) rendered at 160x80. Camera A renders the
//! figure as-is; camera B narrows it, shifts it and changes its photometry,
//! so the two views of one person differ systematically while staying closer
//! to each other than to other identities. Per-image jitter and pixel noise
//! keep repeated shots distinct.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Camera, IdentityDataset, Record, SplitTag};
use crate::error::{ensure_contract, Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const SYNTH_HEIGHT: usize = 160;
pub const SYNTH_WIDTH: usize = 80;

/// Color palette levels; quantized so identities are well separated.
const LEVELS: [f32; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Debug)]
struct Appearance {
    torso_rgb: [f32; 3],
    legs_rgb: [f32; 3],
    skin: f32,
    torso_half_width: usize,
    torso_top: usize,
    torso_bottom: usize,
    legs_bottom: usize,
    head_radius: usize,
    leg_gap: usize,
}

fn sample_palette_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        LEVELS[rng.random_range(0..LEVELS.len())],
        LEVELS[rng.random_range(0..LEVELS.len())],
        LEVELS[rng.random_range(0..LEVELS.len())],
    ]
}

fn sample_appearance(rng: &mut ChaCha8Rng) -> Appearance {
    Appearance {
        torso_rgb: sample_palette_color(rng),
        legs_rgb: sample_palette_color(rng),
        skin: rng.random_range(0.55..0.85),
        torso_half_width: rng.random_range(12..21),
        torso_top: rng.random_range(30..37),
        torso_bottom: rng.random_range(88..97),
        legs_bottom: rng.random_range(140..152),
        head_radius: rng.random_range(7..11),
        leg_gap: rng.random_range(2..7),
    }
}

struct CameraStyle {
    width_scale: f32,
    shift_x: isize,
    brightness: f32,
    blue_bias: f32,
}

fn camera_style(camera: Camera) -> CameraStyle {
    match camera {
        Camera::A => CameraStyle {
            width_scale: 1.0,
            shift_x: 0,
            brightness: 1.0,
            blue_bias: 0.0,
        },
        Camera::B => CameraStyle {
            width_scale: 0.8,
            shift_x: 3,
            brightness: 0.92,
            blue_bias: 0.04,
        },
    }
}

fn put_pixel(data: &mut [f32], y: isize, x: isize, rgb: [f32; 3]) {
    if y < 0 || y >= SYNTH_HEIGHT as isize || x < 0 || x >= SYNTH_WIDTH as isize {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    for c in 0..3 {
        data[(c * SYNTH_HEIGHT + y) * SYNTH_WIDTH + x] = rgb[c];
    }
}

fn render(app: &Appearance, camera: Camera, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let style = camera_style(camera);
    let jitter_x = rng.random_range(-2i32..=2) as isize;
    let jitter_y = rng.random_range(-3i32..=3) as isize;

    let mut data = vec![0.32f32; 3 * SYNTH_HEIGHT * SYNTH_WIDTH];
    let cx = SYNTH_WIDTH as isize / 2 + style.shift_x + jitter_x;

    // Head.
    let head_cy = (app.torso_top as isize - app.head_radius as isize - 2) + jitter_y;
    let r = app.head_radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put_pixel(&mut data, head_cy + dy, cx + dx, [app.skin, app.skin, app.skin]);
            }
        }
    }

    // Torso.
    let half_w = ((app.torso_half_width as f32) * style.width_scale).round() as isize;
    for y in app.torso_top..app.torso_bottom {
        for dx in -half_w..=half_w {
            put_pixel(&mut data, y as isize + jitter_y, cx + dx, app.torso_rgb);
        }
    }

    // Legs: two columns separated by a gap.
    let leg_w = (half_w - app.leg_gap as isize / 2).max(2);
    for y in app.torso_bottom..app.legs_bottom {
        for dx in (app.leg_gap as isize / 2)..leg_w {
            put_pixel(&mut data, y as isize + jitter_y, cx - dx, app.legs_rgb);
            put_pixel(&mut data, y as isize + jitter_y, cx + dx, app.legs_rgb);
        }
    }

    // Photometry and per-pixel noise.
    for v in data.iter_mut() {
        let noise: f64 = StandardNormal.sample(rng);
        *v = (*v * style.brightness + 0.02 * noise as f32).clamp(0.0, 1.0);
    }
    if style.blue_bias != 0.0 {
        let blue = &mut data[2 * SYNTH_HEIGHT * SYNTH_WIDTH..];
        for v in blue.iter_mut() {
            *v = (*v + style.blue_bias).clamp(0.0, 1.0);
        }
    }

    Tensor::new(vec![3, SYNTH_HEIGHT, SYNTH_WIDTH], data).expect("fixed canvas shape")
}

/// Mean intra-identity and inter-identity pixel distances over a bounded
/// deterministic subsample of image pairs.
#[derive(Clone, Copy, Debug)]
pub struct SeparationStats {
    pub mean_intra: f64,
    pub mean_inter: f64,
}

pub fn separation_stats(dataset: &IdentityDataset, max_pairs: usize) -> SeparationStats {
    let n = dataset.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    let stride = (pairs.len() / max_pairs.max(1)).max(1);
    let mut intra = (0.0f64, 0u64);
    let mut inter = (0.0f64, 0u64);
    for (i, j) in pairs.into_iter().step_by(stride) {
        let a = dataset.record(i);
        let b = dataset.record(j);
        let mut sq = 0.0f64;
        for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
            let d = (x - y) as f64;
            sq += d * d;
        }
        let dist = sq.sqrt();
        if a.identity == b.identity {
            intra = (intra.0 + dist, intra.1 + 1);
        } else {
            inter = (inter.0 + dist, inter.1 + 1);
        }
    }
    SeparationStats {
        mean_intra: intra.0 / intra.1.max(1) as f64,
        mean_inter: inter.0 / inter.1.max(1) as f64,
    }
}

/// Generates `n_ids` identities with `imgs_per_camera` images per camera.
/// Deterministic for a given seed. The generated set is verified to keep
/// same-identity images closer (in mean pixel distance) than cross-identity
/// images.
pub fn generate_synthetic(
    n_ids: usize,
    imgs_per_camera: usize,
    seed: u64,
) -> Result<IdentityDataset> {
    const OP: &str = "generate_synthetic";
    ensure_contract!(n_ids >= 2, OP, "need at least 2 identities, got {n_ids}");
    ensure_contract!(
        imgs_per_camera >= 1,
        OP,
        "need at least 1 image per camera, got {imgs_per_camera}"
    );

    let mut rng = stream_rng(seed, "synth");
    let mut records = Vec::with_capacity(n_ids * imgs_per_camera * 2);
    for id in 0..n_ids {
        let appearance = sample_appearance(&mut rng);
        for camera in [Camera::A, Camera::B] {
            for _ in 0..imgs_per_camera {
                records.push(Record {
                    identity: id as u32,
                    camera,
                    image: render(&appearance, camera, &mut rng),
                });
            }
        }
    }
    let dataset = IdentityDataset::from_records(SplitTag::Full, records)?;

    let stats = separation_stats(&dataset, 2000);
    if stats.mean_intra >= stats.mean_inter {
        return Err(Error::contract(
            OP,
            format!(
                "generated set is not separable: mean intra {:.4} >= mean inter {:.4}",
                stats.mean_intra, stats.mean_inter
            ),
        ));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_shapes() {
        let ds = generate_synthetic(8, 2, 7).unwrap();
        assert_eq!(ds.len(), 32);
        assert_eq!(ds.n_identities(), 8);
        for id in ds.identities() {
            assert_eq!(ds.images_of(id, Camera::A).len(), 2);
            assert_eq!(ds.images_of(id, Camera::B).len(), 2);
        }
        assert_eq!(ds.record(0).image.shape(), &[3, 160, 80]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(4, 1, 11).unwrap();
        let b = generate_synthetic(4, 1, 11).unwrap();
        for (ra, rb) in a.records().iter().zip(b.records()) {
            assert_eq!(ra.identity, rb.identity);
            assert!(ra.image.bit_eq(&rb.image));
        }
        let c = generate_synthetic(4, 1, 12).unwrap();
        assert!(!a.record(0).image.bit_eq(&c.record(0).image));
    }

    #[test]
    fn intra_distance_below_inter_distance() {
        let ds = generate_synthetic(8, 2, 3).unwrap();
        let stats = separation_stats(&ds, 2000);
        assert!(
            stats.mean_intra < stats.mean_inter,
            "intra {} vs inter {}",
            stats.mean_intra,
            stats.mean_inter
        );
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic(1, 2, 0).is_err());
        assert!(generate_synthetic(4, 0, 0).is_err());
    }
}
