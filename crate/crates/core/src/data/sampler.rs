//! Balanced pair-batch sampling.
//!
//! Positive pairs take one camera-A and one camera-B image of the same
//! identity; negative pairs take two images of different identities from any
//! cameras. Every batch holds exactly `round(pos_ratio * batch_size)`
//! positives. Selection and augmentation draw from separate generators so
//! one run seed reproduces the full epoch sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::{augment, resize_normalize, AugmentConfig};
use crate::data::{Camera, IdentityDataset};
use crate::error::{ensure_contract, DataError, Result};
use crate::head::PairLabel;
use crate::tensor::Tensor;

/// Where each half of a sampled pair came from; used by balance audits.
#[derive(Clone, Copy, Debug)]
pub struct PairProvenance {
    pub id1: u32,
    pub cam1: Camera,
    pub id2: u32,
    pub cam2: Camera,
}

/// Two aligned image batches plus same/different labels.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub images1: Tensor<f32>,
    pub images2: Tensor<f32>,
    pub labels: Vec<PairLabel>,
    pub provenance: Vec<PairProvenance>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == PairLabel::Same).count()
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub pos_ratio: f64,
    /// Output resolution (height, width) after resize.
    pub resolution: (usize, usize),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 48,
            pos_ratio: 0.5,
            resolution: (160, 80),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "SamplerConfig";
        ensure_contract!(self.batch_size > 0, OP, "batch size must be positive");
        ensure_contract!(
            (0.0..=1.0).contains(&self.pos_ratio),
            OP,
            "positive ratio must be in [0, 1], got {}",
            self.pos_ratio
        );
        Ok(())
    }

    pub fn positives_per_batch(&self) -> usize {
        (self.pos_ratio * self.batch_size as f64).round() as usize
    }
}

fn prepare(
    dataset: &IdentityDataset,
    record: usize,
    cfg: &SamplerConfig,
    aug: &AugmentConfig,
    rng_aug: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let augmented = augment(&dataset.record(record).image, aug, rng_aug)?;
    resize_normalize(&augmented, cfg.resolution.0, cfg.resolution.1)
}

/// Draws one balanced batch: positives first, then negatives. Deterministic
/// given the generators' states.
pub fn sample_pair_batch(
    dataset: &IdentityDataset,
    cfg: &SamplerConfig,
    aug: &AugmentConfig,
    rng_pairs: &mut ChaCha8Rng,
    rng_aug: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    const OP: &str = "sample_pair_batch";
    cfg.validate()?;
    aug.validate()?;
    ensure_contract!(
        dataset.n_identities() >= 2,
        OP,
        "need at least 2 identities, dataset has {}",
        dataset.n_identities()
    );
    let n_pos = cfg.positives_per_batch();
    let n_neg = cfg.batch_size - n_pos;

    let eligible = dataset.cross_camera_identities();
    if n_pos > 0 && eligible.is_empty() {
        return Err(DataError::NoCrossCameraIdentity.into());
    }
    let ids = dataset.identities();

    let mut rows1 = Vec::with_capacity(cfg.batch_size);
    let mut rows2 = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut provenance = Vec::with_capacity(cfg.batch_size);

    for _ in 0..n_pos {
        let id = eligible[rng_pairs.random_range(0..eligible.len())];
        let a_imgs = dataset.images_of(id, Camera::A);
        let b_imgs = dataset.images_of(id, Camera::B);
        let ra = a_imgs[rng_pairs.random_range(0..a_imgs.len())];
        let rb = b_imgs[rng_pairs.random_range(0..b_imgs.len())];
        rows1.push(prepare(dataset, ra, cfg, aug, rng_aug)?);
        rows2.push(prepare(dataset, rb, cfg, aug, rng_aug)?);
        labels.push(PairLabel::Same);
        provenance.push(PairProvenance {
            id1: id,
            cam1: Camera::A,
            id2: id,
            cam2: Camera::B,
        });
    }

    for _ in 0..n_neg {
        // Two distinct identities with a fixed draw count: the second index
        // is drawn from the remaining n-1 slots.
        let i1 = rng_pairs.random_range(0..ids.len());
        let mut i2 = rng_pairs.random_range(0..ids.len() - 1);
        if i2 >= i1 {
            i2 += 1;
        }
        let (id1, id2) = (ids[i1], ids[i2]);
        let recs1 = dataset.images_of_any(id1);
        let recs2 = dataset.images_of_any(id2);
        let r1 = recs1[rng_pairs.random_range(0..recs1.len())];
        let r2 = recs2[rng_pairs.random_range(0..recs2.len())];
        rows1.push(prepare(dataset, r1, cfg, aug, rng_aug)?);
        rows2.push(prepare(dataset, r2, cfg, aug, rng_aug)?);
        labels.push(PairLabel::Different);
        provenance.push(PairProvenance {
            id1,
            cam1: dataset.record(r1).camera,
            id2,
            cam2: dataset.record(r2).camera,
        });
    }

    let refs1: Vec<&Tensor<f32>> = rows1.iter().collect();
    let refs2: Vec<&Tensor<f32>> = rows2.iter().collect();
    Ok(PairBatch {
        images1: Tensor::stack(&refs1)?,
        images2: Tensor::stack(&refs2)?,
        labels,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;
    use crate::data::{Record, SplitTag};
    use crate::rng::stream_rng;

    #[test]
    fn default_batch_is_exactly_balanced() {
        let ds = generate_synthetic(8, 2, 1).unwrap();
        let cfg = SamplerConfig::default();
        let mut rp = stream_rng(1, "sampler");
        let mut ra = stream_rng(1, "augment");
        let batch =
            sample_pair_batch(&ds, &cfg, &AugmentConfig::default(), &mut rp, &mut ra).unwrap();
        assert_eq!(batch.len(), 48);
        assert_eq!(batch.positive_count(), 24);
        assert_eq!(batch.images1.shape(), &[48, 3, 160, 80]);
        for (label, p) in batch.labels.iter().zip(&batch.provenance) {
            match label {
                PairLabel::Same => {
                    assert_eq!(p.id1, p.id2);
                    assert_ne!(p.cam1, p.cam2);
                }
                PairLabel::Different => assert_ne!(p.id1, p.id2),
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = generate_synthetic(4, 2, 2).unwrap();
        let cfg = SamplerConfig {
            batch_size: 8,
            ..Default::default()
        };
        let draw = || {
            let mut rp = stream_rng(9, "sampler");
            let mut ra = stream_rng(9, "augment");
            sample_pair_batch(&ds, &cfg, &AugmentConfig::default(), &mut rp, &mut ra).unwrap()
        };
        let (b1, b2) = (draw(), draw());
        assert!(b1.images1.bit_eq(&b2.images1));
        assert!(b1.images2.bit_eq(&b2.images2));
        assert_eq!(b1.labels, b2.labels);
    }

    #[test]
    fn single_camera_dataset_cannot_make_positives() {
        let records: Vec<Record> = (0..4)
            .map(|id| Record {
                identity: id,
                camera: Camera::A,
                image: Tensor::full(vec![3, 8, 4], 0.5),
            })
            .collect();
        let ds = IdentityDataset::from_records(SplitTag::Full, records).unwrap();
        let cfg = SamplerConfig {
            batch_size: 4,
            resolution: (8, 4),
            ..Default::default()
        };
        let mut rp = stream_rng(0, "sampler");
        let mut ra = stream_rng(0, "augment");
        let err = sample_pair_batch(&ds, &cfg, &AugmentConfig::identity(), &mut rp, &mut ra)
            .unwrap_err();
        assert!(err.to_string().contains("both cameras"), "{err}");
    }
}
