//! Dataset ingestion, augmentation, and pair sampling.

pub mod augment;
pub mod load;
pub mod sampler;
pub mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{ensure_contract, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Which of the two non-overlapping cameras captured a record.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Camera {
    A,
    B,
}

impl std::fmt::Display for Camera {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Camera::A => write!(f, "A"),
            Camera::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// One image of one person from one camera. Images are `3 x H x W` tensors
/// with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Record {
    pub identity: u32,
    pub camera: Camera,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
struct CameraIndex {
    a: Vec<usize>,
    b: Vec<usize>,
}

/// An immutable set of identity-labeled, camera-labeled images.
#[derive(Clone, Debug)]
pub struct IdentityDataset {
    split: SplitTag,
    records: Vec<Record>,
    index: BTreeMap<u32, CameraIndex>,
}

impl IdentityDataset {
    pub fn from_records(split: SplitTag, records: Vec<Record>) -> Result<Self> {
        const OP: &str = "IdentityDataset";
        let mut index: BTreeMap<u32, CameraIndex> = BTreeMap::new();
        for (i, record) in records.iter().enumerate() {
            let shape = record.image.shape();
            ensure_contract!(
                shape.len() == 3 && shape[0] == 3,
                OP,
                "record {i} image must be 3 x H x W, got {shape:?}"
            );
            ensure_contract!(
                record
                    .image
                    .data()
                    .iter()
                    .all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)),
                OP,
                "record {i} has pixel values outside [0, 1]"
            );
            let entry = index.entry(record.identity).or_default();
            match record.camera {
                Camera::A => entry.a.push(i),
                Camera::B => entry.b.push(i),
            }
        }
        Ok(IdentityDataset {
            split,
            records,
            index,
        })
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Identity ids in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    pub fn n_identities(&self) -> usize {
        self.index.len()
    }

    /// Record indices of one identity for one camera.
    pub fn images_of(&self, identity: u32, camera: Camera) -> &[usize] {
        self.index
            .get(&identity)
            .map(|e| match camera {
                Camera::A => e.a.as_slice(),
                Camera::B => e.b.as_slice(),
            })
            .unwrap_or(&[])
    }

    /// Record indices of one identity across both cameras, camera A first.
    pub fn images_of_any(&self, identity: u32) -> Vec<usize> {
        let mut out = self.images_of(identity, Camera::A).to_vec();
        out.extend_from_slice(self.images_of(identity, Camera::B));
        out
    }

    /// Identities that have at least one image in each camera.
    pub fn cross_camera_identities(&self) -> Vec<u32> {
        self.index
            .iter()
            .filter(|(_, e)| !e.a.is_empty() && !e.b.is_empty())
            .map(|(&id, _)| id)
            .collect()
    }

    /// Number of distinct cross-camera same-identity pairs: one camera-A
    /// image times one camera-B image per identity.
    pub fn positive_pair_count(&self) -> u64 {
        self.index
            .values()
            .map(|e| e.a.len() as u64 * e.b.len() as u64)
            .sum()
    }

    /// Number of distinct unordered cross-identity image pairs.
    pub fn negative_pair_count(&self) -> u64 {
        let total = self.records.len() as u64;
        let all = total * total.saturating_sub(1) / 2;
        let within: u64 = self
            .index
            .values()
            .map(|e| {
                let n = (e.a.len() + e.b.len()) as u64;
                n * n.saturating_sub(1) / 2
            })
            .sum();
        all - within
    }
}

/// Identity-disjoint train/test split, deterministic for a given seed.
/// Identity ids are preserved, so the two outputs partition the input's
/// identity set.
pub fn split_protocol(
    dataset: &IdentityDataset,
    n_test_ids: usize,
    seed: u64,
) -> Result<(IdentityDataset, IdentityDataset)> {
    const OP: &str = "split_protocol";
    let ids = dataset.identities();
    ensure_contract!(
        n_test_ids < ids.len(),
        OP,
        "requested {n_test_ids} test identities from a dataset with {}",
        ids.len()
    );
    let mut shuffled = ids;
    shuffled.shuffle(&mut stream_rng(seed, "split"));
    let test_ids: std::collections::BTreeSet<u32> =
        shuffled[..n_test_ids].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in dataset.records() {
        if test_ids.contains(&record.identity) {
            test.push(record.clone());
        } else {
            train.push(record.clone());
        }
    }
    Ok((
        IdentityDataset::from_records(SplitTag::Train, train)?,
        IdentityDataset::from_records(SplitTag::Test, test)?,
    ))
}
