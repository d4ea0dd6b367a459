//! Dataset directory loaders and image file I/O.
//!
//! Two layouts are accepted:
//!
//! * CUHK01-style: a flat directory of files named with 7 digits, the first
//!   four the identity and the last three the shot index; shots 001-002 are
//!   camera A, 003-004 camera B.
//! * Generic: one directory per identity containing `A_<index>.png` /
//!   `B_<index>.png` files.
//!
//! PNG and PPM images are accepted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{Camera, IdentityDataset, Record, SplitTag};
use crate::error::{DataError, Result};
use crate::tensor::Tensor;

/// Decodes an image file into a `3 x H x W` tensor with values in `[0, 1]`.
pub fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * 3;
            for c in 0..3 {
                data[(c * h + y) * w + x] = raw[px + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes a `[0, 1]` tensor as an 8-bit RGB image; the format follows the
/// file extension.
pub fn save_image_tensor(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    let shape = tensor.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = tensor.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
                raw[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Counts reported after loading a dataset directory.
#[derive(Clone, Debug)]
pub struct LoadReport {
    pub identities: usize,
    pub records: usize,
    /// Identities loaded with fewer images than the layout promises.
    pub incomplete_identities: Vec<u32>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loaded {} records across {} identities",
            self.records, self.identities
        )?;
        if !self.incomplete_identities.is_empty() {
            write!(
                f,
                " ({} with missing shots: {:?})",
                self.incomplete_identities.len(),
                &self.incomplete_identities[..self.incomplete_identities.len().min(8)]
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DatasetFormat {
    Cuhk01,
    Generic,
}

fn has_image_extension(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm"
    )
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

/// Loads a flat CUHK01-style directory. Identities are re-labeled densely in
/// ascending order of their raw 4-digit id.
pub fn load_cuhk01(dir: &Path) -> Result<(IdentityDataset, LoadReport)> {
    let entries = sorted_dir_entries(dir)?;
    let mut offenders = Vec::new();
    let mut parsed: Vec<(u32, u32, PathBuf)> = Vec::new(); // (raw id, shot, path)
    for path in entries {
        if path.is_dir() {
            offenders.push(file_name_of(&path));
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let ok = has_image_extension(&path)
            && stem.len() == 7
            && stem.chars().all(|c| c.is_ascii_digit());
        if !ok {
            offenders.push(file_name_of(&path));
            continue;
        }
        let raw_id: u32 = stem[..4].parse().expect("checked digits");
        let shot: u32 = stem[4..].parse().expect("checked digits");
        if !(1..=4).contains(&shot) {
            offenders.push(file_name_of(&path));
            continue;
        }
        parsed.push((raw_id, shot, path));
    }
    if !offenders.is_empty() {
        return Err(DataError::BadFilenames(offenders).into());
    }
    if parsed.is_empty() {
        return Err(DataError::EmptyDirectory(dir.to_path_buf()).into());
    }

    let mut dense: BTreeMap<u32, u32> = BTreeMap::new();
    for (raw_id, _, _) in &parsed {
        let next = dense.len() as u32;
        dense.entry(*raw_id).or_insert(next);
    }

    let mut records = Vec::with_capacity(parsed.len());
    let mut shots_per_id: BTreeMap<u32, usize> = BTreeMap::new();
    for (raw_id, shot, path) in &parsed {
        let identity = dense[raw_id];
        let camera = if *shot <= 2 { Camera::A } else { Camera::B };
        records.push(Record {
            identity,
            camera,
            image: load_image_tensor(path)?,
        });
        *shots_per_id.entry(identity).or_insert(0) += 1;
    }
    let incomplete: Vec<u32> = shots_per_id
        .iter()
        .filter(|(_, &n)| n != 4)
        .map(|(&id, _)| id)
        .collect();

    let report = LoadReport {
        identities: dense.len(),
        records: records.len(),
        incomplete_identities: incomplete,
    };
    Ok((IdentityDataset::from_records(SplitTag::Full, records)?, report))
}

/// Loads the generic `<id>/<A|B>_<index>.png` layout.
pub fn load_generic(dir: &Path) -> Result<(IdentityDataset, LoadReport)> {
    let entries = sorted_dir_entries(dir)?;
    let mut offenders = Vec::new();
    let mut parsed: Vec<(u32, Camera, PathBuf)> = Vec::new();
    for entry in entries {
        if !entry.is_dir() {
            offenders.push(file_name_of(&entry));
            continue;
        }
        let id: Option<u32> = entry
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok());
        let Some(raw_id) = id else {
            offenders.push(file_name_of(&entry));
            continue;
        };
        for file in sorted_dir_entries(&entry)? {
            let name = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            let camera = match name.split_once('_') {
                Some(("A", idx)) if idx.chars().all(|c| c.is_ascii_digit()) => Camera::A,
                Some(("B", idx)) if idx.chars().all(|c| c.is_ascii_digit()) => Camera::B,
                _ => {
                    offenders.push(file_name_of(&file));
                    continue;
                }
            };
            if !has_image_extension(&file) {
                offenders.push(file_name_of(&file));
                continue;
            }
            parsed.push((raw_id, camera, file));
        }
    }
    if !offenders.is_empty() {
        return Err(DataError::BadFilenames(offenders).into());
    }
    if parsed.is_empty() {
        return Err(DataError::EmptyDirectory(dir.to_path_buf()).into());
    }

    let mut dense: BTreeMap<u32, u32> = BTreeMap::new();
    for (raw_id, _, _) in &parsed {
        let next = dense.len() as u32;
        dense.entry(*raw_id).or_insert(next);
    }
    let mut records = Vec::with_capacity(parsed.len());
    for (raw_id, camera, path) in &parsed {
        records.push(Record {
            identity: dense[raw_id],
            camera: *camera,
            image: load_image_tensor(path)?,
        });
    }
    let ds = IdentityDataset::from_records(SplitTag::Full, records)?;
    let incomplete: Vec<u32> = ds
        .identities()
        .into_iter()
        .filter(|&id| {
            ds.images_of(id, Camera::A).is_empty() || ds.images_of(id, Camera::B).is_empty()
        })
        .collect();
    let report = LoadReport {
        identities: ds.n_identities(),
        records: ds.len(),
        incomplete_identities: incomplete,
    };
    Ok((ds, report))
}

/// Guesses the directory layout: subdirectories mean the generic layout,
/// flat files mean CUHK01 naming.
pub fn detect_format(dir: &Path) -> Result<DatasetFormat> {
    for entry in sorted_dir_entries(dir)? {
        if entry.is_dir() {
            return Ok(DatasetFormat::Generic);
        }
    }
    Ok(DatasetFormat::Cuhk01)
}

pub fn load_dir(dir: &Path, format: DatasetFormat) -> Result<(IdentityDataset, LoadReport)> {
    match format {
        DatasetFormat::Cuhk01 => load_cuhk01(dir),
        DatasetFormat::Generic => load_generic(dir),
    }
}

fn file_name_of(path: &Path) -> String {
    path.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("<invalid>")
        .to_string()
}
