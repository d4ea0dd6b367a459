//! Binary checkpoint format, magic `SVR1`.
//!
//! Layout: 4 magic bytes, u32 LE entry count, then per entry a u16 LE name
//! length, the UTF-8 name, a u8 dtype tag (0 = f32), a u8 rank, rank u32 LE
//! dimensions and the raw little-endian f32 payload. Entries are written in
//! lexicographic name order so export is deterministic and round trips are
//! byte-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::ModelParams;
use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SVR1";
const DTYPE_F32: u8 = 0;

pub fn write_checkpoint<W: Write>(params: &ModelParams<f32>, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Truncated { context }.into())
}

fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint and validates it against the given model: every entry
/// must name an existing parameter with an identical shape, and every model
/// parameter must be present. Returns the model with loaded values; the
/// gradient-participation flags of the template are preserved.
pub fn read_checkpoint<R: Read>(
    params: &ModelParams<f32>,
    mut r: R,
) -> Result<ModelParams<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let count = read_u32(&mut r, "entry count")? as usize;

    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let mut len_b = [0u8; 2];
        read_exact(&mut r, &mut len_b, "name length")?;
        let name_len = u16::from_le_bytes(len_b) as usize;
        let mut name_b = vec![0u8; name_len];
        read_exact(&mut r, &mut name_b, "name")?;
        let name = String::from_utf8(name_b).map_err(|_| CheckpointError::BadName)?;

        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "dtype tag")?;
        if tag[0] != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype { name, tag: tag[0] }.into());
        }
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut r, "dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload, "tensor payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if loaded.insert(name.clone(), (dims, values)).is_some() {
            return Err(CheckpointError::DuplicateName { name }.into());
        }
    }

    for name in loaded.keys() {
        if !params.contains(name) {
            return Err(CheckpointError::UnknownName { name: name.clone() }.into());
        }
    }

    let mut out = ModelParams::new();
    for (name, template) in params.iter() {
        let Some((dims, values)) = loaded.remove(name) else {
            return Err(CheckpointError::MissingTensor { name: name.clone() }.into());
        };
        if dims != template.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: template.shape().to_vec(),
                found: dims,
            }
            .into());
        }
        let tensor =
            Tensor::new(dims, values)?.with_requires_grad(template.requires_grad());
        out.insert(name, tensor)?;
    }
    Ok(out)
}

pub fn import_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<ModelParams<f32>> {
    let r = BufReader::new(File::open(path)?);
    read_checkpoint(params, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, BackboneConfig};
    use crate::error::Error;

    fn checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(params, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let params = build_model::<f32>(&BackboneConfig::test_micro(), 5).unwrap();
        let bytes = checkpoint_bytes(&params);
        let reloaded = read_checkpoint(&params, &bytes[..]).unwrap();
        let bytes2 = checkpoint_bytes(&reloaded);
        assert_eq!(bytes, bytes2);
        for (name, tensor) in params.iter() {
            assert!(tensor.bit_eq(reloaded.get(name).unwrap()));
            assert_eq!(tensor.requires_grad(), reloaded.get(name).unwrap().requires_grad());
        }
    }

    #[test]
    fn bad_magic_is_detected() {
        let params = build_model::<f32>(&BackboneConfig::test_micro(), 5).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes[0] = b'X';
        match read_checkpoint(&params, &bytes[..]) {
            Err(Error::Checkpoint(CheckpointError::BadMagic)) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let params = build_model::<f32>(&BackboneConfig::test_micro(), 5).unwrap();
        let bytes = checkpoint_bytes(&params);
        let cut = &bytes[..bytes.len() - 3];
        match read_checkpoint(&params, cut) {
            Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_names_the_tensor() {
        let params = build_model::<f32>(&BackboneConfig::test_micro(), 5).unwrap();
        let mut smaller = ModelParams::new();
        for (name, t) in params.iter() {
            if name != "top.proj.bias" {
                smaller.insert(name, t.clone()).unwrap();
            }
        }
        let bytes = checkpoint_bytes(&smaller);
        match read_checkpoint(&params, &bytes[..]) {
            Err(Error::Checkpoint(CheckpointError::MissingTensor { name })) => {
                assert_eq!(name, "top.proj.bias");
            }
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }
}
