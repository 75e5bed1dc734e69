//! Binary model file: magic `PPDN`, little-endian `u32` version and
//! architecture fields, a `u8` batch-norm flag, the trainable parameters then
//! the running statistics as `f32`, and a CRC-32 of every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointFault, Error, Result};

use super::{ArchConfig, DenoiserModel, ParamLayout};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PPDN";
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 1;
/// Guards against absurd allocations from corrupted headers.
const MAX_DIM: u32 = 4096;

pub fn model_to_bytes(model: &DenoiserModel<f32>) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * model.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [arch.depth, arch.width, arch.in_channels, arch.out_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(u8::from(arch.use_batch_norm));
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a checkpoint; `path` is only used in error values.
pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<DenoiserModel<f32>> {
    let fault = |fault| Error::BadCheckpoint { path: path.to_path_buf(), fault };
    if bytes.len() < 4 {
        return Err(fault(CheckpointFault::Truncated));
    }
    if &bytes[..4] != MAGIC {
        return Err(fault(CheckpointFault::BadMagic));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(fault(CheckpointFault::Truncated));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(fault(CheckpointFault::UnsupportedVersion(version)));
    }
    let dims: Vec<u32> = (0..4).map(|i| u32_at(bytes, 8 + 4 * i)).collect();
    let bn = match bytes[24] {
        0 => false,
        1 => true,
        _ => return Err(fault(CheckpointFault::InvalidHeader)),
    };
    if dims.iter().any(|&d| d > MAX_DIM) {
        return Err(fault(CheckpointFault::InvalidHeader));
    }
    let arch = ArchConfig {
        depth: dims[0] as usize,
        width: dims[1] as usize,
        in_channels: dims[2] as usize,
        out_channels: dims[3] as usize,
        use_batch_norm: bn,
    };
    arch.validate().map_err(|_| fault(CheckpointFault::InvalidHeader))?;
    let n = ParamLayout::new(&arch).total_len();
    let expected = HEADER_LEN + 4 * n + 4;
    if bytes.len() < expected {
        return Err(fault(CheckpointFault::Truncated));
    }
    if bytes.len() > expected {
        return Err(fault(CheckpointFault::LengthMismatch));
    }
    let body = &bytes[..expected - 4];
    if crc32fast::hash(body) != u32_at(bytes, expected - 4) {
        return Err(fault(CheckpointFault::CrcMismatch));
    }
    let params = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    DenoiserModel::new(arch, params)
}

/// Writes through a sibling temporary file so a crash never leaves a partial
/// checkpoint at `path`.
pub fn save_checkpoint(model: &DenoiserModel<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ppdn.tmp");
    fs::write(&tmp, model_to_bytes(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    model_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamId};

    fn model() -> DenoiserModel<f32> {
        let arch = ArchConfig { depth: 3, width: 4, in_channels: 1, out_channels: 1, use_batch_norm: true };
        DenoiserModel::init(arch, &mut RngStream::new(11, StreamId::Init)).unwrap()
    }

    fn load(bytes: &[u8]) -> Result<DenoiserModel<f32>> {
        model_from_bytes(bytes, Path::new("mem"))
    }

    fn fault_of(r: Result<DenoiserModel<f32>>) -> CheckpointFault {
        match r {
            Err(Error::BadCheckpoint { fault, .. }) => fault,
            other => panic!("expected BadCheckpoint, got {other:?}"),
        }
    }

    #[test]
    fn layout_size_of_small_model() {
        assert_eq!(model().len(), 241);
        assert_eq!(model_to_bytes(&model()).len(), HEADER_LEN + 4 * 241 + 4);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let back = load(&model_to_bytes(&m)).unwrap();
        assert_eq!(back.arch(), m.arch());
        let a: Vec<u32> = m.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = back.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppdn");
        save_checkpoint(&model(), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model());
        assert!(matches!(load_checkpoint(&dir.path().join("absent.ppdn")), Err(Error::FileNotFound(_))));
    }

    #[test]
    fn corruptions_are_classified() {
        let good = model_to_bytes(&model());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(fault_of(load(&bad)), CheckpointFault::BadMagic);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(fault_of(load(&bad)), CheckpointFault::UnsupportedVersion(9));
        let mut bad = good.clone();
        bad[40] ^= 0x10;
        assert_eq!(fault_of(load(&bad)), CheckpointFault::CrcMismatch);
        assert_eq!(fault_of(load(&good[..good.len() - 3])), CheckpointFault::Truncated);
        assert_eq!(fault_of(load(&good[..10])), CheckpointFault::Truncated);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(fault_of(load(&long)), CheckpointFault::LengthMismatch);
        let mut bad = good.clone();
        bad[24] = 7;
        assert_eq!(fault_of(load(&bad)), CheckpointFault::InvalidHeader);
    }
}
