//! Optimizer and progress state written next to a checkpoint: magic `PPTS`,
//! little-endian fields, CRC-32 trailer.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointFault, Error, Result};
use crate::net::AdamState;

const MAGIC: &[u8; 4] = b"PPTS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_push: f64,
    pub mean_pull: f64,
    pub mean_total: f64,
    pub lr: f64,
}

/// Everything besides the model needed to continue a run. All randomness is
/// derived from `(seed, epoch, index)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub adam: AdamState,
    pub history: Vec<EpochSummary>,
    /// Best validation PSNR seen at a checkpoint.
    pub best_metric: Option<f64>,
}

impl TrainState {
    pub fn new(seed: u64, trainable_len: usize) -> Self {
        TrainState { seed, epoch: 0, step: 0, adam: AdamState::new(trainable_len), history: Vec::new(), best_metric: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let u = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        u(&mut out, self.seed);
        u(&mut out, self.epoch as u64);
        u(&mut out, self.step);
        u(&mut out, self.adam.step);
        f(&mut out, self.adam.beta1);
        f(&mut out, self.adam.beta2);
        f(&mut out, self.adam.eps);
        u(&mut out, self.adam.m.len() as u64);
        for &x in self.adam.m.iter().chain(&self.adam.v) {
            f(&mut out, x);
        }
        u(&mut out, self.history.len() as u64);
        for h in &self.history {
            u(&mut out, h.epoch as u64);
            for x in [h.mean_push, h.mean_pull, h.mean_total, h.lr] {
                f(&mut out, x);
            }
        }
        match self.best_metric {
            Some(b) => {
                out.push(1);
                f(&mut out, b);
            }
            None => out.push(0),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fault = |fault| Error::BadCheckpoint { path: path.to_path_buf(), fault };
        if bytes.len() < 4 {
            return Err(fault(CheckpointFault::Truncated));
        }
        if &bytes[..4] != MAGIC {
            return Err(fault(CheckpointFault::BadMagic));
        }
        if bytes.len() < 12 {
            return Err(fault(CheckpointFault::Truncated));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(fault(CheckpointFault::CrcMismatch));
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32().ok_or(fault(CheckpointFault::Truncated))?;
        if version != VERSION {
            return Err(fault(CheckpointFault::UnsupportedVersion(version)));
        }
        let parse = |r: &mut Reader| -> Option<TrainState> {
            let seed = r.u64()?;
            let epoch = r.u64()? as usize;
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let n = r.u64()? as usize;
            if n > r.remaining() / 16 {
                return None;
            }
            let m = (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>()?;
            let v = (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>()?;
            let hn = r.u64()? as usize;
            if hn > r.remaining() / 40 {
                return None;
            }
            let history = (0..hn)
                .map(|_| {
                    Some(EpochSummary {
                        epoch: r.u64()? as usize,
                        mean_push: r.f64()?,
                        mean_pull: r.f64()?,
                        mean_total: r.f64()?,
                        lr: r.f64()?,
                    })
                })
                .collect::<Option<Vec<_>>>()?;
            let best_metric = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                _ => return None,
            };
            let adam = crate::net::AdamState { beta1, beta2, eps, step: adam_step, m, v };
            Some(TrainState { seed, epoch, step, adam, history, best_metric })
        };
        let state = parse(&mut r).ok_or(fault(CheckpointFault::InvalidHeader))?;
        if r.remaining() != 0 {
            return Err(fault(CheckpointFault::LengthMismatch));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("state.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        TrainState::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.at..self.at + N)?.try_into().ok()?;
        self.at += N;
        Some(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn u8(&mut self) -> Option<u8> {
        Some(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take()?))
    }
}
