//! Binary checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! "PGCK" u32 version
//! u32 len, network config as `key = value` text
//! u32 param count, then per param:
//!     u32 name len, name, u32 rank, u64 dims.., f64 values..
//! u8 has_optimizer, then if set: u64 step, m buffers, v buffers
//! u64 epochs_done, f64 best_miou (NaN when unset)
//! ```
//!
//! Moment buffers are stored in parameter order with no header; their sizes
//! follow from the parameter shapes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::network::{NetworkConfig, SegmentationNetwork};
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"PGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
    pub epochs_done: u64,
    pub best_miou: Option<f64>,
}

impl Checkpoint {
    pub fn from_network(
        net: &SegmentationNetwork,
        optimizer: Option<AdamState>,
        epochs_done: u64,
        best_miou: Option<f64>,
    ) -> Self {
        Checkpoint {
            config: net.config().clone(),
            params: net
                .params()
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
            optimizer,
            epochs_done,
            best_miou,
        }
    }

    /// Rebuilds the network described by the stored config and loads the
    /// stored parameters into it.
    pub fn restore(&self) -> Result<SegmentationNetwork> {
        let mut net = SegmentationNetwork::build(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    pub fn load_into(&self, net: &mut SegmentationNetwork) -> Result<()> {
        if net.config() != &self.config {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different network configuration".into(),
            ));
        }
        net.load_params(&self.params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_bytes(&mut out, self.config.to_kv().as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for buf in adam.m.iter().chain(&adam.v) {
                    put_f64s(&mut out, buf);
                }
            }
        }
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&self.best_miou.unwrap_or(f64::NAN).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config = NetworkConfig::from_kv(text)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` shape overflows")))?;
            let data = r.f64s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.push((name, t));
        }

        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
                let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        let epochs_done = r.u64()?;
        let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            epochs_done,
            best_miou: (!best.is_nan()).then_some(best),
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &checkpoint.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
