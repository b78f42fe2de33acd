//! Binary checkpoint format.
//!
//! ```text
//! "MASKX1" | u32 version | u64 config hash | u64 step | u32 block count
//! block: u32 name length | name | u32 rank | u32 dims[rank] | f32 values (LE)
//! trailer: sha256 of every preceding byte
//! ```
//!
//! Momentum buffers are stored as blocks named `opt/<param>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::grad::Tensor;
use crate::net::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MASKX1";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub params: ParamStore,
    pub velocity: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let count = self.params.len() + self.velocity.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let blocks = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .chain(self.velocity.iter().map(|(n, t)| (format!("{OPT_PREFIX}{n}"), t)));
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: CHECKPOINT_MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::default();
        let mut velocity = ParamStore::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("block name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("block too large"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&dims, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            match name.strip_prefix(OPT_PREFIX) {
                Some(p) => velocity.insert(p, t),
                None => params.insert(&name, t),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last block"));
        }
        Ok(Checkpoint { config_hash, step, params, velocity })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
