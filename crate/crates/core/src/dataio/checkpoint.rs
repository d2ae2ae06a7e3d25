//! Binary checkpoint format.
//!
//! ```text
//! "VSEG"  u32 version  u32 tensor_count
//! per tensor: u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 values
//! trailer:    u32 epoch  u32 digest_len  digest bytes
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Tensor;

pub const MAGIC: &[u8; 4] = b"VSEG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Number of completed epochs.
    pub epoch: u32,
    /// Tensors keyed by name; iteration (and file) order is sorted by name.
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub config_digest: Vec<u8>,
}

impl Checkpoint {
    pub fn new(epoch: u32, config_digest: Vec<u8>) -> Self {
        Self {
            version: FORMAT_VERSION,
            epoch,
            tensors: BTreeMap::new(),
            config_digest,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(tensor.shape().len())
                .map_err(|_| Error::Format(format!("tensor {name} rank too large")))?;
            if tensor.shape().contains(&0) {
                return Err(Error::Shape(format!(
                    "tensor {name} has a zero dimension {:?}",
                    tensor.shape()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in tensor.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("tensor {name} dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("missing VSEG magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version > FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * 4, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::from_vec(&shape, data)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let epoch = r.u32("epoch")?;
        let digest_len = r.u32("digest length")? as usize;
        let config_digest = r.take(digest_len, "config digest")?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            epoch,
            tensors,
            config_digest,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Length(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
