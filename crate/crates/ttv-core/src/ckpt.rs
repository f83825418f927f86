//! Checkpoint container: named TTV1 tensors concatenated behind an inline
//! index, with a trailing JSON metadata block.
//!
//! Byte layout (all integers little-endian):
//!   magic `43 4B 50 31` ("CKP1")
//!   u32   tensor count T
//!   T entries, each:
//!     u32  name byte length, then the UTF-8 name
//!     u64  payload byte length, then the payload (one TTV1 blob)
//!   u64   metadata byte length, then the UTF-8 JSON metadata
//!
//! The same layout is documented in docs/formats.md.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: [u8; 4] = *b"CKP1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CKPT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            let blob = tensor.to_ttv1_bytes();
            w.write_all(&(blob.len() as u64).to_le_bytes())?;
            w.write_all(&blob)?;
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:02x?}, expected {CKPT_MAGIC:02x?}"
            )));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("bad tensor name: {e}")))?;
            r.read_exact(&mut b8)?;
            let blob_len = u64::from_le_bytes(b8) as usize;
            let mut blob = vec![0u8; blob_len];
            r.read_exact(&mut blob)?;
            tensors.push((name, Tensor::from_ttv1_bytes(&blob)?));
        }
        r.read_exact(&mut b8)?;
        let meta_len = u64::from_le_bytes(b8) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)?;
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut cur = bytes.as_slice();
        let ckpt = Checkpoint::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                cur.len()
            )));
        }
        Ok(ckpt)
    }
}
