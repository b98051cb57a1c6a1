//! Checkpoint container: header magic "SEGM", u32 version, u32 dim, u32 C,
//! then named parameter blocks as (u32 name length, name bytes, u32 rank,
//! u32 dims..., f64 data), little-endian. The flow, attention, projection
//! head and memory bank append their blocks under distinct name prefixes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Arr;

const MAGIC: &[u8; 4] = b"SEGM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Bad(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dim: u32,
    pub num_classes: u32,
    pub blocks: BTreeMap<String, Arr>,
}

impl Checkpoint {
    pub fn new(dim: u32, num_classes: u32) -> Self {
        Checkpoint {
            dim,
            num_classes,
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, arr: Arr) {
        self.blocks.insert(name.to_string(), arr);
    }

    pub fn get(&self, name: &str) -> Result<&Arr, CkptError> {
        self.blocks
            .get(name)
            .ok_or_else(|| CkptError::Bad(format!("missing block {:?}", name)))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), CkptError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.dim.to_le_bytes())?;
        w.write_all(&self.num_classes.to_le_bytes())?;
        for (name, arr) in &self.blocks {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(arr.shape.len() as u32).to_le_bytes())?;
            for &d in &arr.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &arr.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, CkptError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CkptError::Bad(format!("bad magic {:?}", magic)));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(CkptError::Bad(format!("unsupported version {}", version)));
        }
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let num_classes = u32::from_le_bytes(b4);
        let mut blocks = BTreeMap::new();
        loop {
            match r.read_exact(&mut b4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CkptError::Bad("non-utf8 block name".into()))?;
            r.read_exact(&mut b4)?;
            let rank = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b4)?;
                shape.push(u32::from_le_bytes(b4) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            blocks.insert(name, Arr { shape, data });
        }
        Ok(Checkpoint {
            dim,
            num_classes,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut ck = Checkpoint::new(32, 4);
        ck.insert("seg.layer0.w", Arr::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        ck.insert("flow.block0.s", Arr::scalar(0.5));
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let rt = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(rt.dim, 32);
        assert_eq!(rt.num_classes, 4);
        assert_eq!(rt.blocks.len(), 2);
        assert_eq!(rt.get("seg.layer0.w").unwrap().data[5], 6.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
    }
}
