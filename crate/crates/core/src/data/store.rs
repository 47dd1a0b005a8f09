//! Binary embedding store.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"CVRE"
//! u32     version (1)
//! u32     dim
//! u64     count
//! count × { u16 id_len, id_len bytes UTF-8 id, dim × f32 }
//! ```
//!
//! Vectors are held as `f64` in memory. Saving narrows to `f32`, so a store
//! that was loaded from disk saves back bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CvrError, Result};
use crate::math::l2_normalize;

pub const STORE_MAGIC: [u8; 4] = *b"CVRE";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(CvrError::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(CvrError::Schema(format!("non-finite entry in vector {id:?}")));
        }
        if self.index.contains_key(&id) {
            return Err(CvrError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Like [`get`](Self::get) but reports a `MissingEmbedding` naming `store`.
    pub fn require(&self, id: &str, store: &'static str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| CvrError::MissingEmbedding {
            id: id.to_string(),
            store,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn normalize_all(&mut self) -> Result<()> {
        for v in &mut self.vectors {
            *v = l2_normalize(v)?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            let bytes = id.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| CvrError::Schema(format!("id {id:?} longer than 65535 bytes")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            for x in v {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, normalize: bool) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != STORE_MAGIC {
            return Err(CvrError::BadMagic {
                expected: STORE_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r, "version")?;
        if version != STORE_VERSION {
            return Err(CvrError::UnsupportedVersion(version));
        }
        let dim = read_u32(r, "dim")? as usize;
        if dim == 0 {
            return Err(CvrError::Schema("embedding dim must be positive".into()));
        }
        let count = read_u64(r, "count")?;
        let mut store = EmbeddingStore::new(dim);
        let mut buf = vec![0u8; dim * 4];
        for i in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len, "record id length")?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut id, "record id")?;
            let id = String::from_utf8(id)
                .map_err(|_| CvrError::Schema(format!("record {i}: id is not valid UTF-8")))?;
            read_exact(r, &mut buf, "record vector")?;
            let v: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(id, v)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CvrError::Schema("trailing bytes after last record".into()));
        }
        if normalize {
            store.normalize_all()?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, normalize)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CvrError::TruncatedFile(format!("while reading {what}")),
        _ => CvrError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
