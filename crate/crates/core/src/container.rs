//! Named-tensor container: a minimal binary format for weights, embeddings,
//! and trained projections.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   "NTC1"
//! count   u32       number of tensors
//! entry*  per tensor, in order:
//!           name_len  u32
//!           name      UTF-8 bytes
//!           dtype     u8     (0 = f32, the only supported code)
//!           rank      u32
//!           extents   u64 x rank
//! payload*  contiguous f32 arrays in entry order
//! ```
//!
//! Payloads are stored as f32; in-memory tensors are f64. Values produced by
//! the seeded initializers and the optimizer live on the f32 grid, so a
//! save/load round trip reproduces them bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTC1";
const DTYPE_F32: u8 = 0;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn require_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.require(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, tensor) in &self.entries {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Truncated);
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };

        if take(&mut cursor, 4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;

        let mut headers: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len =
                u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|_| Error::Truncated)?;
            let dtype = take(&mut cursor, 1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype(dtype));
            }
            let rank = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
                shape.push(e as usize);
            }
            headers.push((name, shape));
        }

        let mut container = Container::new();
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            let raw = take(&mut cursor, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            container.insert(&name, Tensor::from_vec(&shape, data))?;
        }
        if cursor != bytes.len() {
            return Err(Error::Truncated);
        }
        Ok(container)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Round a value to the nearest f32 and widen back. The container stores f32
/// payloads, so tensors that should survive a save/load round trip bit for
/// bit must keep their values on this grid.
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}
