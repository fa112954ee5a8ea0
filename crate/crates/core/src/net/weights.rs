//! BLW1 weight files.
//!
//! Layout, all little-endian, no padding:
//!
//! ```text
//! "BLW1"                      magic
//! u32                         tensor count
//! per tensor:
//!   u16                       name length in bytes
//!   [u8]                      UTF-8 name
//!   u8                        ndim
//!   ndim x u32                dims
//!   prod(dims) x f32          values
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BLW1";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, WeightTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: WeightTensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&WeightTensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: t.shape.clone(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.shape.len())
                .map_err(|_| Error::InvalidArgument(format!("too many dims for {name}")))?;
            out.extend(name_len.to_le_bytes());
            out.extend(name.as_bytes());
            out.push(ndim);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::InvalidArgument(format!("dim too large in {name}")))?;
                out.extend(d.to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic[..3] == b"BLW" && &magic != MAGIC {
            return Err(Error::VersionMismatch(format!(
                "file is {:?}, this reader handles BLW1",
                String::from_utf8_lossy(&magic)
            )));
        }
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = r.u32("tensor count")?;
        let mut store = WeightStore::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::InvalidArgument(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &format!("{name} values"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, WeightTensor { shape, data })?;
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::load(path)
}

pub fn write_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    store.write(path)
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
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
