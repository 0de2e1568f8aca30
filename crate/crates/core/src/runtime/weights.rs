//! Named parameter tensors and the `.edaw` binary format.
//!
//! Layout, little-endian, no padding: magic `EDAW`, `u32` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! dtype (0 = f32), a `u8` rank, one `u32` per dim and the raw payload.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netdef::NetworkSpec;

pub const EDAW_MAGIC: &[u8; 4] = b"EDAW";
pub const EDAW_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Param { dims, data })
    }
}

/// Ordered map from tensor name (`layer.part.kind`) to its values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    params: BTreeMap<String, Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Option<Param> {
        self.params.insert(name.into(), param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Tensor `name` with the given dims, or the matching error.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&Param> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if p.dims != dims {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: p.dims.clone(),
            });
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total stored values.
    pub fn value_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Every tensor the network reads is present with the right shape, and
    /// nothing else is stored.
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let mut expected = HashSet::new();
        for layer in &net.layers {
            for (name, dims) in layer.expand()?.parameters() {
                self.require(&name, &dims)?;
                expected.insert(name);
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains(*n)) {
            return Err(Error::UnexpectedWeight(extra.to_string()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + 4 * self.value_count() + 64 * self.len());
        out.extend_from_slice(EDAW_MAGIC);
        out.extend_from_slice(&EDAW_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_field(self.len(), "entry count")?.to_le_bytes());
        for (name, p) in &self.params {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::WeightFormat(format!("name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(
                u8::try_from(p.dims.len())
                    .map_err(|_| Error::WeightFormat(format!("`{name}` has too many dims")))?,
            );
            for &d in &p.dims {
                out.extend_from_slice(&u32_field(d, "dim")?.to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != EDAW_MAGIC {
            return Err(Error::WeightFormat("bad magic, not an EDAW file".into()));
        }
        let version = r.u32("version")?;
        if version != EDAW_VERSION {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version}, expected {EDAW_VERSION}"
            )));
        }
        let count = r.u32("entry count")?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::WeightFormat(format!("`{name}`: unknown dtype {dtype}")));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::WeightFormat(format!("`{name}`: payload size overflows")))?;
            let data = r
                .take(n, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.insert(name.clone(), Param { dims, data }).is_some() {
                return Err(Error::WeightFormat(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::WeightFormat(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}
