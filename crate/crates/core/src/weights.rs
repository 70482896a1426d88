//! Named weight storage and the `ERFD` container format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      "ERFD"
//! version    u32 (= 1)
//! count      u32
//! count × {
//!     name_len  u16
//!     name      name_len bytes of UTF-8
//!     rank      u8 (0..=4)
//!     dims      rank × u32
//!     payload   Π dims × f32
//! }
//! optional checksum section:
//!     "CSUM" followed by count × u32 CRC-32 of each tensor's payload bytes
//! ```
//!
//! Any other trailing bytes are rejected.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;

pub const MAGIC: &[u8; 4] = b"ERFD";
pub const CHECKSUM_MAGIC: &[u8; 4] = b"CSUM";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"ERFD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container while reading {0}")]
    Truncated(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: dims {dims:?} need {expected} values, got {found}")]
    LengthMismatch {
        name: String,
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("tensor `{name}` has rank {rank}, at most 4 supported")]
    RankTooLarge { name: String, rank: usize },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor name `{0}` is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.payload_bytes())
    }
}

/// Ordered map from weight name to tensor. Insertion order is the file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, StoredTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<(), ContainerError> {
        let name = name.into();
        if dims.len() > MAX_RANK {
            return Err(ContainerError::RankTooLarge { name, rank: dims.len() });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(ContainerError::LengthMismatch {
                name,
                dims,
                expected,
                found: data.len(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(ContainerError::DuplicateName(name));
        }
        self.tensors.insert(name, StoredTensor { dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredTensor> {
        self.tensors.get_mut(name)
    }

    /// Looks up `name` and checks its dims.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&StoredTensor> {
        let t = self.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if t.dims != dims {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Random weights for every tensor `graph` reads. Kernels are uniform
    /// with variance `1 / fan_in`, biases small, fusion weights in
    /// `[0.5, 1.5)`. Deterministic in `seed`.
    pub fn random_for(graph: &ModelGraph, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for (name, dims) in graph.weight_specs() {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = if dims.len() == 4 {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f32;
                let a = (3.0 / fan_in).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            } else if name.ends_with(".bias") {
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
            } else {
                (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
            };
            store
                .insert(name, dims, data)
                .expect("graph weight names are unique");
        }
        store
    }

    pub fn to_bytes(&self, with_checksums: bool) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| ContainerError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend(t.payload_bytes());
        }
        if with_checksums {
            out.extend_from_slice(CHECKSUM_MAGIC);
            for t in self.tensors.values() {
                out.extend_from_slice(&t.crc32().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LoadedContainer, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut store = WeightStore::new();
        for i in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| ContainerError::InvalidName)?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            if rank > MAX_RANK {
                return Err(ContainerError::RankTooLarge { name, rank });
            }
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| ContainerError::Truncated(format!("payload of `{name}`")))?;
            let payload = r.take(numel, &format!("payload of tensor {i} `{name}`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, dims, data)?;
        }
        let checksums = match r.remaining() {
            0 => None,
            n if n >= 4 && r.peek(4) == CHECKSUM_MAGIC => {
                if n != 4 + 4 * count {
                    return Err(ContainerError::TrailingBytes(n));
                }
                r.take(4, "checksum magic")?;
                Some((0..count).map(|_| r.u32("checksum")).collect::<Result<Vec<_>, _>>()?)
            }
            n => return Err(ContainerError::TrailingBytes(n)),
        };
        Ok(LoadedContainer { store, checksums })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        if self.remaining() < n {
            return Err(ContainerError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn peek(&self, n: usize) -> &'a [u8] {
        &self.bytes[self.pos..self.pos + n]
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// A parsed container plus its optional checksum section.
#[derive(Debug, Clone)]
pub struct LoadedContainer {
    pub store: WeightStore,
    pub checksums: Option<Vec<u32>>,
}

impl LoadedContainer {
    /// Names of tensors whose payload no longer matches the stored CRC-32.
    /// Empty when the container carries no checksum section.
    pub fn audit(&self) -> Vec<String> {
        let Some(sums) = &self.checksums else {
            return Vec::new();
        };
        self.store
            .iter()
            .zip(sums)
            .filter(|((_, t), &sum)| t.crc32() != sum)
            .map(|((name, _), _)| name.to_string())
            .collect()
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    write_container(store, path.as_ref(), false)
}

pub fn save_weights_with_checksums(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    write_container(store, path.as_ref(), true)
}

fn write_container(store: &WeightStore, path: &Path, checksums: bool) -> Result<()> {
    let bytes = store.to_bytes(checksums)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<LoadedContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(WeightStore::from_bytes(&bytes)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    load_container(path).map(|c| c.store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("stem.conv0", vec![16, 3, 5, 5], (0..1200).map(|i| i as f32 * 0.5).collect())
            .unwrap();
        s.insert("stem.conv0.bias", vec![16], vec![0.25; 16]).unwrap();
        s.insert("scalar", vec![], vec![3.0]).unwrap();
        s
    }

    #[test]
    fn empty_roundtrip() {
        let bytes = WeightStore::new().to_bytes(false).unwrap();
        assert_eq!(bytes.len(), 12);
        let loaded = WeightStore::from_bytes(&bytes).unwrap();
        assert!(loaded.store.is_empty() && loaded.checksums.is_none());
    }

    #[test]
    fn byte_accounting() {
        let mut s = WeightStore::new();
        s.insert("stem.conv0", vec![16, 3, 5, 5], vec![1.0; 1200]).unwrap();
        let len = "stem.conv0".len();
        assert_eq!(s.to_bytes(false).unwrap().len(), 4 + 4 + 4 + (2 + len) + 1 + 16 + 4 * 1200);
    }

    #[test]
    fn roundtrip_preserves_order_and_bits() {
        let s = sample();
        let loaded = WeightStore::from_bytes(&s.to_bytes(true).unwrap()).unwrap();
        assert_eq!(loaded.store, s);
        let names: Vec<_> = loaded.store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["stem.conv0", "stem.conv0.bias", "scalar"]);
        assert!(loaded.audit().is_empty());
    }

    #[test]
    fn checksum_audit_flags_corruption() {
        let s = sample();
        let mut bytes = s.to_bytes(true).unwrap();
        // first payload byte of stem.conv0: header 12 + 2 + 10 name + 1 rank + 16 dims
        bytes[12 + 2 + 10 + 1 + 16 + 5] ^= 0x40;
        let loaded = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.audit(), vec!["stem.conv0".to_string()]);
    }

    #[test]
    fn distinct_errors() {
        let good = sample().to_bytes(false).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(ContainerError::BadMagic(_))));

        assert!(matches!(
            WeightStore::from_bytes(&good[..good.len() - 3]),
            Err(ContainerError::Truncated(_))
        ));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        assert_eq!(WeightStore::from_bytes(&trailing).unwrap_err(), ContainerError::TrailingBytes(3));

        let mut s = WeightStore::new();
        s.insert("a", vec![1], vec![1.0]).unwrap();
        assert_eq!(s.insert("a", vec![1], vec![2.0]), Err(ContainerError::DuplicateName("a".into())));
        let mut dup = s.to_bytes(false).unwrap();
        dup[8] = 2;
        dup.extend_from_slice(&dup[12..12 + 2 + 1 + 1 + 4 + 4].to_vec());
        assert_eq!(WeightStore::from_bytes(&dup).unwrap_err(), ContainerError::DuplicateName("a".into()));

        assert!(matches!(
            s.insert("b", vec![2, 2], vec![1.0]),
            Err(ContainerError::LengthMismatch { expected: 4, found: 1, .. })
        ));

        let mut version = good.clone();
        version[4] = 9;
        assert_eq!(WeightStore::from_bytes(&version).unwrap_err(), ContainerError::UnsupportedVersion(9));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn store_strategy() -> impl Strategy<Value = WeightStore> {
            proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..=4), any::<u32>()),
                0..6,
            )
            .prop_map(|entries| {
                let mut s = WeightStore::new();
                for (i, (dims, seed)) in entries.into_iter().enumerate() {
                    let n: usize = dims.iter().product();
                    // arbitrary bit patterns, NaNs included, must survive untouched
                    let data = (0..n as u32).map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k))).collect();
                    s.insert(format!("t{i}.w"), dims, data).unwrap();
                }
                s
            })
        }

        proptest! {
            #[test]
            fn container_roundtrip_is_bit_exact(store in store_strategy(), checks in any::<bool>()) {
                let bytes = store.to_bytes(checks).unwrap();
                let loaded = WeightStore::from_bytes(&bytes).unwrap();
                prop_assert_eq!(loaded.store.to_bytes(checks).unwrap(), bytes);
                for ((a, ta), (b, tb)) in loaded.store.iter().zip(store.iter()) {
                    prop_assert_eq!(a, b);
                    prop_assert_eq!(&ta.dims, &tb.dims);
                    let bits = |t: &StoredTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    prop_assert_eq!(bits(ta), bits(tb));
                }
            }
        }
    }
}
