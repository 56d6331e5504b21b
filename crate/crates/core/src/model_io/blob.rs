// SPDX-License-Identifier: MIT OR Apache-2.0

//! The CRPW binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "CRPW"
//! u32    version (= 1)
//! u32    tensor count
//! per tensor:
//!   u16  name length, UTF-8 name
//!   u8   dtype (0 = f32, 1 = i32, 2 = f64, 3 = u8 bytes)
//!   u8   rank
//!   u32  extents x rank
//!   u64  absolute data offset
//! tensor data, row-major, in header order
//! ```
//!
//! Weight blobs (`.crpw`), dataset containers (`.crpd`) and reference index
//! score files all share this layout.

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{CrpError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRPW";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 1;
const DTYPE_F64: u8 = 2;
const DTYPE_U8: u8 = 3;

/// One entry of a [`TensorStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    I32(Tensor<i32>),
    F64(Tensor<f64>),
    /// Raw bytes, used for UTF-8 tables. Rank 1.
    Bytes(Vec<u8>),
}

impl StoredTensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            StoredTensor::F32(t) => t.shape().to_vec(),
            StoredTensor::I32(t) => t.shape().to_vec(),
            StoredTensor::F64(t) => t.shape().to_vec(),
            StoredTensor::Bytes(b) => vec![b.len()],
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => DTYPE_F32,
            StoredTensor::I32(_) => DTYPE_I32,
            StoredTensor::F64(_) => DTYPE_F64,
            StoredTensor::Bytes(_) => DTYPE_U8,
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            StoredTensor::I32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            StoredTensor::Bytes(b) => out.extend_from_slice(b),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            StoredTensor::F32(t) => t.len() * 4,
            StoredTensor::I32(t) => t.len() * 4,
            StoredTensor::F64(t) => t.len() * 8,
            StoredTensor::Bytes(b) => b.len(),
        }
    }
}

/// Ordered name -> tensor map with CRPW encoding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, StoredTensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.insert(name, StoredTensor::F32(tensor));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fetches an `f32` tensor, failing with [`CrpError::MissingWeight`] when absent.
    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.tensors.get(name) {
            Some(StoredTensor::F32(t)) => Ok(t),
            Some(_) => Err(CrpError::parse(format!("tensor {name} is not f32"))),
            None => Err(CrpError::MissingWeight(name.to_string())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend(VERSION.to_le_bytes());
        header.extend((self.tensors.len() as u32).to_le_bytes());
        let header_len: usize = 12
            + self
                .tensors
                .iter()
                .map(|(name, t)| 2 + name.len() + 2 + 4 * t.shape().len() + 8)
                .sum::<usize>();
        let mut offset = header_len as u64;
        for (name, t) in &self.tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| CrpError::parse(format!("tensor name too long: {name}")))?;
            let shape = t.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| CrpError::parse(format!("rank too large for {name}")))?;
            header.extend(name_len.to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(t.dtype());
            header.push(rank);
            for d in &shape {
                let d = u32::try_from(*d).map_err(|_| CrpError::parse(format!("extent too large for {name}")))?;
                header.extend(d.to_le_bytes());
            }
            header.extend(offset.to_le_bytes());
            offset += t.byte_len() as u64;
        }
        debug_assert_eq!(header.len(), header_len);
        for t in self.tensors.values() {
            t.write_data(&mut header);
        }
        Ok(header)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CrpError::parse("bad magic, expected CRPW"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CrpError::parse(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CrpError::parse("tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            headers.push((name, dtype, shape, offset));
        }
        let mut store = TensorStore::new();
        for (name, dtype, shape, offset) in headers {
            let n: usize = shape.iter().product();
            let width = match dtype {
                DTYPE_F32 | DTYPE_I32 => 4,
                DTYPE_F64 => 8,
                DTYPE_U8 => 1,
                other => return Err(CrpError::parse(format!("tensor {name}: unknown dtype {other}"))),
            };
            let end = n
                .checked_mul(width)
                .and_then(|len| offset.checked_add(len))
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| CrpError::parse(format!("tensor {name}: data out of bounds")))?;
            let raw = &bytes[offset..end];
            let shape_err = |e: CrpError| CrpError::parse(format!("tensor {name}: {e}"));
            let tensor = match dtype {
                DTYPE_F32 => StoredTensor::F32(
                    Tensor::new(
                        shape,
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                    .map_err(shape_err)?,
                ),
                DTYPE_I32 => StoredTensor::I32(
                    Tensor::new(
                        shape,
                        raw.chunks_exact(4)
                            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                    .map_err(shape_err)?,
                ),
                DTYPE_F64 => StoredTensor::F64(
                    Tensor::new(
                        shape,
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                    .map_err(shape_err)?,
                ),
                _ => {
                    if shape.len() != 1 {
                        return Err(CrpError::parse(format!("byte tensor {name} must be rank 1")));
                    }
                    StoredTensor::Bytes(raw.to_vec())
                }
            };
            if store.contains(&name) {
                return Err(CrpError::parse(format!("duplicate tensor name {name}")));
            }
            store.insert(name, tensor);
        }
        Ok(store)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            CrpError::Parse { layer, message } => CrpError::Parse {
                layer,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }
}

/// Hex SHA-256 of a byte string.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
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
            .ok_or_else(|| CrpError::parse("truncated header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut s = TensorStore::new();
        s.insert_f32("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let bytes = s.encode().unwrap();
        assert_eq!(&bytes[0..4], b"CRPW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0); // dtype f32
        assert_eq!(bytes[16], 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
        let off = u64::from_le_bytes(bytes[21..29].try_into().unwrap());
        assert_eq!(off, 29);
        assert_eq!(f32::from_le_bytes(bytes[29..33].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = TensorStore::new().encode().unwrap();
        bytes[0] = b'X';
        assert!(TensorStore::decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = TensorStore::new().encode().unwrap();
        bytes[4] = 2;
        assert!(TensorStore::decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn rejects_truncated_data() {
        let mut s = TensorStore::new();
        s.insert_f32("w", Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let bytes = s.encode().unwrap();
        assert!(TensorStore::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_stable(
            vals in proptest::collection::vec(-1e6f32..1e6, 1..20),
            ints in proptest::collection::vec(any::<i32>(), 1..8),
            text in "[a-z ]{1,12}",
        ) {
            let mut s = TensorStore::new();
            s.insert_f32("a/b", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            s.insert("labels", StoredTensor::I32(Tensor::new(vec![ints.len()], ints.clone()).unwrap()));
            s.insert("doubles", StoredTensor::F64(Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64 / 3.0).collect()).unwrap()));
            s.insert("names", StoredTensor::Bytes(text.into_bytes()));
            let bytes = s.encode().unwrap();
            let back = TensorStore::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}
