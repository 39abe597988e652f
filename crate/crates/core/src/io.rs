//! Binary tensor (`.ten`) and checkpoint (`.lsc`) formats.
//!
//! Tensor file, all integers little-endian `u32`:
//!
//! ```text
//! "LSUT" | version=1 | ndim | extent[0..ndim] | f32 LE payload (row-major)
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "LSUC" | version=1 | count | count x (name_len | UTF-8 name | tensor file) | CRC32
//! ```
//!
//! The CRC (IEEE) covers every byte before it.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::loss::AwlState;
use crate::network::{Network, NUM_LEVELS};
use crate::tensor::{Dims, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"LSUT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSUC";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on `ndim` accepted by readers.
pub const MAX_NDIM: usize = 8;

type FResult<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { offset: self.pos, needed: n, available: self.remaining() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> FResult<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }
}

/// A tensor of arbitrary rank as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub extents: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Self { extents: t.dims().to_vec(), data: t.data().to_vec() }
    }

    /// Rank-`r <= 4` data as an NCHW tensor, left-padding extents with 1.
    pub fn into_tensor(self) -> Result<Tensor<f32>> {
        if self.extents.len() > 4 {
            return Err(Error::Shape(format!("rank {} tensor cannot be used as NCHW", self.extents.len())));
        }
        let mut dims: Dims = [1; 4];
        dims[4 - self.extents.len()..].copy_from_slice(&self.extents);
        Tensor::from_vec(dims, self.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.extents.len() + 4 * self.data.len());
        encode_tensor_into(&mut out, &self.extents, &self.data);
        out
    }

    /// Parses a standalone tensor file; the payload must fill the input exactly.
    pub fn decode(bytes: &[u8]) -> FResult<Self> {
        let mut r = Reader::new(bytes);
        let (extents, expected) = decode_header(&mut r)?;
        if r.remaining() != expected {
            return Err(FormatError::PayloadLength { expected, found: r.remaining() });
        }
        let data = decode_payload(&mut r, expected / 4)?;
        Ok(Self { extents, data })
    }
}

fn encode_tensor_into(out: &mut Vec<u8>, extents: &[usize], data: &[f32]) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for &e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Returns the extents and the payload byte length they imply.
fn decode_header(r: &mut Reader) -> FResult<(Vec<usize>, usize)> {
    r.magic(TENSOR_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(FormatError::Extents(vec![]));
    }
    let raw: Vec<u32> = (0..ndim).map(|_| r.u32()).collect::<FResult<_>>()?;
    let bytes = raw
        .iter()
        .try_fold(4usize, |acc, &e| if e == 0 { None } else { acc.checked_mul(e as usize) })
        .filter(|&b| b <= isize::MAX as usize)
        .ok_or_else(|| FormatError::Extents(raw.clone()))?;
    Ok((raw.into_iter().map(|e| e as usize).collect(), bytes))
}

fn decode_payload(r: &mut Reader, n: usize) -> FResult<Vec<f32>> {
    let bytes = r.take(4 * n)?;
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok(data)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_raw_tensor_file(path, &RawTensor::from_tensor(t))
}

pub fn write_raw_tensor_file(path: impl AsRef<Path>, t: &RawTensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: element {i}", path.display())));
    }
    write_bytes(path, &t.encode())
}

pub fn read_raw_tensor_file(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    RawTensor::decode(&read_bytes(path)?).map_err(|source| Error::File { path: path.into(), source })
}

/// Reads a tensor file of rank at most 4 as an NCHW tensor.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_raw_tensor_file(path)?.into_tensor()
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, RawTensor)>,
}

impl Checkpoint {
    /// Network parameters, then batch-norm buffers, then `awl.sigma.0..5`.
    pub fn capture(net: &Network, awl: &AwlState) -> Self {
        let store = net.store();
        let mut entries: Vec<(String, RawTensor)> = store
            .params()
            .iter()
            .map(|p| (p.name().to_string(), RawTensor::from_tensor(p.tensor())))
            .chain(store.buffers().iter().map(|b| (b.name.clone(), RawTensor::from_tensor(&b.tensor))))
            .collect();
        for (i, s) in awl.sigma().into_iter().enumerate() {
            entries
                .push((AwlState::<f32>::entry_name(i), RawTensor { extents: vec![1, 1, 1, 1], data: vec![s as f32] }));
        }
        Self { entries }
    }

    /// Copies every entry into `net` and `awl`; all names and shapes must match.
    pub fn restore(&self, net: &mut Network, awl: &mut AwlState) -> FResult<()> {
        let mut by_name: std::collections::HashMap<&str, &RawTensor> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut take = |name: &str, dims: Dims| -> FResult<Vec<f32>> {
            let t = by_name.remove(name).ok_or_else(|| FormatError::MissingEntry(name.to_string()))?;
            let found = pad_dims(&t.extents);
            if found != Some(dims) {
                return Err(FormatError::EntryShape {
                    name: name.to_string(),
                    expected: dims,
                    found: found.unwrap_or([0; 4]),
                });
            }
            Ok(t.data.clone())
        };
        let store = net.store();
        let params: Vec<Vec<f32>> =
            store.params().iter().map(|p| take(p.name(), p.tensor().dims())).collect::<FResult<_>>()?;
        let buffers: Vec<Vec<f32>> =
            store.buffers().iter().map(|b| take(&b.name, b.tensor.dims())).collect::<FResult<_>>()?;
        let sigma: Vec<f32> = (0..NUM_LEVELS)
            .map(|i| take(&AwlState::<f32>::entry_name(i), [1, 1, 1, 1]).map(|v| v[0]))
            .collect::<FResult<_>>()?;
        if let Some(name) = self.entries.iter().map(|(n, _)| n).find(|n| by_name.contains_key(n.as_str())) {
            return Err(FormatError::UnexpectedEntry(name.clone()));
        }
        let store = net.store_mut();
        for (p, v) in store.params_mut().iter_mut().zip(params) {
            p.tensor_mut().data_mut().copy_from_slice(&v);
        }
        for (b, v) in store.buffers_mut().iter_mut().zip(buffers) {
            b.tensor.data_mut().copy_from_slice(&v);
        }
        awl.set_sigma(&sigma).map_err(|_| FormatError::NonFinite(0))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor_into(&mut out, &t.extents, &t.data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> FResult<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        if bytes.len() < 16 {
            return Err(FormatError::Truncated { offset: bytes.len(), needed: 16 - bytes.len(), available: 0 });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Crc { stored, computed });
        }
        let mut r = Reader::new(body);
        r.pos = 8;
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::Utf8)?.to_string();
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateEntry(name));
            }
            let (extents, nbytes) = decode_header(&mut r)?;
            let data = decode_payload(&mut r, nbytes / 4)?;
            entries.push((name, RawTensor { extents, data }));
        }
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_bytes(path)?).map_err(|source| Error::File { path: path.into(), source })
    }
}

fn pad_dims(extents: &[usize]) -> Option<Dims> {
    if extents.len() > 4 {
        return None;
    }
    let mut dims = [1; 4];
    dims[4 - extents.len()..].copy_from_slice(extents);
    Some(dims)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network, awl: &AwlState) -> Result<()> {
    Checkpoint::capture(net, awl).save(path)
}

/// Loads a checkpoint into an already-built network of matching layout.
pub fn load_checkpoint(path: impl AsRef<Path>, net: &mut Network, awl: &mut AwlState) -> Result<()> {
    let path = path.as_ref();
    Checkpoint::load(path)?.restore(net, awl).map_err(|source| Error::File { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_tensor_layout() {
        let t = RawTensor { extents: vec![1, 1, 1, 1], data: vec![0.0] };
        let bytes = t.encode();
        let mut expected = b"LSUT".to_vec();
        for v in [1u32, 4, 1, 1, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 28 + 4);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let t = RawTensor { extents: vec![2, 3], data: vec![1.0; 6] };
        let bytes = t.encode();
        let err = RawTensor::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err, FormatError::PayloadLength { expected: 24, found: 23 });
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = RawTensor { extents: vec![1], data: vec![1.0] }.encode();
        bytes[0] = b'X';
        assert!(matches!(RawTensor::decode(&bytes), Err(FormatError::BadMagic { .. })));
        let mut bytes = RawTensor { extents: vec![1], data: vec![1.0] }.encode();
        bytes[4] = 2;
        assert_eq!(RawTensor::decode(&bytes), Err(FormatError::UnsupportedVersion(2)));
        assert!(matches!(RawTensor::decode(b"LSU"), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn zero_extent_rejected() {
        let mut bytes = RawTensor { extents: vec![1], data: vec![1.0] }.encode();
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(RawTensor::decode(&bytes), Err(FormatError::Extents(_))));
    }

    #[test]
    fn checkpoint_rejects_duplicates() {
        let t = RawTensor { extents: vec![1], data: vec![1.0] };
        let ck = Checkpoint { entries: vec![("a".into(), t.clone()), ("a".into(), t)] };
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()), Err(FormatError::DuplicateEntry("a".into())));
    }
}
