//! `ILCK` checkpoint files.
//!
//! ```text
//! magic "ILCK" | u32 version | u64 config hash | u64 step | u32 blob count
//! per blob: u32 name length | name | u8 dtype (0 = f32, 1 = u32)
//!           | u32 rank | rank × u64 dims | 32-bit values
//! ```
//! All integers and values are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ILCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl BlobData {
    fn tag(&self) -> u8 {
        match self {
            BlobData::F32(_) => 0,
            BlobData::U32(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::U32(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: BlobData,
}

impl Blob {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Blob {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data: BlobData::F32(t.data().to_vec()),
        }
    }

    pub fn from_u32(name: impl Into<String>, values: Vec<u32>) -> Self {
        Blob {
            name: name.into(),
            dims: vec![values.len() as u64],
            data: BlobData::U32(values),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match &self.data {
            BlobData::F32(v) => {
                let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
                Tensor::from_vec(&shape, v.clone())
            }
            BlobData::U32(_) => Err(Error::InvalidArgument(format!("blob {} holds u32, not f32", self.name))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            BlobData::U32(v) => Ok(v),
            BlobData::F32(_) => Err(Error::InvalidArgument(format!("blob {} holds f32, not u32", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub blobs: Vec<Blob>,
}

/// First eight bytes (little-endian) of the SHA-256 of the config text.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no blob `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.data.tag());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic {:?}, expected \"ILCK\"", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_hash = r.u64("config hash")?;
        let step = r.u64("step")?;
        let count = r.u32("blob count")?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("blob name length")? as usize;
            let start = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "blob name")?)
                .map_err(|_| r.err_at(start, "blob name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.take(1, "dtype tag")?[0];
            let rank = r.u32("rank")?;
            let dims = (0..rank).map(|_| r.u64("dim")).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| r.err_at(tag_at, format!("blob `{name}` dims {dims:?} overflow")))?;
            let raw = r.take(count.checked_mul(4).unwrap_or(usize::MAX), "blob values")?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match tag {
                0 => BlobData::F32(words.map(f32::from_le_bytes).collect()),
                1 => BlobData::U32(words.map(u32::from_le_bytes).collect()),
                t => return Err(r.err_at(tag_at, format!("unknown dtype tag {t} in blob `{name}`"))),
            };
            debug_assert_eq!(data.len(), count);
            blobs.push(Blob { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            blobs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.err_at(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {available}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: 0xdead_beef_0123_4567,
            step: 42,
            blobs: vec![
                Blob::from_tensor(
                    "w",
                    &Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap(),
                ),
                Blob::from_u32("state", vec![3, 9]),
                Blob::from_tensor("scalar", &Tensor::from_vec(&[], vec![0.5]).unwrap()),
            ],
        }
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"ILCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            0xdead_beef_0123_4567
        );
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3);
        // First blob: name length 1, "w", tag 0, rank 2, dims 2 and 3.
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1);
        assert_eq!(bytes[32], b'w');
        assert_eq!(bytes[33], 0);
        assert_eq!(u32::from_le_bytes(bytes[34..38].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[38..46].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[54..58].try_into().unwrap()), 1.0);
    }

    #[test]
    fn decode_encode_is_byte_identical() {
        let bytes = sample().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn wrong_magic_names_ilck() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        let msg = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(msg.contains("\"ILCK\""), "{msg}");
    }

    #[test]
    fn truncation_and_version_errors_carry_offsets() {
        let bytes = sample().encode();
        for cut in [2, 10, 30, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Parse { offset: 4, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn hash_depends_on_text() {
        assert_eq!(config_hash("a = 1\n"), config_hash("a = 1\n"));
        assert_ne!(config_hash("a = 1\n"), config_hash("a = 2\n"));
    }
}
