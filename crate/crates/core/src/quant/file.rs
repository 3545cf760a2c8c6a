//! Binary parameter container shared by f32 and int8 model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SQNT"  u32 version (=1)  u32 entry count
//! per entry:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32, 1 = int8)  u8 rank  u32 dims[rank]
//!   f32 scale                      (int8 entries only)
//!   payload: dims product × (4 bytes f32 | 1 byte i8)
//! u32 metadata length, UTF-8 JSON metadata
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::QuantizedTensor;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SQNT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_INT8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor),
    Int8(QuantizedTensor),
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::Int8(q) => q.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

/// Named tensors plus a JSON metadata block.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ContainerFile {
    pub entries: Vec<Entry>,
    pub metadata: String,
}

impl ContainerFile {
    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.payload)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes());
            out.extend_from_slice(name);
            let shape = e.payload.shape();
            out.push(match e.payload {
                Payload::F32(_) => DTYPE_F32,
                Payload::Int8(_) => DTYPE_INT8,
            });
            out.push(u8::try_from(shape.len()).map_err(|_| too_big("rank"))?);
            for &d in shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
            }
            match &e.payload {
                Payload::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::Int8(q) => {
                    out.extend_from_slice(&q.scale().to_le_bytes());
                    out.extend(q.qdata().iter().map(|&v| v as u8));
                }
            }
        }
        let meta = self.metadata.as_bytes();
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| too_big("metadata"))?.to_le_bytes());
        out.extend_from_slice(meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Format, "missing SQNT magic bytes");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported container version {version}");
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| crate::Error::Format("parameter name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| crate::Error::Format(format!("shape {shape:?} overflows")))?;
            let payload = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| too_big("payload"))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Payload::F32(Tensor::new(shape, data)?)
                }
                DTYPE_INT8 => {
                    let scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    let data = r.take(n)?.iter().map(|&b| b as i8).collect();
                    Payload::Int8(
                        QuantizedTensor::new(shape, data, scale)
                            .map_err(|e| crate::Error::Format(format!("entry {name}: {e}")))?,
                    )
                }
                other => bail!(Format, "entry {name}: unknown dtype tag {other}"),
            };
            entries.push(Entry { name, payload });
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| crate::Error::Format("metadata is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes after metadata", bytes.len() - r.pos);
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_big(what: &str) -> crate::Error {
    crate::Error::Format(format!("{what} too large for the container format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => bail!(Format, "truncated file: needed {n} bytes at offset {}", self.pos),
        }
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;
    use proptest::prelude::*;

    fn sample() -> ContainerFile {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.5, -0.25]).unwrap();
        ContainerFile {
            entries: vec![
                Entry { name: "w".into(), payload: Payload::F32(w.clone()) },
                Entry { name: "wq".into(), payload: Payload::Int8(quantize(&w).unwrap()) },
            ],
            metadata: "{\"k\":1}".into(),
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SQNT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &3u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(ContainerFile::from_bytes(&bytes[..cut]), Err(crate::Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ContainerFile::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(ContainerFile::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..40), meta in "[a-z{}\":]{0,20}") {
            let t = Tensor::from_vec(values);
            let file = ContainerFile {
                entries: vec![
                    Entry { name: "a.b".into(), payload: Payload::F32(t.clone()) },
                    Entry { name: "q".into(), payload: Payload::Int8(quantize(&t).unwrap()) },
                ],
                metadata: meta,
            };
            let back = ContainerFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), file.to_bytes().unwrap());
            prop_assert_eq!(back, file);
        }
    }
}
