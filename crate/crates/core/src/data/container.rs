//! Binary tensor container shared by every persisted artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "KDEPTNSR"
//! version      u32      (currently 1)
//! count        u32      number of sections
//! per section:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8       1 = f64, 2 = i64
//!   ndim       u32
//!   dims       ndim x u64
//!   payload    product(dims) x 8 bytes, little-endian
//! ```
//!
//! Nothing may follow the last section. A zero-dimensional section holds one
//! scalar (the empty product).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;

pub const MAGIC: &[u8; 8] = b"KDEPTNSR";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_I64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::I64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => DTYPE_F64,
            Payload::I64(_) => DTYPE_I64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Section {
    pub fn f64(name: impl Into<String>, dims: Vec<u64>, values: Vec<f64>) -> Self {
        Section {
            name: name.into(),
            dims,
            payload: Payload::F64(values),
        }
    }

    pub fn i64(name: impl Into<String>, dims: Vec<u64>, values: Vec<i64>) -> Self {
        Section {
            name: name.into(),
            dims,
            payload: Payload::I64(values),
        }
    }

    pub fn vector(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len() as u64;
        Section::f64(name, vec![n], values)
    }

    pub fn ints(name: impl Into<String>, values: Vec<i64>) -> Self {
        let n = values.len() as u64;
        Section::i64(name, vec![n], values)
    }

    pub fn matrix(name: impl Into<String>, m: &FeatureMatrix) -> Self {
        Section::f64(
            name,
            vec![m.rows() as u64, m.cols() as u64],
            m.values().to_vec(),
        )
    }

    fn element_count(&self) -> Option<usize> {
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub sections: Vec<Section>,
}

impl TensorContainer {
    pub fn new(sections: Vec<Section>) -> Self {
        TensorContainer { sections }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::format(0, format!("missing section `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.section(name)?.payload {
            Payload::F64(v) => Ok(v),
            Payload::I64(_) => Err(Error::format(0, format!("section `{name}` is not f64"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.section(name)?.payload {
            Payload::I64(v) => Ok(v),
            Payload::F64(_) => Err(Error::format(0, format!("section `{name}` is not i64"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<FeatureMatrix> {
        let s = self.section(name)?;
        if s.dims.len() != 2 {
            return Err(Error::format(0, format!("section `{name}` is not 2-d")));
        }
        FeatureMatrix::new(s.dims[0] as usize, s.dims[1] as usize, self.f64s(name)?.to_vec())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count_u32(self.sections.len(), "section count")?.to_le_bytes());
        for s in &self.sections {
            let expected = s.element_count().ok_or_else(|| {
                Error::Dimension(format!("section `{}` dims overflow", s.name))
            })?;
            if expected != s.payload.len() {
                return Err(Error::Dimension(format!(
                    "section `{}` dims {:?} imply {} values, payload has {}",
                    s.name,
                    s.dims,
                    expected,
                    s.payload.len()
                )));
            }
            out.extend_from_slice(&count_u32(s.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.payload.dtype());
            out.extend_from_slice(&count_u32(s.dims.len(), "ndim")?.to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &s.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(name_at as u64 + 4, "section name is not UTF-8"))?
                .to_owned();
            let dtype_at = r.pos;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(64));
            for _ in 0..ndim {
                dims.push(r.u64()?);
            }
            let payload_at = r.pos;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
                .and_then(|c| c.checked_mul(8).map(|_| c))
                .ok_or_else(|| Error::format(payload_at as u64, "section dims overflow"))?;
            let raw = r.take(count * 8)?;
            let payload = match dtype {
                DTYPE_F64 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DTYPE_I64 => Payload::I64(
                    raw.chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::format(dtype_at as u64, format!("unknown dtype {other}")))
                }
            };
            sections.push(Section {
                name,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last section"));
        }
        Ok(TensorContainer { sections })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.encode()?)))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorContainer::decode(&bytes)
    }
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("{what} {n} exceeds u32")))
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
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated: need {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Temp file in the destination directory, then rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_is_header_only() {
        let bytes = TensorContainer::default().encode().unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(TensorContainer::decode(&bytes).unwrap().sections.len(), 0);
    }

    #[test]
    fn corrupt_magic_fails_at_zero() {
        let mut bytes = TensorContainer::default().encode().unwrap();
        bytes[0] = b'X';
        match TensorContainer::decode(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at 0, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_fails_at_eight() {
        let mut bytes = TensorContainer::default().encode().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            TensorContainer::decode(&bytes),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let c = TensorContainer::new(vec![Section::vector("x", vec![1.0, 2.0])]);
        let bytes = c.encode().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        // header 16 + name_len 4 + name 1 + dtype 1 + ndim 4 + dim 8 = 34
        match TensorContainer::decode(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 34),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dims_must_match_payload() {
        let c = TensorContainer::new(vec![Section::f64("x", vec![3], vec![1.0])]);
        assert!(matches!(c.encode(), Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_section_has_zero_dims() {
        let c = TensorContainer::new(vec![Section::i64("k", vec![], vec![42])]);
        let back = TensorContainer::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.i64s("k").unwrap(), &[42]);
    }
}
