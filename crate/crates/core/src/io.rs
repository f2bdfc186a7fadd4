//! Binary file formats.
//!
//! Every file starts with a 16-byte header: a 12-byte ASCII magic followed by
//! a little-endian `u32` format version. Potential maps and label maps then
//! carry three little-endian `u32` dimensions `(H, W, C)` and `H·W·C`
//! little-endian values, row-major with the channel fastest:
//!
//! | file          | magic          | C     | values |
//! |---------------|----------------|-------|--------|
//! | potential map | `PARTSEG-TNSR` | any   | `f32`  |
//! | label map     | `PARTSEG-LABL` | 1     | `u32`  |
//!
//! Potential maps are held as `f64` in memory and rounded to `f32` on save.
//! Refiner and pairwise-model files reuse the same header with their own
//! magic; their layouts are documented next to their writers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::potentials::PotentialMap;
use crate::proposal::LabelMap;
use crate::{Error, Result};

pub const VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 12] = b"PARTSEG-TNSR";
pub const LABEL_MAGIC: &[u8; 12] = b"PARTSEG-LABL";
pub const REFINER_MAGIC: &[u8; 12] = b"PARTSEG-CONV";
pub const PAIRWISE_MAGIC: &[u8; 12] = b"PARTSEG-PAIR";

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 12]) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    pub(crate) fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub(crate) fn u32s(&mut self, values: &[u32]) {
        for &v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self, path: &Path) -> Result<()> {
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader {
    bytes: Vec<u8>,
    pos: usize,
    path: PathBuf,
}

impl Reader {
    pub(crate) fn open(path: &Path, magic: &[u8; 12]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        let got = r.take(12)?.to_vec();
        if got != magic {
            return Err(r.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub(crate) fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                &self.path,
                format!("truncated at byte {}, needed {n} more", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(&self.path, "size overflow"))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(&self.path, "size overflow"))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn write_potential_map(map: &PotentialMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new(TENSOR_MAGIC);
    w.u32(map.height())?;
    w.u32(map.width())?;
    w.u32(map.channels())?;
    w.f32s(map.values());
    w.finish(path.as_ref())
}

pub fn read_potential_map(path: impl AsRef<Path>) -> Result<PotentialMap> {
    let path = path.as_ref();
    let mut r = Reader::open(path, TENSOR_MAGIC)?;
    let (h, w, c) = (r.dim()?, r.dim()?, r.dim()?);
    if c == 0 {
        return Err(r.err("zero channels"));
    }
    let values = r.f32s(h * w * c)?;
    r.finish()?;
    PotentialMap::new(h, w, c, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new(LABEL_MAGIC);
    w.u32(map.height())?;
    w.u32(map.width())?;
    w.u32(1)?;
    w.u32s(map.labels());
    w.finish(path.as_ref())
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let mut r = Reader::open(path, LABEL_MAGIC)?;
    let (h, w, c) = (r.dim()?, r.dim()?, r.dim()?);
    if c != 1 {
        return Err(r.err(format!("label maps have one channel, header says {c}")));
    }
    let labels = r.u32s(h * w)?;
    r.finish()?;
    LabelMap::new(h, w, labels)
}
