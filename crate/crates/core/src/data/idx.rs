use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Labels};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            file: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(self.err(format!("truncated payload: need {n} bytes, {avail} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an IDX image file (`u8`, `N x H x W`) and its IDX label file.
/// Pixels are scaled to `[0, 1]`; inputs have shape `(N, 1, H, W)`.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = read(images_path)?;
    let mut c = Cursor {
        path: images_path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = c.u32_be()?;
    if magic != IMAGES_MAGIC {
        c.pos = 0;
        return Err(c.err(format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = c.u32_be()? as usize;
    let h = c.u32_be()? as usize;
    let w = c.u32_be()? as usize;
    let pixels = c.take(n * h * w)?;
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();

    let lbytes = read(labels_path)?;
    let mut lc = Cursor {
        path: labels_path,
        bytes: &lbytes,
        pos: 0,
    };
    let magic = lc.u32_be()?;
    if magic != LABELS_MAGIC {
        lc.pos = 0;
        return Err(lc.err(format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let ln = lc.u32_be()? as usize;
    if ln != n {
        lc.pos = 4;
        return Err(lc.err(format!("{ln} labels for {n} images in {}", images_path.display())));
    }
    let labels = lc.take(n)?;
    if lc.pos != lbytes.len() {
        return Err(lc.err(format!("{} trailing bytes", lbytes.len() - lc.pos)));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::Data(format!(
            "{}: record {i}: label {l} >= {classes} classes",
            labels_path.display()
        )));
    }
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        Labels::Classes(labels.iter().map(|&l| l as usize).collect()),
        classes,
    )
}

/// Write `u8` images (`N x H x W`) and labels in IDX format.
pub fn write_idx(images_path: &Path, labels_path: &Path, dims: (usize, usize), images: &[u8], labels: &[u8]) -> Result<()> {
    let (h, w) = dims;
    let n = labels.len();
    if images.len() != n * h * w {
        return Err(Error::Shape(format!("{} pixels for {n} images of {h}x{w}", images.len())));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(images);
    std::fs::write(images_path, out).map_err(|e| Error::io(images_path, e))?;
    let mut out = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    std::fs::write(labels_path, out).map_err(|e| Error::io(labels_path, e))
}
