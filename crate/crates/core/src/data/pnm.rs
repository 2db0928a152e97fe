//! Binary PPM (P6) images and PGM (P5) masks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Labels};

/// Decoded 8-bit image with `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        file: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn header_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err(path, *pos, "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(path, start, "expected a decimal header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, start, "header field out of range"))
}

/// Parse a P6 or P5 byte stream.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(format_err(path, 0, "bad magic, expected P6 or P5")),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos, path)?;
    let height = header_token(bytes, &mut pos, path)?;
    let maxval_at = pos;
    let maxval = header_token(bytes, &mut pos, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, maxval_at, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - pos;
    if have < need {
        return Err(format_err(path, pos, format!("truncated payload: need {need} bytes, {have} left")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pnm(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Load `<stem>.ppm` images paired with `<stem>.pgm` masks from `dir`.
/// Pairs are ordered by stem; every file must have its partner.
pub fn load_seg_pairs(dir: &Path, classes: usize) -> Result<Dataset> {
    let mut pairs: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        match ext.as_deref() {
            Some("ppm") => pairs.entry(stem).or_default().0 = Some(path),
            Some("pgm") => pairs.entry(stem).or_default().1 = Some(path),
            _ => {}
        }
    }
    let mut data = Vec::new();
    let mut masks = Vec::new();
    let mut dims = None;
    for (stem, pair) in pairs {
        let (img_path, mask_path) = match pair {
            (Some(i), Some(m)) => (i, m),
            (Some(i), None) => {
                return Err(Error::Data(format!("{}: no matching mask {stem}.pgm", i.display())))
            }
            (None, Some(m)) => {
                return Err(Error::Data(format!("{}: no matching image {stem}.ppm", m.display())))
            }
            (None, None) => unreachable!(),
        };
        let img = read_pnm(&img_path)?;
        if img.channels != 3 {
            return Err(Error::Data(format!("{}: expected a P6 color image", img_path.display())));
        }
        let mask = read_pnm(&mask_path)?;
        if mask.channels != 1 {
            return Err(Error::Data(format!("{}: expected a P5 grayscale mask", mask_path.display())));
        }
        if (mask.width, mask.height) != (img.width, img.height) {
            return Err(Error::Data(format!(
                "{}: mask is {}x{}, image is {}x{}",
                mask_path.display(),
                mask.width,
                mask.height,
                img.width,
                img.height
            )));
        }
        match dims {
            None => dims = Some((img.width, img.height)),
            Some(d) if d != (img.width, img.height) => {
                return Err(Error::Data(format!(
                    "{}: size {}x{} differs from earlier images {}x{}",
                    img_path.display(),
                    img.width,
                    img.height,
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        if let Some(&v) = mask.pixels.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Data(format!(
                "{}: mask value {v} >= {classes} classes",
                mask_path.display()
            )));
        }
        let hw = img.width * img.height;
        let scale = img.maxval as f64;
        for c in 0..3 {
            data.extend((0..hw).map(|p| img.pixels[p * 3 + c] as f64 / scale));
        }
        masks.push(mask.pixels);
    }
    let (w, h) = dims.ok_or_else(|| Error::Data(format!("{}: no image/mask pairs found", dir.display())))?;
    Dataset::new(
        Tensor::new(vec![masks.len(), 3, h, w], data)?,
        Labels::Masks(masks),
        classes,
    )
}
