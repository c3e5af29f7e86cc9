//! IDX files as distributed for MNIST: big-endian header, then raw bytes.

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!("{what}: bad magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Parsed image file: count, rows, cols and the row-major pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let what = "idx images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(Error::Format(format!(
            "{what}: {count}x{rows}x{cols} needs {want} bytes, file has {}",
            body.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "idx labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!("{what}: header says {count} labels, file has {}", body.len())));
    }
    Ok(body.to_vec())
}

pub fn write_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
