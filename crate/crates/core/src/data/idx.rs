//! IDX files: big-endian magic, big-endian u32 dimensions, raw u8 payload.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            what: format!("{what} header"),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            what: what.into(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, expected: usize, what: &str) -> Result<&'a [u8]> {
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(Error::Truncated {
            what: format!("{what} payload"),
            expected,
            actual,
        });
    }
    Ok(&bytes[header..header + expected])
}

/// Parse an image file; returns `(n, height, width, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "idx images")?;
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let h = be_u32(bytes, 8, "idx images")? as usize;
    let w = be_u32(bytes, 12, "idx images")? as usize;
    Ok((n, h, w, payload(bytes, 16, n * h * w, "idx images")?.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "idx labels")?;
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    Ok(payload(bytes, 8, n, "idx labels")?.to_vec())
}

pub fn write_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Load a single-channel image/label IDX pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let (n, h, w, pixels) = read_idx_images(&read_file(images_path)?)?;
    let labels = read_idx_labels(&read_file(labels_path.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let name = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset::new(name, [1, h, w], pixels, labels.into_iter().map(usize::from).collect())?.with_meta(images_path.display().to_string()))
}

/// Write a single-channel dataset as an IDX pair.
pub fn save_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = ds.shape();
    if c != 1 {
        return Err(Error::InvalidArgument(format!("idx stores one channel, dataset has {c}")));
    }
    let labels = ds
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(images_path, write_idx_images(ds.len(), h, w, ds.images()))?;
    fs::write(labels_path, write_idx_labels(&labels))?;
    Ok(())
}
