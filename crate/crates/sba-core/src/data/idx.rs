//! IDX image/label files.
//!
//! Big-endian headers: images carry magic `0x00000803` and dims
//! `[count, rows, cols]`, labels magic `0x00000801` and dims `[count]`;
//! u8 payloads follow. Pixels are scaled to `[0, 1]` by division by 255 on
//! load. Files ending in `.gz` are transparently (de)compressed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::format(&name, format!("gzip decode failed: {e}")))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes).map_err(|e| Error::io(&name, e))?;
    }
    Ok(bytes)
}

fn read_u32_be(bytes: &[u8], name: &str, at: usize) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::format(
            name,
            format!("truncated header at byte {at}"),
        ));
    }
    Ok(u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()))
}

/// Loads an IDX image file and its label file into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let img = read_all(images_path)?;
    let magic = read_u32_be(&img, &img_name, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            &img_name,
            format!("bad image magic {magic:#010x} at byte 0 (want {IMAGES_MAGIC:#010x})"),
        ));
    }
    let count = read_u32_be(&img, &img_name, 4)? as usize;
    let rows = read_u32_be(&img, &img_name, 8)? as usize;
    let cols = read_u32_be(&img, &img_name, 12)? as usize;
    let want = 16 + count * rows * cols;
    if img.len() != want {
        return Err(Error::format(
            &img_name,
            format!(
                "payload length {} at byte 16 does not match header ({count} x {rows} x {cols})",
                img.len() - 16.min(img.len())
            ),
        ));
    }

    let lbl_name = labels_path.display().to_string();
    let lbl = read_all(labels_path)?;
    let magic = read_u32_be(&lbl, &lbl_name, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            &lbl_name,
            format!("bad label magic {magic:#010x} at byte 0 (want {LABELS_MAGIC:#010x})"),
        ));
    }
    let lbl_count = read_u32_be(&lbl, &lbl_name, 4)? as usize;
    if lbl.len() != 8 + lbl_count {
        return Err(Error::format(
            &lbl_name,
            format!("payload length {} at byte 8 does not match header count {lbl_count}",
                lbl.len().saturating_sub(8)),
        ));
    }
    if lbl_count != count {
        return Err(Error::format(
            &lbl_name,
            format!("label count {lbl_count} does not match image count {count}"),
        ));
    }

    let features: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, labels, rows * cols, class_count)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&name, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(&name, e))?;
        enc.finish().map_err(|e| Error::io(&name, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(&name, e))?;
    }
    Ok(())
}

/// Writes raw u8 images and labels in IDX format (supports fixtures and
/// materializing synthetic sets).
pub fn write_idx_raw(
    images: &[u8],
    count: usize,
    rows: usize,
    cols: usize,
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if images.len() != count * rows * cols || labels.len() != count {
        return Err(Error::Shape {
            op: "write_idx_raw",
            left: vec![count, rows, cols],
            right: vec![images.len(), labels.len()],
        });
    }
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(images);
    write_maybe_gz(images_path, &img)?;

    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    write_maybe_gz(labels_path, &lbl)
}

/// Writes a dataset whose features live in `[0, 1]` as square IDX images,
/// quantizing to u8. Exact round trip requires the features to already sit on
/// the 256-level grid (true for [`super::synth_images`] and anything loaded
/// by [`load_idx`]).
pub fn write_idx_dataset(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let side = (ds.dim() as f64).sqrt().round() as usize;
    if side * side != ds.dim() {
        return Err(Error::Config(format!(
            "feature dim {} is not a square image",
            ds.dim()
        )));
    }
    if ds.class_count() > 256 {
        return Err(Error::Config("IDX labels are u8; need <= 256 classes".into()));
    }
    let images: Vec<u8> = ds
        .features()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels: Vec<u8> = ds.labels().iter().map(|&y| y as u8).collect();
    write_idx_raw(&images, ds.len(), side, side, &labels, images_path, labels_path)
}
