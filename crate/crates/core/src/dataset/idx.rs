//! IDX reader/writer. Images are rank-3 (`count, rows, cols`), labels rank-1,
//! all big-endian. Gzipped files are accepted transparently on read.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, DatasetLineage, LabeledVector, MNIST_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    F32,
}

impl IdxType {
    fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::F32 => 0x0D,
        }
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 => 1,
            IdxType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub elem: IdxType,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn header_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    /// Total file length implied by the header.
    pub fn expected_len(&self) -> usize {
        self.header_len() + self.element_count() * self.elem.width()
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(malformed(path, "file shorter than the 4-byte magic"));
        }
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let elem = match (bytes[0], bytes[1], bytes[2]) {
            (0, 0, 0x08) => IdxType::U8,
            (0, 0, 0x0D) => IdxType::F32,
            _ => {
                return Err(Error::BadMagic {
                    path: path.to_path_buf(),
                    found: magic,
                })
            }
        };
        let ndims = bytes[3] as usize;
        if ndims == 0 {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        if bytes.len() < 4 + 4 * ndims {
            return Err(malformed(path, "truncated dimension header"));
        }
        let dims = (0..ndims)
            .map(|i| {
                let o = 4 + 4 * i;
                u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
            })
            .collect();
        Ok(Self { elem, dims })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.elem.code(), self.dims.len() as u8];
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedIdx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_checked(bytes: &[u8], path: &Path, ndims: usize) -> Result<IdxHeader> {
    let header = IdxHeader::parse(bytes, path)?;
    if header.dims.len() != ndims {
        return Err(malformed(
            path,
            format!("expected {ndims} dimensions, found {}", header.dims.len()),
        ));
    }
    if bytes.len() != header.expected_len() {
        return Err(malformed(
            path,
            format!(
                "header implies {} bytes but file has {}",
                header.expected_len(),
                bytes.len()
            ),
        ));
    }
    Ok(header)
}

/// Sidecar path for the lineage of the dataset whose images live at `images`.
pub fn lineage_sidecar_path(images: &Path) -> PathBuf {
    let stem = images
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = stem
        .strip_suffix(".gz")
        .unwrap_or(&stem)
        .trim_end_matches(".idx")
        .to_string();
    images.with_file_name(format!("{stem}.lineage.json"))
}

/// Loads an MNIST-style (10-class) dataset.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with_classes(images, labels, MNIST_CLASSES)
}

pub fn load_idx_with_classes(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img_bytes = read_maybe_gz(images)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let ih = parse_checked(&img_bytes, images, 3)?;
    let lh = parse_checked(&lbl_bytes, labels, 1)?;
    if lh.elem != IdxType::U8 {
        return Err(malformed(labels, "labels must be u8"));
    }
    let count = ih.dims[0] as usize;
    let dim = ih.dims[1] as usize * ih.dims[2] as usize;
    if count != lh.dims[0] as usize {
        return Err(Error::CountMismatch {
            images: count,
            labels: lh.dims[0] as usize,
        });
    }
    if dim == 0 {
        return Err(malformed(images, "zero-sized images"));
    }
    let payload = &img_bytes[ih.header_len()..];
    let tags = &lbl_bytes[lh.header_len()..];
    let mut items = Vec::with_capacity(count);
    for (n, &tag) in tags.iter().enumerate() {
        if tag as usize >= num_classes {
            return Err(Error::InvalidDataset(format!(
                "label {tag} at index {n} is not below {num_classes}"
            )));
        }
        let pixels: Vec<f32> = match ih.elem {
            IdxType::U8 => payload[n * dim..(n + 1) * dim]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect(),
            IdxType::F32 => payload[n * dim * 4..(n + 1) * dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        items.push(LabeledVector::new(pixels, tag as usize));
    }

    let sidecar = lineage_sidecar_path(images);
    let lineage = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?
    } else {
        let name = images
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into());
        DatasetLineage::original(name)
    };
    Dataset::new(items, dim, num_classes, lineage)
}

fn image_shape(dim: usize) -> (u32, u32) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side as u32, side as u32)
    } else {
        (1, dim as u32)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn labels_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = IdxHeader {
        elem: IdxType::U8,
        dims: vec![ds.len() as u32],
    }
    .encode();
    out.extend(ds.items().iter().map(|i| i.tag as u8));
    out
}

fn write_lineage(ds: &Dataset, images: &Path) -> Result<()> {
    let sidecar = lineage_sidecar_path(images);
    let text = serde_json::to_string_pretty(ds.lineage()).map_err(|e| Error::json(&sidecar, e))?;
    write_file(&sidecar, text.as_bytes())
}

/// Writes float32 images, u8 labels, and the lineage sidecar. Square inputs
/// are written as `side x side` images, others as `1 x D`.
pub fn save_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let images = images.as_ref();
    if ds.num_classes() > 256 {
        return Err(Error::InvalidDataset("u8 labels hold at most 256 classes".into()));
    }
    let (rows, cols) = image_shape(ds.input_dim());
    let mut out = IdxHeader {
        elem: IdxType::F32,
        dims: vec![ds.len() as u32, rows, cols],
    }
    .encode();
    out.reserve(ds.len() * ds.input_dim() * 4);
    for item in ds.items() {
        for p in &item.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    write_file(images, &out)?;
    write_file(labels.as_ref(), &labels_bytes(ds))?;
    write_lineage(ds, images)
}

/// Quantizing exporter: u8 images with `round(p * 255)`, for tools that only
/// read classic MNIST files.
pub fn export_idx_u8(
    ds: &Dataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let images = images.as_ref();
    let (rows, cols) = image_shape(ds.input_dim());
    let mut out = IdxHeader {
        elem: IdxType::U8,
        dims: vec![ds.len() as u32, rows, cols],
    }
    .encode();
    for item in ds.items() {
        out.extend(item.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    }
    write_file(images, &out)?;
    write_file(labels.as_ref(), &labels_bytes(ds))?;
    write_lineage(ds, images)
}
