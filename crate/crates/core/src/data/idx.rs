//! IDX files (big-endian header, `u8` payload).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX array, checking the magic against `magic`.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::Format(format!(
            "bad IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("IDX dims truncated".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for k in 0..rank {
        let d = u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("IDX dims overflow at axis {k}")))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::Format(format!(
            "IDX payload truncated: {} of {total} bytes",
            payload.len()
        )));
    }
    if payload.len() > total {
        return Err(Error::Format(format!(
            "IDX payload has {} trailing bytes",
            payload.len() - total
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Builds a dataset from IDX image and label bytes. Pixels are scaled by 1/255.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_idx(images, IMAGES_MAGIC)?;
    let lab = parse_idx(labels, LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let ds = Dataset {
        images: img.data.iter().map(|&p| p as f32 / 255.0).collect(),
        num_classes: labels.iter().max().map_or(0, |m| m + 1),
        labels,
        channels: 1,
        height: img.dims[1],
        width: img.dims[2],
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    dataset_from_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Serializes `u8` data with an IDX header.
pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
