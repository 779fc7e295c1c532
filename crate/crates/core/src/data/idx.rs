//! IDX archives (the MNIST layout): two zero bytes, a type code, the rank,
//! big-endian `u32` dimensions, then the payload. Only unsigned bytes
//! (`0x08`) are supported.

use std::fs;
use std::path::Path;

use super::{Dataset, Modality, Split};
use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::scalar::Scalar;

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(TowerError::Format("IDX magic mismatch".into()));
    }
    if bytes[2] != UBYTE {
        return Err(TowerError::Format(format!(
            "IDX type 0x{:02x} unsupported (only unsigned byte)",
            bytes[2]
        )));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || bytes.len() < 4 + 4 * rank {
        return Err(TowerError::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..4 + 4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| TowerError::Format("IDX dims overflow".into()))?;
    let payload = &bytes[4 + 4 * rank..];
    if payload.len() != count {
        return Err(TowerError::Format(format!(
            "IDX payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&[0, 0, UBYTE, arr.dims.len() as u8]);
    for &d in &arr.dims {
        let d = u32::try_from(d)
            .map_err(|_| TowerError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    fs::write(path, out).map_err(|e| TowerError::file(path, e))
}

fn read_file(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| TowerError::file(path, e))?;
    read_idx(&bytes).map_err(|e| TowerError::Format(format!("{}: {e}", path.display())))
}

/// Loads an image archive (`N x H x W` or `N x H x W x C`) and its label
/// vector. Pixels are scaled by `1/255`; every sample lands in the train split.
pub fn load_idx<S: Scalar>(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset<S>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let (n, h, w, c) = match img.dims.as_slice() {
        &[n, h, w] => (n, h, w, 1),
        &[n, h, w, c] => (n, h, w, c),
        d => {
            return Err(TowerError::Format(format!(
                "image archive has rank {}, expected 3 or 4",
                d.len()
            )))
        }
    };
    if lab.dims.len() != 1 || lab.dims[0] != n {
        return Err(TowerError::Format(format!(
            "label archive dims {:?} do not match {n} images",
            lab.dims
        )));
    }
    if let Some((i, &bad)) = lab
        .data
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= num_classes)
    {
        return Err(TowerError::Format(format!(
            "label {bad} of sample {i} out of range for {num_classes} classes"
        )));
    }
    let per = h * w * c;
    let scale = S::one() / S::lit(255.0);
    let images = (0..n)
        .map(|i| {
            Image::new(
                h,
                w,
                c,
                img.data[i * per..(i + 1) * per]
                    .iter()
                    .map(|&b| S::lit(b as f64) * scale)
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        ids: (0..n).map(|i| i.to_string()).collect(),
        labels: Some(lab.data.iter().map(|&l| l as usize).collect()),
        masks: None,
        centers: None,
        splits: vec![Split::Train; n],
        modality: Modality::Synthetic,
        num_classes,
    })
}

/// Writes images (rounded to bytes) and labels as a pair of IDX files.
pub fn write_idx_dataset<S: Scalar>(ds: &Dataset<S>, images: &Path, labels: &Path) -> Result<()> {
    let (h, w, c) = ds
        .shape()
        .ok_or_else(|| TowerError::Data("empty dataset".into()))?;
    let labs = ds
        .labels
        .as_ref()
        .ok_or_else(|| TowerError::Data("dataset has no class labels".into()))?;
    let mut dims = vec![ds.len(), h, w];
    if c > 1 {
        dims.push(c);
    }
    let data = ds
        .images
        .iter()
        .flat_map(|i| {
            i.data()
                .iter()
                .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        })
        .collect();
    write_idx(images, &IdxArray { dims, data })?;
    let labels_data = labs
        .iter()
        .map(|&l| {
            u8::try_from(l)
                .map_err(|_| TowerError::Format(format!("label {l} does not fit a byte")))
        })
        .collect::<Result<Vec<_>>>()?;
    write_idx(
        labels,
        &IdxArray {
            dims: vec![labs.len()],
            data: labels_data,
        },
    )
}
