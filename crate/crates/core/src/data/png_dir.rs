//! PNG directories described by a manifest CSV with rows
//! `filename, label_or_maskpath, split`. The second column is either an
//! integer class label or the path of a binary mask PNG; a dataset uses one
//! kind throughout. A header row is skipped when its split column is not a
//! split name.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Dataset, Modality, Split};
use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::scalar::Scalar;

/// Decodes an 8-bit PNG to `[0, 1]`. Alpha is dropped; palettes are expanded.
pub fn read_png<S: Scalar>(path: &Path) -> Result<Image<S>> {
    let decode_err = |reason: String| TowerError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let f = File::open(path).map_err(|e| TowerError::file(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(decode_err("palette was not expanded".into())),
    };
    let scale = S::one() / S::lit(255.0);
    let mut data = Vec::with_capacity(h * w * keep);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * src_c].chunks(src_c) {
            data.extend(px[..keep].iter().map(|&b| S::lit(b as f64) * scale));
        }
    }
    Image::new(h, w, keep, data)
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png<S: Scalar>(path: &Path, img: &Image<S>) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(TowerError::Data(format!("cannot write a {c}-channel PNG"))),
    };
    let f = File::create(path).map_err(|e| TowerError::file(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let to_err = |e: png::EncodingError| TowerError::Format(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(&bytes).map_err(to_err)?;
    w.finish().map_err(to_err)
}

/// Writes a `{0, 1}` mask as black/white.
pub fn write_mask_png(path: &Path, bits: &[u8], height: usize, width: usize) -> Result<()> {
    let img = Image::<f32>::new(
        height,
        width,
        1,
        bits.iter()
            .map(|&b| if b != 0 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    write_png(path, &img)
}

enum Target {
    Label(usize),
    Mask(String),
}

pub fn load_png_dir<S: Scalar>(dir: &Path, manifest: &Path) -> Result<Dataset<S>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => TowerError::file(manifest, io),
            other => TowerError::Format(format!("{}: {other:?}", manifest.display())),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| TowerError::Ingestion {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != 3 {
            return Err(TowerError::Ingestion {
                row,
                reason: format!("expected 3 columns, found {}", rec.len()),
            });
        }
        let split = match rec[2].parse::<Split>() {
            Ok(s) => s,
            Err(_) if row == 1 => continue,
            Err(e) => {
                return Err(TowerError::Ingestion {
                    row,
                    reason: e.to_string(),
                })
            }
        };
        let target = match rec[1].parse::<usize>() {
            Ok(l) => Target::Label(l),
            Err(_) if !rec[1].is_empty() && rec[1].parse::<f64>().is_err() => {
                Target::Mask(rec[1].to_string())
            }
            Err(_) => {
                return Err(TowerError::Ingestion {
                    row,
                    reason: format!("bad label `{}`", &rec[1]),
                })
            }
        };
        rows.push((row, rec[0].to_string(), target, split));
    }
    if rows.is_empty() {
        return Err(TowerError::Ingestion {
            row: 0,
            reason: "manifest lists no images".into(),
        });
    }
    let with_labels = matches!(rows[0].2, Target::Label(_));
    let mut ds = Dataset {
        images: Vec::with_capacity(rows.len()),
        ids: Vec::with_capacity(rows.len()),
        labels: with_labels.then(Vec::new),
        masks: (!with_labels).then(Vec::new),
        centers: None,
        splits: Vec::with_capacity(rows.len()),
        modality: Modality::Fundoscopic,
        num_classes: 0,
    };
    let mut shape = None;
    for (row, file, target, split) in rows {
        let img: Image<S> = read_png(&dir.join(&file)).map_err(|e| TowerError::Ingestion {
            row,
            reason: e.to_string(),
        })?;
        if *shape.get_or_insert(img.shape()) != img.shape() {
            return Err(TowerError::Ingestion {
                row,
                reason: format!(
                    "{file} is {:?}, earlier images are {:?}",
                    img.shape(),
                    shape.unwrap()
                ),
            });
        }
        match (target, &mut ds.labels, &mut ds.masks) {
            (Target::Label(l), Some(labels), _) => {
                ds.num_classes = ds.num_classes.max(l + 1);
                labels.push(l);
            }
            (Target::Mask(m), _, Some(masks)) => {
                let raw: Image<S> = read_png(&dir.join(&m)).map_err(|e| TowerError::Ingestion {
                    row,
                    reason: e.to_string(),
                })?;
                if (raw.height(), raw.width()) != (img.height(), img.width()) {
                    return Err(TowerError::Ingestion {
                        row,
                        reason: format!("mask {m} does not match its image size"),
                    });
                }
                let half = S::lit(0.5);
                let lum = raw.luminance();
                masks.push(lum.map(|v| if v > half { S::one() } else { S::zero() }));
            }
            _ => {
                return Err(TowerError::Ingestion {
                    row,
                    reason: "manifest mixes class labels and mask paths".into(),
                })
            }
        }
        ds.ids.push(file);
        ds.images.push(img);
        ds.splits.push(split);
    }
    Ok(ds)
}
