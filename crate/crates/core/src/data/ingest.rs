//! Reading grayscale PGM/PNG files and bringing them to the working resolution.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{DatasetSpec, ImagePool, LabeledPool, IMAGE_SIDE};
use crate::error::{DdadError, Result};

/// Decoded grayscale image with values scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

fn ingest_err(path: &Path, message: impl Into<String>) -> DdadError {
    DdadError::Ingest { path: path.to_path_buf(), message: message.into() }
}

/// Binary PGM (P5), 8- or 16-bit, scaled by `1 / maxval`.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| ingest_err(path, e.to_string()))?;
    decode_pgm(&bytes).map_err(|m| ingest_err(path, m))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header field")?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported PGM geometry {width}x{height}, maxval {maxval}"));
    }
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let scale = 1.0 / maxval as f32;
    let pixels: Vec<f32> = if maxval < 256 {
        if raster.len() < n {
            return Err(format!("raster holds {} of {n} bytes", raster.len()));
        }
        raster[..n].iter().map(|&v| (v as f32 * scale).min(1.0)).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(format!("raster holds {} of {} bytes", raster.len(), 2 * n));
        }
        raster[..2 * n].chunks_exact(2).map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 * scale).min(1.0)).collect()
    };
    Ok(GrayImage { width, height, pixels })
}

/// PNG in any color type; color is reduced to luma (0.299 R + 0.587 G + 0.114 B).
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| ingest_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest_err(path, e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&v| v as f32 / 255.0).collect(),
        other => return Err(ingest_err(path, format!("unexpected bit depth {other:?} after expansion"))),
    };
    let channels = info.color_type.samples();
    let pixels = samples
        .chunks_exact(channels)
        .take(width * height)
        .map(|px| match channels {
            1 | 2 => px[0],
            _ => (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).clamp(0.0, 1.0),
        })
        .collect();
    Ok(GrayImage { width, height, pixels })
}

/// Decodes by extension (`.pgm` or `.png`, case-insensitive).
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match extension(path).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(ingest_err(path, "unsupported file type")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Bilinear resampling with corner-aligned grids: output corners land exactly
/// on input corners, so a same-size resize is the identity.
pub fn resize_bilinear(img: &GrayImage, side: usize) -> Vec<f32> {
    if img.width == side && img.height == side {
        return img.pixels.clone();
    }
    let coord = |i: usize, extent: usize| -> (usize, usize, f32) {
        if side == 1 || extent == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (extent - 1) as f64 / (side - 1) as f64;
        let lo = (pos.floor() as usize).min(extent - 1);
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (y0, y1, fy) = coord(y, img.height);
        for x in 0..side {
            let (x0, x1, fx) = coord(x, img.width);
            let p = |yy: usize, xx: usize| img.pixels[yy * img.width + xx];
            let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
            let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
            out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
        }
    }
    out
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(ingest_err(dir, "directory does not exist"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(extension(p).as_deref(), Some("pgm" | "png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_dir(root: &Path, rel: &str) -> Result<Vec<(String, Vec<f32>)>> {
    list_images(&root.join(rel))?
        .par_iter()
        .map(|path| {
            let img = read_image(path)?;
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            Ok((format!("{rel}/{name}"), resize_bilinear(&img, IMAGE_SIDE)))
        })
        .collect()
}

/// Loads `normal/`, `unlabeled/`, `test/normal/` and `test/abnormal/` under `root`.
///
/// Files are visited in lexicographic order, so repeated ingestion of the
/// same tree yields an identical dataset.
pub fn ingest_directory(root: &Path) -> Result<DatasetSpec> {
    let mut normal = ImagePool::new(IMAGE_SIDE);
    for (id, px) in load_dir(root, "normal")? {
        normal.push(id, px)?;
    }
    if normal.is_empty() {
        return Err(DdadError::Config(format!("no images under {}", root.join("normal").display())));
    }
    let mut unlabeled = ImagePool::new(IMAGE_SIDE);
    for (id, px) in load_dir(root, "unlabeled")? {
        unlabeled.push(id, px)?;
    }
    let test = ingest_test_pool(root)?;
    Ok(DatasetSpec { normal, unlabeled, test, unlabeled_provenance: None, anomaly_rate: None })
}

/// `test/normal/` (label 0) followed by `test/abnormal/` (label 1).
pub fn ingest_test_pool(root: &Path) -> Result<LabeledPool> {
    let mut test = LabeledPool::new(IMAGE_SIDE);
    for (rel, label) in [("test/normal", 0), ("test/abnormal", 1)] {
        for (id, px) in load_dir(root, rel)? {
            test.push(id, px, label)?;
        }
    }
    Ok(test)
}

/// Training pools only; never opens `test/`.
pub fn ingest_training_pools(root: &Path) -> Result<(ImagePool, ImagePool)> {
    let mut normal = ImagePool::new(IMAGE_SIDE);
    for (id, px) in load_dir(root, "normal")? {
        normal.push(id, px)?;
    }
    if normal.is_empty() {
        return Err(DdadError::Config(format!("no images under {}", root.join("normal").display())));
    }
    let mut unlabeled = ImagePool::new(IMAGE_SIDE);
    if root.join("unlabeled").is_dir() {
        for (id, px) in load_dir(root, "unlabeled")? {
            unlabeled.push(id, px)?;
        }
    }
    Ok((normal, unlabeled))
}

/// 16-bit binary PGM; values are clamped to `[0, 1]` and quantized.
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for &v in pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary PGM of `values` min-max scaled to `0..=255` (constant input maps to 0).
pub fn write_pgm8(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> =
        values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
