//! Binary portable pixmap ("P6", maxval 255) reading and writing.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::corpus::Patch;
use crate::error::{Error, Result};

/// Writes interleaved RGB bytes as a P6 file, creating parent directories.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Argument(format!(
            "{}x{} RGB image needs {} bytes, got {}",
            width,
            height,
            width * height * 3,
            rgb.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Reads any 8-bit raster the decoder understands, returning `(width, height, rgb)`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(bad("file not found".into()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| bad(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| bad(e.to_string()))?
        .decode()
        .map_err(|e| bad(format!("unreadable image: {e}")))?;
    let rgb = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

pub fn write_patch(path: &Path, patch: &Patch) -> Result<()> {
    write_ppm(path, patch.side(), patch.side(), patch.rgb())
}

pub fn read_patch(path: &Path) -> Result<Patch> {
    let (w, h, rgb) = read_rgb(path)?;
    if w != h {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            reason: format!("patch must be square, got {w}x{h}"),
        });
    }
    Patch::new(w, rgb)
}
