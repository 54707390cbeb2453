//! Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only, with a
//! validity-mask sidecar.
//!
//! The mask sidecar is a P5 image at `<stem>.mask.pgm` holding 255 for valid
//! and 0 for masked pixels. It is written only when the image has masked
//! pixels, and picked up automatically on load when present.

use std::fs;
use std::path::{Path, PathBuf};

use frontal_core::image::Image;

use crate::{Error, Result};

/// Sidecar path of an image: `front.pgm` -> `front.mask.pgm`.
pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}.mask.pgm"))
}

/// Writes the image as P5 (1 channel) or P6 (3 channels), plus the mask
/// sidecar when any pixel is invalid.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut data = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    data.extend_from_slice(image.pixels());
    fs::write(path, &data).map_err(|e| Error::io(path, e))?;

    if image.any_masked() {
        let mask_px: Vec<u8> = image.mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
        let mut mask_data =
            format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
        mask_data.extend_from_slice(&mask_px);
        let sidecar = mask_sidecar_path(path);
        fs::write(&sidecar, &mask_data).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

/// Loads a P5/P6 image; applies the mask sidecar if one exists next to it.
pub fn load_image(path: &Path) -> Result<Image> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, channels, pixels) = parse_pnm(path, &data)?;
    let mut image = Image::new(width, height, channels, pixels)?;

    let sidecar = mask_sidecar_path(path);
    if sidecar.exists() && sidecar != *path {
        let mask_img = load_image(&sidecar)?;
        if mask_img.width() != width || mask_img.height() != height || mask_img.channels() != 1 {
            return Err(Error::malformed(&sidecar, "mask dimensions do not match image"));
        }
        let mask: Vec<bool> = mask_img.pixels().iter().map(|&v| v != 0).collect();
        image = Image::with_mask(width, height, channels, image.pixels().to_vec(), mask)?;
    }
    Ok(image)
}

fn parse_pnm(path: &Path, data: &[u8]) -> Result<(u32, u32, u8, Vec<u8>)> {
    if data.len() < 2 {
        return Err(Error::malformed(path, "truncated header"));
    }
    let channels = match &data[..2] {
        b"P5" => 1u8,
        b"P6" => 3u8,
        _ => return Err(Error::unsupported(path, "magic is not P5 or P6")),
    };

    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        pos = skip_separators(data, pos, path)?;
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::malformed(path, "expected numeric header field"));
        }
        let text = std::str::from_utf8(&data[start..pos])
            .map_err(|_| Error::malformed(path, "non-ascii header"))?;
        *field = text
            .parse::<u64>()
            .map_err(|_| Error::malformed(path, "header field out of range"))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::malformed(path, "missing payload separator"));
    }
    pos += 1;

    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::unsupported(path, format!("maxval {maxval}, only 255 supported")));
    }
    if w == 0 || h == 0 || w > u32::MAX as u64 || h > u32::MAX as u64 {
        return Err(Error::malformed(path, "invalid dimensions"));
    }
    let expected = (w as usize)
        .checked_mul(h as usize)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| Error::malformed(path, "dimensions overflow"))?;
    let payload = &data[pos..];
    if payload.len() < expected {
        return Err(Error::malformed(path, "truncated payload"));
    }
    if payload.len() > expected {
        return Err(Error::malformed(path, "trailing bytes after payload"));
    }
    Ok((w as u32, h as u32, channels, payload.to_vec()))
}

/// Skips whitespace and `#` comment lines between header fields.
fn skip_separators(data: &[u8], mut pos: usize, path: &Path) -> Result<usize> {
    loop {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        if pos >= data.len() {
            return Err(Error::malformed(path, "truncated header"));
        }
        return Ok(pos);
    }
}
