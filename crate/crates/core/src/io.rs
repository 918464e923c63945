//! File formats: grayscale PNG images, PFM / 16-bit PNG depth maps, indexed
//! label PNGs and JSON intrinsics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics};
use crate::raster::{GrayImage, Raster};

/// Load any supported image as grayscale with intensities in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Raster::from_vec(w as usize, h as usize, data)
}

pub fn gray_to_u8(img: &GrayImage) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Save an 8-bit grayscale PNG. Values are clamped to `[0, 1]`.
pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, gray_to_u8(img))
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Load a depth map. `.pfm` files are read directly; any other extension is
/// treated as a 16-bit PNG whose raw values are divided by `png_scale`.
pub fn load_depth(path: &Path, png_scale: Option<f64>) -> Result<DepthMap> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        read_pfm(path)
    } else {
        let scale = png_scale.unwrap_or(1000.0);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Format(format!("depth scale must be positive, got {scale}")));
        }
        let img = image::open(path)?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| if v == 0 { 0.0 } else { v as f64 / scale })
            .collect();
        Ok(DepthMap::new(Raster::from_vec(w as usize, h as usize, data)?))
    }
}

/// Read a single-channel PFM. Rows are stored bottom-to-top; a negative scale
/// marks little-endian data.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut read_token = |reader: &mut BufReader<File>| -> Result<String> {
        header.clear();
        loop {
            let mut byte = [0u8; 1];
            reader.read_exact(&mut byte)?;
            if byte[0].is_ascii_whitespace() {
                if header.is_empty() {
                    continue;
                }
                break;
            }
            header.push(byte[0]);
        }
        Ok(String::from_utf8_lossy(&header).into_owned())
    };
    let magic = read_token(&mut reader)?;
    if magic != "Pf" {
        return Err(Error::Format(format!(
            "expected single-channel PFM magic `Pf`, got `{magic}`"
        )));
    }
    let parse = |s: String| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM header token `{s}`")))
    };
    let w = parse(read_token(&mut reader)?)? as usize;
    let h = parse(read_token(&mut reader)?)? as usize;
    let scale = parse(read_token(&mut reader)?)?;
    if w == 0 || h == 0 || scale == 0.0 {
        return Err(Error::Format("PFM header has zero dimension or scale".into()));
    }
    let little = scale < 0.0;
    let mut bytes = vec![0u8; w * h * 4];
    reader.read_exact(&mut bytes)?;
    let mut data = vec![0.0f64; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Ok(DepthMap::new(Raster::from_vec(w, h, data)?))
}

/// Write a little-endian single-channel PFM. Invalid depths are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.depth(x, y).unwrap_or(0.0) as f32;
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write a 16-bit depth PNG storing `round(depth * scale)`.
pub fn write_depth_png16(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let data: Vec<u16> = depth
        .raster()
        .data()
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d * scale).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, data)
        .ok_or_else(|| Error::Format("depth buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Fixed debugging palette; index 0 is black ("none").
fn palette() -> Vec<u8> {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    (0..256usize)
        .flat_map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                let h = (i as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            }
        })
        .collect()
}

/// Save a label raster as an indexed PNG (label = palette index).
pub fn save_label_png(path: &Path, labels: &Raster<u8>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
    writer
        .write_image_data(labels.data())
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}

/// Read back the palette indices of an indexed PNG.
pub fn load_label_png(path: &Path) -> Result<Raster<u8>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected an 8-bit indexed PNG".into()));
    }
    buf.truncate(info.buffer_size());
    Raster::from_vec(info.width as usize, info.height as usize, buf)
}

pub fn mask_to_labels(mask: &Raster<bool>) -> Raster<u8> {
    mask.map(|&b| u8::from(b))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let k: Intrinsics = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, k)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Count non-empty lines, used for quick manifest sanity checks.
pub fn count_lines(path: &Path) -> Result<usize> {
    let reader = BufReader::new(File::open(path)?);
    let mut n = 0;
    for line in reader.lines() {
        if !line?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let depth = DepthMap::new(Raster::from_fn(5, 3, |x, y| {
            if (x, y) == (4, 0) {
                0.0
            } else {
                1.0 + x as f64 + 10.0 * y as f64
            }
        }));
        write_pfm(&p, &depth).unwrap();
        let back = load_depth(&p, None).unwrap();
        assert_eq!(back.depth(0, 0), Some(1.0));
        assert_eq!(back.depth(3, 2), Some(24.0));
        assert_eq!(back.depth(4, 0), None);
        // Bottom row is stored first.
        let bytes = std::fs::read(&p).unwrap();
        let header_len = b"Pf\n5 3\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header_len..header_len + 4].try_into().unwrap());
        assert_eq!(first, 21.0);
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&4.0f32.to_be_bytes());
        std::fs::write(&p, bytes).unwrap();
        let d = read_pfm(&p).unwrap();
        assert_eq!(d.depth(0, 0), Some(2.5));
        assert_eq!(d.depth(1, 0), Some(4.0));
    }

    #[test]
    fn png16_depth_uses_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let depth = DepthMap::new(Raster::from_fn(4, 2, |x, _| if x == 0 { 0.0 } else { x as f64 }));
        write_depth_png16(&p, &depth, 5000.0).unwrap();
        let back = load_depth(&p, Some(5000.0)).unwrap();
        assert_eq!(back.depth(0, 0), None);
        assert_eq!(back.depth(3, 1), Some(3.0));
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let labels = Raster::from_fn(7, 4, |x, y| ((x + y) % 4) as u8);
        save_label_png(&p, &labels).unwrap();
        assert_eq!(load_label_png(&p).unwrap(), labels);
    }

    #[test]
    fn missing_files_are_reported() {
        let p = Path::new("/nonexistent/depth.pfm");
        assert!(matches!(load_depth(p, None), Err(Error::MissingFile(_))));
        assert!(matches!(load_gray(p), Err(Error::MissingFile(_))));
    }
}
