//! Little-endian binary feature files.
//!
//! Layout: `"PRFT"`, version `u32`, count `u32`, descriptor length `u32`,
//! descriptor type `u8` (0 = float32, 1 = bits), then per feature
//! `x, y, scale, orientation, score` as `f32` and provenance as `i32`
//! (-1 = non-planar), then the descriptor block. For bit descriptors the
//! length counts bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Descriptors, FeatureSet, Keypoint, Provenance};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PRFT";
const VERSION: u32 = 1;

pub fn write_features(path: &Path, fs: &FeatureSet) -> Result<()> {
    fs.check()?;
    let mut out = BufWriter::new(File::create(path)?);
    write_to(&mut out, fs)?;
    out.flush()?;
    Ok(())
}

fn write_to(out: &mut impl Write, fs: &FeatureSet) -> Result<()> {
    let (desc_len, desc_type) = match &fs.descriptors {
        Descriptors::Float { dim, .. } => (*dim, 0u8),
        Descriptors::Bits { bytes, .. } => (*bytes, 1u8),
    };
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(fs.len() as u32).to_le_bytes())?;
    out.write_all(&(desc_len as u32).to_le_bytes())?;
    out.write_all(&[desc_type])?;
    for (kp, p) in fs.keypoints.iter().zip(&fs.provenance) {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.score] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.write_all(&p.to_i32().to_le_bytes())?;
    }
    match &fs.descriptors {
        Descriptors::Float { data, .. } => {
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Descriptors::Bits { data, .. } => out.write_all(data)?,
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let desc_len = read_u32(&mut r)? as usize;
    let mut ty = [0u8; 1];
    r.read_exact(&mut ty)?;

    let mut keypoints = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0f64; 5];
        for slot in v.iter_mut() {
            *slot = read_f32(&mut r)? as f64;
        }
        keypoints.push(Keypoint {
            x: v[0],
            y: v[1],
            scale: v[2],
            orientation: v[3],
            score: v[4],
        });
        provenance.push(Provenance::from_i32(read_u32(&mut r)? as i32));
    }
    let descriptors = match ty[0] {
        0 => {
            let mut data = Vec::with_capacity(count * desc_len);
            for _ in 0..count * desc_len {
                data.push(read_f32(&mut r)?);
            }
            Descriptors::Float { dim: desc_len, data }
        }
        1 => {
            let mut data = vec![0u8; count * desc_len];
            r.read_exact(&mut data)?;
            Descriptors::Bits { bytes: desc_len, data }
        }
        t => return Err(Error::Format(format!("unknown descriptor type {t}"))),
    };
    let fs = FeatureSet {
        keypoints,
        descriptors,
        provenance,
    };
    fs.check()?;
    Ok(fs)
}
