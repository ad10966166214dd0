//! Binary volume format and image export.
//!
//! Volume files: magic "THZ3", u32 version = 1, u32 nx, u32 ny, u32 nz,
//! u8 domain tag (0 = Frequency, 1 = Spatial), f32 lateral step in um,
//! then nx*ny*nz samples as consecutive (f32 real, f32 imag), x-fastest,
//! all little-endian. In-memory math runs in f64; samples narrow to f32 on
//! write and widen back on read, so a read/write/read cycle is bit-exact.

use crate::error::{Result, ThzError};
use crate::volume::{ComplexVolume, Domain, IntensityImage};
use num_complex::Complex64;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"THZ3";
const VERSION: u32 = 1;

pub fn write_volume(vol: &ComplexVolume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(vol.nx as u32).to_le_bytes())?;
    w.write_all(&(vol.ny as u32).to_le_bytes())?;
    w.write_all(&(vol.nz as u32).to_le_bytes())?;
    let tag: u8 = match vol.domain {
        Domain::Frequency => 0,
        Domain::Spatial => 1,
    };
    w.write_all(&[tag])?;
    w.write_all(&vol.lateral_step_um.to_le_bytes())?;
    let mut buf = Vec::with_capacity(vol.samples().len() * 8);
    for s in vol.samples() {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<ComplexVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(ThzError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ThzError::VersionMismatch(version));
    }
    let nx = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let nz = read_u32(&mut r)? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let domain = match tag[0] {
        0 => Domain::Frequency,
        1 => Domain::Spatial,
        t => return Err(ThzError::InvalidHeader(format!("unknown domain tag {t}"))),
    };
    let mut step = [0u8; 4];
    r.read_exact(&mut step)?;
    let lateral_step_um = f32::from_le_bytes(step);

    let expected = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| ThzError::InvalidHeader("dimension overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() < expected * 8 {
        return Err(ThzError::Truncated {
            expected,
            got: payload.len() / 8,
        });
    }
    let mut samples = Vec::with_capacity(expected);
    for chunk in payload[..expected * 8].chunks_exact(8) {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        samples.push(Complex64::new(re as f64, im as f64));
    }
    Ok(ComplexVolume::new(
        nx,
        ny,
        nz,
        domain,
        lateral_step_um,
        samples,
    ))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write a real image as CSV, row-major, one image row per line.
pub fn write_image_csv(values: &[f64], nx: usize, ny: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), nx * ny);
    let mut w = BufWriter::new(File::create(path)?);
    for y in 0..ny {
        let row: Vec<String> = (0..nx).map(|x| format!("{}", values[y * nx + x])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a real image written by [`write_image_csv`]: one image row per
/// line, comma separated. NaN entries are preserved (depth maps use NaN
/// for invalid pixels).
pub fn read_image_csv(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut nx = 0usize;
    let mut ny = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    ThzError::InvalidHeader(format!(
                        "{}: line {}: bad number {tok:?}",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if ny == 0 {
            nx = row.len();
        } else if row.len() != nx {
            return Err(ThzError::InvalidHeader(format!(
                "{}: line {} has {} columns, expected {nx}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        values.extend(row);
        ny += 1;
    }
    if nx == 0 || ny == 0 {
        return Err(ThzError::InvalidHeader(format!(
            "{}: empty image",
            path.display()
        )));
    }
    Ok((values, nx, ny))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngScale {
    Linear,
    /// 10*log10(I / max I), clamped at the given floor in dB.
    Db(i32),
}

/// Export an intensity image as 16-bit grayscale PNG.
pub fn write_image_png(img: &IntensityImage, scale: PngScale, path: &Path) -> Result<()> {
    let max = img.max_value().max(f64::MIN_POSITIVE);
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(img.nx as u32, img.ny as u32);
    for y in 0..img.ny {
        for x in 0..img.nx {
            let v = img.get(x, y);
            let t = match scale {
                PngScale::Linear => (v / max).clamp(0.0, 1.0),
                PngScale::Db(floor) => {
                    let floor = floor as f64;
                    let db = if v <= 0.0 {
                        floor
                    } else {
                        (10.0 * (v / max).log10()).max(floor)
                    };
                    (db - floor) / -floor
                }
            };
            out.put_pixel(x as u32, y as u32, image::Luma([(t * 65535.0).round() as u16]));
        }
    }
    out.save(path)
        .map_err(|e| ThzError::InvalidArgument(format!("png write failed: {e}")))?;
    Ok(())
}
