//! Bit-exact tensor and mask I/O.
//!
//! The native tensor container is CFT: bytes 0-3 are the magic `CFT1`,
//! followed by three little-endian u32 fields (height, width, channels) and
//! `height*width*channels` IEEE-754 32-bit little-endian floats, row-major,
//! channel-minor. A write-then-read round trip preserves every payload byte.
//!
//! Label masks are stored either as CFT with `channels = 1` (ids as
//! integer-valued floats, exact up to 2^24) or as 16-bit grayscale PNG/PGM
//! when every id fits in 16 bits. Every reader here dispatches on the file
//! extension, so CLI tools accept any of the three containers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::raster::{LabelMask, Raster, RasterError, MAX_FLOAT_MASK_ID};

pub const CFT_MAGIC: [u8; 4] = *b"CFT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"CFT1\"")]
    BadMagic([u8; 4]),
    #[error("dimensions {height}x{width}x{channels} overflow the addressable payload size")]
    DimensionOverflow {
        height: u32,
        width: u32,
        channels: u32,
    },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("invalid raster: {0}")]
    Raster(#[from] RasterError),
    #[error("png error: {0}")]
    Png(String),
    #[error("pgm error: {0}")]
    Pgm(String),
    #[error("mask value {0} is not an integer-valued float")]
    NonIntegerMaskValue(f32),
    #[error("mask id {max_id} exceeds the {limit} limit of this container")]
    MaskIdTooLarge { max_id: u32, limit: u32 },
    #[error("unsupported file extension for {0}")]
    UnsupportedExtension(String),
    #[error("unsupported {what}: {detail}")]
    Unsupported { what: &'static str, detail: String },
}

impl From<png::DecodingError> for IoError {
    fn from(e: png::DecodingError) -> Self {
        IoError::Png(e.to_string())
    }
}

impl From<png::EncodingError> for IoError {
    fn from(e: png::EncodingError) -> Self {
        IoError::Png(e.to_string())
    }
}

/// Write `raster` as CFT.
pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CFT_MAGIC)?;
    w.write_all(&(raster.height() as u32).to_le_bytes())?;
    w.write_all(&(raster.width() as u32).to_le_bytes())?;
    w.write_all(&(raster.channels() as u32).to_le_bytes())?;
    for v in raster.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CFT tensor. Each malformation maps to a distinct error value.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic, 0)?;
    if magic != CFT_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let mut field = [0u8; 4];
    read_exactly(&mut r, &mut field, 4)?;
    let height = u32::from_le_bytes(field);
    read_exactly(&mut r, &mut field, 8)?;
    let width = u32::from_le_bytes(field);
    read_exactly(&mut r, &mut field, 12)?;
    let channels = u32::from_le_bytes(field);

    let len = (height as usize)
        .checked_mul(width as usize)
        .and_then(|v| v.checked_mul(channels as usize))
        .and_then(|v| v.checked_mul(4))
        .ok_or(IoError::DimensionOverflow {
            height,
            width,
            channels,
        })?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(IoError::TruncatedPayload {
            expected: len,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Raster::new(
        height as usize,
        width as usize,
        channels as usize,
        data,
    )?)
}

fn read_exactly<R: Read>(r: &mut R, buf: &mut [u8], offset: usize) -> Result<(), IoError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(IoError::TruncatedPayload {
                expected: offset + buf.len(),
                actual: offset + filled,
            });
        }
        filled += n;
    }
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Write a label mask, choosing the container from the file extension:
/// `.cft` stores ids as floats (exact up to 2^24), `.png`/`.pgm` store
/// 16-bit grayscale and refuse masks with ids ≥ 65536.
pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "cft" => {
            let max_id = mask.max_id();
            if max_id > MAX_FLOAT_MASK_ID {
                return Err(IoError::MaskIdTooLarge {
                    max_id,
                    limit: MAX_FLOAT_MASK_ID,
                });
            }
            let data: Vec<f32> = mask.data().iter().map(|&v| v as f32).collect();
            let raster = Raster::new(mask.height(), mask.width(), 1, data)?;
            write_raster(&raster, path)
        }
        "png" => {
            let max_id = mask.max_id();
            if max_id >= 65536 {
                return Err(IoError::MaskIdTooLarge {
                    max_id,
                    limit: 65535,
                });
            }
            write_png16(path, mask.height(), mask.width(), mask.data())
        }
        "pgm" => {
            let max_id = mask.max_id();
            if max_id >= 65536 {
                return Err(IoError::MaskIdTooLarge {
                    max_id,
                    limit: 65535,
                });
            }
            write_pgm16(path, mask.height(), mask.width(), mask.data())
        }
        _ => Err(IoError::UnsupportedExtension(path.display().to_string())),
    }
}

/// Read a label mask from `.cft`, `.png` or `.pgm`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask, IoError> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "cft" => {
            let raster = read_raster(path)?;
            if raster.channels() != 1 {
                return Err(IoError::Unsupported {
                    what: "mask tensor",
                    detail: format!("expected 1 channel, got {}", raster.channels()),
                });
            }
            let mut data = Vec::with_capacity(raster.data().len());
            for &v in raster.data() {
                if !v.is_finite() || v.fract() != 0.0 || v < 0.0 || v > MAX_FLOAT_MASK_ID as f32 {
                    return Err(IoError::NonIntegerMaskValue(v));
                }
                data.push(v as u32);
            }
            Ok(LabelMask::new(raster.height(), raster.width(), data)?)
        }
        "png" => {
            let (h, w, values) = read_png_gray(path)?;
            Ok(LabelMask::new(h, w, values)?)
        }
        "pgm" => {
            let (h, w, values) = read_pgm_gray(path)?;
            Ok(LabelMask::new(h, w, values)?)
        }
        _ => Err(IoError::UnsupportedExtension(path.display().to_string())),
    }
}

/// Read an image for inference: `.cft` is used verbatim; grayscale `.png` and
/// `.pgm` are scaled by their sample maximum into `[0, 1]` single-channel.
pub fn read_image(path: impl AsRef<Path>) -> Result<Raster, IoError> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "cft" => read_raster(path),
        "png" => {
            let (h, w, values) = read_png_gray(path)?;
            let scale = if values.iter().any(|&v| v > 255) {
                65535.0
            } else {
                255.0
            };
            let data = values.iter().map(|&v| v as f32 / scale).collect();
            Ok(Raster::new(h, w, 1, data)?)
        }
        "pgm" => {
            let (h, w, values) = read_pgm_gray(path)?;
            let scale = if values.iter().any(|&v| v > 255) {
                65535.0
            } else {
                255.0
            };
            let data = values.iter().map(|&v| v as f32 / scale).collect();
            Ok(Raster::new(h, w, 1, data)?)
        }
        _ => Err(IoError::UnsupportedExtension(path.display().to_string())),
    }
}

fn write_png16(path: &Path, height: usize, width: usize, data: &[u32]) -> Result<(), IoError> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for &v in data {
        bytes.extend_from_slice(&(v as u16).to_be_bytes());
    }
    writer.write_image_data(&bytes)?;
    Ok(())
}

fn read_png_gray(path: &Path) -> Result<(usize, usize, Vec<u32>), IoError> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let size = reader.output_buffer_size().ok_or(IoError::Unsupported {
        what: "png",
        detail: "output buffer size overflow".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(IoError::Unsupported {
            what: "png color type",
            detail: format!("{:?} (only grayscale is supported)", info.color_type),
        });
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let values = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as u32).collect(),
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect(),
        other => {
            return Err(IoError::Unsupported {
                what: "png bit depth",
                detail: format!("{other:?}"),
            })
        }
    };
    Ok((h, w, values))
}

fn write_pgm16(path: &Path, height: usize, width: usize, data: &[u32]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", width, height)?;
    for &v in data {
        w.write_all(&(v as u16).to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_pgm_gray(path: &Path) -> Result<(usize, usize, Vec<u32>), IoError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    fn token(bytes: &[u8], pos: &mut usize) -> Result<String, IoError> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(IoError::Pgm("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }

    let magic = token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(IoError::Pgm(format!("expected P5, got {magic}")));
    }
    let width: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pgm("bad width".into()))?;
    let height: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pgm("bad height".into()))?;
    let maxval: u32 = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| IoError::Pgm("bad maxval".into()))?;
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::Pgm(format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates header from payload
    pos += 1;
    let wide = maxval > 255;
    let expected = width * height * if wide { 2 } else { 1 };
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < expected {
        return Err(IoError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    let values = if wide {
        payload[..expected]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect()
    } else {
        payload[..expected].iter().map(|&b| b as u32).collect()
    };
    Ok((height, width, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cft_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cft");
        let raster = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_raster(&raster, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back, raster);
    }

    #[test]
    fn header_only_file_is_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cft");
        let mut f = File::create(&path).unwrap();
        f.write_all(&CFT_MAGIC).unwrap();
        f.write_all(&2u32.to_le_bytes()).unwrap();
        f.write_all(&2u32.to_le_bytes()).unwrap();
        f.write_all(&1u32.to_le_bytes()).unwrap();
        drop(f);
        match read_raster(&path) {
            Err(IoError::TruncatedPayload { expected: 16, actual: 0 }) => {}
            other => panic!("expected truncated payload, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cft");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        match read_raster(&path) {
            Err(IoError::BadMagic(m)) => assert_eq!(&m, b"NOPE"),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn oversized_header_is_dimension_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cft");
        let mut f = File::create(&path).unwrap();
        f.write_all(&CFT_MAGIC).unwrap();
        f.write_all(&u32::MAX.to_le_bytes()).unwrap();
        f.write_all(&u32::MAX.to_le_bytes()).unwrap();
        f.write_all(&u32::MAX.to_le_bytes()).unwrap();
        drop(f);
        match read_raster(&path) {
            Err(IoError::DimensionOverflow { .. }) => {}
            other => panic!("expected dimension overflow, got {other:?}"),
        }
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = LabelMask::new(2, 3, vec![0, 1, 2, 65535, 7, 0]).unwrap();
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = LabelMask::new(3, 2, vec![0, 300, 1, 2, 0, 99]).unwrap();
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn mask_cft_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cft");
        let mask = LabelMask::new(1, 3, vec![0, 70_000, MAX_FLOAT_MASK_ID]).unwrap();
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn eight_bit_pgm_reads_single_byte_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut payload = b"P5\n# comment\n3 2\n255\n".to_vec();
        payload.extend_from_slice(&[0, 1, 2, 3, 254, 255]);
        std::fs::write(&path, payload).unwrap();
        let mask = read_mask(&path).unwrap();
        assert_eq!(mask.height(), 2);
        assert_eq!(mask.width(), 3);
        assert_eq!(mask.data(), &[0, 1, 2, 3, 254, 255]);

        let image = read_image(&path).unwrap();
        assert!((image.get(1, 2, 0) - 1.0).abs() < 1e-6);
        assert!((image.get(0, 1, 0) - 1.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn png_export_refuses_wide_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::new(1, 1, vec![65536]).unwrap();
        match write_mask(&mask, dir.path().join("m.png")) {
            Err(IoError::MaskIdTooLarge { max_id: 65536, limit: 65535 }) => {}
            other => panic!("expected id-too-large, got {other:?}"),
        }
    }
}
