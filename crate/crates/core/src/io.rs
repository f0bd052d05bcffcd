//! Grayscale image files: binary PGM (P5) and PNG, 8 or 16 bits per pixel.
//! Samples are read as `value / 255` or `value / 65535`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn format_err(kind: &'static str, detail: impl Into<String>) -> Error {
    Error::Format { kind, detail: detail.into() }
}

/// Reads PGM or PNG, chosen by the file's magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Plane> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        Err(format_err("image", format!("{}: neither binary PGM nor PNG", path.display())))
    }
}

/// Reads an image and keeps pixels above one half.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::above(&read_image(path)?, 0.5))
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
        return Err(format_err("pgm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("pgm", format!("bad {what}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Plane> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(format_err("pgm", "only binary P5 is supported"));
    }
    let width = pgm_number(bytes, &mut pos, "width")?;
    let height = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(format_err("pgm", format!("bad header {width}x{height} maxval {maxval}")));
    }
    pos += 1;
    let depth = if maxval < 256 { BitDepth::Eight } else { BitDepth::Sixteen };
    let bpp = if depth == BitDepth::Eight { 1 } else { 2 };
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() < width * height * bpp {
        return Err(format_err("pgm", format!("expected {} data bytes, found {}", width * height * bpp, data.len())));
    }
    let scale = depth.max();
    let values = match depth {
        BitDepth::Eight => data[..width * height].iter().map(|&b| b as f64 / scale).collect(),
        BitDepth::Sixteen => data[..width * height * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect(),
    };
    Plane::from_vec(height, width, values)
}

pub fn decode_png(bytes: &[u8]) -> Result<Plane> {
    let err = |e: png::DecodingError| format_err("png", e.to_string());
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| format_err("png", "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(format_err("png", format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        d => return Err(format_err("png", format!("unsupported bit depth {d:?}"))),
    };
    Plane::from_vec(h, w, values)
}

fn quantize(p: &Plane, depth: BitDepth) -> Vec<u8> {
    let m = depth.max();
    let q = |v: f64| (v.clamp(0.0, 1.0) * m).round();
    match depth {
        BitDepth::Eight => p.as_slice().iter().map(|&v| q(v) as u8).collect(),
        BitDepth::Sixteen => p.as_slice().iter().flat_map(|&v| (q(v) as u16).to_be_bytes()).collect(),
    }
}

pub fn encode_pgm(p: &Plane, depth: BitDepth) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", p.width(), p.height(), depth.max() as u32).into_bytes();
    out.extend(quantize(p, depth));
    out
}

pub fn encode_png(p: &Plane, depth: BitDepth) -> Result<Vec<u8>> {
    let err = |e: png::EncodingError| format_err("png", e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, p.width() as u32, p.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(match depth {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&quantize(p, depth)).map_err(err)?;
        w.finish().map_err(err)?;
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes `p` clamped to [0, 1]; the extension picks the format.
pub fn write_image(path: impl AsRef<Path>, p: &Plane, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match ext.as_str() {
        "pgm" => encode_pgm(p, depth),
        "png" => encode_png(p, depth)?,
        _ => return Err(Error::Config(format!("{}: unknown image extension", path.display()))),
    };
    write_bytes(path, &bytes)
}

/// Writes an 8-bit image with values {0, 255}.
pub fn write_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    write_image(path, &m.to_plane(), BitDepth::Eight)
}

/// Reads a whole file, for checksumming outputs.
pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Plane {
        Plane::from_fn(5, 7, |r, c| (r * 7 + c) as f64 / 34.0)
    }

    #[test]
    fn pgm_round_trip_both_depths() {
        let p = ramp();
        for (depth, tol) in [(BitDepth::Eight, 0.5 / 255.0), (BitDepth::Sixteen, 0.5 / 65535.0)] {
            let q = decode_pgm(&encode_pgm(&p, depth)).unwrap();
            assert_eq!(q.shape(), (5, 7));
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((a - b).abs() <= tol + 1e-7);
            }
        }
    }

    #[test]
    fn png_round_trip_both_depths() {
        let p = ramp();
        for (depth, tol) in [(BitDepth::Eight, 0.5 / 255.0), (BitDepth::Sixteen, 0.5 / 65535.0)] {
            let q = decode_png(&encode_png(&p, depth).unwrap()).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((a - b).abs() <= tol + 1e-7);
            }
        }
    }

    #[test]
    fn sixteen_bit_pgm_is_big_endian_over_65535() {
        let mut bytes = b"P5\n# note\n2 1\n65535\n".to_vec();
        bytes.extend([0xFF, 0xFF, 0x80, 0x00]);
        let p = decode_pgm(&bytes).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(0, 1), 32768.0 / 65535.0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_png(b"\x89PNG garbage").is_err());
    }

    #[test]
    fn mask_written_as_0_255() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(3, 3, |r, c| r == c);
        let path = dir.path().join("m.pgm");
        write_mask(&path, &m).unwrap();
        let bytes = read_bytes(&path).unwrap();
        assert!(bytes.ends_with(&[255, 0, 0, 0, 255, 0, 0, 0, 255]));
        assert_eq!(read_mask(&path).unwrap(), m);
        assert!(write_image(dir.path().join("x.bmp"), &ramp(), BitDepth::Eight).is_err());
    }
}
