//! PFM depth, binary PPM color and binary PGM mask files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::{ColorImage, Mask};
use crate::geometry::DepthMap;

/// Splits a netpbm-style header into `count` whitespace-separated tokens,
/// skipping `#` comments. Returns the tokens and the offset just past the
/// single whitespace byte that ends the header.
fn header(bytes: &[u8], count: usize) -> std::result::Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err("missing pixel data".into());
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[String]) -> std::result::Result<(usize, usize), String> {
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad dimension {s:?}"));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok((w, h))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Grayscale PFM, little endian, rows stored bottom to top.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&(depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<DepthMap, String> {
    let (tokens, at) = header(bytes, 4)?;
    if tokens[0] != "Pf" {
        return Err(format!("expected grayscale PFM, found {:?}", tokens[0]));
    }
    let (w, h) = dims(&tokens)?;
    let scale: f32 = tokens[3].parse().map_err(|_| format!("bad scale {:?}", tokens[3]))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("scale must be nonzero".into());
    }
    let little = scale < 0.0;
    let body = &bytes[at..];
    if body.len() != w * h * 4 {
        return Err(format!("expected {} data bytes, found {}", w * h * 4, body.len()));
    }
    let mut data = vec![0.0; w * h];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Ok(DepthMap { width: w, height: h, data })
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read(path)?).map_err(|r| Error::format(path, r))
}

/// Quantizes a channel value in `[0, 1]` to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for c in &img.data {
        out.extend(c.iter().map(|&v| quantize(v)));
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ColorImage, String> {
    let (tokens, at) = header(bytes, 4)?;
    if tokens[0] != "P6" {
        return Err(format!("expected binary PPM, found {:?}", tokens[0]));
    }
    let (w, h) = dims(&tokens)?;
    if tokens[3] != "255" {
        return Err(format!("only 8-bit PPM is supported, maxval {}", tokens[3]));
    }
    let body = &bytes[at..];
    if body.len() != w * h * 3 {
        return Err(format!("expected {} data bytes, found {}", w * h * 3, body.len()));
    }
    let data = body
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(ColorImage { width: w, height: h, data })
}

pub fn write_ppm(path: &Path, img: &ColorImage) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<ColorImage> {
    decode_ppm(&read(path)?).map_err(|r| Error::format(path, r))
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let (tokens, at) = header(bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(format!("expected binary PGM, found {:?}", tokens[0]));
    }
    let (w, h) = dims(&tokens)?;
    if tokens[3] != "255" {
        return Err(format!("only 8-bit PGM is supported, maxval {}", tokens[3]));
    }
    let body = &bytes[at..];
    if body.len() != w * h {
        return Err(format!("expected {} data bytes, found {}", w * h, body.len()));
    }
    Ok(Mask {
        width: w,
        height: h,
        data: body.iter().map(|&b| b >= 128).collect(),
    })
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read(path)?).map_err(|r| Error::format(path, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_orientation() {
        let d = DepthMap::from_vec(3, 2, vec![0.0, 1.5, 2.25, 0.125, 3.0, 0.5]).unwrap();
        let bytes = encode_pfm(&d);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // Bottom row first.
        assert_eq!(&bytes[12..16], &0.125f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap(), d);
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data, vec![2.5]);
    }

    #[test]
    fn ppm_and_pgm_round_trip() {
        let mut img = ColorImage::zeros(2, 2);
        img.set(1, 0, [1.0, 0.5, 0.0]);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(back.get(1, 0), [1.0, 128.0 / 255.0, 0.0]);
        let mut m = Mask::new(3, 1, false);
        m.data[2] = true;
        assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap().data, vec![false, true]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
    }
}
