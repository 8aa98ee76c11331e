//! Binary PPM (P6, 8-bit RGB) and PGM (P5, 16-bit big-endian) codecs.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let fail = |m: &str| Error::format(path, format!("malformed PNM header: {m}"));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fail("missing magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail("expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("missing separator before raster"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

/// Returns `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P6" {
        return Err(Error::format(path, "expected binary PPM (P6)"));
    }
    if h.maxval != 255 {
        return Err(Error::format(
            path,
            format!("unsupported PPM maxval {}", h.maxval),
        ));
    }
    let n = h.width * h.height * 3;
    let data = &bytes[h.data_start..];
    if data.len() != n {
        return Err(Error::format(
            path,
            format!("PPM raster has {} bytes, expected {n}", data.len()),
        ));
    }
    Ok((h.width, h.height, data.to_vec()))
}

/// Returns `(width, height, samples)`; accepts 8- or 16-bit PGM.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P5" {
        return Err(Error::format(path, "expected binary PGM (P5)"));
    }
    let n = h.width * h.height;
    let data = &bytes[h.data_start..];
    let values = match h.maxval {
        1..=255 if data.len() == n => data.iter().map(|&b| b as u16).collect(),
        256..=65535 if data.len() == 2 * n => data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        1..=65535 => {
            return Err(Error::format(
                path,
                format!(
                    "PGM raster has {} bytes for {}x{}",
                    data.len(),
                    h.width,
                    h.height
                ),
            ))
        }
        m => return Err(Error::format(path, format!("invalid PGM maxval {m}"))),
    };
    Ok((h.width, h.height, values))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 7).collect();
        let bytes = encode_ppm(2, 3, &rgb);
        assert_eq!(decode_ppm(&bytes, Path::new("a")).unwrap(), (2, 3, rgb));
    }

    #[test]
    fn pgm16_round_trip_is_big_endian() {
        let vals = vec![0u16, 1, 258, 65535];
        let bytes = encode_pgm16(2, 2, &vals);
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(tail, &[0, 0, 0, 1, 1, 2, 255, 255]);
        assert_eq!(decode_pgm(&bytes, Path::new("a")).unwrap(), (2, 2, vals));
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 4]);
        assert_eq!(decode_pgm(&bytes, Path::new("a")).unwrap().2, vec![3, 4]);
    }

    #[test]
    fn corrupted_header_names_file() {
        let err = decode_pgm(b"P5\nxx 2\n255\n", Path::new("masks/0003.pgm")).unwrap_err();
        assert!(err.to_string().contains("masks/0003.pgm"), "{err}");
    }
}
