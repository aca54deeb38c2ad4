//! Binary PPM (P6) and PGM (P5), 8-bit, maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use super::{FormatError, Result};

fn write_header(out: &mut impl Write, magic: &str, width: usize, height: usize) -> Result<()> {
    out.write_all(format!("{magic}\n{width} {height}\n255\n").as_bytes())?;
    Ok(())
}

/// One whitespace-delimited token, skipping `#` comments.
fn next_token(data: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    while *pos < data.len() {
        let b = data[*pos];
        if b == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos >= data.len() {
        return None;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(data[start..*pos].to_vec())
}

fn parse_header(data: &[u8], magic: &str, format: &'static str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let tok = next_token(data, &mut pos)
        .ok_or_else(|| FormatError::malformed(format, "missing magic"))?;
    if tok != magic.as_bytes() {
        return Err(FormatError::malformed(format, "bad magic"));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let tok = next_token(data, &mut pos)
            .ok_or_else(|| FormatError::malformed(format, "truncated header"))?;
        *d = std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::malformed(format, "non-numeric header field"))?;
    }
    if dims[2] != 255 {
        return Err(FormatError::malformed(format, "only maxval 255 supported"));
    }
    // Exactly one whitespace byte separates header and raster.
    pos += 1;
    Ok((dims[0], dims[1], pos))
}

/// Write interleaved RGB bytes (row-major, top to bottom).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write_header(&mut out, "P6", width, height)?;
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, start) = parse_header(&data, "P6", "ppm")?;
    let need = 3 * w * h;
    if data.len() < start + need {
        return Err(FormatError::malformed("ppm", "truncated raster"));
    }
    Ok((w, h, data[start..start + need].to_vec()))
}

/// Write single-channel bytes (row-major, top to bottom).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    let mut out = Vec::with_capacity(gray.len() + 32);
    write_header(&mut out, "P5", width, height)?;
    out.extend_from_slice(gray);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, start) = parse_header(&data, "P5", "pgm")?;
    let need = w * h;
    if data.len() < start + need {
        return Err(FormatError::malformed("pgm", "truncated raster"));
    }
    Ok((w, h, data[start..start + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 7 % 256) as u8).collect();
        write_ppm(&path, 5, 4, &rgb).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (5, 4));
        assert_eq!(back, rgb);
        write_ppm(&path, 5, 4, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let gray: Vec<u8> = (0..6 * 3).map(|i| (i * 13 % 256) as u8).collect();
        write_pgm(&path, 6, 3, &gray).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (6, 3));
        assert_eq!(back, gray);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut data = b"P5\n# a comment\n2 2\n255\n".to_vec();
        data.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&path, data).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![1, 2, 3, 4]);
    }
}
