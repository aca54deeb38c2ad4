//! Grayscale PFM ("Pf"): 32-bit float samples, negative scale marking
//! little-endian, rows stored bottom-to-top per the PFM convention.

use std::io::Read;
use std::path::Path;

use super::{FormatError, Result};

/// Write row-major (top-down) f32 samples as a PFM file with scale -1.0.
pub fn write_pfm(path: &Path, width: usize, height: usize, top_down: &[f32]) -> Result<()> {
    assert_eq!(top_down.len(), width * height);
    let mut out = Vec::with_capacity(top_down.len() * 4 + 32);
    out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
    for row in (0..height).rev() {
        for col in 0..width {
            out.extend_from_slice(&top_down[row * width + col].to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a grayscale PFM; returns row-major top-down samples.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut token = |fmt: &'static str| -> Result<String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::malformed(fmt, "truncated header"));
        }
        Ok(std::str::from_utf8(&data[start..pos])
            .map_err(|_| FormatError::malformed(fmt, "non-utf8 header"))?
            .to_string())
    };
    let magic = token("pfm")?;
    if magic != "Pf" {
        return Err(FormatError::malformed("pfm", "expected grayscale 'Pf'"));
    }
    let width: usize = token("pfm")?
        .parse()
        .map_err(|_| FormatError::malformed("pfm", "bad width"))?;
    let height: usize = token("pfm")?
        .parse()
        .map_err(|_| FormatError::malformed("pfm", "bad height"))?;
    let scale: f32 = token("pfm")?
        .parse()
        .map_err(|_| FormatError::malformed("pfm", "bad scale"))?;
    let little_endian = scale < 0.0;
    let start = pos + 1; // single whitespace after the scale line
    let need = width * height * 4;
    if data.len() < start + need {
        return Err(FormatError::malformed("pfm", "truncated raster"));
    }
    let mut bottom_up = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let b = &data[start + 4 * i..start + 4 * i + 4];
        let bytes = [b[0], b[1], b[2], b[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        bottom_up.push(v);
    }
    // Flip to top-down.
    let mut top_down = vec![0.0f32; width * height];
    for row in 0..height {
        let src = (height - 1 - row) * width;
        top_down[row * width..(row + 1) * width].copy_from_slice(&bottom_up[src..src + width]);
    }
    Ok((width, height, top_down))
}
