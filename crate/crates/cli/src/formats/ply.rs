//! ASCII PLY point clouds with xyz position and RGB color.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{FormatError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub red: u8,
    pub green: u8,
    pub blue: u8,
}

/// Coordinates are written with 6 decimal places; re-parsing reproduces
/// them to within 1e-6 absolute.
pub fn write_ply_ascii(path: &Path, vertices: &[PlyVertex]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        vertices.len()
    )?;
    for v in vertices {
        writeln!(
            out,
            "{:.6} {:.6} {:.6} {} {} {}",
            v.x, v.y, v.z, v.red, v.green, v.blue
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ply_ascii(path: &Path) -> Result<Vec<PlyVertex>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let mut count: Option<usize> = None;
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim();
        if line == "ply" || line == "format ascii 1.0" || line.starts_with("property") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.parse()
                    .map_err(|_| FormatError::malformed("ply", "bad vertex count"))?,
            );
        } else if line == "end_header" {
            break;
        } else if line.starts_with("comment") {
            continue;
        } else {
            return Err(FormatError::malformed(
                "ply",
                format!("unexpected header line: {line}"),
            ));
        }
    }
    let count = count.ok_or_else(|| FormatError::malformed("ply", "missing element vertex"))?;
    let mut vertices = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(FormatError::malformed("ply", "vertex line needs 6 fields"));
        }
        vertices.push(PlyVertex {
            x: parts[0]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad x"))?,
            y: parts[1]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad y"))?,
            z: parts[2]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad z"))?,
            red: parts[3]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad red"))?,
            green: parts[4]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad green"))?,
            blue: parts[5]
                .parse()
                .map_err(|_| FormatError::malformed("ply", "bad blue"))?,
        });
        if vertices.len() == count {
            break;
        }
    }
    if vertices.len() != count {
        return Err(FormatError::malformed("ply", "fewer vertices than declared"));
    }
    Ok(vertices)
}
