//! Binary file formats: PFM depth maps, PPM/PGM images, ASCII PLY point
//! clouds and the parameter checkpoint container. Byte layouts are pinned
//! in FORMATS.md at the repository root.

mod checkpoint;
mod pfm;
mod ply;
mod pnm;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use pfm::{read_pfm, write_pfm};
pub use ply::{read_ply_ascii, write_ply_ascii, PlyVertex};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{format}: {message}")]
    Malformed {
        format: &'static str,
        message: String,
    },
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
}

impl FormatError {
    pub(crate) fn malformed(format: &'static str, message: impl Into<String>) -> FormatError {
        FormatError::Malformed {
            format,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;
