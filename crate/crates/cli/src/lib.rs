//! IO, file formats, the training loop and the command-line surface for
//! the plane-coefficient depth toolkit.

pub mod cli;
pub mod dataset;
pub mod formats;
pub mod gradsuite;
pub mod trainer;
pub mod viz;
