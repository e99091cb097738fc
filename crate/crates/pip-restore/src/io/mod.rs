//! File formats: PPM/PGM images and the binary checkpoint container.

pub mod checkpoint;
pub mod pnm;
