//! Support modules for the `hsdt` binary: the HSI container codec, flat
//! key=value run configuration, and 16-bit PGM export.

pub mod config;
pub mod hsi;
pub mod pgm;
