//! 16-bit grayscale PGM export (binary `P5`, big-endian samples): the
//! header-only format every image viewer understands.

use anyhow::{bail, Context, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Write one `P5` image; `samples` is row-major `height x width`.
pub fn write_pgm16(w: &mut impl Write, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    if width == 0 || height == 0 {
        bail!("pgm extents must be positive");
    }
    if samples.len() != width * height {
        bail!("pgm payload holds {} samples, header implies {}", samples.len(), width * height);
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for &s in samples {
        w.write_all(&s.to_be_bytes())?;
    }
    Ok(())
}

/// Map `[0, 1]` values onto the full 16-bit range, clamping anything outside.
pub fn quantize_unit(values: &[f64]) -> Vec<u16> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

pub fn write_pgm16_file(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut buf = BufWriter::new(file);
    write_pgm16(&mut buf, width, height, samples)?;
    buf.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_sample_order_match_the_format() {
        let mut bytes = Vec::new();
        write_pgm16(&mut bytes, 2, 1, &[0x0102, 0xFFFE]).unwrap();
        assert_eq!(&bytes[..12], b"P5\n2 1\n65535");
        assert_eq!(&bytes[13..], &[0x01, 0x02, 0xFF, 0xFE]);
    }

    #[test]
    fn quantization_clamps_and_saturates() {
        let q = quantize_unit(&[-0.5, 0.0, 0.5, 1.0, 2.0]);
        assert_eq!(q, vec![0, 0, 32768, 65535, 65535]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(write_pgm16(&mut Vec::new(), 3, 3, &[0u16; 8]).is_err());
    }
}
