//! The `.hsic` container: a fixed little-endian header followed by the cube
//! in band-major order. Read and write are exact inverses, so a round trip
//! preserves every payload bit.

use anyhow::{bail, Context, Result};
use hsdt_core::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"HSIC0001";

/// Scalar width of the stored payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsiDtype {
    Single,
    Double,
}

impl HsiDtype {
    fn code(self) -> u8 {
        match self {
            HsiDtype::Single => 0,
            HsiDtype::Double => 1,
        }
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .with_context(|| format!("hsi container truncated while reading {what}"))
}

/// Decode a container into the library's `[H, W, D]` view. The payload is
/// widened to doubles, which is lossless for both stored dtypes.
pub fn read_hsi(r: &mut impl Read) -> Result<(Tensor<f64>, HsiDtype)> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        bail!("bad magic: expected {MAGIC:?}, got {magic:?}");
    }
    let mut head = [0u8; 4];
    read_exact(r, &mut head, "dtype and layout")?;
    let dtype = match head[0] {
        0 => HsiDtype::Single,
        1 => HsiDtype::Double,
        other => bail!("unsupported dtype code {other}"),
    };
    if head[1] != 0 {
        bail!("unsupported layout code {}", head[1]);
    }
    if head[2] != 0 || head[3] != 0 {
        bail!("reserved header bytes must be zero");
    }
    let mut extent = [0u8; 4];
    let mut dims = [0usize; 3];
    for (slot, name) in dims.iter_mut().zip(["D", "H", "W"]) {
        read_exact(r, &mut extent, name)?;
        *slot = u32::from_le_bytes(extent) as usize;
        if *slot == 0 {
            bail!("extent {name} must be positive");
        }
    }
    let [d, h, w] = dims;
    let count = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .context("extent product overflows")?;

    let mut band_major = vec![0.0f64; count];
    match dtype {
        HsiDtype::Single => {
            let mut buf = [0u8; 4];
            for v in band_major.iter_mut() {
                read_exact(r, &mut buf, "payload")?;
                *v = f32::from_le_bytes(buf) as f64;
            }
        }
        HsiDtype::Double => {
            let mut buf = [0u8; 8];
            for v in band_major.iter_mut() {
                read_exact(r, &mut buf, "payload")?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    if band_major.iter().any(|v| !v.is_finite()) {
        bail!("non-finite value in payload");
    }

    // Band-major [D, H, W] on disk becomes the library's [H, W, D] view.
    let mut data = vec![0.0f64; count];
    for band in 0..d {
        for row in 0..h {
            for col in 0..w {
                data[(row * w + col) * d + band] = band_major[(band * h + row) * w + col];
            }
        }
    }
    let cube = Tensor::from_vec(&[h, w, d], data)?;
    Ok((cube, dtype))
}

/// Encode an `[H, W, D]` cube. `Single` narrows each value to `f32`.
pub fn write_hsi(w: &mut impl Write, cube: &Tensor<f64>, dtype: HsiDtype) -> Result<()> {
    let &[h, wid, d] = cube.shape() else {
        bail!("hsi container stores rank-3 cubes, got shape {:?}", cube.shape());
    };
    if !cube.all_finite() {
        bail!("non-finite value in payload");
    }
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), 0, 0, 0])?;
    for extent in [d, h, wid] {
        w.write_all(&(u32::try_from(extent).context("extent exceeds u32")?).to_le_bytes())?;
    }
    let data = cube.data();
    for band in 0..d {
        for row in 0..h {
            for col in 0..wid {
                let v = data[(row * wid + col) * d + band];
                match dtype {
                    HsiDtype::Single => w.write_all(&(v as f32).to_le_bytes())?,
                    HsiDtype::Double => w.write_all(&v.to_le_bytes())?,
                }
            }
        }
    }
    Ok(())
}

pub fn read_hsi_file(path: &Path) -> Result<(Tensor<f64>, HsiDtype)> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_hsi(&mut BufReader::new(file))
        .with_context(|| format!("while reading {}", path.display()))
}

pub fn write_hsi_file(path: &Path, cube: &Tensor<f64>, dtype: HsiDtype) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut buf = BufWriter::new(file);
    write_hsi(&mut buf, cube, dtype)
        .with_context(|| format!("while writing {}", path.display()))?;
    buf.flush()?;
    Ok(())
}
