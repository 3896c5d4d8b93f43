//! Synthetic degradations for training and evaluation: Gaussian noise at
//! fixed, blind, or per-band levels, plus structured corruptions (stripes,
//! dead columns, salt-and-pepper impulses) and their mixture.
//!
//! Everything is driven by one `u64` seed. Each band consumes its own RNG
//! stream and band subsets for structured corruptions come from dedicated
//! global streams, so outputs are bit-reproducible and insensitive to band
//! evaluation order. Within a band the draw order is: noise level (when
//! per-band), the dense Gaussian field, then stripe, impulse, and dead-column
//! parameters as applicable; corruptions apply in that same order, so dead
//! columns always end exactly zero. Values are never clamped.
//!
//! Noise levels are quoted on the conventional 0-255 scale; data lives in
//! `[0, 1]`, so a level `sigma` perturbs with standard deviation
//! `sigma / 255`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, LANE_GLOBAL};
use crate::tensor::{Scalar, Tensor};

/// Per-band noise levels used by the non-iid protocols.
pub const SIGMA_CHOICES: [f64; 4] = [10.0, 30.0, 50.0, 70.0];
/// Bounds of the per-band column fraction hit by stripes or dead columns.
pub const COLUMN_FRACTION: (f64, f64) = (0.05, 0.15);
/// Largest magnitude of a stripe's additive offset.
pub const STRIPE_OFFSET_MAX: f64 = 0.25;
/// Bounds of the per-band impulse density.
pub const IMPULSE_DENSITY: (f64, f64) = (0.1, 0.7);

const LANE_STRIPE_BANDS: u64 = LANE_GLOBAL + 11;
const LANE_IMPULSE_BANDS: u64 = LANE_GLOBAL + 12;
const LANE_DEADLINE_BANDS: u64 = LANE_GLOBAL + 13;
const LANE_BLIND_SIGMA: u64 = LANE_GLOBAL + 14;

/// A degradation protocol. Structured kinds ride on top of per-band Gaussian
/// noise and hit a third of the bands (at least one).
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    /// One known level for every band.
    Gaussian { sigma: f64 },
    /// One unknown level for every band, drawn uniformly from a range.
    GaussianBlind { lo: f64, hi: f64 },
    /// Independent per-band levels from [`SIGMA_CHOICES`].
    NonIid,
    /// Non-iid Gaussian plus additive column stripes on a subset of bands.
    Stripe,
    /// Non-iid Gaussian plus zeroed columns on a subset of bands.
    Deadline,
    /// Non-iid Gaussian plus salt-and-pepper impulses on a subset of bands.
    Impulse,
    /// Non-iid Gaussian plus all three structured corruptions, each drawn
    /// on its own independent band subset.
    Mixture,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::GaussianBlind { .. } => "gaussian-blind",
            NoiseKind::NonIid => "non-iid",
            NoiseKind::Stripe => "stripe",
            NoiseKind::Deadline => "deadline",
            NoiseKind::Impulse => "impulse",
            NoiseKind::Mixture => "mixture",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::Config(format!("gaussian sigma must be finite and >= 0, got {sigma}")),
            ),
            NoiseKind::GaussianBlind { lo, hi } if !(lo >= 0.0 && hi >= lo && hi.is_finite()) => {
                Err(Error::Config(format!("blind range [{lo}, {hi}] is not ordered")))
            }
            _ => Ok(()),
        }
    }

    fn wants_stripes(&self) -> bool {
        matches!(self, NoiseKind::Stripe | NoiseKind::Mixture)
    }

    fn wants_impulse(&self) -> bool {
        matches!(self, NoiseKind::Impulse | NoiseKind::Mixture)
    }

    fn wants_deadline(&self) -> bool {
        matches!(self, NoiseKind::Deadline | NoiseKind::Mixture)
    }
}

/// One stripe: a whole column shifted by a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeCol {
    pub col: usize,
    pub offset: f64,
}

/// Everything that was done to one band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandLog {
    pub band: usize,
    /// Gaussian level on the 0-255 scale.
    pub sigma: f64,
    pub stripes: Vec<StripeCol>,
    pub dead_cols: Vec<usize>,
    pub impulse_density: Option<f64>,
}

/// Full record of one [`apply`] call; enough to audit or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationLog {
    pub kind: &'static str,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Set when one level covers all bands (known or blind-drawn).
    pub global_sigma: Option<f64>,
    pub bands: Vec<BandLog>,
}

impl DegradationLog {
    /// The single level to feed a noise-level map, when one exists.
    pub fn uniform_sigma(&self) -> Option<f64> {
        self.global_sigma
    }

    /// Human-readable, line-oriented rendering.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "degradation-log v1");
        let _ = writeln!(s, "kind: {}", self.kind);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "size: {}x{}x{}", self.height, self.width, self.bands.len());
        if let Some(sigma) = self.global_sigma {
            let _ = writeln!(s, "sigma: {sigma:.4}");
        }
        for b in &self.bands {
            let _ = write!(s, "band {}: sigma={:.4}", b.band, b.sigma);
            if !b.stripes.is_empty() {
                let cols: Vec<String> = b
                    .stripes
                    .iter()
                    .map(|sc| format!("{}:{:+.4}", sc.col, sc.offset))
                    .collect();
                let _ = write!(s, " stripes=[{}]", cols.join(","));
            }
            if !b.dead_cols.is_empty() {
                let cols: Vec<String> = b.dead_cols.iter().map(|c| c.to_string()).collect();
                let _ = write!(s, " dead=[{}]", cols.join(","));
            }
            if let Some(d) = b.impulse_density {
                let _ = write!(s, " impulse={d:.4}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// How many bands a structured corruption touches.
fn affected_band_count(d: usize) -> usize {
    (d / 3).max(1)
}

/// Choose `k` distinct values from `0..n` (partial Fisher-Yates), sorted.
fn choose_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Columns hit in one band: a uniform fraction of the width, at least one.
fn choose_columns(rng: &mut ChaCha8Rng, width: usize) -> Vec<usize> {
    let frac = rng.random_range(COLUMN_FRACTION.0..=COLUMN_FRACTION.1);
    let count = ((frac * width as f64).round() as usize).clamp(1, width);
    choose_distinct(rng, width, count)
}

/// Degrade a clean `[H, W, D]` cube. Returns the corrupted cube and a log of
/// every applied parameter. The same `(clean, kind, seed)` triple always
/// produces bitwise-identical output.
pub fn apply<T: Scalar>(
    clean: &Tensor<T>,
    kind: &NoiseKind,
    seed: u64,
) -> Result<(Tensor<T>, DegradationLog)> {
    kind.validate()?;
    let shape = clean.shape();
    if shape.len() != 3 {
        return Err(Error::contract("noise", "input cube must be [H, W, D]"));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);

    let global_sigma = match *kind {
        NoiseKind::Gaussian { sigma } => Some(sigma),
        NoiseKind::GaussianBlind { lo, hi } => {
            let mut rng = stream(seed, LANE_BLIND_SIGMA);
            Some(rng.random_range(lo..=hi))
        }
        _ => None,
    };

    let band_set = |lane: u64, wanted: bool| -> Vec<usize> {
        if wanted {
            choose_distinct(&mut stream(seed, lane), d, affected_band_count(d))
        } else {
            Vec::new()
        }
    };
    let stripe_bands = band_set(LANE_STRIPE_BANDS, kind.wants_stripes());
    let impulse_bands = band_set(LANE_IMPULSE_BANDS, kind.wants_impulse());
    let deadline_bands = band_set(LANE_DEADLINE_BANDS, kind.wants_deadline());

    let mut out: Vec<f64> = clean.data().iter().map(|v| v.to_f64()).collect();
    let mut bands = Vec::with_capacity(d);
    let voxel = |ih: usize, iw: usize, ib: usize| (ih * w + iw) * d + ib;

    for band in 0..d {
        let mut rng = stream(seed, band as u64);
        let sigma = match global_sigma {
            Some(s) => s,
            None => SIGMA_CHOICES[rng.random_range(0..SIGMA_CHOICES.len())],
        };

        let scale = sigma / 255.0;
        for ih in 0..h {
            for iw in 0..w {
                let n: f64 = rng.sample(StandardNormal);
                out[voxel(ih, iw, band)] += scale * n;
            }
        }

        let mut log = BandLog {
            band,
            sigma,
            stripes: Vec::new(),
            dead_cols: Vec::new(),
            impulse_density: None,
        };

        if stripe_bands.contains(&band) {
            let cols = choose_columns(&mut rng, w);
            log.stripes = cols
                .into_iter()
                .map(|col| StripeCol {
                    col,
                    offset: rng.random_range(-STRIPE_OFFSET_MAX..=STRIPE_OFFSET_MAX),
                })
                .collect();
            for sc in &log.stripes {
                for ih in 0..h {
                    out[voxel(ih, sc.col, band)] += sc.offset;
                }
            }
        }

        if impulse_bands.contains(&band) {
            let density = rng.random_range(IMPULSE_DENSITY.0..=IMPULSE_DENSITY.1);
            log.impulse_density = Some(density);
            for ih in 0..h {
                for iw in 0..w {
                    if rng.random::<f64>() < density {
                        let salt: bool = rng.random();
                        out[voxel(ih, iw, band)] = if salt { 1.0 } else { 0.0 };
                    }
                }
            }
        }

        if deadline_bands.contains(&band) {
            log.dead_cols = choose_columns(&mut rng, w);
            for &col in &log.dead_cols {
                for ih in 0..h {
                    out[voxel(ih, col, band)] = 0.0;
                }
            }
        }

        bands.push(log);
    }

    let noisy = Tensor::from_vec(shape, out.into_iter().map(T::from_f64).collect())?;
    Ok((
        noisy,
        DegradationLog {
            kind: kind.name(),
            seed,
            height: h,
            width: w,
            global_sigma,
            bands,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_cube(h: usize, w: usize, d: usize) -> Tensor<f64> {
        let n = h * w * d;
        let data: Vec<f64> = (0..n).map(|i| (i % 97) as f64 / 97.0).collect();
        Tensor::from_vec(&[h, w, d], data).unwrap()
    }

    #[test]
    fn application_is_seed_deterministic() {
        let x = ramp_cube(16, 16, 9);
        let (a, la) = apply(&x, &NoiseKind::Mixture, 7).unwrap();
        let (b, lb) = apply(&x, &NoiseKind::Mixture, 7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la.to_text(), lb.to_text());
        let (c, _) = apply(&x, &NoiseKind::Mixture, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gaussian_matches_requested_variance() {
        let x = ramp_cube(64, 64, 2);
        let (y, log) = apply(&x, &NoiseKind::Gaussian { sigma: 51.0 }, 3).unwrap();
        assert_eq!(log.uniform_sigma(), Some(51.0));
        let noise: Vec<f64> = y
            .data()
            .iter()
            .zip(x.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / noise.len() as f64;
        // sigma 51 on the 0-255 scale is std 0.2 here, variance 0.04.
        assert!((var - 0.04).abs() < 0.005, "var {var}");
    }

    #[test]
    fn blind_level_is_drawn_within_range_and_logged() {
        let x = ramp_cube(8, 8, 3);
        let (_, log) = apply(&x, &NoiseKind::GaussianBlind { lo: 10.0, hi: 70.0 }, 5).unwrap();
        let sigma = log.uniform_sigma().unwrap();
        assert!((10.0..=70.0).contains(&sigma));
        for b in &log.bands {
            assert_eq!(b.sigma, sigma);
        }
    }

    #[test]
    fn non_iid_levels_come_from_the_choice_set() {
        let x = ramp_cube(8, 8, 32);
        let (_, log) = apply(&x, &NoiseKind::NonIid, 11).unwrap();
        assert!(log.uniform_sigma().is_none());
        let mut seen = std::collections::BTreeSet::new();
        for b in &log.bands {
            assert!(SIGMA_CHOICES.contains(&b.sigma), "sigma {}", b.sigma);
            seen.insert(b.sigma as u64);
        }
        // 32 draws from four options: all of them show up.
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn stripes_shift_exactly_the_logged_columns() {
        let x = ramp_cube(32, 40, 9);
        let seed = 13;
        // Identical per-band streams mean the stripe run shares its Gaussian
        // base with the plain non-iid run; the difference isolates stripes.
        let (base, _) = apply(&x, &NoiseKind::NonIid, seed).unwrap();
        let (striped, log) = apply(&x, &NoiseKind::Stripe, seed).unwrap();

        let affected: Vec<&BandLog> =
            log.bands.iter().filter(|b| !b.stripes.is_empty()).collect();
        assert_eq!(affected.len(), 3); // max(1, 9 / 3)

        for b in &log.bands {
            let striped_cols: std::collections::BTreeMap<usize, f64> =
                b.stripes.iter().map(|s| (s.col, s.offset)).collect();
            // 5% to 15% of 40 columns, and at least one.
            if !striped_cols.is_empty() {
                assert!((2..=6).contains(&striped_cols.len()));
            }
            for s in &b.stripes {
                assert!(s.offset.abs() <= STRIPE_OFFSET_MAX);
            }
            for ih in 0..32 {
                for iw in 0..40 {
                    let diff = striped.at(&[ih, iw, b.band]) - base.at(&[ih, iw, b.band]);
                    match striped_cols.get(&iw) {
                        Some(&offset) => assert!((diff - offset).abs() < 1e-12),
                        None => assert_eq!(diff, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn dead_columns_are_exactly_zero() {
        let x = ramp_cube(16, 20, 6);
        let (y, log) = apply(&x, &NoiseKind::Deadline, 17).unwrap();
        let affected: Vec<&BandLog> =
            log.bands.iter().filter(|b| !b.dead_cols.is_empty()).collect();
        assert_eq!(affected.len(), 2); // max(1, 6 / 3)
        for b in affected {
            for &col in &b.dead_cols {
                for ih in 0..16 {
                    assert_eq!(y.at(&[ih, col, b.band]), 0.0);
                }
            }
        }
    }

    #[test]
    fn impulses_write_exact_salt_and_pepper() {
        let x = ramp_cube(48, 48, 3);
        let seed = 19;
        let (base, _) = apply(&x, &NoiseKind::NonIid, seed).unwrap();
        let (hit, log) = apply(&x, &NoiseKind::Impulse, seed).unwrap();

        let b = log
            .bands
            .iter()
            .find(|b| b.impulse_density.is_some())
            .expect("one band carries impulses");
        let density = b.impulse_density.unwrap();
        assert!((IMPULSE_DENSITY.0..=IMPULSE_DENSITY.1).contains(&density));

        let (mut salt, mut pepper, mut untouched) = (0usize, 0usize, 0usize);
        for ih in 0..48 {
            for iw in 0..48 {
                let v = hit.at(&[ih, iw, b.band]);
                if v == base.at(&[ih, iw, b.band]) {
                    untouched += 1;
                } else if v == 1.0 {
                    salt += 1;
                } else if v == 0.0 {
                    pepper += 1;
                } else {
                    panic!("impulse produced a non-extreme value {v}");
                }
            }
        }
        assert!(salt > 0 && pepper > 0);
        let frac = (salt + pepper) as f64 / (48.0 * 48.0);
        // Five sigmas of binomial sampling slack.
        let slack = 5.0 * (density * (1.0 - density) / (48.0 * 48.0)).sqrt();
        assert!((frac - density).abs() < slack, "frac {frac} density {density}");
        assert!(untouched > 0);
    }

    #[test]
    fn mixture_applies_every_corruption_and_deadline_wins() {
        let x = ramp_cube(16, 24, 9);
        let (y, log) = apply(&x, &NoiseKind::Mixture, 23).unwrap();
        assert_eq!(log.bands.iter().filter(|b| !b.stripes.is_empty()).count(), 3);
        assert_eq!(log.bands.iter().filter(|b| !b.dead_cols.is_empty()).count(), 3);
        assert_eq!(
            log.bands.iter().filter(|b| b.impulse_density.is_some()).count(),
            3
        );
        // Dead columns are zero even where impulses also fired.
        for b in &log.bands {
            for &col in &b.dead_cols {
                for ih in 0..16 {
                    assert_eq!(y.at(&[ih, col, b.band]), 0.0);
                }
            }
        }
    }

    #[test]
    fn output_is_never_clamped() {
        let lows = Tensor::<f64>::zeros(&[24, 24, 2]).unwrap();
        let (y, _) = apply(&lows, &NoiseKind::Gaussian { sigma: 70.0 }, 29).unwrap();
        assert!(y.data().iter().any(|&v| v < 0.0));

        let highs = Tensor::full(&[24, 24, 2], 1.0f64).unwrap();
        let (y, _) = apply(&highs, &NoiseKind::Gaussian { sigma: 70.0 }, 29).unwrap();
        assert!(y.data().iter().any(|&v| v > 1.0));
    }

    #[test]
    fn log_text_is_complete_and_stable() {
        let x = ramp_cube(8, 8, 3);
        let (_, log) = apply(&x, &NoiseKind::Mixture, 31).unwrap();
        let text = log.to_text();
        assert!(text.starts_with("degradation-log v1\nkind: mixture\nseed: 31\nsize: 8x8x3\n"));
        for band in 0..3 {
            assert!(text.contains(&format!("band {band}: sigma=")));
        }
        assert!(text.contains("stripes=["));
        assert!(text.contains("dead=["));
        assert!(text.contains("impulse="));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let x = ramp_cube(4, 4, 2);
        assert!(apply(&x, &NoiseKind::Gaussian { sigma: -1.0 }, 0).is_err());
        assert!(apply(&x, &NoiseKind::GaussianBlind { lo: 50.0, hi: 10.0 }, 0).is_err());
        let flat = Tensor::<f64>::zeros(&[4, 4]).unwrap();
        assert!(apply(&flat, &NoiseKind::NonIid, 0).is_err());
    }
}
