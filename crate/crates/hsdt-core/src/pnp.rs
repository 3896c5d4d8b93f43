//! Plug-and-play restoration: linear degradation operators (spatial
//! super-resolution and CASSI compressive sensing), a conjugate-gradient
//! solver for the data-fidelity subproblem, and the ADMM loop that alternates
//! it with a denoiser prior.
//!
//! ADMM splits `min ‖A x − y‖² + prior(x)` into an x-step solved on the
//! normal equations `(AᵀA + ρI) x = Aᵀy + ρ(z − u)` by CG, a z-step that is
//! one denoiser call at the iteration's noise level, and the dual update
//! `u += x − z`. Both operators are verified against the adjoint identity
//! `⟨A x, y⟩ = ⟨x, Aᵀ y⟩`.

use crate::error::{Error, Result};
use crate::network::HsdtModel;
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Number of taps of the separable blur used by the SR degradation.
pub const BLUR_TAPS: usize = 8;
/// Standard deviation of the blur, in pixels.
pub const BLUR_SIGMA: f64 = 3.0;
/// Inner CG iteration budget of the ADMM x-step.
pub const CG_ITERS: usize = 10;
/// CG stopping tolerance, relative to the initial residual.
pub const CG_TOL: f64 = 1e-6;
/// Consecutive residual increases CG tolerates before declaring divergence.
const CG_MAX_GROWTHS: usize = 3;

/// Default noise-level schedule endpoints (on the `[0, 1]` data scale).
pub const SIGMA_START: f64 = 50.0 / 255.0;
pub const SIGMA_END: f64 = 5.0 / 255.0;
/// Default penalty schedule endpoints.
pub const RHO_START: f64 = 0.05;
pub const RHO_END: f64 = 2.0;

/// A linear map between an `[H, W, D]` cube and an observation tensor,
/// together with its exact adjoint.
pub trait LinearOperator<T: Scalar> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
    /// Shape of the operator's input (the restoration target).
    fn domain(&self) -> &[usize];
}

// ---------------------------------------------------------------- helpers

fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x.to_f64() * y.to_f64())
        .sum()
}

fn l2<T: Scalar>(a: &Tensor<T>) -> f64 {
    dot(a, a).sqrt()
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
}

/// `a + c·b`.
fn axpy<T: Scalar>(a: &Tensor<T>, c: f64, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = T::from_f64(c);
    a.zip_map(b, move |x, y| x + c * y)
}

/// Reflect an out-of-range index into `[0, n)`, repeating the edge sample
/// (`…, 2, 1, 0 | 0, 1, 2, …`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    debug_assert!((0..n).contains(&r), "extent too small for the blur window");
    r as usize
}

// ------------------------------------------------------- super-resolution

/// Spatial downsampling: per-band blur by a normalized separable 8×8
/// Gaussian (σ = 3), then stride-`scale` decimation on both spatial axes.
pub struct SrOperator {
    domain: Vec<usize>,
    scale: usize,
    taps: [f64; BLUR_TAPS],
}

/// The normalized 1-D half of the blur. Eight taps have no center sample;
/// tap `a` sits at offset `a − 3.5` from the output pixel.
pub fn blur_taps() -> [f64; BLUR_TAPS] {
    let mut taps = [0.0; BLUR_TAPS];
    let mut sum = 0.0;
    for (a, t) in taps.iter_mut().enumerate() {
        let d = a as f64 - (BLUR_TAPS as f64 - 1.0) / 2.0;
        *t = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

impl SrOperator {
    pub fn new(domain: &[usize], scale: usize) -> Result<Self> {
        if domain.len() != 3 {
            return Err(Error::contract("sr", "domain must be [H, W, D]"));
        }
        if !(scale == 2 || scale == 4) {
            return Err(Error::Config(format!("sr scale {scale} (wanted 2 or 4)")));
        }
        let (h, w, d) = (domain[0], domain[1], domain[2]);
        if d == 0 {
            return Err(Error::contract("sr", "empty spectral axis"));
        }
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent % scale != 0 {
                return Err(Error::PaddingRequired { axis, extent, multiple: scale });
            }
            if extent < BLUR_TAPS {
                return Err(Error::contract(
                    "sr",
                    format!("{axis} {extent} is smaller than the {BLUR_TAPS}-tap blur"),
                ));
            }
        }
        Ok(SrOperator { domain: domain.to_vec(), scale, taps: blur_taps() })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Blur along one spatial axis; `axis` 0 = height, 1 = width.
    fn blur_axis<T: Scalar>(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let src = x.data();
        let mut out = vec![0.0f64; src.len()];
        let n = if axis == 0 { h } else { w };
        const BACK: isize = 3; // tap a reads x[i + a - 3], window [i-3, i+4]
        for ih in 0..h {
            for iw in 0..w {
                let i = if axis == 0 { ih } else { iw };
                let base = (ih * w + iw) * d;
                for (a, &g) in self.taps.iter().enumerate() {
                    let j = reflect(i as isize + a as isize - BACK, n);
                    let jbase = if axis == 0 { (j * w + iw) * d } else { (ih * w + j) * d };
                    for k in 0..d {
                        out[base + k] += g * src[jbase + k].to_f64();
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), out.into_iter().map(T::from_f64).collect())
    }

    /// Exact transpose of [`SrOperator::blur_axis`]: scatter through the
    /// identical index map.
    fn blur_axis_t<T: Scalar>(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let src = x.data();
        let mut out = vec![0.0f64; src.len()];
        let n = if axis == 0 { h } else { w };
        const BACK: isize = 3;
        for ih in 0..h {
            for iw in 0..w {
                let i = if axis == 0 { ih } else { iw };
                let base = (ih * w + iw) * d;
                for (a, &g) in self.taps.iter().enumerate() {
                    let j = reflect(i as isize + a as isize - BACK, n);
                    let jbase = if axis == 0 { (j * w + iw) * d } else { (ih * w + j) * d };
                    for k in 0..d {
                        out[jbase + k] += g * src[base + k].to_f64();
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), out.into_iter().map(T::from_f64).collect())
    }
}

impl<T: Scalar> LinearOperator<T> for SrOperator {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.domain {
            return Err(Error::contract(
                "sr",
                format!("input shape {:?}, operator domain {:?}", x.shape(), self.domain),
            ));
        }
        let blurred = self.blur_axis(&self.blur_axis(x, 0)?, 1)?;
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let (oh, ow) = (h / self.scale, w / self.scale);
        let src = blurred.data();
        let mut out = Vec::with_capacity(oh * ow * d);
        for i in 0..oh {
            for j in 0..ow {
                let base = (i * self.scale * w + j * self.scale) * d;
                out.extend_from_slice(&src[base..base + d]);
            }
        }
        Tensor::from_vec(&[oh, ow, d], out)
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let (oh, ow) = (h / self.scale, w / self.scale);
        if y.shape() != [oh, ow, d] {
            return Err(Error::contract(
                "sr",
                format!("observation shape {:?}, expected {:?}", y.shape(), [oh, ow, d]),
            ));
        }
        let src = y.data();
        let mut stuffed = vec![T::from_f64(0.0); h * w * d];
        for i in 0..oh {
            for j in 0..ow {
                let to = (i * self.scale * w + j * self.scale) * d;
                let from = (i * ow + j) * d;
                stuffed[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
        let stuffed = Tensor::from_vec(&[h, w, d], stuffed)?;
        self.blur_axis_t(&self.blur_axis_t(&stuffed, 1)?, 0)
    }

    fn domain(&self) -> &[usize] {
        &self.domain
    }
}

// ------------------------------------------------------------------ CASSI

/// Coded-aperture snapshot: each band is masked, shifted by `d · step`
/// columns, and all bands are summed into one 2-D measurement of shape
/// `[H, W + (D−1)·step]`.
pub struct CassiOperator<T: Scalar> {
    domain: Vec<usize>,
    mask: Tensor<T>,
    step: usize,
}

impl<T: Scalar> CassiOperator<T> {
    pub fn new(domain: &[usize], mask: Tensor<T>, step: usize) -> Result<Self> {
        if domain.len() != 3 || domain.iter().any(|&e| e == 0) {
            return Err(Error::contract("cassi", "domain must be [H, W, D], all positive"));
        }
        if mask.shape() != [domain[0], domain[1]] {
            return Err(Error::contract(
                "cassi",
                format!("mask shape {:?} does not cover [H, W] = [{}, {}]", mask.shape(), domain[0], domain[1]),
            ));
        }
        if mask.data().iter().any(|&v| {
            let f = v.to_f64();
            f != 0.0 && f != 1.0
        }) {
            return Err(Error::contract("cassi", "mask must be binary"));
        }
        Ok(CassiOperator { domain: domain.to_vec(), mask, step })
    }

    /// Build a 50% Bernoulli mask deterministically from a seed.
    pub fn random_mask(h: usize, w: usize, seed: u64) -> Result<Tensor<T>> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::LANE_GLOBAL + 3000);
        let data = (0..h * w)
            .map(|_| T::from_f64(if rng.random::<bool>() { 1.0 } else { 0.0 }))
            .collect();
        Tensor::from_vec(&[h, w], data)
    }

    fn obs_width(&self) -> usize {
        self.domain[1] + (self.domain[2] - 1) * self.step
    }
}

impl<T: Scalar> LinearOperator<T> for CassiOperator<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.domain {
            return Err(Error::contract(
                "cassi",
                format!("input shape {:?}, operator domain {:?}", x.shape(), self.domain),
            ));
        }
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let ow = self.obs_width();
        let src = x.data();
        let m = self.mask.data();
        let mut out = vec![0.0f64; h * ow];
        for ih in 0..h {
            for iw in 0..w {
                let mv = m[ih * w + iw].to_f64();
                if mv == 0.0 {
                    continue;
                }
                let base = (ih * w + iw) * d;
                for k in 0..d {
                    out[ih * ow + iw + k * self.step] += src[base + k].to_f64();
                }
            }
        }
        Tensor::from_vec(&[h, ow], out.into_iter().map(T::from_f64).collect())
    }

    fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, d) = (self.domain[0], self.domain[1], self.domain[2]);
        let ow = self.obs_width();
        if y.shape() != [h, ow] {
            return Err(Error::contract(
                "cassi",
                format!("observation shape {:?}, expected {:?}", y.shape(), [h, ow]),
            ));
        }
        let src = y.data();
        let m = self.mask.data();
        let mut out = vec![T::from_f64(0.0); h * w * d];
        for ih in 0..h {
            for iw in 0..w {
                let mv = m[ih * w + iw];
                let base = (ih * w + iw) * d;
                for k in 0..d {
                    out[base + k] = mv * src[ih * ow + iw + k * self.step];
                }
            }
        }
        Tensor::from_vec(&[h, w, d], out)
    }

    fn domain(&self) -> &[usize] {
        &self.domain
    }
}

// --------------------------------------------------------------------- CG

/// Solve `(AᵀA + ρI) x = rhs` by conjugate gradient from `x0`. Stops early
/// once the residual falls below `tol` relative to its initial value; three
/// consecutive residual increases abort with [`Error::CgDiverged`].
pub fn cg_normal<T: Scalar>(
    op: &dyn LinearOperator<T>,
    rho: f64,
    rhs: &Tensor<T>,
    x0: &Tensor<T>,
    iters: usize,
    tol: f64,
) -> Result<Tensor<T>> {
    let normal = |v: &Tensor<T>| -> Result<Tensor<T>> {
        axpy(&op.adjoint(&op.forward(v)?)?, rho, v)
    };
    let mut x = x0.clone();
    let mut r = sub(rhs, &normal(&x)?)?;
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let rs0 = rs;
    if rs0 == 0.0 {
        return Ok(x);
    }
    let mut growths = 0usize;
    for k in 0..iters {
        if rs.sqrt() <= tol * rs0.sqrt() {
            break;
        }
        let ap = normal(&p)?;
        let denom = dot(&p, &ap);
        if !(denom.is_finite() && denom > 0.0) {
            return Err(Error::CgDiverged(format!(
                "curvature {denom:.3e} at inner step {k} (system not positive definite)"
            )));
        }
        let alpha = rs / denom;
        x = axpy(&x, alpha, &p)?;
        r = axpy(&r, -alpha, &ap)?;
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::CgDiverged(format!("residual overflowed at inner step {k}")));
        }
        if rs_new > rs {
            growths += 1;
            if growths >= CG_MAX_GROWTHS {
                return Err(Error::CgDiverged(format!(
                    "residual grew {CG_MAX_GROWTHS} consecutive inner steps, \
                     |r| {:.3e} -> {:.3e}",
                    rs0.sqrt(),
                    rs_new.sqrt()
                )));
            }
        } else {
            growths = 0;
        }
        p = axpy(&r, rs_new / rs, &p)?;
        rs = rs_new;
    }
    Ok(x)
}

// ------------------------------------------------------------------ ADMM

/// The prior: anything that can denoise a cube at a given noise level
/// (on the `[0, 1]` data scale).
pub trait Denoiser<T: Scalar> {
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>>;
}

/// Pass-through prior; turns ADMM into plain least squares.
pub struct IdentityDenoiser;

impl<T: Scalar> Denoiser<T> for IdentityDenoiser {
    fn denoise(&self, x: &Tensor<T>, _sigma: f64) -> Result<Tensor<T>> {
        Ok(x.clone())
    }
}

/// A trained network as the prior. The model must take a noise map (second
/// input channel); the map is constant at the iteration's sigma.
pub struct ModelDenoiser<'a, T: Scalar> {
    model: &'a HsdtModel,
    store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> ModelDenoiser<'a, T> {
    pub fn new(model: &'a HsdtModel, store: &'a ParamStore<T>) -> Result<Self> {
        if model.config().input_channels != 2 {
            return Err(Error::Config(
                "plug-and-play needs a noise-map model (input_channels = 2)".into(),
            ));
        }
        Ok(ModelDenoiser { model, store })
    }
}

impl<T: Scalar> Denoiser<T> for ModelDenoiser<'_, T> {
    fn denoise(&self, x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let map = Tensor::full(x.shape(), T::from_f64(sigma))?;
        self.model.infer(self.store, x, Some(&map))
    }
}

/// `n` values spaced evenly in log scale from `start` to `end` inclusive.
pub fn log_linear(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("schedule length must be positive".into()));
    }
    if !(start > 0.0 && end > 0.0) {
        return Err(Error::Config("log-linear endpoints must be positive".into()));
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let (a, b) = (start.ln(), end.ln());
    Ok((0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect())
}

/// One restoration task: operator, measurement, prior, and per-iteration
/// penalty/noise-level schedules of equal length.
pub struct AdmmProblem<'a, T: Scalar> {
    pub op: &'a dyn LinearOperator<T>,
    pub observation: Tensor<T>,
    pub denoiser: &'a dyn Denoiser<T>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl<'a, T: Scalar> AdmmProblem<'a, T> {
    /// Problem with the default log-linear schedules over `iterations`.
    pub fn new(
        op: &'a dyn LinearOperator<T>,
        observation: Tensor<T>,
        denoiser: &'a dyn Denoiser<T>,
        iterations: usize,
    ) -> Result<Self> {
        Ok(AdmmProblem {
            op,
            observation,
            denoiser,
            rho: log_linear(RHO_START, RHO_END, iterations)?,
            sigma: log_linear(SIGMA_START, SIGMA_END, iterations)?,
            cg_iters: CG_ITERS,
            cg_tol: CG_TOL,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.rho.is_empty() || self.rho.len() != self.sigma.len() {
            return Err(Error::Config(format!(
                "schedules must be non-empty and equal length (rho {}, sigma {})",
                self.rho.len(),
                self.sigma.len()
            )));
        }
        if self.rho.iter().chain(&self.sigma).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("schedule values must be positive".into()));
        }
        if self.cg_iters == 0 {
            return Err(Error::Config("cg_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration ADMM diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDiag {
    /// 1-based iteration index.
    pub iteration: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Data fidelity `‖A x − y‖` after the iteration.
    pub fidelity: f64,
}

/// Render diagnostics as stable line-oriented text.
pub fn diagnostics_text(diags: &[IterationDiag]) -> String {
    let mut out = String::from("pnp-diagnostics v1\n");
    for d in diags {
        out.push_str(&format!(
            "iter {}: rho={:.6} sigma={:.6} fidelity={:.6e}\n",
            d.iteration, d.rho, d.sigma, d.fidelity
        ));
    }
    out
}

/// Run PnP-ADMM. Starts from `x = z = Aᵀy`, `u = 0`; each iteration solves
/// the penalized normal equations by CG, denoises `x + u` at the scheduled
/// noise level, and updates the dual. Returns the restored cube and one
/// diagnostic record per iteration.
pub fn admm_restore<T: Scalar>(
    problem: &AdmmProblem<'_, T>,
) -> Result<(Tensor<T>, Vec<IterationDiag>)> {
    problem.validate()?;
    let op = problem.op;
    let y = &problem.observation;

    let aty = op.adjoint(y)?;
    let mut x = aty.clone();
    let mut z = x.clone();
    let mut u = Tensor::zeros(op.domain())?;
    let mut diags = Vec::with_capacity(problem.rho.len());

    for (k, (&rho, &sigma)) in problem.rho.iter().zip(&problem.sigma).enumerate() {
        let rhs = axpy(&aty, rho, &sub(&z, &u)?)?;
        x = cg_normal(op, rho, &rhs, &x, problem.cg_iters, problem.cg_tol)?;

        z = problem.denoiser.denoise(&add(&x, &u)?, sigma)?;
        if z.shape() != x.shape() {
            return Err(Error::contract(
                "admm",
                format!("denoiser changed the shape: {:?} -> {:?}", x.shape(), z.shape()),
            ));
        }
        u = add(&u, &sub(&x, &z)?)?;

        let fidelity = l2(&sub(&op.forward(&x)?, y)?);
        diags.push(IterationDiag { iteration: k + 1, rho, sigma, fidelity });
    }
    Ok((x, diags))
}

// ---------------------------------------------------------------- bicubic

/// Catmull-Rom weight (cubic convolution with a = −1/2) at distance `t`.
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Per-axis bicubic interpolation to one target extent, half-pixel centers,
/// edge-clamped; `axis` 0 = height, 1 = width.
fn bicubic_axis<T: Scalar>(x: &Tensor<T>, axis: usize, out_n: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let n = if axis == 0 { h } else { w };
    let (oh, ow) = if axis == 0 { (out_n, w) } else { (h, out_n) };
    let ratio = n as f64 / out_n as f64;
    let src = x.data();
    let mut out = vec![0.0f64; oh * ow * d];
    for io in 0..out_n {
        let srcpos = (io as f64 + 0.5) * ratio - 0.5;
        let i0 = srcpos.floor() as isize;
        let t = srcpos - i0 as f64;
        let taps: Vec<(usize, f64)> = (-1..=2)
            .map(|m| {
                let idx = (i0 + m).clamp(0, n as isize - 1) as usize;
                (idx, catmull_rom(t - m as f64))
            })
            .collect();
        let other = if axis == 0 { w } else { h };
        for jo in 0..other {
            let obase = if axis == 0 { (io * w + jo) * d } else { (jo * ow + io) * d };
            for (idx, wt) in &taps {
                let ibase = if axis == 0 { (idx * w + jo) * d } else { (jo * w + idx) * d };
                for k in 0..d {
                    out[obase + k] += wt * src[ibase + k].to_f64();
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, d], out.into_iter().map(T::from_f64).collect())
}

/// Bicubic (Catmull-Rom) spatial upsampling of an `[H, W, D]` cube by an
/// integer factor — the classical baseline super-resolution is compared to.
pub fn bicubic_upsample<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::contract("bicubic", "input must be [H, W, D]"));
    }
    if scale == 0 {
        return Err(Error::contract("bicubic", "scale must be positive"));
    }
    let up_h = bicubic_axis(x, 0, shape[0] * scale)?;
    bicubic_axis(&up_h, 1, shape[1] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, LANE_GLOBAL};
    use rand::Rng;

    fn random_cube(shape: &[usize], lane: u64) -> Tensor<f64> {
        let mut rng = stream(900, LANE_GLOBAL + lane);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// ⟨A x, y⟩ vs ⟨x, Aᵀ y⟩ over random pairs.
    fn assert_adjoint(op: &dyn LinearOperator<f64>, obs_shape: &[usize], trials: u64) {
        for t in 0..trials {
            let x = random_cube(op.domain(), 10 + t);
            let y = random_cube(obs_shape, 200 + t);
            let lhs = dot(&op.forward(&x).unwrap(), &y);
            let rhs = dot(&x, &op.adjoint(&y).unwrap());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(rel <= 1e-6, "trial {t}: {lhs} vs {rhs} (rel {rel:.3e})");
        }
    }

    #[test]
    fn blur_taps_are_normalized_and_symmetric() {
        let taps = blur_taps();
        let sum: f64 = taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for a in 0..BLUR_TAPS / 2 {
            assert_eq!(taps[a], taps[BLUR_TAPS - 1 - a]);
        }
    }

    #[test]
    fn sr_keeps_constant_images_constant() {
        let op = SrOperator::new(&[16, 16, 3], 2).unwrap();
        let x = Tensor::full(&[16, 16, 3], 0.7f64).unwrap();
        let y = LinearOperator::<f64>::forward(&op, &x).unwrap();
        assert_eq!(y.shape(), &[8, 8, 3]);
        for &v in y.data().iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn sr_forward_matches_a_direct_convolution_oracle() {
        let op = SrOperator::new(&[16, 12, 2], 2).unwrap();
        let x = random_cube(&[16, 12, 2], 1);
        let y = LinearOperator::<f64>::forward(&op, &x).unwrap();

        // Dense 2-D oracle: out[i,j] = sum_{a,b} g[a] g[b] x[r(2i+a-3), r(2j+b-3)].
        let g = blur_taps();
        let src = x.data();
        for oi in 0..8 {
            for oj in 0..6 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for (a, &ga) in g.iter().enumerate() {
                        for (b, &gb) in g.iter().enumerate() {
                            let r = reflect(2 * oi as isize + a as isize - 3, 16);
                            let c = reflect(2 * oj as isize + b as isize - 3, 12);
                            acc += ga * gb * src[(r * 12 + c) * 2 + k];
                        }
                    }
                    let got = y.data()[(oi * 6 + oj) * 2 + k];
                    assert!((got - acc).abs() < 1e-12, "({oi},{oj},{k}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn sr_adjoint_passes_the_dot_product_test() {
        let op = SrOperator::new(&[16, 12, 3], 2).unwrap();
        assert_adjoint(&op, &[8, 6, 3], 20);
        let op4 = SrOperator::new(&[16, 16, 2], 4).unwrap();
        assert_adjoint(&op4, &[4, 4, 2], 20);
    }

    #[test]
    fn sr_rejects_bad_geometry() {
        assert!(SrOperator::new(&[15, 16, 3], 2).is_err());
        assert!(SrOperator::new(&[16, 16, 3], 3).is_err());
        assert!(SrOperator::new(&[4, 16, 3], 2).is_err());
        let op = SrOperator::new(&[16, 16, 3], 2).unwrap();
        let wrong = Tensor::<f64>::zeros(&[16, 16, 2]).unwrap();
        assert!(LinearOperator::<f64>::forward(&op, &wrong).is_err());
    }

    #[test]
    fn cassi_single_band_is_just_the_mask() {
        let mask = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let op = CassiOperator::new(&[2, 3, 1], mask, 1).unwrap();
        let x = Tensor::from_vec(&[2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = op.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 0.0, 3.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn cassi_interior_columns_sum_all_bands() {
        let (h, w, d) = (3, 6, 4);
        let mask = Tensor::full(&[h, w], 1.0f64).unwrap();
        let op = CassiOperator::new(&[h, w, d], mask, 1).unwrap();
        let x = Tensor::full(&[h, w, d], 0.5f64).unwrap();
        let y = op.forward(&x).unwrap();
        assert_eq!(y.shape(), &[h, w + d - 1]);
        // Columns receiving every band: d-1 <= c <= w-1.
        for row in 0..h {
            for c in d - 1..w {
                let v = y.data()[row * (w + d - 1) + c];
                assert!((v - 0.5 * d as f64).abs() < 1e-12, "col {c}: {v}");
            }
        }
        // The first column only ever sees band 0.
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cassi_adjoint_passes_the_dot_product_test() {
        let mask = CassiOperator::<f64>::random_mask(5, 7, 4).unwrap();
        let op = CassiOperator::new(&[5, 7, 4], mask, 1).unwrap();
        assert_adjoint(&op, &[5, 10], 20);
        // A wider shift step.
        let mask = CassiOperator::<f64>::random_mask(4, 6, 9).unwrap();
        let op = CassiOperator::new(&[4, 6, 3], mask, 2).unwrap();
        assert_adjoint(&op, &[4, 10], 20);
    }

    #[test]
    fn cassi_rejects_non_binary_masks() {
        let mask = Tensor::from_vec(&[1, 2], vec![1.0, 0.5]).unwrap();
        assert!(CassiOperator::new(&[1, 2, 1], mask, 1).is_err());
        let mask = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(CassiOperator::new(&[2, 3, 1], mask, 1).is_err());
    }

    #[test]
    fn random_masks_are_deterministic_and_binary() {
        let a = CassiOperator::<f64>::random_mask(6, 6, 11).unwrap();
        let b = CassiOperator::<f64>::random_mask(6, 6, 11).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.data().iter().any(|&v| v == 0.0));
        assert!(a.data().iter().any(|&v| v == 1.0));
    }

    /// Identity operator over an arbitrary domain, for solver tests.
    struct IdentityOp(Vec<usize>);
    impl LinearOperator<f64> for IdentityOp {
        fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }
        fn adjoint(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(y.clone())
        }
        fn domain(&self) -> &[usize] {
            &self.0
        }
    }

    #[test]
    fn cg_solves_the_identity_normal_equations() {
        let op = IdentityOp(vec![4, 4, 2]);
        let rhs = random_cube(&[4, 4, 2], 31);
        let x0 = Tensor::zeros(&[4, 4, 2]).unwrap();
        // (1 + rho) x = rhs.
        let x = cg_normal(&op, 3.0, &rhs, &x0, 10, 1e-12).unwrap();
        for (xv, rv) in x.data().iter().zip(rhs.data().iter()) {
            assert!((xv - rv / 4.0).abs() < 1e-10);
        }
    }

    /// 90° rotation with a deliberately wrong adjoint: the normal system is
    /// dominated by a skew part, so CG's residual grows every step.
    struct SkewOp;
    impl LinearOperator<f64> for SkewOp {
        fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let d = x.data();
            Tensor::from_vec(&[2], vec![-d[1], d[0]])
        }
        fn adjoint(&self, y: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(y.clone())
        }
        fn domain(&self) -> &[usize] {
            &[2]
        }
    }

    #[test]
    fn cg_reports_divergence_after_three_residual_growths() {
        let rhs = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let x0 = Tensor::zeros(&[2]).unwrap();
        match cg_normal(&SkewOp, 0.01, &rhs, &x0, 10, 1e-12) {
            Err(Error::CgDiverged(msg)) => assert!(msg.contains("consecutive"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn admm_identity_problem_returns_the_observation() {
        let op = IdentityOp(vec![4, 4, 3]);
        let y = random_cube(&[4, 4, 3], 77);
        let problem = AdmmProblem::new(&op, y.clone(), &IdentityDenoiser, 1).unwrap();
        let (x, diags) = admm_restore(&problem).unwrap();
        assert_eq!(diags.len(), 1);
        for (xv, yv) in x.data().iter().zip(y.data().iter()) {
            assert!((xv - yv).abs() <= 1e-6);
        }
        assert!(diags[0].fidelity <= 1e-6);
    }

    #[test]
    fn admm_with_identity_prior_reduces_sr_fidelity() {
        let op = SrOperator::new(&[16, 16, 2], 2).unwrap();
        let hr = crate::train::synth::low_rank_hsi::<f64>(16, 16, 2, 2, 40).unwrap();
        let y = LinearOperator::<f64>::forward(&op, &hr).unwrap();
        let problem = AdmmProblem::new(&op, y, &IdentityDenoiser, 6).unwrap();
        let (_, diags) = admm_restore(&problem).unwrap();
        assert_eq!(diags.len(), 6);
        assert!(
            diags[4].fidelity <= diags[0].fidelity,
            "fidelity 1 {} vs 5 {}",
            diags[0].fidelity,
            diags[4].fidelity
        );
    }

    #[test]
    fn admm_validates_schedules() {
        let op = IdentityOp(vec![2, 2, 1]);
        let y = random_cube(&[2, 2, 1], 5);
        assert!(AdmmProblem::new(&op, y.clone(), &IdentityDenoiser, 0).is_err());
        let mut p = AdmmProblem::new(&op, y, &IdentityDenoiser, 3).unwrap();
        p.sigma.pop();
        assert!(admm_restore(&p).is_err());
    }

    #[test]
    fn model_denoiser_requires_a_noise_map_input() {
        use crate::network::{build_model, HsdtConfig};
        let cfg = HsdtConfig::small().with_base_channels(4);
        let (model, store) = build_model::<f64>(&cfg, 1).unwrap();
        assert!(ModelDenoiser::new(&model, &store).is_err());

        let cfg2 = cfg.with_input_channels(2);
        let (model2, store2) = build_model::<f64>(&cfg2, 1).unwrap();
        let den = ModelDenoiser::new(&model2, &store2).unwrap();
        let x = random_cube(&[8, 8, 4], 50);
        let out = den.denoise(&x, 30.0 / 255.0).unwrap();
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn log_linear_schedules_hit_both_endpoints_monotonically() {
        let s = log_linear(50.0 / 255.0, 5.0 / 255.0, 8).unwrap();
        assert_eq!(s.len(), 8);
        assert!((s[0] - 50.0 / 255.0).abs() < 1e-15);
        assert!((s[7] - 5.0 / 255.0).abs() < 1e-15);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        let r = log_linear(0.05, 2.0, 5).unwrap();
        assert!(r.windows(2).all(|w| w[1] > w[0]));
        assert!(log_linear(0.0, 1.0, 3).is_err());
        assert_eq!(log_linear(0.3, 0.9, 1).unwrap(), vec![0.3]);
    }

    #[test]
    fn bicubic_preserves_constants_and_linear_ramps() {
        let c = Tensor::full(&[6, 6, 2], 0.3f64).unwrap();
        let up = bicubic_upsample(&c, 2).unwrap();
        assert_eq!(up.shape(), &[12, 12, 2]);
        for &v in up.data().iter() {
            assert!((v - 0.3).abs() < 1e-12);
        }

        // A ramp along W stays a ramp in the interior (cubic reproduction).
        let ramp = Tensor::from_vec(
            &[1, 8, 1],
            (0..8).map(f64::from).collect(),
        )
        .unwrap();
        let up = bicubic_upsample(&ramp, 2).unwrap();
        // Output sample j maps to source position (j + 0.5)/2 - 0.5.
        for j in 4..12 {
            let want = (j as f64 + 0.5) / 2.0 - 0.5;
            let got = up.data()[j];
            assert!((got - want).abs() < 1e-12, "j={j}: {got} vs {want}");
        }
    }

    #[test]
    fn bicubic_upsampling_is_a_reasonable_sr_baseline() {
        // Downsample a smooth cube, bicubic it back, and demand sane error.
        let hr = crate::train::synth::low_rank_hsi::<f64>(16, 16, 3, 2, 8).unwrap();
        let op = SrOperator::new(&[16, 16, 3], 2).unwrap();
        let lr = LinearOperator::<f64>::forward(&op, &hr).unwrap();
        let up = bicubic_upsample(&lr, 2).unwrap();
        assert_eq!(up.shape(), hr.shape());
        // The sigma-3 blur removes real detail; bicubic cannot undo it, it
        // just must not blow up.
        let err = l2(&sub(&up, &hr).unwrap()) / l2(&hr);
        assert!(err < 0.35, "relative error {err}");
    }
}
