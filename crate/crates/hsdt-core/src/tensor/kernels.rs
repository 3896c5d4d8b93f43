//! Forward and backward computation kernels.
//!
//! Everything here is a pure function from tensors to tensors: no tape, no
//! parameter bookkeeping. The autodiff layer ([`super::tape`]) and the plain
//! evaluator ([`super::ops`]) both call into these, so each numeric routine
//! exists exactly once.
//!
//! Hot loops are written over contiguous slices (channel axis fastest) so the
//! compiler can vectorize them; no threading, which keeps every result
//! bit-reproducible regardless of the host.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (&x, &y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

// ---------------------------------------------------------------- elementwise

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
        .map_err(|_| shape_err("add", a, b))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)
        .map_err(|_| shape_err("sub", a, b))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)
        .map_err(|_| shape_err("mul", a, b))
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::contract(
        op,
        format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
    )
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

/// Adds a rank-1 bias over the last axis of `x`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let last = *x.shape().last().ok_or_else(|| {
        Error::contract("add_bias", "input must have at least one axis".to_string())
    })?;
    if b.rank() != 1 || b.shape()[0] != last {
        return Err(Error::contract(
            "add_bias",
            format!(
                "bias shape {:?} does not match last axis {last} of {:?}",
                b.shape(),
                x.shape()
            ),
        ));
    }
    let bd = b.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(last) {
        for (o, &v) in row.iter_mut().zip(bd.iter()) {
            *o += v;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradient of [`add_bias`] w.r.t. the bias: sum over all leading axes.
pub fn sum_leading<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let last = *g.shape().last().unwrap_or(&1);
    let mut acc = vec![T::ZERO; last];
    for row in g.data().chunks_exact(last) {
        for (o, &v) in acc.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    Tensor::from_vec(&[last], acc).expect("bias gradient shape")
}

// ------------------------------------------------------------------- matmul

/// Dense `[m,k] x [k,n] -> [m,n]` product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::contract(
            "matmul",
            format!("expects two matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::contract(
            "matmul",
            format!("inner axes disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            axpy(crow, av, &bd[l * n..(l + 1) * n]);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Transpose of a matrix.
pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::contract(
            "transpose",
            format!("expects a matrix, got {:?}", a.shape()),
        ));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

// ------------------------------------------------------------------- conv3d

fn conv_out_extent(op: &'static str, axis: &str, n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::contract(op, format!("stride on {axis} axis is zero")));
    }
    let padded = n + 2 * p;
    if padded < k {
        return Err(Error::contract(
            op,
            format!("{axis} extent {n} with padding {p} is smaller than kernel {k}"),
        ));
    }
    Ok((padded - k) / s + 1)
}

struct ConvDims {
    h: usize,
    w: usize,
    d: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    kd: usize,
    co: usize,
    oh: usize,
    ow: usize,
    od: usize,
}

fn conv_dims<T: Scalar>(
    x_shape: &[usize],
    k: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<ConvDims> {
    if x_shape.len() != 4 {
        return Err(Error::contract(
            "conv3d",
            format!("input must be [H,W,D,C], got {x_shape:?}"),
        ));
    }
    if k.rank() != 5 {
        return Err(Error::contract(
            "conv3d",
            format!("kernel must be [kh,kw,kd,Cin,Cout], got {:?}", k.shape()),
        ));
    }
    let (h, w, d, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let ks = k.shape();
    if ks[3] != cin {
        return Err(Error::contract(
            "conv3d",
            format!(
                "kernel input-channel axis is {}, input channel axis is {cin}",
                ks[3]
            ),
        ));
    }
    Ok(ConvDims {
        h,
        w,
        d,
        cin,
        kh: ks[0],
        kw: ks[1],
        kd: ks[2],
        co: ks[4],
        oh: conv_out_extent("conv3d", "height", h, ks[0], stride[0], pad[0])?,
        ow: conv_out_extent("conv3d", "width", w, ks[1], stride[1], pad[1])?,
        od: conv_out_extent("conv3d", "band", d, ks[2], stride[2], pad[2])?,
    })
}

/// 3-D convolution (cross-correlation) over `[H,W,D,Cin]` with a
/// `[kh,kw,kd,Cin,Cout]` kernel, zero padding, per-axis strides, optional
/// bias over the output channel axis.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let dm = conv_dims(x.shape(), k, stride, pad)?;
    if let Some(b) = bias {
        if b.rank() != 1 || b.shape()[0] != dm.co {
            return Err(Error::contract(
                "conv3d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), dm.co),
            ));
        }
    }
    let xd = x.data();
    let kd_ = k.data();
    let mut out = vec![T::ZERO; dm.oh * dm.ow * dm.od * dm.co];

    // Spatial taps outermost, the whole band column innermost: each tap's
    // [cin, co] kernel block then stays cache-hot across all of `od`.
    for oh in 0..dm.oh {
        for ow in 0..dm.ow {
            let row = ((oh * dm.ow + ow) * dm.od) * dm.co;
            let acc_row = &mut out[row..row + dm.od * dm.co];
            if let Some(b) = bias {
                for od in 0..dm.od {
                    acc_row[od * dm.co..(od + 1) * dm.co].copy_from_slice(b.data());
                }
            }
            for i in 0..dm.kh {
                let ih = (oh * stride[0] + i) as isize - pad[0] as isize;
                if ih < 0 || ih >= dm.h as isize {
                    continue;
                }
                for j in 0..dm.kw {
                    let iw = (ow * stride[1] + j) as isize - pad[1] as isize;
                    if iw < 0 || iw >= dm.w as isize {
                        continue;
                    }
                    let x_row = (ih as usize * dm.w + iw as usize) * dm.d;
                    for od in 0..dm.od {
                        let acc = &mut acc_row[od * dm.co..(od + 1) * dm.co];
                        for l in 0..dm.kd {
                            let id = (od * stride[2] + l) as isize - pad[2] as isize;
                            if id < 0 || id >= dm.d as isize {
                                continue;
                            }
                            let xoff = (x_row + id as usize) * dm.cin;
                            let koff = (((i * dm.kw + j) * dm.kd + l) * dm.cin) * dm.co;
                            let xs = &xd[xoff..xoff + dm.cin];
                            for (ci, &xv) in xs.iter().enumerate() {
                                let kr = &kd_[koff + ci * dm.co..koff + (ci + 1) * dm.co];
                                axpy(acc, xv, kr);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[dm.oh, dm.ow, dm.od, dm.co], out)
}

/// Gradient of [`conv3d`] w.r.t. the input (gather form, race-free).
pub fn conv3d_grad_x<T: Scalar>(
    g: &Tensor<T>,
    k: &Tensor<T>,
    x_shape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let dm = conv_dims(x_shape, k, stride, pad)?;
    let gd = g.data();
    let kd_ = k.data();
    let mut dx = vec![T::ZERO; dm.h * dm.w * dm.d * dm.cin];

    // For each input voxel, gather every (tap, output) pair that read it.
    for ih in 0..dm.h {
        for iw in 0..dm.w {
            for id in 0..dm.d {
                let dst_off = ((ih * dm.w + iw) * dm.d + id) * dm.cin;
                for i in 0..dm.kh {
                    let Some(oh) = back_project(ih, i, pad[0], stride[0], dm.oh) else {
                        continue;
                    };
                    for j in 0..dm.kw {
                        let Some(ow) = back_project(iw, j, pad[1], stride[1], dm.ow) else {
                            continue;
                        };
                        for l in 0..dm.kd {
                            let Some(od) = back_project(id, l, pad[2], stride[2], dm.od) else {
                                continue;
                            };
                            let goff = ((oh * dm.ow + ow) * dm.od + od) * dm.co;
                            let gs = &gd[goff..goff + dm.co];
                            let koff = (((i * dm.kw + j) * dm.kd + l) * dm.cin) * dm.co;
                            for ci in 0..dm.cin {
                                let kr = &kd_[koff + ci * dm.co..koff + (ci + 1) * dm.co];
                                dx[dst_off + ci] += dot(gs, kr);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Output position that read input position `i` through kernel tap `t`,
/// if any: solves `o * stride + t - pad == i` for a valid `o`.
#[inline]
fn back_project(i: usize, t: usize, pad: usize, stride: usize, out_n: usize) -> Option<usize> {
    let shifted = i + pad;
    if shifted < t {
        return None;
    }
    let num = shifted - t;
    if num % stride != 0 {
        return None;
    }
    let o = num / stride;
    (o < out_n).then_some(o)
}

/// Gradient of [`conv3d`] w.r.t. the kernel.
pub fn conv3d_grad_k<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    k_shape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let k_probe = Tensor::<T>::zeros(k_shape)?;
    let dm = conv_dims(x.shape(), &k_probe, stride, pad)?;
    let xd = x.data();
    let gd = g.data();
    let mut dk = vec![T::ZERO; k_shape.iter().product()];

    for oh in 0..dm.oh {
        for ow in 0..dm.ow {
            for od in 0..dm.od {
                let goff = ((oh * dm.ow + ow) * dm.od + od) * dm.co;
                let gs = &gd[goff..goff + dm.co];
                for i in 0..dm.kh {
                    let ih = (oh * stride[0] + i) as isize - pad[0] as isize;
                    if ih < 0 || ih >= dm.h as isize {
                        continue;
                    }
                    for j in 0..dm.kw {
                        let iw = (ow * stride[1] + j) as isize - pad[1] as isize;
                        if iw < 0 || iw >= dm.w as isize {
                            continue;
                        }
                        for l in 0..dm.kd {
                            let id = (od * stride[2] + l) as isize - pad[2] as isize;
                            if id < 0 || id >= dm.d as isize {
                                continue;
                            }
                            let xoff =
                                ((ih as usize * dm.w + iw as usize) * dm.d + id as usize) * dm.cin;
                            let koff = (((i * dm.kw + j) * dm.kd + l) * dm.cin) * dm.co;
                            let xs = &xd[xoff..xoff + dm.cin];
                            for (ci, &xv) in xs.iter().enumerate() {
                                let dkr = &mut dk[koff + ci * dm.co..koff + (ci + 1) * dm.co];
                                axpy(dkr, xv, gs);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(k_shape, dk)
}

// ------------------------------------------------------------------ softmax

fn lane_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(
            "softmax",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    Ok((outer, extent, inner))
}

/// Numerically-stable softmax along `axis` (max subtraction before exp).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = lane_geometry(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * extent * inner + r;
            let mut mx = xd[base];
            for e in 1..extent {
                mx = mx.maximum(xd[base + e * inner]);
            }
            let mut sum = T::ZERO;
            for e in 0..extent {
                let v = (xd[base + e * inner] - mx).exp();
                out[base + e * inner] = v;
                sum += v;
            }
            let norm = T::ONE / sum;
            for e in 0..extent {
                out[base + e * inner] *= norm;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Backward of softmax given its output `y`: `dx = y * (g - <g, y>)` per lane.
pub fn softmax_grad<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if g.shape() != y.shape() {
        return Err(shape_err("softmax_grad", g, y));
    }
    let (outer, extent, inner) = lane_geometry(y.shape(), axis)?;
    let gd = g.data();
    let yd = y.data();
    let mut dx = vec![T::ZERO; gd.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * extent * inner + r;
            let mut dotgy = T::ZERO;
            for e in 0..extent {
                dotgy += gd[base + e * inner] * yd[base + e * inner];
            }
            for e in 0..extent {
                let i = base + e * inner;
                dx[i] = yd[i] * (gd[i] - dotgy);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx)
}

// -------------------------------------------------------------- activations

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Branch on sign so the exponential never overflows.
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_grad<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    g.zip_map(y, |gv, yv| gv * yv * (T::ONE - yv))
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via `erf` (no tanh fit).
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    v * gauss_cdf(v)
}

#[inline]
fn gauss_cdf<T: Scalar>(v: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::ONE + (v * inv_sqrt2).erf())
}

/// Backward of GELU from its *input*: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    g.zip_map(x, |gv, xv| {
        let pdf = inv_sqrt_2pi * (-half * xv * xv).exp();
        gv * (gauss_cdf(xv) + xv * pdf)
    })
}

// ------------------------------------------------------------------ pooling

/// Mean over the spatial axes of `[H,W,D,C]`, yielding `[D,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::contract(
            "global_avg_pool",
            format!("input must be [H,W,D,C], got {:?}", x.shape()),
        ));
    }
    let (h, w, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = d * c;
    let mut acc = vec![T::ZERO; plane];
    for slab in x.data().chunks_exact(plane) {
        for (o, &v) in acc.iter_mut().zip(slab.iter()) {
            *o += v;
        }
    }
    let norm = T::ONE / T::from_f64((h * w) as f64);
    for v in &mut acc {
        *v *= norm;
    }
    Tensor::from_vec(&[d, c], acc)
}

/// Backward of [`global_avg_pool`]: broadcast `g/(H*W)` over the plane.
pub fn global_avg_pool_grad<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if g.rank() != 2 {
        return Err(Error::contract(
            "global_avg_pool_grad",
            format!("gradient must be [D,C], got {:?}", g.shape()),
        ));
    }
    let (d, c) = (g.shape()[0], g.shape()[1]);
    let norm = T::ONE / T::from_f64((h * w) as f64);
    let scaled: Vec<T> = g.data().iter().map(|&v| v * norm).collect();
    let mut out = vec![T::ZERO; h * w * d * c];
    for slab in out.chunks_exact_mut(d * c) {
        slab.copy_from_slice(&scaled);
    }
    Tensor::from_vec(&[h, w, d, c], out)
}

// ----------------------------------------------------------------- upsample

/// Source taps for 1-D linear interpolation at an integer zoom factor,
/// half-pixel-centred (the align-corners=false convention): output `i`
/// samples source coordinate `(i + 0.5)/f - 0.5`, clamped at the edges.
fn lerp_taps<T: Scalar>(n: usize, f: usize) -> Vec<(usize, usize, T)> {
    let mut taps = Vec::with_capacity(n * f);
    for i in 0..n * f {
        let src = (i as f64 + 0.5) / f as f64 - 0.5;
        let src = src.max(0.0);
        let j0 = (src.floor() as usize).min(n - 1);
        let j1 = (j0 + 1).min(n - 1);
        let frac = if j1 > j0 { src - j0 as f64 } else { 0.0 };
        taps.push((j0, j1, T::from_f64(frac)));
    }
    taps
}

/// Trilinear upsampling of `[H,W,D,C]` by integer factors per axis.
/// Exactly linear in its input and constant-preserving.
pub fn trilinear_upsample<T: Scalar>(x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::contract(
            "trilinear_upsample",
            format!("input must be [H,W,D,C], got {:?}", x.shape()),
        ));
    }
    if factors.iter().any(|&f| f == 0) {
        return Err(Error::contract(
            "trilinear_upsample",
            format!("zoom factors must be positive, got {factors:?}"),
        ));
    }
    let (h, w, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let th = lerp_taps::<T>(h, factors[0]);
    let tw = lerp_taps::<T>(w, factors[1]);
    let td = lerp_taps::<T>(d, factors[2]);
    let (oh, ow, od) = (h * factors[0], w * factors[1], d * factors[2]);
    let xd = x.data();
    let mut out = vec![T::ZERO; oh * ow * od * c];

    for (ih, &(h0, h1, fh)) in th.iter().enumerate() {
        for (iw, &(w0, w1, fw)) in tw.iter().enumerate() {
            for (id, &(d0, d1, fd)) in td.iter().enumerate() {
                let off = ((ih * ow + iw) * od + id) * c;
                let acc = &mut out[off..off + c];
                for (hj, hw) in [(h0, T::ONE - fh), (h1, fh)] {
                    if hw == T::ZERO {
                        continue;
                    }
                    for (wj, ww) in [(w0, T::ONE - fw), (w1, fw)] {
                        if ww == T::ZERO {
                            continue;
                        }
                        for (dj, dw) in [(d0, T::ONE - fd), (d1, fd)] {
                            if dw == T::ZERO {
                                continue;
                            }
                            let xoff = ((hj * w + wj) * d + dj) * c;
                            axpy(acc, hw * ww * dw, &xd[xoff..xoff + c]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, od, c], out)
}

/// Reverse tap table: for each source index, the output indices and weights
/// that read it.
fn reverse_taps<T: Scalar>(n: usize, f: usize) -> Vec<Vec<(usize, T)>> {
    let mut rev = vec![Vec::new(); n];
    for (i, &(j0, j1, frac)) in lerp_taps::<T>(n, f).iter().enumerate() {
        let w1 = frac;
        let w0 = T::ONE - frac;
        if w0 != T::ZERO {
            rev[j0].push((i, w0));
        }
        if w1 != T::ZERO {
            rev[j1].push((i, w1));
        }
    }
    rev
}

/// Backward of [`trilinear_upsample`] (gather form over reverse taps).
pub fn trilinear_upsample_grad<T: Scalar>(
    g: &Tensor<T>,
    in_shape: &[usize],
    factors: [usize; 3],
) -> Result<Tensor<T>> {
    let (h, w, d, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ow, od) = (w * factors[1], d * factors[2]);
    let rh = reverse_taps::<T>(h, factors[0]);
    let rw = reverse_taps::<T>(w, factors[1]);
    let rd = reverse_taps::<T>(d, factors[2]);
    let gd = g.data();
    let mut dx = vec![T::ZERO; h * w * d * c];

    for jh in 0..h {
        for jw in 0..w {
            for jd in 0..d {
                let off = ((jh * w + jw) * d + jd) * c;
                let acc = &mut dx[off..off + c];
                for &(oh, hw) in &rh[jh] {
                    for &(owi, wwt) in &rw[jw] {
                        for &(odi, dwt) in &rd[jd] {
                            let goff = ((oh * ow + owi) * od + odi) * c;
                            axpy(acc, hw * wwt * dwt, &gd[goff..goff + c]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx)
}

// --------------------------------------------------------------- batch norm

/// Intermediates saved by the batch-norm forward for its backward pass.
pub struct BnSaved<T> {
    /// Normalized input, same shape as `x`.
    pub xhat: Tensor<T>,
    /// Per-channel `1/sqrt(var + eps)`.
    pub inv_std: Vec<T>,
    /// Whether batch statistics (train) or running statistics (eval) were
    /// used; the backward formula differs.
    pub batch_stats: bool,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| {
        Error::contract("batch_norm", "input must have a channel axis".to_string())
    })?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.rank() != 1 || t.shape()[0] != c {
            return Err(Error::contract(
                "batch_norm",
                format!("{name} shape {:?} does not match {c} channels", t.shape()),
            ));
        }
    }
    Ok(c)
}

/// Per-channel mean and biased variance over all non-channel axes.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = *x.shape().last().unwrap_or(&1);
    let n = x.numel() / c;
    let norm = T::ONE / T::from_f64(n as f64);
    let mut mean = vec![T::ZERO; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= norm;
    }
    let mut var = vec![T::ZERO; c];
    for row in x.data().chunks_exact(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let dv = v - m;
            *vv += dv * dv;
        }
    }
    for v in &mut var {
        *v *= norm;
    }
    (mean, var)
}

/// Training-mode batch norm over the channel (last) axis. Returns the
/// output, saved intermediates for backward, and the batch moments used so
/// the caller can fold them into running statistics.
#[allow(clippy::type_complexity)]
pub fn bn_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, Vec<T>, Vec<T>)> {
    let c = bn_check(x, gamma, beta)?;
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut y = vec![T::ZERO; x.numel()];
    let gd = gamma.data();
    let bd = beta.data();
    for (row, (xh, yr)) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)))
    {
        for ci in 0..c {
            let h = (row[ci] - mean[ci]) * inv_std[ci];
            xh[ci] = h;
            yr[ci] = gd[ci] * h + bd[ci];
        }
    }
    let out = Tensor::from_vec(x.shape(), y)?;
    let saved = BnSaved {
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std,
        batch_stats: true,
    };
    Ok((out, saved, mean, var))
}

/// Inference-mode batch norm using running statistics.
pub fn bn_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let c = bn_check(x, gamma, beta)?;
    for (name, t) in [("running_mean", running_mean), ("running_var", running_var)] {
        if t.rank() != 1 || t.shape()[0] != c {
            return Err(Error::contract(
                "batch_norm",
                format!("{name} shape {:?} does not match {c} channels", t.shape()),
            ));
        }
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::ONE / (v + eps).sqrt())
        .collect();
    let mean = running_mean.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut y = vec![T::ZERO; x.numel()];
    for (row, (xh, yr)) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)))
    {
        for ci in 0..c {
            let h = (row[ci] - mean[ci]) * inv_std[ci];
            xh[ci] = h;
            yr[ci] = gd[ci] * h + bd[ci];
        }
    }
    let out = Tensor::from_vec(x.shape(), y)?;
    let saved = BnSaved {
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std,
        batch_stats: false,
    };
    Ok((out, saved))
}

/// Backward of batch norm. In train mode the gradient flows through the
/// batch moments; in eval mode the statistics are constants.
pub fn bn_grad<T: Scalar>(
    g: &Tensor<T>,
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if g.shape() != saved.xhat.shape() {
        return Err(shape_err("bn_grad", g, &saved.xhat));
    }
    let c = gamma.shape()[0];
    let n = g.numel() / c;
    let norm = T::ONE / T::from_f64(n as f64);
    let gd = g.data();
    let xh = saved.xhat.data();

    let mut dbeta = vec![T::ZERO; c];
    let mut dgamma = vec![T::ZERO; c];
    for (grow, xrow) in gd.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ci in 0..c {
            dbeta[ci] += grow[ci];
            dgamma[ci] += grow[ci] * xrow[ci];
        }
    }

    let gm = gamma.data();
    let mut dx = vec![T::ZERO; g.numel()];
    if saved.batch_stats {
        let mean_g: Vec<T> = dbeta.iter().map(|&v| v * norm).collect();
        let mean_gx: Vec<T> = dgamma.iter().map(|&v| v * norm).collect();
        for ((drow, grow), xrow) in dx
            .chunks_exact_mut(c)
            .zip(gd.chunks_exact(c))
            .zip(xh.chunks_exact(c))
        {
            for ci in 0..c {
                let t = grow[ci] - mean_g[ci] - xrow[ci] * mean_gx[ci];
                drow[ci] = gm[ci] * saved.inv_std[ci] * t;
            }
        }
    } else {
        for (drow, grow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
            for ci in 0..c {
                drow[ci] = gm[ci] * saved.inv_std[ci] * grow[ci];
            }
        }
    }
    Ok((
        Tensor::from_vec(g.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

// -------------------------------------------------------------- band mixing

fn band_mix_check<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::contract(
            "band_mix",
            format!("input must be [H,W,D,C], got {:?}", x.shape()),
        ));
    }
    let (h, w, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] || a.shape()[0] != d {
        return Err(Error::contract(
            "band_mix",
            format!(
                "mixing matrix must be [{d},{d}] for {d} bands, got {:?}",
                a.shape()
            ),
        ));
    }
    Ok((h, w, d, c))
}

/// Band aggregation: `out[h,w,i,c] = sum_j a[i,j] * x[h,w,j,c]`.
/// This is the straightforward batched-matrix form.
pub fn band_mix<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d, c) = band_mix_check(x, a)?;
    let xd = x.data();
    let ad = a.data();
    let mut out = vec![T::ZERO; xd.len()];
    let plane = d * c;
    for pos in 0..h * w {
        let xs = &xd[pos * plane..(pos + 1) * plane];
        let os = &mut out[pos * plane..(pos + 1) * plane];
        for i in 0..d {
            let arow = &ad[i * d..(i + 1) * d];
            let orow = &mut os[i * c..(i + 1) * c];
            for (j, &av) in arow.iter().enumerate() {
                axpy(orow, av, &xs[j * c..(j + 1) * c]);
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// `[H,W,D,C] -> [H,W,C,D]` axis swap (and its own inverse on the swapped
/// layout).
pub fn swap_band_channel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::contract(
            "swap_band_channel",
            format!("input must be rank 4, got {:?}", x.shape()),
        ));
    }
    let (h, w, d, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    let plane = d * c;
    for pos in 0..h * w {
        let xs = &xd[pos * plane..(pos + 1) * plane];
        let os = &mut out[pos * plane..(pos + 1) * plane];
        for j in 0..d {
            for ci in 0..c {
                os[ci * d + j] = xs[j * c + ci];
            }
        }
    }
    Tensor::from_vec(&[h, w, c, d], out)
}

/// Band aggregation realized as a shared filter along the band axis after
/// swapping bands and channels: per (position, channel) the source-band
/// vector is contiguous and every output band mixes it with one column of
/// `a` — the grouped 1x1-convolution formulation. Fibers are processed in
/// small blocks so the transposed mixing matrix streams once per block
/// rather than once per fiber.
pub fn band_mix_fast<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_h, _w, d, _c) = band_mix_check(x, a)?;
    let xt = swap_band_channel(x)?;
    let at = transpose2(a)?;
    let atd = at.data();
    let xtd = xt.data();
    let mut ot = vec![T::ZERO; xtd.len()];
    const FIBERS: usize = 8;
    for (xblk, oblk) in xtd.chunks(FIBERS * d).zip(ot.chunks_mut(FIBERS * d)) {
        for (j, arow) in atd.chunks_exact(d).enumerate() {
            for (xrow, orow) in xblk.chunks_exact(d).zip(oblk.chunks_exact_mut(d)) {
                axpy(orow, xrow[j], arow);
            }
        }
    }
    let ot = Tensor::from_vec(xt.shape(), ot)?;
    swap_band_channel(&ot)
}

/// Gradient of band aggregation w.r.t. the mixing matrix:
/// `dA[i,j] = sum_{h,w,c} g[h,w,i,c] * x[h,w,j,c]`.
pub fn band_mix_grad_a<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d, c) = band_mix_check(x, &Tensor::zeros(&[x.shape()[2], x.shape()[2]])?)?;
    if g.shape() != x.shape() {
        return Err(shape_err("band_mix_grad_a", g, x));
    }
    let gd = g.data();
    let xd = x.data();
    let mut da = vec![T::ZERO; d * d];
    let plane = d * c;
    for pos in 0..h * w {
        let gs = &gd[pos * plane..(pos + 1) * plane];
        let xs = &xd[pos * plane..(pos + 1) * plane];
        for i in 0..d {
            let grow = &gs[i * c..(i + 1) * c];
            let darow = &mut da[i * d..(i + 1) * d];
            for (j, o) in darow.iter_mut().enumerate() {
                *o += dot(grow, &xs[j * c..(j + 1) * c]);
            }
        }
    }
    Tensor::from_vec(&[d, d], da)
}

// ------------------------------------------------------------------ slicing

/// Slice `[start, start+len)` of the last axis.
pub fn slice_last<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let last = *x.shape().last().ok_or_else(|| {
        Error::contract("slice_last", "input must have at least one axis".to_string())
    })?;
    if start + len > last || len == 0 {
        return Err(Error::contract(
            "slice_last",
            format!("range {start}..{} out of bounds for axis extent {last}", start + len),
        ));
    }
    let rows = x.numel() / last;
    let xd = x.data();
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&xd[r * last + start..r * last + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::from_vec(&shape, out)
}

/// Backward of [`slice_last`]: scatter `g` into a zero tensor whose last
/// axis has extent `full_last`.
pub fn slice_last_grad<T: Scalar>(g: &Tensor<T>, full_last: usize, start: usize) -> Result<Tensor<T>> {
    let len = *g.shape().last().unwrap();
    let rows = g.numel() / len;
    let gd = g.data();
    let mut out = vec![T::ZERO; rows * full_last];
    for r in 0..rows {
        out[r * full_last + start..r * full_last + start + len]
            .copy_from_slice(&gd[r * len..(r + 1) * len]);
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = full_last;
    Tensor::from_vec(&shape, out)
}

// --------------------------------------------------------------- reductions

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = T::ZERO;
    for &v in x.data() {
        s += v;
    }
    Tensor::scalar(s)
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = sum_all(x);
    Tensor::scalar(s.data()[0] / T::from_f64(x.numel() as f64))
}

/// Elementwise `sqrt(x + eps)`; the epsilon keeps the derivative finite at 0.
pub fn sqrt_eps<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    x.map(|v| (v + eps).sqrt())
}

pub fn sqrt_eps_grad<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    g.zip_map(x, |gv, xv| gv * half / (xv + eps).sqrt())
}

// ------------------------------------------------------- arithmetic costing

/// Rough arithmetic-operation counts per kernel, used by the plain evaluator
/// to report work. Constant factors are unimportant; what matters is that the
/// counts scale with the true loop trip counts.
pub mod cost {
    pub fn conv3d(out_numel: usize, kh: usize, kw: usize, kd: usize, cin: usize) -> u64 {
        2 * (out_numel * kh * kw * kd * cin) as u64
    }
    pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
        2 * (m * k * n) as u64
    }
    pub fn band_mix(hw: usize, d: usize, c: usize) -> u64 {
        2 * (hw * d * d * c) as u64
    }
    pub fn softmax(numel: usize) -> u64 {
        5 * numel as u64
    }
    pub fn elementwise(numel: usize) -> u64 {
        numel as u64
    }
    pub fn activation(numel: usize) -> u64 {
        4 * numel as u64
    }
    pub fn pool(numel: usize) -> u64 {
        numel as u64
    }
    pub fn batch_norm(numel: usize) -> u64 {
        5 * numel as u64
    }
    pub fn upsample(out_numel: usize) -> u64 {
        14 * out_numel as u64
    }
}
