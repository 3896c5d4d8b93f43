//! The operation surface shared by plain evaluation and autodiff.
//!
//! Layer code is written once against [`Ops`]; instantiated with [`Eval`] it
//! computes values directly (intermediates free as soon as they go out of
//! scope), instantiated with [`super::tape::Tape`] every op is recorded for
//! reverse-mode differentiation. The associated value type is what makes the
//! same forward body serve both: a [`Tensor`] under `Eval`, a tape index
//! under `Tape`.

use super::kernels::{self, cost};
use super::{Mode, Scalar, Tensor};
use crate::error::Result;

/// One training/inference operation vocabulary. All shape checking happens in
/// the kernels, so both implementations reject bad calls identically.
pub trait Ops<T: Scalar> {
    type Val: Clone;

    /// Introduces a tensor the gradient engine treats as a constant.
    fn leaf(&mut self, t: Tensor<T>) -> Self::Val;
    /// Introduces a tensor gradients should be accumulated for.
    fn param(&mut self, t: Tensor<T>) -> Self::Val;
    /// Materializes the value behind `v`.
    fn tensor(&self, v: &Self::Val) -> Tensor<T>;
    /// Shape of the value behind `v` without materializing it.
    fn shape(&self, v: &Self::Val) -> Vec<usize>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn scale(&mut self, a: &Self::Val, c: T) -> Result<Self::Val>;
    fn add_bias(&mut self, x: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn transpose2(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn reshape(&mut self, x: &Self::Val, shape: &[usize]) -> Result<Self::Val>;
    fn conv3d(
        &mut self,
        x: &Self::Val,
        k: &Self::Val,
        bias: Option<&Self::Val>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self::Val>;
    fn softmax(&mut self, x: &Self::Val, axis: usize) -> Result<Self::Val>;
    fn sigmoid(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn gelu(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn global_avg_pool(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn trilinear_upsample(&mut self, x: &Self::Val, factors: [usize; 3]) -> Result<Self::Val>;
    /// Batch norm over the channel axis. Train mode computes batch moments
    /// and returns them (mean, biased variance) so the caller can update its
    /// running statistics; eval mode consumes the provided running stats.
    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
        eps: T,
    ) -> Result<(Self::Val, Option<(Tensor<T>, Tensor<T>)>)>;
    /// Band aggregation `out[...,i,c] = sum_j attn[i,j] x[...,j,c]`.
    fn band_mix(&mut self, x: &Self::Val, attn: &Self::Val) -> Result<Self::Val>;
    /// Same contraction through the band/channel-swapped fast layout.
    fn band_mix_fast(&mut self, x: &Self::Val, attn: &Self::Val) -> Result<Self::Val>;
    fn slice_last(&mut self, x: &Self::Val, start: usize, len: usize) -> Result<Self::Val>;
    fn sum_all(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn mean_all(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sqrt_eps(&mut self, x: &Self::Val, eps: T) -> Result<Self::Val>;
}

/// Direct evaluator: ops compute eagerly and keep nothing. Also keeps a
/// running estimate of arithmetic operations, which the complexity probes
/// read.
#[derive(Default)]
pub struct Eval {
    arith_ops: u64,
}

impl Eval {
    pub fn new() -> Self {
        Eval::default()
    }

    /// Arithmetic operations accumulated since construction or reset.
    pub fn arith_ops(&self) -> u64 {
        self.arith_ops
    }

    pub fn reset_arith_ops(&mut self) {
        self.arith_ops = 0;
    }
}

impl<T: Scalar> Ops<T> for Eval {
    type Val = Tensor<T>;

    fn leaf(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn tensor(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(a.numel());
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(a.numel());
        kernels::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(a.numel());
        kernels::mul(a, b)
    }

    fn scale(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(a.numel());
        Ok(kernels::scale(a, c))
    }

    fn add_bias(&mut self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(x.numel());
        kernels::add_bias(x, b)
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let out = kernels::matmul(a, b)?;
        self.arith_ops += cost::matmul(a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(out)
    }

    fn transpose2(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::transpose2(a)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshaped(shape)
    }

    fn conv3d(
        &mut self,
        x: &Tensor<T>,
        k: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<T>> {
        let out = kernels::conv3d(x, k, bias, stride, pad)?;
        let ks = k.shape();
        self.arith_ops += cost::conv3d(out.numel(), ks[0], ks[1], ks[2], ks[3]);
        Ok(out)
    }

    fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        self.arith_ops += cost::softmax(x.numel());
        kernels::softmax(x, axis)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::activation(x.numel());
        Ok(kernels::sigmoid(x))
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::activation(x.numel());
        Ok(kernels::gelu(x))
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::pool(x.numel());
        kernels::global_avg_pool(x)
    }

    fn trilinear_upsample(&mut self, x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
        let out = kernels::trilinear_upsample(x, factors)?;
        self.arith_ops += cost::upsample(out.numel());
        Ok(out)
    }

    fn batch_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
        eps: T,
    ) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        self.arith_ops += cost::batch_norm(x.numel());
        match mode {
            Mode::Train => {
                let (y, _, mean, var) = kernels::bn_train(x, gamma, beta, eps)?;
                let c = mean.len();
                Ok((
                    y,
                    Some((
                        Tensor::from_vec(&[c], mean)?,
                        Tensor::from_vec(&[c], var)?,
                    )),
                ))
            }
            Mode::Eval => {
                let (y, _) = kernels::bn_eval(x, gamma, beta, running_mean, running_var, eps)?;
                Ok((y, None))
            }
        }
    }

    fn band_mix(&mut self, x: &Tensor<T>, attn: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        self.arith_ops += cost::band_mix(s[0] * s[1], s[2], s[3]);
        kernels::band_mix(x, attn)
    }

    fn band_mix_fast(&mut self, x: &Tensor<T>, attn: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        self.arith_ops += cost::band_mix(s[0] * s[1], s[2], s[3]);
        kernels::band_mix_fast(x, attn)
    }

    fn slice_last(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        kernels::slice_last(x, start, len)
    }

    fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(x.numel());
        Ok(kernels::sum_all(x))
    }

    fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(x.numel());
        Ok(kernels::mean_all(x))
    }

    fn sqrt_eps(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        self.arith_ops += cost::elementwise(x.numel());
        Ok(kernels::sqrt_eps(x, eps))
    }
}
