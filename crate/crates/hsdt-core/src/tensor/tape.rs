//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every recorded operation appends one node holding its output value, its
//! parent indices, and a closure computing vector–Jacobian products. Nodes
//! are appended in execution order, so the list is already topologically
//! sorted: the backward sweep is a single reverse pass with accumulation at
//! fan-out points. A tape is confined to one training step on one thread;
//! nothing here is shared.

use super::kernels;
use super::ops::Ops;
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a recorded value on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    /// `None` for leaves and constants.
    back: Option<BackFn<T>>,
    is_param: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The recorded value behind `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per
    /// recorded node; parameter leaves always get a tensor (zeros if the
    /// loss never touched them), other nodes keep `None` when unreached.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_val.shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::full(loss_val.shape(), T::ONE)?);

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].clone() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let parent_grads = back(&g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                slots[p.0] = Some(match slots[p.0].take() {
                    Some(acc) => kernels::add(&acc, &pg)?,
                    None => pg,
                });
            }
        }

        // Untouched parameters still owe their callers a gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && slots[i].is_none() {
                slots[i] = Some(Tensor::zeros(node.value.shape())?);
            }
        }
        Ok(Grads { slots })
    }
}

/// Gradients keyed by tape index.
#[derive(Debug)]
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Val = Var;

    fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Vec::new(), None)
    }

    fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Vec::new(), None);
        self.nodes[v.0].is_param = true;
        v
    }

    fn tensor(&self, v: &Var) -> Tensor<T> {
        self.value(*v).clone()
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.value(*v).shape().to_vec()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(self.value(*a), self.value(*b))?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|g| Ok(vec![g.clone(), g.clone()]))),
        ))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::sub(self.value(*a), self.value(*b))?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(|g| {
                Ok(vec![g.clone(), kernels::scale(g, T::ZERO - T::ONE)])
            })),
        ))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.tensor(a), self.tensor(b));
        let out = kernels::mul(&av, &bv)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(move |g| {
                Ok(vec![kernels::mul(g, &bv)?, kernels::mul(g, &av)?])
            })),
        ))
    }

    fn scale(&mut self, a: &Var, c: T) -> Result<Var> {
        let out = kernels::scale(self.value(*a), c);
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(move |g| Ok(vec![kernels::scale(g, c)]))),
        ))
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add_bias(self.value(*x), self.value(*b))?;
        Ok(self.push(
            out,
            vec![*x, *b],
            Some(Box::new(|g| Ok(vec![g.clone(), kernels::sum_leading(g)]))),
        ))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.tensor(a), self.tensor(b));
        let out = kernels::matmul(&av, &bv)?;
        Ok(self.push(
            out,
            vec![*a, *b],
            Some(Box::new(move |g| {
                let da = kernels::matmul(g, &kernels::transpose2(&bv)?)?;
                let db = kernels::matmul(&kernels::transpose2(&av)?, g)?;
                Ok(vec![da, db])
            })),
        ))
    }

    fn transpose2(&mut self, a: &Var) -> Result<Var> {
        let out = kernels::transpose2(self.value(*a))?;
        Ok(self.push(
            out,
            vec![*a],
            Some(Box::new(|g| Ok(vec![kernels::transpose2(g)?]))),
        ))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x);
        let out = self.value(*x).reshaped(shape)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| Ok(vec![g.reshaped(&in_shape)?]))),
        ))
    }

    fn conv3d(
        &mut self,
        x: &Var,
        k: &Var,
        bias: Option<&Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (xv, kv) = (self.tensor(x), self.tensor(k));
        let bv = bias.map(|b| self.tensor(b));
        let out = kernels::conv3d(self.value(*x), self.value(*k), bv.as_ref(), stride, pad)?;
        let mut parents = vec![*x, *k];
        if let Some(b) = bias {
            parents.push(*b);
        }
        let has_bias = bias.is_some();
        let (x_shape, k_shape) = (xv.shape().to_vec(), kv.shape().to_vec());
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut grads = vec![
                    kernels::conv3d_grad_x(g, &kv, &x_shape, stride, pad)?,
                    kernels::conv3d_grad_k(g, &xv, &k_shape, stride, pad)?,
                ];
                if has_bias {
                    grads.push(kernels::sum_leading(g));
                }
                Ok(grads)
            })),
        ))
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax(self.value(*x), axis)?;
        let yc = y.clone();
        Ok(self.push(
            y,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![kernels::softmax_grad(g, &yc, axis)?])
            })),
        ))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::sigmoid(self.value(*x));
        let yc = y.clone();
        Ok(self.push(
            y,
            vec![*x],
            Some(Box::new(move |g| Ok(vec![kernels::sigmoid_grad(g, &yc)?]))),
        ))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let xv = self.tensor(x);
        let y = kernels::gelu(&xv);
        Ok(self.push(
            y,
            vec![*x],
            Some(Box::new(move |g| Ok(vec![kernels::gelu_grad(g, &xv)?]))),
        ))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let shape = self.shape(x);
        let out = kernels::global_avg_pool(self.value(*x))?;
        let (h, w) = (shape[0], shape[1]);
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![kernels::global_avg_pool_grad(g, h, w)?])
            })),
        ))
    }

    fn trilinear_upsample(&mut self, x: &Var, factors: [usize; 3]) -> Result<Var> {
        let in_shape = self.shape(x);
        let out = kernels::trilinear_upsample(self.value(*x), factors)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![kernels::trilinear_upsample_grad(g, &in_shape, factors)?])
            })),
        ))
    }

    fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
        eps: T,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let gv = self.tensor(gamma);
        let (y, saved, moments) = match mode {
            Mode::Train => {
                let (y, saved, mean, var) = kernels::bn_train(self.value(*x), &gv, self.value(*beta), eps)?;
                let c = mean.len();
                let moments = (Tensor::from_vec(&[c], mean)?, Tensor::from_vec(&[c], var)?);
                (y, saved, Some(moments))
            }
            Mode::Eval => {
                let (y, saved) = kernels::bn_eval(
                    self.value(*x),
                    &gv,
                    self.value(*beta),
                    running_mean,
                    running_var,
                    eps,
                )?;
                (y, saved, None)
            }
        };
        let var = self.push(
            y,
            vec![*x, *gamma, *beta],
            Some(Box::new(move |g| {
                let (dx, dgamma, dbeta) = kernels::bn_grad(g, &saved, &gv)?;
                Ok(vec![dx, dgamma, dbeta])
            })),
        );
        Ok((var, moments))
    }

    fn band_mix(&mut self, x: &Var, attn: &Var) -> Result<Var> {
        let (xv, av) = (self.tensor(x), self.tensor(attn));
        let out = kernels::band_mix(&xv, &av)?;
        Ok(self.push(
            out,
            vec![*x, *attn],
            Some(Box::new(move |g| {
                let dx = kernels::band_mix(g, &kernels::transpose2(&av)?)?;
                let da = kernels::band_mix_grad_a(g, &xv)?;
                Ok(vec![dx, da])
            })),
        ))
    }

    fn band_mix_fast(&mut self, x: &Var, attn: &Var) -> Result<Var> {
        let (xv, av) = (self.tensor(x), self.tensor(attn));
        let out = kernels::band_mix_fast(&xv, &av)?;
        Ok(self.push(
            out,
            vec![*x, *attn],
            Some(Box::new(move |g| {
                let dx = kernels::band_mix_fast(g, &kernels::transpose2(&av)?)?;
                let da = kernels::band_mix_grad_a(g, &xv)?;
                Ok(vec![dx, da])
            })),
        ))
    }

    fn slice_last(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let full_last = *self.shape(x).last().unwrap_or(&0);
        let out = kernels::slice_last(self.value(*x), start, len)?;
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![kernels::slice_last_grad(g, full_last, start)?])
            })),
        ))
    }

    fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let shape = self.shape(x);
        let out = kernels::sum_all(self.value(*x));
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![Tensor::full(&shape, g.item()?)?])
            })),
        ))
    }

    fn mean_all(&mut self, x: &Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = T::from_f64(self.value(*x).numel() as f64);
        let out = kernels::mean_all(self.value(*x));
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![Tensor::full(&shape, g.item()? / n)?])
            })),
        ))
    }

    fn sqrt_eps(&mut self, x: &Var, eps: T) -> Result<Var> {
        let xv = self.tensor(x);
        let out = kernels::sqrt_eps(&xv, eps);
        Ok(self.push(
            out,
            vec![*x],
            Some(Box::new(move |g| {
                Ok(vec![kernels::sqrt_eps_grad(g, &xv, eps)?])
            })),
        ))
    }
}
