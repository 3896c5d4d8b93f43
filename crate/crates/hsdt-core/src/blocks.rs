//! Network building blocks: separable spatial-spectral convolutions, batch
//! norm, guided spectral self-attention, and the self-modulated feed-forward
//! layer, composed into the transformer block the full network stacks.
//!
//! Layers own [`ParamId`]s into a [`ParamStore`] rather than tensors, so the
//! same layer definition runs under any [`Ops`] runtime (eager evaluation or
//! the autodiff tape). Forward passes thread a [`ForwardEnv`] that carries
//! the store, train/eval mode, the attention mode, and collected batch-norm
//! statistics updates.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{normal, uniform_fanin, Bound, ParamId, ParamStore};
use crate::tensor::ops::Ops;
use crate::tensor::{Mode, Scalar, Tensor};

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic folded into the running statistic per
/// training forward.
pub const BN_MOMENTUM: f64 = 0.1;

/// Which query source drives the spectral attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Queries are the pooled keys themselves; works for any band count.
    SelfAttn,
    /// Queries are learned; input band count must equal the layer's
    /// configured training band count.
    CrossAttn,
}

/// Convolution flavors selectable for every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum S3ConvVariant {
    /// Two stacked spatial convolutions in parallel with a spectral one.
    #[default]
    Parallel2,
    /// One spatial convolution in parallel with a spectral one.
    SingleSpatial,
    /// Spectral convolution composed after the spatial one.
    Sequential,
    /// Plain dense 3-D convolution baseline.
    Dense3d,
}

/// Anything that can enumerate the trainable parameters it owns.
pub trait HasParams {
    fn param_ids(&self) -> Vec<ParamId>;
}

/// Total trainable scalar count of a layer.
pub fn count_params<T: Scalar>(store: &ParamStore<T>, layer: &impl HasParams) -> usize {
    layer.param_ids().iter().map(|&id| store.get(id).numel()).sum()
}

/// Per-forward context shared by every block in a model pass.
pub struct ForwardEnv<'s, T: Scalar> {
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    pub attn: AttnMode,
    /// Route band aggregation through the transposed fast layout.
    pub fast_gssa: bool,
    /// Running-statistic updates produced by train-mode batch norms; apply
    /// to the store after the pass with [`ForwardEnv::take_bn_updates`].
    pub bn_updates: Vec<(ParamId, Tensor<T>)>,
    /// When present, every attention layer pushes its `[D, D]` map here.
    pub attn_probe: Option<Vec<(String, Tensor<T>)>>,
}

impl<'s, T: Scalar> ForwardEnv<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, attn: AttnMode) -> Self {
        ForwardEnv {
            store,
            mode,
            attn,
            fast_gssa: true,
            bn_updates: Vec::new(),
            attn_probe: None,
        }
    }

    /// Enable attention-map collection.
    pub fn probing(mut self) -> Self {
        self.attn_probe = Some(Vec::new());
        self
    }

    /// Drain collected running-statistic updates so the caller can commit
    /// them once it holds the store mutably again.
    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// A 3-D convolution with bias, fixed stride, and fixed zero padding.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Conv3dLayer {
    /// Uniform fan-in initialization; `kshape` is `[kh, kw, kd, cin, cout]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kshape: [usize; 5],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let fan_in = kshape[0] * kshape[1] * kshape[2] * kshape[3];
        let kernel = uniform_fanin(rng, &kshape, fan_in)?;
        let bias = uniform_fanin(rng, &[kshape[4]], fan_in)?;
        Ok(Conv3dLayer {
            kernel: store.add(format!("{name}.kernel"), kernel, true)?,
            bias: store.add(format!("{name}.bias"), bias, true)?,
            stride,
            pad,
        })
    }

    /// All-zero kernel and bias; used by the residual output head so a fresh
    /// model is exactly the identity.
    pub fn new_zero<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kshape: [usize; 5],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        Ok(Conv3dLayer {
            kernel: store.add(format!("{name}.kernel"), Tensor::zeros(&kshape)?, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[kshape[4]])?, true)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        x: &R::Val,
    ) -> Result<R::Val> {
        rt.conv3d(
            x,
            bound.get(self.kernel),
            Some(bound.get(self.bias)),
            self.stride,
            self.pad,
        )
    }
}

impl HasParams for Conv3dLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.kernel, self.bias]
    }
}

/// A per-position linear map over the channel axis (a 1x1x1 convolution,
/// stored as a `[cin, cout]` matrix).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
    cin: usize,
    cout: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let weight = uniform_fanin(rng, &[cin, cout], cin)?;
        let bias = uniform_fanin(rng, &[cout], cin)?;
        Ok(LinearLayer {
            weight: store.add(format!("{name}.weight"), weight, true)?,
            bias: store.add(format!("{name}.bias"), bias, true)?,
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        x: &R::Val,
    ) -> Result<R::Val> {
        let shape = rt.shape(x);
        let (&last, lead) = shape.split_last().ok_or_else(|| {
            Error::contract("linear", "input must have at least one axis")
        })?;
        if last != self.cin {
            return Err(Error::contract(
                "linear",
                format!("expected {} channels, got {last}", self.cin),
            ));
        }
        let rows: usize = lead.iter().product();
        let flat = rt.reshape(x, &[rows, self.cin])?;
        let prod = rt.matmul(&flat, bound.get(self.weight))?;
        let biased = rt.add_bias(&prod, bound.get(self.bias))?;
        let mut out_shape = lead.to_vec();
        out_shape.push(self.cout);
        rt.reshape(&biased, &out_shape)
    }
}

impl HasParams for LinearLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

enum S3Paths {
    Parallel2 {
        spatial1: Conv3dLayer,
        spatial2: Conv3dLayer,
        spectral: Conv3dLayer,
    },
    SingleSpatial {
        spatial: Conv3dLayer,
        spectral: Conv3dLayer,
    },
    Sequential {
        spatial: Conv3dLayer,
        spectral: Conv3dLayer,
    },
    Dense3d {
        conv: Conv3dLayer,
    },
}

/// Separable spatial-spectral convolution in one of four wirings. Spatial
/// kernels are `3x3x1`, spectral kernels `1x1x3`; downsampling strides apply
/// to the spatial axes only, so the band axis always keeps its extent.
pub struct S3ConvLayer {
    paths: S3Paths,
}

impl S3ConvLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        variant: S3ConvVariant,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let s = [stride, stride, 1];
        let spatial_shape = |ci: usize| [3, 3, 1, ci, cout];
        let spectral_shape = [1, 1, 3, cin, cout];
        let paths = match variant {
            S3ConvVariant::Parallel2 => S3Paths::Parallel2 {
                spatial1: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial1"),
                    spatial_shape(cin),
                    s,
                    [1, 1, 0],
                )?,
                spatial2: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial2"),
                    spatial_shape(cout),
                    [1, 1, 1],
                    [1, 1, 0],
                )?,
                spectral: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spectral"),
                    spectral_shape,
                    s,
                    [0, 0, 1],
                )?,
            },
            S3ConvVariant::SingleSpatial => S3Paths::SingleSpatial {
                spatial: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial1"),
                    spatial_shape(cin),
                    s,
                    [1, 1, 0],
                )?,
                spectral: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spectral"),
                    spectral_shape,
                    s,
                    [0, 0, 1],
                )?,
            },
            S3ConvVariant::Sequential => S3Paths::Sequential {
                spatial: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial1"),
                    spatial_shape(cin),
                    s,
                    [1, 1, 0],
                )?,
                spectral: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.spectral"),
                    [1, 1, 3, cout, cout],
                    [1, 1, 1],
                    [0, 0, 1],
                )?,
            },
            S3ConvVariant::Dense3d => S3Paths::Dense3d {
                conv: Conv3dLayer::new(
                    store,
                    rng,
                    &format!("{name}.conv"),
                    [3, 3, 3, cin, cout],
                    s,
                    [1, 1, 1],
                )?,
            },
        };
        Ok(S3ConvLayer { paths })
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        x: &R::Val,
    ) -> Result<R::Val> {
        match &self.paths {
            S3Paths::Parallel2 { spatial1, spatial2, spectral } => {
                let a = spatial1.forward(rt, bound, x)?;
                let a = spatial2.forward(rt, bound, &a)?;
                let b = spectral.forward(rt, bound, x)?;
                rt.add(&a, &b)
            }
            S3Paths::SingleSpatial { spatial, spectral } => {
                let a = spatial.forward(rt, bound, x)?;
                let b = spectral.forward(rt, bound, x)?;
                rt.add(&a, &b)
            }
            S3Paths::Sequential { spatial, spectral } => {
                let a = spatial.forward(rt, bound, x)?;
                spectral.forward(rt, bound, &a)
            }
            S3Paths::Dense3d { conv } => conv.forward(rt, bound, x),
        }
    }
}

impl HasParams for S3ConvLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        match &self.paths {
            S3Paths::Parallel2 { spatial1, spatial2, spectral } => {
                let mut ids = spatial1.param_ids();
                ids.extend(spatial2.param_ids());
                ids.extend(spectral.param_ids());
                ids
            }
            S3Paths::SingleSpatial { spatial, spectral }
            | S3Paths::Sequential { spatial, spectral } => {
                let mut ids = spatial.param_ids();
                ids.extend(spectral.param_ids());
                ids
            }
            S3Paths::Dense3d { conv } => conv.param_ids(),
        }
    }
}

/// Channel-wise batch normalization with running statistics.
pub struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BnLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let ones = Tensor::full(&[channels], T::ONE)?;
        let zeros = Tensor::zeros(&[channels])?;
        Ok(BnLayer {
            gamma: store.add(format!("{name}.gamma"), ones.clone(), true)?,
            beta: store.add(format!("{name}.beta"), zeros.clone(), true)?,
            running_mean: store.add(format!("{name}.running_mean"), zeros, false)?,
            running_var: store.add(format!("{name}.running_var"), ones, false)?,
        })
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        env: &mut ForwardEnv<'_, T>,
        x: &R::Val,
    ) -> Result<R::Val> {
        let (y, moments) = rt.batch_norm(
            x,
            bound.get(self.gamma),
            bound.get(self.beta),
            env.store.get(self.running_mean),
            env.store.get(self.running_var),
            env.mode,
            T::from_f64(BN_EPS),
        )?;
        if let Some((mean, var)) = moments {
            let keep = T::from_f64(1.0 - BN_MOMENTUM);
            let take = T::from_f64(BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &Tensor<T>| {
                old.zip_map(new, |o, n| keep * o + take * n)
            };
            let rm = blend(env.store.get(self.running_mean), &mean)?;
            let rv = blend(env.store.get(self.running_var), &var)?;
            env.bn_updates.push((self.running_mean, rm));
            env.bn_updates.push((self.running_var, rv));
        }
        Ok(y)
    }
}

impl HasParams for BnLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Guided spectral self-attention. Values are a per-position channel map of
/// the input; keys are the spatially pooled `[D, C]` summary; queries are
/// either that same summary (self mode) or a learned `[d_train, C]` table
/// (cross mode). The `[D, D]` attention mixes whole bands, and the layer
/// output carries a residual connection to its input.
pub struct GssaLayer {
    value: LinearLayer,
    post: LinearLayer,
    queries: ParamId,
    d_train: usize,
}

impl GssaLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        d_train: usize,
    ) -> Result<Self> {
        let value = LinearLayer::new(store, rng, &format!("{name}.value"), channels, channels)?;
        let post = LinearLayer::new(store, rng, &format!("{name}.post"), channels, channels)?;
        let std = 1.0 / (channels as f64).sqrt();
        let queries = normal(rng, &[d_train, channels], std)?;
        Ok(GssaLayer {
            value,
            post,
            queries: store.add(format!("{name}.queries"), queries, true)?,
            d_train,
        })
    }

    /// Returns the layer output and the `[D, D]` attention map.
    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        x: &R::Val,
        mode: AttnMode,
        fast: bool,
    ) -> Result<(R::Val, R::Val)> {
        let shape = rt.shape(x);
        if shape.len() != 4 {
            return Err(Error::contract("gssa", "input must be [H, W, D, C]"));
        }
        let bands = shape[2];
        let v = self.value.forward(rt, bound, x)?;
        let keys = rt.global_avg_pool(x)?;
        let queries = match mode {
            AttnMode::SelfAttn => keys.clone(),
            AttnMode::CrossAttn => {
                if bands != self.d_train {
                    return Err(Error::BandCount { expected: self.d_train, got: bands });
                }
                bound.get(self.queries).clone()
            }
        };
        let keys_t = rt.transpose2(&keys)?;
        let logits = rt.matmul(&queries, &keys_t)?;
        let attn = rt.softmax(&logits, 1)?;
        let mixed = if fast {
            rt.band_mix_fast(&v, &attn)?
        } else {
            rt.band_mix(&v, &attn)?
        };
        let projected = self.post.forward(rt, bound, &mixed)?;
        let out = rt.add(&projected, x)?;
        Ok((out, attn))
    }

    /// Eager convenience: just the attention map for one input.
    pub fn attention_map<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mode: AttnMode,
    ) -> Result<Tensor<T>> {
        let mut rt = crate::tensor::ops::Eval::new();
        let bound = store.bind(&mut rt);
        let leaf = rt.leaf(x.clone());
        let (_, attn) = self.forward(&mut rt, &bound, &leaf, mode, true)?;
        Ok(attn)
    }
}

impl HasParams for GssaLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.value.param_ids();
        ids.extend(self.post.param_ids());
        ids.push(self.queries);
        ids
    }
}

/// Self-modulated feed-forward layer: a gated branch `F * sigmoid(W)` (with
/// `[F | W]` split from one widening projection) added to a conventional
/// GELU MLP branch.
pub struct SmFfnLayer {
    w3: LinearLayer,
    w2: LinearLayer,
    w1: LinearLayer,
    channels: usize,
}

impl SmFfnLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(SmFfnLayer {
            w3: LinearLayer::new(store, rng, &format!("{name}.w3"), channels, 2 * channels)?,
            w2: LinearLayer::new(store, rng, &format!("{name}.w2"), channels, 2 * channels)?,
            w1: LinearLayer::new(store, rng, &format!("{name}.w1"), 2 * channels, channels)?,
            channels,
        })
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        x: &R::Val,
    ) -> Result<R::Val> {
        let split = self.w3.forward(rt, bound, x)?;
        let feat = rt.slice_last(&split, 0, self.channels)?;
        let gate = rt.slice_last(&split, self.channels, self.channels)?;
        let gated = rt.sigmoid(&gate)?;
        let modulated = rt.mul(&feat, &gated)?;
        let hidden = self.w2.forward(rt, bound, x)?;
        let act = rt.gelu(&hidden)?;
        let mlp = self.w1.forward(rt, bound, &act)?;
        rt.add(&mlp, &modulated)
    }
}

impl HasParams for SmFfnLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.w3.param_ids();
        ids.extend(self.w2.param_ids());
        ids.extend(self.w1.param_ids());
        ids
    }
}

/// One full block: convolution, batch norm, attention with residual, and the
/// modulated feed-forward (whose input adds the normalized features back in
/// a second residual).
pub struct TransformerBlock {
    name: String,
    s3conv: S3ConvLayer,
    bn: BnLayer,
    gssa: GssaLayer,
    smffn: SmFfnLayer,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        variant: S3ConvVariant,
        cin: usize,
        cout: usize,
        stride: usize,
        d_train: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            name: name.to_string(),
            s3conv: S3ConvLayer::new(
                store,
                rng,
                &format!("{name}.s3conv"),
                variant,
                cin,
                cout,
                stride,
            )?,
            bn: BnLayer::new(store, &format!("{name}.bn"), cout)?,
            gssa: GssaLayer::new(store, rng, &format!("{name}.gssa"), cout, d_train)?,
            smffn: SmFfnLayer::new(store, rng, &format!("{name}.smffn"), cout)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn gssa(&self) -> &GssaLayer {
        &self.gssa
    }

    pub fn forward<T: Scalar, R: Ops<T>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        env: &mut ForwardEnv<'_, T>,
        x: &R::Val,
    ) -> Result<R::Val> {
        let conv = self.s3conv.forward(rt, bound, x)?;
        let normed = self.bn.forward(rt, bound, env, &conv)?;
        let (attended, attn) = self.gssa.forward(rt, bound, &normed, env.attn, env.fast_gssa)?;
        if let Some(probe) = env.attn_probe.as_mut() {
            probe.push((format!("{}.gssa", self.name), rt.tensor(&attn)));
        }
        let with_skip = rt.add(&attended, &normed)?;
        self.smffn.forward(rt, bound, &with_skip)
    }
}

impl HasParams for TransformerBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.s3conv.param_ids();
        ids.extend(self.bn.param_ids());
        ids.extend(self.gssa.param_ids());
        ids.extend(self.smffn.param_ids());
        ids
    }
}
