//! The executable gradient-verification suite.
//!
//! Every differentiable operation and every layer is driven twice with the
//! same weighted-sum objective: once on the tape (analytic reverse-mode
//! gradients) and once through central finite differences in double
//! precision. The two must agree within [`TOLERANCE`] under the floored
//! relative error of [`crate::tensor::fdiff`]. The same forward body serves
//! both runs via [`Ops`], so a disagreement always points at a backward
//! kernel.

use std::time::Instant;

use rand::Rng;

use crate::blocks::{
    AttnMode, ForwardEnv, GssaLayer, S3ConvLayer, S3ConvVariant, SmFfnLayer, TransformerBlock,
};
use crate::error::{Error, Result};
use crate::network::{build_model, HsdtConfig};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::{stream, LANE_GLOBAL};
use crate::tensor::fdiff::{finite_diff_grad, max_rel_error};
use crate::tensor::ops::{Eval, Ops};
use crate::tensor::tape::Tape;
use crate::tensor::{Mode, Tensor};

/// Maximum allowed floored relative error between analytic and numeric.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step (double precision).
pub const FD_STEP: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub millis: u128,
}

/// True when every check passed.
pub fn all_pass(results: &[CheckResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.pass)
}

/// Stable line-oriented report, one line per check plus a summary.
pub fn report_text(results: &[CheckResult]) -> String {
    let mut out = String::from("gradcheck v1\n");
    for r in results {
        out.push_str(&format!(
            "{}: max_rel={:.3e} {} ({}ms)\n",
            r.name,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" },
            r.millis
        ));
    }
    let passed = results.iter().filter(|r| r.pass).count();
    out.push_str(&format!(
        "suite: {passed}/{} within {TOLERANCE:.0e}\n",
        results.len()
    ));
    out
}

fn timed(name: &str, body: impl FnOnce() -> Result<f64>) -> Result<CheckResult> {
    let t0 = Instant::now();
    let max_rel_err = body()?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err,
        pass: max_rel_err < TOLERANCE,
        millis: t0.elapsed().as_millis(),
    })
}

/// Deterministic pseudo-random tensor in `[-1, 1]`.
fn seeded(shape: &[usize], lane: u64) -> Result<Tensor<f64>> {
    let mut rng = stream(41, LANE_GLOBAL + 910 + lane);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Strictly positive pseudo-random tensor, for scale-like parameters.
fn seeded_pos(shape: &[usize], lane: u64) -> Result<Tensor<f64>> {
    Ok(seeded(shape, lane)?.map(|v| 0.75 + 0.25 * v))
}

// --------------------------------------------------------------- op cases

/// Primitive-operation cases: inputs are all differentiated directly.
enum OpCase {
    Conv3d { stride: [usize; 3], pad: [usize; 3], kd: usize },
    Matmul,
    Softmax,
    Sigmoid,
    Gelu,
    Pool,
    Upsample,
    BnTrain,
    BandMix { fast: bool },
    SqrtLoss,
}

impl OpCase {
    fn name(&self) -> String {
        match self {
            OpCase::Conv3d { stride: [1, 1, 1], kd: 1, .. } => "op conv3d".into(),
            OpCase::Conv3d { kd: 1, .. } => "op conv3d strided".into(),
            OpCase::Conv3d { .. } => "op conv3d spectral".into(),
            OpCase::Matmul => "op matmul".into(),
            OpCase::Softmax => "op softmax".into(),
            OpCase::Sigmoid => "op sigmoid".into(),
            OpCase::Gelu => "op gelu".into(),
            OpCase::Pool => "op global_avg_pool".into(),
            OpCase::Upsample => "op trilinear_upsample".into(),
            OpCase::BnTrain => "op batch_norm train".into(),
            OpCase::BandMix { fast: false } => "op band_mix".into(),
            OpCase::BandMix { fast: true } => "op band_mix fast".into(),
            OpCase::SqrtLoss => "op sqrt-mse loss".into(),
        }
    }

    fn inputs(&self) -> Result<Vec<Tensor<f64>>> {
        Ok(match self {
            OpCase::Conv3d { kd, .. } => vec![
                seeded(&[4, 4, 3, 2], 0)?,
                seeded(&[3, 3, *kd, 2, 3], 1)?,
                seeded(&[3], 2)?,
            ],
            OpCase::Matmul => vec![seeded(&[3, 4], 3)?, seeded(&[4, 2], 4)?],
            OpCase::Softmax => vec![seeded(&[4, 4], 5)?],
            OpCase::Sigmoid => vec![seeded(&[2, 3, 2, 2], 6)?],
            OpCase::Gelu => vec![seeded(&[2, 3, 2, 2], 7)?],
            OpCase::Pool => vec![seeded(&[4, 4, 3, 2], 8)?],
            OpCase::Upsample => vec![seeded(&[2, 3, 2, 2], 9)?],
            OpCase::BnTrain => {
                vec![seeded(&[3, 3, 2, 2], 10)?, seeded_pos(&[2], 11)?, seeded(&[2], 12)?]
            }
            OpCase::BandMix { .. } => vec![seeded(&[4, 4, 3, 2], 13)?, seeded(&[3, 3], 14)?],
            OpCase::SqrtLoss => vec![seeded(&[3, 2, 2], 15)?, seeded(&[3, 2, 2], 16)?],
        })
    }

    fn run<R: Ops<f64>>(&self, rt: &mut R, xs: &[R::Val]) -> Result<R::Val> {
        match self {
            OpCase::Conv3d { stride, pad, .. } => {
                rt.conv3d(&xs[0], &xs[1], Some(&xs[2]), *stride, *pad)
            }
            OpCase::Matmul => rt.matmul(&xs[0], &xs[1]),
            OpCase::Softmax => rt.softmax(&xs[0], 1),
            OpCase::Sigmoid => rt.sigmoid(&xs[0]),
            OpCase::Gelu => rt.gelu(&xs[0]),
            OpCase::Pool => rt.global_avg_pool(&xs[0]),
            OpCase::Upsample => rt.trilinear_upsample(&xs[0], [2, 2, 1]),
            OpCase::BnTrain => {
                let mean = Tensor::zeros(&[2])?;
                let var = Tensor::full(&[2], 1.0)?;
                let (out, _) =
                    rt.batch_norm(&xs[0], &xs[1], &xs[2], &mean, &var, Mode::Train, 1e-5)?;
                Ok(out)
            }
            OpCase::BandMix { fast: false } => rt.band_mix(&xs[0], &xs[1]),
            OpCase::BandMix { fast: true } => rt.band_mix_fast(&xs[0], &xs[1]),
            OpCase::SqrtLoss => {
                let diff = rt.sub(&xs[0], &xs[1])?;
                let sq = rt.mul(&diff, &diff)?;
                let mse = rt.mean_all(&sq)?;
                rt.sqrt_eps(&mse, 1e-12)
            }
        }
    }
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::Conv3d { stride: [1, 1, 1], pad: [1, 1, 0], kd: 1 },
        OpCase::Conv3d { stride: [2, 2, 1], pad: [1, 1, 0], kd: 1 },
        OpCase::Conv3d { stride: [1, 1, 1], pad: [0, 0, 1], kd: 3 },
        OpCase::Matmul,
        OpCase::Softmax,
        OpCase::Sigmoid,
        OpCase::Gelu,
        OpCase::Pool,
        OpCase::Upsample,
        OpCase::BnTrain,
        OpCase::BandMix { fast: false },
        OpCase::BandMix { fast: true },
        OpCase::SqrtLoss,
    ]
}

/// Analytic-vs-numeric error for one primitive case under the weighted-sum
/// objective `J = Σ w ⊙ f(xs)` with fixed seeded weights.
fn op_case_err(case: &OpCase) -> Result<f64> {
    let inputs = case.inputs()?;

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = case.run(&mut tape, &vars)?;
    let weights = seeded(&tape.shape(&out), 99)?;
    let wl = tape.leaf(weights.clone());
    let prod = tape.mul(&out, &wl)?;
    let obj = tape.sum_all(&prod)?;
    let grads = tape.backward(obj)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(t.shape()),
        })
        .collect::<Result<_>>()?;

    let numeric = finite_diff_grad(
        &inputs,
        |ins| {
            let mut rt = Eval::new();
            let vals: Vec<_> = ins.iter().map(|t| rt.leaf(t.clone())).collect();
            let out = case.run(&mut rt, &vals)?;
            let wl = rt.leaf(weights.clone());
            let prod = rt.mul(&out, &wl)?;
            rt.sum_all(&prod)
        },
        FD_STEP,
    )?;

    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max))
}

// ------------------------------------------------------------ layer cases

/// A layer forward body runnable under any runtime.
trait LayerForward {
    fn run<R: Ops<f64>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        env: &mut ForwardEnv<'_, f64>,
        x: &R::Val,
    ) -> Result<R::Val>;
}

struct S3Fwd<'l>(&'l S3ConvLayer);
impl LayerForward for S3Fwd<'_> {
    fn run<R: Ops<f64>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        _env: &mut ForwardEnv<'_, f64>,
        x: &R::Val,
    ) -> Result<R::Val> {
        self.0.forward(rt, bound, x)
    }
}

struct GssaFwd<'l> {
    layer: &'l GssaLayer,
    mode: AttnMode,
    fast: bool,
}
impl LayerForward for GssaFwd<'_> {
    fn run<R: Ops<f64>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        _env: &mut ForwardEnv<'_, f64>,
        x: &R::Val,
    ) -> Result<R::Val> {
        Ok(self.layer.forward(rt, bound, x, self.mode, self.fast)?.0)
    }
}

struct FfnFwd<'l>(&'l SmFfnLayer);
impl LayerForward for FfnFwd<'_> {
    fn run<R: Ops<f64>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        _env: &mut ForwardEnv<'_, f64>,
        x: &R::Val,
    ) -> Result<R::Val> {
        self.0.forward(rt, bound, x)
    }
}

struct BlockFwd<'l>(&'l TransformerBlock);
impl LayerForward for BlockFwd<'_> {
    fn run<R: Ops<f64>>(
        &self,
        rt: &mut R,
        bound: &Bound<R::Val>,
        env: &mut ForwardEnv<'_, f64>,
        x: &R::Val,
    ) -> Result<R::Val> {
        self.0.forward(rt, bound, env, x)
    }
}

/// Error for a layer case: the input and every listed parameter are
/// differentiated; the rest of the store stays constant.
fn layer_case_err<F: LayerForward>(
    store: &ParamStore<f64>,
    fwd: &F,
    x: &Tensor<f64>,
    check_ids: &[ParamId],
    mode: Mode,
    attn: AttnMode,
) -> Result<f64> {
    let mut inputs = vec![x.clone()];
    inputs.extend(check_ids.iter().map(|&id| store.get(id).clone()));

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.param(x.clone());
    let mut env = ForwardEnv::new(store, mode, attn);
    let out = fwd.run(&mut tape, &bound, &mut env, &xv)?;
    let weights = seeded(&tape.shape(&out), 101)?;
    let wl = tape.leaf(weights.clone());
    let prod = tape.mul(&out, &wl)?;
    let obj = tape.sum_all(&prod)?;
    let grads = tape.backward(obj)?;

    let mut analytic = Vec::with_capacity(inputs.len());
    analytic.push(match grads.get(xv) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.shape())?,
    });
    for &id in check_ids {
        analytic.push(match grads.get(*bound.get(id)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.get(id).shape())?,
        });
    }

    let numeric = finite_diff_grad(
        &inputs,
        |ins| {
            let mut s = store.clone();
            for (i, &id) in check_ids.iter().enumerate() {
                s.set(id, ins[1 + i].clone())?;
            }
            let mut rt = Eval::new();
            let bound = s.bind(&mut rt);
            let mut env = ForwardEnv::new(&s, mode, attn);
            let xv = rt.leaf(ins[0].clone());
            let out = fwd.run(&mut rt, &bound, &mut env, &xv)?;
            let wl = rt.leaf(weights.clone());
            let prod = rt.mul(&out, &wl)?;
            rt.sum_all(&prod)
        },
        FD_STEP,
    )?;

    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max))
}

fn s3conv_check(variant: S3ConvVariant, stride: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = stream(42, LANE_GLOBAL + 920);
    let layer = S3ConvLayer::new(&mut store, &mut rng, "s3", variant, 2, 3, stride)?;
    let ids = store.trainable_ids();
    let x = seeded(&[4, 4, 3, 2], 20)?;
    layer_case_err(&store, &S3Fwd(&layer), &x, &ids, Mode::Eval, AttnMode::SelfAttn)
}

fn gssa_check(mode: AttnMode, fast: bool) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = stream(43, LANE_GLOBAL + 921);
    let layer = GssaLayer::new(&mut store, &mut rng, "gssa", 3, 3)?;
    let ids = store.trainable_ids();
    let x = seeded(&[3, 3, 3, 3], 21)?;
    layer_case_err(&store, &GssaFwd { layer: &layer, mode, fast }, &x, &ids, Mode::Eval, mode)
}

fn smffn_check() -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = stream(44, LANE_GLOBAL + 922);
    let layer = SmFfnLayer::new(&mut store, &mut rng, "ffn", 3)?;
    let ids = store.trainable_ids();
    let x = seeded(&[3, 3, 2, 3], 22)?;
    layer_case_err(&store, &FfnFwd(&layer), &x, &ids, Mode::Eval, AttnMode::SelfAttn)
}

fn block_check() -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = stream(45, LANE_GLOBAL + 923);
    let block = TransformerBlock::new(
        &mut store,
        &mut rng,
        "blk",
        S3ConvVariant::Parallel2,
        2,
        3,
        1,
        3,
    )?;
    // A representative parameter from each sub-layer, plus the input.
    let ids: Vec<ParamId> = ["blk.s3conv.spatial1.kernel", "blk.bn.gamma", "blk.gssa.value.weight", "blk.smffn.w1.weight"]
        .iter()
        .map(|n| store.find(n).ok_or_else(|| Error::MissingTensor((*n).into())))
        .collect::<Result<_>>()?;
    let x = seeded(&[4, 4, 3, 2], 23)?;
    layer_case_err(&store, &BlockFwd(&block), &x, &ids, Mode::Train, AttnMode::SelfAttn)
}

/// Full-network check on an `[8, 8, 4]` cube: gradients of a spread of
/// parameters (head conv, an encoder's norm, a decoder's FFN, the tail)
/// through the entire forward graph in train mode.
fn model_check() -> Result<f64> {
    let config = HsdtConfig::small().with_base_channels(4).with_d_train(4);
    let (model, mut store) = build_model::<f64>(&config, 11)?;
    let hsi = crate::train::synth::low_rank_hsi::<f64>(8, 8, 4, 2, 13)?;

    // The tail kernel is zero at init, which would short every upstream
    // gradient to exactly zero; check at a generic point instead.
    let tail = store.find("tail.0.conv.kernel").ok_or_else(|| Error::MissingTensor("tail.0.conv.kernel".into()))?;
    let shape = store.get(tail).shape().to_vec();
    store.set(tail, seeded(&shape, 103)?)?;

    let want = [
        "head.0.s3conv.spatial1.kernel",
        "encoder.0.bn.gamma",
        "encoder.1.gssa.post.bias",
        "decoder.1.smffn.w1.weight",
        "tail.0.conv.kernel",
    ];
    let ids: Vec<ParamId> = want
        .iter()
        .map(|n| store.find(n).ok_or_else(|| Error::MissingTensor((*n).into())))
        .collect::<Result<_>>()?;

    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let mut env = ForwardEnv::new(&store, Mode::Train, AttnMode::SelfAttn);
    let out = model.forward(&mut tape, &bound, &mut env, &hsi, None)?;
    let weights = seeded(&tape.shape(&out), 102)?;
    let wl = tape.leaf(weights.clone());
    let prod = tape.mul(&out, &wl)?;
    let obj = tape.sum_all(&prod)?;
    let grads = tape.backward(obj)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| match grads.get(*bound.get(id)) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(store.get(id).shape()),
        })
        .collect::<Result<_>>()?;

    let numeric = finite_diff_grad(
        &inputs,
        |ins| {
            let mut s = store.clone();
            for (i, &id) in ids.iter().enumerate() {
                s.set(id, ins[i].clone())?;
            }
            let mut rt = Eval::new();
            let bound = s.bind(&mut rt);
            let mut env = ForwardEnv::new(&s, Mode::Train, AttnMode::SelfAttn);
            let out = model.forward(&mut rt, &bound, &mut env, &hsi, None)?;
            let wl = rt.leaf(weights.clone());
            let prod = rt.mul(&out, &wl)?;
            rt.sum_all(&prod)
        },
        FD_STEP,
    )?;

    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max))
}

/// Run every check. Order is stable: primitives, S3Conv variants, attention,
/// feed-forward, one full block, the full model.
pub fn run_full_suite() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for case in op_cases() {
        results.push(timed(&case.name(), || op_case_err(&case))?);
    }
    for (label, variant, stride) in [
        ("layer s3conv parallel2", S3ConvVariant::Parallel2, 1),
        ("layer s3conv parallel2 strided", S3ConvVariant::Parallel2, 2),
        ("layer s3conv single-spatial", S3ConvVariant::SingleSpatial, 1),
        ("layer s3conv sequential", S3ConvVariant::Sequential, 1),
        ("layer s3conv dense3d", S3ConvVariant::Dense3d, 1),
    ] {
        results.push(timed(label, || s3conv_check(variant, stride))?);
    }
    results.push(timed("layer gssa self", || gssa_check(AttnMode::SelfAttn, false))?);
    results.push(timed("layer gssa cross", || gssa_check(AttnMode::CrossAttn, false))?);
    results.push(timed("layer gssa fast", || gssa_check(AttnMode::SelfAttn, true))?);
    results.push(timed("layer sm-ffn", || smffn_check())?);
    results.push(timed("layer block train", || block_check())?);
    results.push(timed("model 8x8x4", model_check)?);
    Ok(results)
}
