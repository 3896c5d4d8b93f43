//! Training: losses, the Adam optimizer, the staged learning-rate schedule,
//! the patch-sampling training loop, and checkpointing.
//!
//! The loop is resume-exact: every optimizer step draws its randomness from a
//! stream keyed by `(seed, global step)`, so a run that is checkpointed and
//! resumed produces bitwise-identical parameters to one that never stopped.
//! Batches are realized by gradient accumulation over single-sample forward
//! passes, which keeps peak memory at one patch regardless of batch size.

use std::io::{Read, Write};

use rand::Rng;

use crate::blocks::{AttnMode, ForwardEnv};
use crate::error::{Error, Result};
use crate::network::{
    load_weights, save_weights, wire, HsdtConfig, HsdtModel,
};
use crate::noise::{self, NoiseKind};
use crate::param::{ParamId, ParamStore};
use crate::rng::{stream, LANE_GLOBAL};
use crate::tensor::ops::Ops;
use crate::tensor::tape::Tape;
use crate::tensor::{Mode, Scalar, Tensor};

/// Magic prefix of the optimizer section appended to checkpoints.
pub const OPT_MAGIC: &[u8; 8] = b"HSDTOPT1";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Lane offset for the per-step training streams.
const LANE_TRAIN: u64 = LANE_GLOBAL + 5000;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error.
    Mse,
    /// Square root of the MSE (stabilized by a tiny epsilon); steepens the
    /// gradient near convergence and benefits from gradient clipping.
    SqrtMse,
}

/// Compose the training loss under any runtime.
pub fn loss_value<T: Scalar, R: Ops<T>>(
    rt: &mut R,
    prediction: &R::Val,
    target: &R::Val,
    kind: LossKind,
) -> Result<R::Val> {
    let diff = rt.sub(prediction, target)?;
    let sq = rt.mul(&diff, &diff)?;
    let mse = rt.mean_all(&sq)?;
    match kind {
        LossKind::Mse => Ok(mse),
        LossKind::SqrtMse => rt.sqrt_eps(&mse, T::from_f64(1e-12)),
    }
}

/// What one optimizer step did; useful for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before any clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam with bias correction, aligned to a store's trainable tensors.
pub struct AdamState<T: Scalar> {
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Result<Self> {
        let ids = store.trainable_ids();
        let zeros = |ids: &[ParamId]| -> Result<Vec<Tensor<T>>> {
            ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect()
        };
        Ok(AdamState { m: zeros(&ids)?, v: zeros(&ids)?, ids, step: 0 })
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update. `grads` must align with [`AdamState::ids`]; every gradient
    /// must be finite. `clip_norm` rescales the whole gradient vector when
    /// its global norm exceeds the bound.
    pub fn apply_step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<StepInfo> {
        if grads.len() != self.ids.len() {
            return Err(Error::contract(
                "adam",
                format!("expected {} gradients, got {}", self.ids.len(), grads.len()),
            ));
        }
        let mut sq_norm = 0.0f64;
        for (g, &id) in grads.iter().zip(self.ids.iter()) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::contract(
                    "adam",
                    format!("gradient shape mismatch for {}", store.name(id)),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    detail: store.name(id).to_string(),
                });
            }
            sq_norm += g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
        }
        let grad_norm = sq_norm.sqrt();
        let rescale = match clip_norm {
            Some(c) if grad_norm > c => Some(c / grad_norm),
            _ => None,
        };

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
        let corr1 = T::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(t)));
        let eps = T::from_f64(ADAM_EPS);
        let lr_t = T::from_f64(lr);
        let scale = rescale.map(T::from_f64);

        for (slot, (g, &id)) in grads.iter().zip(self.ids.iter()).enumerate() {
            let mut param = store.get(id).data().to_vec();
            let mut m = self.m[slot].data().to_vec();
            let mut v = self.v[slot].data().to_vec();
            for i in 0..param.len() {
                let mut gi = g.data()[i];
                if let Some(s) = scale {
                    gi = gi * s;
                }
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] * corr1;
                let v_hat = v[i] * corr2;
                param[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = g.shape();
            self.m[slot] = Tensor::from_vec(shape, m)?;
            self.v[slot] = Tensor::from_vec(shape, v)?;
            store.set(id, Tensor::from_vec(shape, param)?)?;
        }
        Ok(StepInfo { grad_norm, clipped: rescale.is_some() })
    }
}

/// One constant-rate span of the schedule, `[start, end)` in epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
    /// Ramp linearly from zero over the first epoch of this stage.
    pub warmup: bool,
}

/// A piecewise-constant learning-rate plan with optional per-stage warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    stages: Vec<Stage>,
}

impl Schedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        let mut expected_start = 0;
        for s in &stages {
            if s.start != expected_start || s.end <= s.start {
                return Err(Error::Config(format!(
                    "stages must tile the epochs contiguously; bad stage {s:?}"
                )));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("non-positive learning rate {}", s.lr)));
            }
            expected_start = s.end;
        }
        Ok(Schedule { stages })
    }

    /// The full training plan: two short stages, a long warmed-up middle
    /// descent, and a final descent restarting from the initial rate.
    pub fn standard() -> Schedule {
        let spans = [
            (0usize, 20usize, 1e-3, false),
            (20, 30, 1e-4, false),
            (30, 45, 1e-3, true),
            (45, 55, 1e-4, false),
            (55, 60, 5e-5, false),
            (60, 65, 1e-5, false),
            (65, 75, 5e-6, false),
            (75, 80, 1e-6, false),
            (80, 90, 1e-3, false),
            (90, 95, 5e-4, false),
            (95, 100, 1e-4, false),
            (100, 105, 5e-5, false),
            (105, 110, 1e-5, false),
        ];
        let stages = spans
            .into_iter()
            .map(|(start, end, lr, warmup)| Stage { start, end, lr, warmup })
            .collect();
        Schedule::new(stages).expect("the built-in table is well-formed")
    }

    /// Shrink the plan by an epoch divisor, keeping stage proportions. A
    /// stage whose span rounds to nothing is dropped.
    pub fn scaled(&self, divisor: f64) -> Result<Schedule> {
        if !(divisor >= 1.0 && divisor.is_finite()) {
            return Err(Error::Config(format!("schedule divisor {divisor} must be >= 1")));
        }
        let mut stages = Vec::new();
        let mut prev = 0usize;
        for s in &self.stages {
            let end = (s.end as f64 / divisor).round() as usize;
            if end <= prev {
                continue;
            }
            stages.push(Stage { start: prev, end, lr: s.lr, warmup: s.warmup });
            prev = end;
        }
        Schedule::new(stages)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.last().map(|s| s.end).unwrap_or(0)
    }

    /// Rate for one optimizer step. Warmup stages ramp over their first
    /// epoch, reaching the plateau on that epoch's last step.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> Result<f64> {
        if steps_per_epoch == 0 || step >= steps_per_epoch {
            return Err(Error::Config(format!(
                "step {step} outside epoch of {steps_per_epoch} steps"
            )));
        }
        let stage = self
            .stages
            .iter()
            .find(|s| (s.start..s.end).contains(&epoch))
            .ok_or_else(|| {
                Error::Config(format!(
                    "epoch {epoch} is beyond the {}-epoch schedule",
                    self.total_epochs()
                ))
            })?;
        if stage.warmup && epoch == stage.start {
            Ok(stage.lr * (step + 1) as f64 / steps_per_epoch as f64)
        } else {
            Ok(stage.lr)
        }
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

/// How training picks the attention mode each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttnPolicy {
    SelfOnly,
    CrossOnly,
    /// Cross-attention with this probability, self-attention otherwise.
    /// Cross falls back to self for samples whose band count differs from
    /// the trained one.
    Alternate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Train through the end of this epoch (exclusive bound).
    pub epochs: usize,
    /// Samples accumulated per optimizer step.
    pub batch: usize,
    /// Spatial size of sampled patches.
    pub patch: (usize, usize),
    pub loss: LossKind,
    pub clip_norm: Option<f64>,
    /// Overrides the dataset-derived steps per epoch.
    pub steps_per_epoch: Option<usize>,
    pub attn: AttnPolicy,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: Schedule::standard().total_epochs(),
            batch: 16,
            patch: (64, 64),
            loss: LossKind::Mse,
            clip_norm: None,
            steps_per_epoch: None,
            attn: AttnPolicy::Alternate(0.5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the steps this run executed in the epoch.
    pub mean_loss: f64,
    /// Rate used by the epoch's final executed step.
    pub last_lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Extract a spatial window from an `[H, W, D]` cube.
pub fn crop<T: Scalar>(
    x: &Tensor<T>,
    h0: usize,
    w0: usize,
    ph: usize,
    pw: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::contract("crop", "input must be [H, W, D]"));
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    if h0 + ph > h || w0 + pw > w || ph == 0 || pw == 0 {
        return Err(Error::contract(
            "crop",
            format!("window {ph}x{pw} at ({h0}, {w0}) exceeds {h}x{w}"),
        ));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(ph * pw * d);
    for ih in 0..ph {
        let row = (h0 + ih) * w;
        for iw in 0..pw {
            let base = (row + w0 + iw) * d;
            out.extend_from_slice(&src[base..base + d]);
        }
    }
    Tensor::from_vec(&[ph, pw, d], out)
}

/// Run (or resume) training. The loop starts at the optimizer's current step
/// count and stops at the end of `opts.epochs`, so loading a checkpoint and
/// calling this again continues the identical run.
pub fn train_loop<T: Scalar>(
    model: &HsdtModel,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    dataset: &[Tensor<T>],
    noise_kind: &NoiseKind,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if opts.epochs > schedule.total_epochs() {
        return Err(Error::Config(format!(
            "{} epochs requested but the schedule covers {}",
            opts.epochs,
            schedule.total_epochs()
        )));
    }
    let (ph, pw) = opts.patch;
    let multiple = model.config().spatial_multiple();
    if ph % multiple != 0 || pw % multiple != 0 || ph == 0 || pw == 0 {
        return Err(Error::Config(format!(
            "patch {ph}x{pw} must be a positive multiple of {multiple}"
        )));
    }
    for img in dataset {
        let shape = img.shape();
        if shape.len() != 3 {
            return Err(Error::contract("train", "dataset images must be [H, W, D]"));
        }
        if shape[0] < ph || shape[1] < pw {
            return Err(Error::Config(format!(
                "image {:?} is smaller than the {ph}x{pw} patch",
                shape
            )));
        }
    }

    let steps_per_epoch = opts
        .steps_per_epoch
        .unwrap_or_else(|| dataset.len().div_ceil(opts.batch))
        .max(1);
    let total_steps = opts.epochs * steps_per_epoch;
    let start_step = adam.step_count() as usize;
    if start_step > total_steps {
        return Err(Error::Config(format!(
            "optimizer is already at step {start_step}, beyond the requested {total_steps}"
        )));
    }

    let inv_batch = T::from_f64(1.0 / opts.batch as f64);
    let mut report = TrainReport::default();
    let mut epoch_loss = 0.0f64;
    let mut epoch_steps = 0usize;

    for gs in start_step..total_steps {
        let epoch = gs / steps_per_epoch;
        let step_in_epoch = gs % steps_per_epoch;
        let lr = schedule.lr_at(epoch, step_in_epoch, steps_per_epoch)?;
        let mut rng = stream(opts.seed, LANE_TRAIN + gs as u64);

        let want_cross = match opts.attn {
            AttnPolicy::SelfOnly => false,
            AttnPolicy::CrossOnly => true,
            AttnPolicy::Alternate(p) => rng.random::<f64>() < p,
        };

        let mut acc: Vec<Tensor<T>> = adam
            .ids()
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect::<Result<_>>()?;
        let mut step_loss = 0.0f64;

        for _ in 0..opts.batch {
            let img = &dataset[rng.random_range(0..dataset.len())];
            let (h, w, d) = (img.shape()[0], img.shape()[1], img.shape()[2]);
            let h0 = rng.random_range(0..=h - ph);
            let w0 = rng.random_range(0..=w - pw);
            let clean = crop(img, h0, w0, ph, pw)?;
            let sample_seed: u64 = rng.random();
            let (noisy, log) = noise::apply(&clean, noise_kind, sample_seed)?;

            let noise_map = if model.config().input_channels == 2 {
                let sigma = log.uniform_sigma().ok_or_else(|| {
                    Error::Config(
                        "noise-map training needs a single-level protocol (gaussian or blind)"
                            .into(),
                    )
                })?;
                Some(Tensor::full(clean.shape(), T::from_f64(sigma / 255.0))?)
            } else {
                None
            };
            let attn = if want_cross && d == model.config().d_train {
                AttnMode::CrossAttn
            } else {
                AttnMode::SelfAttn
            };

            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut env = ForwardEnv::new(store, Mode::Train, attn);
            let pred = model.forward(&mut tape, &bound, &mut env, &noisy, noise_map.as_ref())?;
            let target = tape.leaf(clean);
            let loss = loss_value(&mut tape, &pred, &target, opts.loss)?;
            step_loss += tape.value(loss).item()?.to_f64();
            let scaled = tape.scale(&loss, inv_batch)?;
            let mut grads = tape.backward(scaled)?;
            let bn_updates = env.take_bn_updates();
            drop(env);

            for (slot, &id) in adam.ids().iter().enumerate() {
                let var = *bound.get(id);
                if let Some(g) = grads.take(var) {
                    acc[slot] = crate::tensor::kernels::add(&acc[slot], &g)?;
                }
            }
            for (id, value) in bn_updates {
                store.set(id, value)?;
            }
        }

        adam.apply_step(store, &acc, lr, opts.clip_norm)?;
        epoch_loss += step_loss / opts.batch as f64;
        epoch_steps += 1;

        let epoch_done = step_in_epoch + 1 == steps_per_epoch || gs + 1 == total_steps;
        if epoch_done {
            report.epochs.push(EpochStats {
                epoch,
                mean_loss: epoch_loss / epoch_steps as f64,
                last_lr: lr,
                steps: epoch_steps,
            });
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }
    Ok(report)
}

/// Weights plus optimizer state in one stream: the weights container
/// followed by an optimizer section holding step count and both moments.
pub fn save_checkpoint<T: Scalar, W: Write>(
    w: &mut W,
    store: &ParamStore<T>,
    adam: &AdamState<T>,
) -> Result<()> {
    save_weights(w, store)?;
    w.write_all(OPT_MAGIC)?;
    w.write_all(&adam.step.to_le_bytes())?;
    w.write_all(&(adam.ids.len() as u32).to_le_bytes())?;
    for (slot, &id) in adam.ids.iter().enumerate() {
        let name = store.name(id);
        wire::write_entry(w, &format!("{name}.adam_m"), &adam.m[slot])?;
        wire::write_entry(w, &format!("{name}.adam_v"), &adam.v[slot])?;
    }
    Ok(())
}

/// Rebuild model, parameters, and optimizer from a checkpoint stream.
pub fn load_checkpoint<T: Scalar, R: Read>(
    r: &mut R,
    config: &HsdtConfig,
) -> Result<(HsdtModel, ParamStore<T>, AdamState<T>)> {
    const FORMAT: &str = "checkpoint";
    let (model, store) = load_weights::<T, R>(r, config)?;
    wire::expect_magic(r, FORMAT, OPT_MAGIC)?;
    let step = wire::read_u64(r, FORMAT, "optimizer step")?;
    let count = wire::read_u32(r, FORMAT, "optimizer entry count")? as usize;

    let mut adam = AdamState::new(&store)?;
    if count != adam.ids.len() {
        return Err(Error::contract(
            "checkpoint",
            format!("optimizer holds {count} tensors, model has {}", adam.ids.len()),
        ));
    }
    for (slot, &id) in adam.ids.clone().iter().enumerate() {
        let name = store.name(id).to_string();
        for (suffix, dest) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
            let (got_name, shape, values) = wire::read_entry(r, FORMAT)?;
            let expected = format!("{name}.{suffix}");
            if got_name != expected {
                return Err(Error::UnknownTensor(got_name));
            }
            let model_shape = store.get(id).shape().to_vec();
            if shape != model_shape {
                return Err(Error::TensorShape {
                    name: got_name,
                    stored: shape,
                    expected: model_shape,
                });
            }
            let data: Vec<T> = values.into_iter().map(T::from_f32).collect();
            dest[slot] = Tensor::from_vec(&model_shape, data)?;
        }
    }
    adam.step = step;
    Ok((model, store, adam))
}

/// Synthetic data: smooth low-rank hyperspectral cubes for self-contained
/// training demos and tests.
pub mod synth {
    use super::*;

    /// A sum of `rank` separable terms — smooth sinusoidal spatial maps times
    /// smooth spectra — min-max normalized into `[0, 1]`.
    pub fn low_rank_hsi<T: Scalar>(
        h: usize,
        w: usize,
        d: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Tensor<T>> {
        if h == 0 || w == 0 || d == 0 || rank == 0 {
            return Err(Error::contract("synth", "extents and rank must be positive"));
        }
        let mut cube = vec![0.0f64; h * w * d];
        for r in 0..rank {
            let mut rng = stream(seed, LANE_GLOBAL + 2000 + r as u64);
            let amp: f64 = rng.random_range(0.4..1.0);
            let fh: f64 = rng.random_range(0.5..2.5);
            let fw: f64 = rng.random_range(0.5..2.5);
            let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let pw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let fd: f64 = rng.random_range(0.5..1.5);
            let pd: f64 = rng.random_range(0.0..std::f64::consts::TAU);

            let spectrum: Vec<f64> = (0..d)
                .map(|k| {
                    let t = k as f64 / d as f64;
                    1.0 + 0.5 * (std::f64::consts::TAU * fd * t + pd).cos()
                })
                .collect();
            for ih in 0..h {
                let sh = (std::f64::consts::TAU * fh * ih as f64 / h as f64 + ph).sin();
                for iw in 0..w {
                    let sw = (std::f64::consts::TAU * fw * iw as f64 / w as f64 + pw).cos();
                    let plane = amp * (1.0 + sh * sw);
                    let base = (ih * w + iw) * d;
                    for k in 0..d {
                        cube[base + k] += plane * spectrum[k];
                    }
                }
            }
        }
        let lo = cube.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cube.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        Tensor::from_vec(
            &[h, w, d],
            cube.into_iter().map(|v| T::from_f64((v - lo) / span)).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;

    fn tiny_config() -> HsdtConfig {
        HsdtConfig::small().with_base_channels(4).with_d_train(4)
    }

    fn flat_schedule(epochs: usize, lr: f64) -> Schedule {
        Schedule::new(vec![Stage { start: 0, end: epochs, lr, warmup: false }]).unwrap()
    }

    fn trainables<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
        store
            .trainable_ids()
            .into_iter()
            .map(|id| store.get(id).data().to_vec())
            .collect()
    }

    #[test]
    fn standard_schedule_hits_the_published_plateaus() {
        let s = Schedule::standard();
        assert_eq!(s.total_epochs(), 110);
        let spe = 10;
        let probes = [
            (0, 1e-3),
            (19, 1e-3),
            (20, 1e-4),
            (31, 1e-3),
            (45, 1e-4),
            (55, 5e-5),
            (60, 1e-5),
            (65, 5e-6),
            (75, 1e-6),
            (80, 1e-3),
            (90, 5e-4),
            (95, 1e-4),
            (100, 5e-5),
            (105, 1e-5),
            (109, 1e-5),
        ];
        for (epoch, lr) in probes {
            assert_eq!(s.lr_at(epoch, 5, spe).unwrap(), lr, "epoch {epoch}");
        }
        // The restart at epoch 30 warms up over its first epoch.
        assert_eq!(s.lr_at(30, 0, spe).unwrap(), 1e-3 / 10.0);
        assert_eq!(s.lr_at(30, 4, spe).unwrap(), 1e-3 / 2.0);
        assert_eq!(s.lr_at(30, 9, spe).unwrap(), 1e-3);
        assert!(s.lr_at(110, 0, spe).is_err());
    }

    #[test]
    fn scaled_schedule_keeps_proportions_and_drops_empty_stages() {
        let s = Schedule::standard().scaled(10.0).unwrap();
        assert_eq!(s.total_epochs(), 11);
        let first = s.stages()[0];
        assert_eq!((first.start, first.end, first.lr), (0, 2, 1e-3));
        // The warmed-up stage survives scaling.
        assert!(s.stages().iter().any(|st| st.warmup));
        // Scaling by one is the identity.
        assert_eq!(Schedule::standard().scaled(1.0).unwrap(), Schedule::standard());
    }

    #[test]
    fn malformed_schedules_are_rejected() {
        assert!(Schedule::new(vec![]).is_err());
        let gap = vec![
            Stage { start: 0, end: 2, lr: 1e-3, warmup: false },
            Stage { start: 3, end: 4, lr: 1e-4, warmup: false },
        ];
        assert!(Schedule::new(gap).is_err());
        let empty = vec![Stage { start: 0, end: 0, lr: 1e-3, warmup: false }];
        assert!(Schedule::new(empty).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_about_the_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::zeros(&[3]).unwrap(), true).unwrap();
        let mut adam = AdamState::new(&store).unwrap();
        let g = Tensor::full(&[3], 2.0).unwrap();
        let info = adam.apply_step(&mut store, &[g], 0.01, None).unwrap();
        assert!(!info.clipped);
        for &v in store.get(id).data().iter() {
            assert!((v + 0.01).abs() < 1e-9, "{v}");
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_reports_and_clips_the_global_norm() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::zeros(&[1]).unwrap(), true).unwrap();
        store.add("b", Tensor::zeros(&[1]).unwrap(), true).unwrap();
        let mut adam = AdamState::new(&store).unwrap();
        let grads = [
            Tensor::from_vec(&[1], vec![3.0]).unwrap(),
            Tensor::from_vec(&[1], vec![4.0]).unwrap(),
        ];
        let info = adam.apply_step(&mut store, &grads, 0.01, Some(1.0)).unwrap();
        assert!((info.grad_norm - 5.0).abs() < 1e-12);
        assert!(info.clipped);

        let info = adam.apply_step(&mut store, &grads, 0.01, Some(10.0)).unwrap();
        assert!(!info.clipped);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::zeros(&[2]).unwrap(), true).unwrap();
        let mut adam = AdamState::new(&store).unwrap();
        let g = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        match adam.apply_step(&mut store, &[g], 0.01, None) {
            Err(Error::NonFinite { what, detail }) => {
                assert_eq!(what, "gradient");
                assert_eq!(detail, "p");
            }
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn crop_extracts_the_expected_window() {
        let x = Tensor::from_vec(&[3, 4, 1], (0..12).map(f64::from).collect()).unwrap();
        let c = crop(&x, 1, 2, 2, 2).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(crop(&x, 2, 2, 2, 3).is_err());
    }

    #[test]
    fn synthetic_cubes_are_normalized_and_deterministic() {
        let a = synth::low_rank_hsi::<f64>(12, 10, 6, 3, 5).unwrap();
        let b = synth::low_rank_hsi::<f64>(12, 10, 6, 3, 5).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[12, 10, 6]);
        let lo = a.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let c = synth::low_rank_hsi::<f64>(12, 10, 6, 3, 6).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn training_runs_are_deterministic() {
        let cfg = tiny_config();
        let data = vec![synth::low_rank_hsi::<f64>(12, 12, 4, 2, 1).unwrap()];
        let schedule = flat_schedule(1, 1e-3);
        let opts = TrainOptions {
            epochs: 1,
            batch: 2,
            patch: (8, 8),
            steps_per_epoch: Some(2),
            seed: 9,
            ..TrainOptions::default()
        };

        let run = || {
            let (model, mut store) = build_model::<f64>(&cfg, 3).unwrap();
            let mut adam = AdamState::new(&store).unwrap();
            let report = train_loop(
                &model,
                &mut store,
                &mut adam,
                &data,
                &NoiseKind::Gaussian { sigma: 30.0 },
                &schedule,
                &opts,
            )
            .unwrap();
            (trainables(&store), report)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
    }

    #[test]
    fn checkpoint_resume_matches_an_uninterrupted_run() {
        // f32 throughout: the checkpoint payload is f32, so the save/load
        // roundtrip is lossless and resume must be bitwise exact.
        let cfg = tiny_config();
        let data = vec![synth::low_rank_hsi::<f32>(12, 12, 4, 2, 2).unwrap()];
        let schedule = flat_schedule(2, 1e-3);
        let noise = NoiseKind::Gaussian { sigma: 30.0 };
        let base_opts = TrainOptions {
            epochs: 2,
            batch: 2,
            patch: (8, 8),
            steps_per_epoch: Some(2),
            seed: 17,
            ..TrainOptions::default()
        };

        // Uninterrupted: four steps.
        let (model, mut store_a) = build_model::<f32>(&cfg, 5).unwrap();
        let mut adam_a = AdamState::new(&store_a).unwrap();
        train_loop(&model, &mut store_a, &mut adam_a, &data, &noise, &schedule, &base_opts)
            .unwrap();

        // Interrupted after epoch one, checkpointed, reloaded, resumed.
        let (_, mut store_b) = build_model::<f32>(&cfg, 5).unwrap();
        let mut adam_b = AdamState::new(&store_b).unwrap();
        let half = TrainOptions { epochs: 1, ..base_opts.clone() };
        train_loop(&model, &mut store_b, &mut adam_b, &data, &noise, &schedule, &half).unwrap();

        let mut blob = Vec::new();
        save_checkpoint(&mut blob, &store_b, &adam_b).unwrap();
        let (model_c, mut store_c, mut adam_c) =
            load_checkpoint::<f32, _>(&mut blob.as_slice(), &cfg).unwrap();
        assert_eq!(adam_c.step_count(), 2);
        train_loop(&model_c, &mut store_c, &mut adam_c, &data, &noise, &schedule, &base_opts)
            .unwrap();

        assert_eq!(trainables(&store_a), trainables(&store_c));

        // And the checkpoint itself roundtrips byte-identically.
        let mut blob2 = Vec::new();
        save_checkpoint(&mut blob2, &store_c, &adam_c).unwrap();
        let (_, s2, a2) = load_checkpoint::<f32, _>(&mut blob2.as_slice(), &cfg).unwrap();
        let mut blob3 = Vec::new();
        save_checkpoint(&mut blob3, &s2, &a2).unwrap();
        assert_eq!(blob2, blob3);
    }

    #[test]
    fn a_short_run_reduces_the_loss() {
        let cfg = tiny_config();
        let (model, mut store) = build_model::<f64>(&cfg, 7).unwrap();
        let mut adam = AdamState::new(&store).unwrap();
        let data = vec![synth::low_rank_hsi::<f64>(16, 16, 4, 2, 3).unwrap()];
        let schedule = flat_schedule(10, 1e-3);
        let opts = TrainOptions {
            epochs: 10,
            batch: 2,
            patch: (8, 8),
            steps_per_epoch: Some(5),
            seed: 23,
            ..TrainOptions::default()
        };
        let report = train_loop(
            &model,
            &mut store,
            &mut adam,
            &data,
            &NoiseKind::Gaussian { sigma: 30.0 },
            &schedule,
            &opts,
        )
        .unwrap();
        let first = report.epochs.first().unwrap().mean_loss;
        let last = report.epochs.last().unwrap().mean_loss;
        assert!(
            last < first * 0.7,
            "loss did not fall enough: {first} -> {last}"
        );
    }

    #[test]
    fn sqrt_mse_loss_is_the_root_of_mse() {
        let mut rt = crate::tensor::ops::Eval::new();
        let a = rt.leaf(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = rt.leaf(Tensor::from_vec(&[4], vec![1.5, 2.0, 2.0, 4.0]).unwrap());
        let mse = loss_value(&mut rt, &a, &b, LossKind::Mse).unwrap();
        let root = loss_value(&mut rt, &a, &b, LossKind::SqrtMse).unwrap();
        let mse_v = mse.item().unwrap();
        let root_v = root.item().unwrap();
        assert!((mse_v - (0.25 + 1.0) / 4.0).abs() < 1e-12);
        assert!((root_v - (mse_v + 1e-12).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn training_rejects_inconsistent_setups() {
        let cfg = tiny_config();
        let (model, mut store) = build_model::<f64>(&cfg, 7).unwrap();
        let mut adam = AdamState::new(&store).unwrap();
        let schedule = flat_schedule(1, 1e-3);
        let image = synth::low_rank_hsi::<f64>(12, 12, 4, 2, 3).unwrap();

        let opts = TrainOptions { epochs: 1, patch: (8, 8), ..TrainOptions::default() };
        let empty: Vec<Tensor<f64>> = Vec::new();
        assert!(matches!(
            train_loop(&model, &mut store, &mut adam, &empty, &NoiseKind::NonIid, &schedule, &opts),
            Err(Error::EmptyDataset)
        ));

        // Patch not divisible by the scale pyramid.
        let bad_patch = TrainOptions { patch: (6, 8), ..opts.clone() };
        assert!(train_loop(
            &model,
            &mut store,
            &mut adam,
            std::slice::from_ref(&image),
            &NoiseKind::NonIid,
            &schedule,
            &bad_patch
        )
        .is_err());

        // More epochs than the schedule knows about.
        let long = TrainOptions { epochs: 2, ..opts };
        assert!(train_loop(
            &model,
            &mut store,
            &mut adam,
            std::slice::from_ref(&image),
            &NoiseKind::NonIid,
            &schedule,
            &long
        )
        .is_err());
    }
}
