//! Run configuration: the three published presets by name, or a flat
//! `key=value` text file whose keys mirror the model and training options.

use anyhow::{bail, Context, Result};
use hsdt_core::blocks::S3ConvVariant;
use hsdt_core::network::HsdtConfig;
use hsdt_core::train::{AttnPolicy, LossKind, Schedule, Stage, TrainOptions};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Everything a run needs: the architecture plus training hyperparameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: HsdtConfig,
    pub train: TrainOptions,
    /// `standard` scaled by `schedule_divisor`, or a flat single-stage plan.
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: HsdtConfig::small(),
            train: TrainOptions::default(),
            schedule: Schedule::standard(),
        }
    }
}

fn preset(name: &str) -> Option<HsdtConfig> {
    match name {
        "hsdt-s" => Some(HsdtConfig::small()),
        "hsdt-m" => Some(HsdtConfig::medium()),
        "hsdt-l" => Some(HsdtConfig::large()),
        _ => None,
    }
}

/// Accepts a preset name (`hsdt-s`, `hsdt-m`, `hsdt-l`) or a path to a
/// `key=value` file.
pub fn load(source: &str) -> Result<RunConfig> {
    if let Some(model) = preset(source) {
        return Ok(RunConfig { model, ..RunConfig::default() });
    }
    let text = fs::read_to_string(Path::new(source))
        .with_context(|| format!("cannot read config {source} (not a preset name either)"))?;
    parse(&text).with_context(|| format!("in config {source}"))
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", lineno + 1);
        };
        if pairs.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
            bail!("line {}: duplicate key {:?}", lineno + 1, key.trim());
        }
    }
    Ok(pairs)
}

/// Parse a flat `key=value` configuration. Unknown keys are errors so typos
/// cannot silently fall back to defaults.
pub fn parse(text: &str) -> Result<RunConfig> {
    let pairs = parse_pairs(text)?;
    let mut cfg = RunConfig::default();
    if let Some(name) = pairs.get("preset") {
        cfg.model = preset(name).with_context(|| format!("unknown preset {name:?}"))?;
    }
    let mut flat_lr: Option<f64> = None;
    let mut flat_epochs: Option<usize> = None;
    let mut divisor: Option<f64> = None;

    for (key, value) in &pairs {
        let parse_usize =
            || -> Result<usize> { value.parse().with_context(|| format!("{key}: bad integer {value:?}")) };
        let parse_f64 =
            || -> Result<f64> { value.parse().with_context(|| format!("{key}: bad number {value:?}")) };
        match key.as_str() {
            "preset" => {}
            "base_channels" => cfg.model.base_channels = parse_usize()?,
            "n_scales" => cfg.model.n_scales = parse_usize()?,
            "extra_inner_blocks" => cfg.model.extra_inner_blocks = parse_usize()?,
            "d_train" => cfg.model.d_train = parse_usize()?,
            "input_channels" => cfg.model.input_channels = parse_usize()?,
            "conv_variant" => {
                cfg.model.conv_variant = match value.as_str() {
                    "parallel2" => S3ConvVariant::Parallel2,
                    "single-spatial" => S3ConvVariant::SingleSpatial,
                    "sequential" => S3ConvVariant::Sequential,
                    "dense3d" => S3ConvVariant::Dense3d,
                    other => bail!("conv_variant: unknown variant {other:?}"),
                }
            }
            "epochs" => cfg.train.epochs = parse_usize()?,
            "batch" => cfg.train.batch = parse_usize()?,
            "patch" => {
                let (h, w) = value
                    .split_once('x')
                    .with_context(|| format!("patch: expected HxW, got {value:?}"))?;
                cfg.train.patch = (
                    h.trim().parse().with_context(|| format!("patch height {h:?}"))?,
                    w.trim().parse().with_context(|| format!("patch width {w:?}"))?,
                );
            }
            "loss" => {
                cfg.train.loss = match value.as_str() {
                    "mse" => LossKind::Mse,
                    "sqrt_mse" => LossKind::SqrtMse,
                    other => bail!("loss: unknown kind {other:?}"),
                }
            }
            "clip_norm" => {
                cfg.train.clip_norm =
                    if value == "off" { None } else { Some(parse_f64()?) };
            }
            "steps_per_epoch" => cfg.train.steps_per_epoch = Some(parse_usize()?),
            "attn" => {
                cfg.train.attn = match value.as_str() {
                    "self" => AttnPolicy::SelfOnly,
                    "cross" => AttnPolicy::CrossOnly,
                    other => match other.strip_prefix("alternate:") {
                        Some(p) => AttnPolicy::Alternate(
                            p.parse().with_context(|| format!("attn: bad probability {p:?}"))?,
                        ),
                        None => bail!("attn: unknown policy {other:?}"),
                    },
                }
            }
            "schedule" => match value.as_str() {
                "standard" => cfg.schedule = Schedule::standard(),
                "flat" => flat_lr = flat_lr.or(Some(1e-4)),
                other => bail!("schedule: expected standard or flat, got {other:?}"),
            },
            "lr" => flat_lr = Some(parse_f64()?),
            "flat_epochs" => flat_epochs = Some(parse_usize()?),
            "schedule_divisor" => divisor = Some(parse_f64()?),
            other => bail!("unknown key {other:?}"),
        }
    }

    if let Some(d) = divisor {
        cfg.schedule = cfg.schedule.scaled(d)?;
    }
    if let Some(lr) = flat_lr {
        let end = flat_epochs.unwrap_or(cfg.train.epochs.max(1));
        cfg.schedule = Schedule::new(vec![Stage { start: 0, end, lr, warmup: false }])?;
    }
    if cfg.train.epochs > cfg.schedule.total_epochs() {
        bail!(
            "epochs {} exceed the schedule's {}",
            cfg.train.epochs,
            cfg.schedule.total_epochs()
        );
    }
    cfg.model.validate()?;
    Ok(cfg)
}
