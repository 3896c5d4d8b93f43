//! `hsdt`: simulate degradations, train, denoise, evaluate, inspect, and run
//! plug-and-play restoration from the command line. Every subcommand is
//! deterministic given its flags and seed.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hsdt_cli::config::{self, RunConfig};
use hsdt_cli::hsi::{read_hsi_file, write_hsi_file, HsiDtype};
use hsdt_cli::pgm;
use hsdt_core::blocks::AttnMode;
use hsdt_core::gradcheck;
use hsdt_core::metrics::{report_text, MetricReport};
use hsdt_core::network::{build_model, load_weights, HsdtConfig, HsdtModel};
use hsdt_core::noise::{apply, NoiseKind};
use hsdt_core::param::ParamStore;
use hsdt_core::pnp::{
    admm_restore, diagnostics_text, log_linear, AdmmProblem, CassiOperator, Denoiser,
    IdentityDenoiser, LinearOperator, ModelDenoiser, SrOperator,
};
use hsdt_core::tensor::Tensor;
use hsdt_core::train::{save_checkpoint, train_loop, AdamState};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hsdt", version, about = "Hyperspectral denoising workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a clean cube with a seeded noise model.
    Simulate {
        /// Input cube (.hsic).
        #[arg(long)]
        input: PathBuf,
        /// gaussian | gaussian-blind | non-iid | stripe | deadline | impulse | mixture
        #[arg(long)]
        kind: String,
        /// Level on the 0-255 scale (gaussian only).
        #[arg(long)]
        sigma: Option<f64>,
        /// Blind range low end, 0-255 scale (gaussian-blind only).
        #[arg(long)]
        lo: Option<f64>,
        /// Blind range high end, 0-255 scale (gaussian-blind only).
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        seed: u64,
        /// Output cube (.hsic); keeps the input's scalar width.
        #[arg(long)]
        output: PathBuf,
        /// Optional degradation-log text file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a model on a directory of clean cubes.
    Train {
        /// Preset name (hsdt-s/m/l) or key=value config file.
        #[arg(long)]
        config: String,
        /// Directory of clean .hsic training cubes.
        #[arg(long)]
        data: PathBuf,
        /// Degradation drawn each step (same names as simulate).
        #[arg(long, default_value = "gaussian-blind")]
        kind: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        seed: u64,
        /// Checkpoint to write.
        #[arg(long)]
        output: PathBuf,
        /// Optional loss-curve text file.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Restore a degraded cube with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The config the checkpoint was trained with.
        #[arg(long)]
        config: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Known noise level on the 0-255 scale; required by two-channel
        /// (blind) models, ignored otherwise.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Compare a restored cube against its reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        restored: PathBuf,
    },
    /// Print the parameter budget of a configuration.
    Params {
        #[arg(long)]
        config: String,
    },
    /// Run the finite-difference gradient suite; fails on any mismatch.
    Gradcheck,
    /// Plug-and-play restoration from a linear degradation.
    Pnp {
        /// sr | cassi
        #[arg(long)]
        task: String,
        /// Observed data (.hsic; rank-2 CASSI data stored as one band).
        #[arg(long)]
        observation: PathBuf,
        /// Upsampling factor (sr only): 2 or 4.
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// Spectral band count of the restoration (cassi only).
        #[arg(long)]
        bands: Option<usize>,
        /// Dispersion step in pixels per band (cassi only).
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Coded-aperture mask (.hsic, one band). Drawn from --seed if absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Seed for the random mask; required for cassi without --mask.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional trained two-channel denoiser; identity prior if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config for --checkpoint.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 8)]
        iterations: usize,
        /// Prior weight schedule endpoints.
        #[arg(long)]
        rho_start: Option<f64>,
        #[arg(long)]
        rho_end: Option<f64>,
        /// Denoiser level schedule endpoints on the 0-255 scale.
        #[arg(long)]
        sigma_start: Option<f64>,
        #[arg(long)]
        sigma_end: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        /// Optional per-iteration diagnostics text file.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Dump every block's band-attention map as 16-bit PGM images.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long)]
        input: PathBuf,
        /// self | cross
        #[arg(long, default_value = "self")]
        mode: String,
        /// Noise level for two-channel models, 0-255 scale.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Conditional flag requirements are usage errors, same exit code as clap's.
fn usage_exit(message: &str) -> ! {
    eprintln!("error: {message}");
    eprintln!("For more information, try '--help'.");
    std::process::exit(2);
}

fn parse_noise(kind: &str, sigma: Option<f64>, lo: Option<f64>, hi: Option<f64>) -> NoiseKind {
    match kind {
        "gaussian" => match sigma {
            Some(s) => NoiseKind::Gaussian { sigma: s },
            None => usage_exit("--kind gaussian requires --sigma"),
        },
        "gaussian-blind" => NoiseKind::GaussianBlind {
            lo: lo.unwrap_or(10.0),
            hi: hi.unwrap_or(70.0),
        },
        "non-iid" => NoiseKind::NonIid,
        "stripe" => NoiseKind::Stripe,
        "deadline" => NoiseKind::Deadline,
        "impulse" => NoiseKind::Impulse,
        "mixture" => NoiseKind::Mixture,
        other => usage_exit(&format!("unknown noise kind {other:?}")),
    }
}

fn to_f32(cube: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_vec(cube.shape(), cube.data().iter().map(|&v| v as f32).collect())
        .expect("same shape")
}

fn to_f64(cube: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_vec(cube.shape(), cube.data().iter().map(|&v| v as f64).collect())
        .expect("same shape")
}

fn load_model(config: &HsdtConfig, checkpoint: &Path) -> Result<(HsdtModel, ParamStore<f32>)> {
    let file = fs::File::open(checkpoint)
        .with_context(|| format!("cannot open checkpoint {}", checkpoint.display()))?;
    let mut reader = BufReader::new(file);
    let (model, store) = load_weights::<f32, _>(&mut reader, config)
        .with_context(|| format!("while reading {}", checkpoint.display()))?;
    Ok((model, store))
}

/// Replicate-pad the spatial extents up to multiples of `m`, remembering the
/// original size so the restored cube can be cropped back.
fn pad_to_multiple(x: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let &[h, w, d] = x.shape() else {
        bail!("expected an [H, W, D] cube, got {:?}", x.shape());
    };
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![0.0f32; ph * pw * d];
    for i in 0..ph {
        let si = i.min(h - 1);
        for j in 0..pw {
            let sj = j.min(w - 1);
            let from = (si * w + sj) * d;
            let to = (i * pw + j) * d;
            out[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    Ok(Tensor::from_vec(&[ph, pw, d], out)?)
}

fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let &[ph, pw, d] = x.shape() else {
        bail!("expected an [H, W, D] cube, got {:?}", x.shape());
    };
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = vec![0.0f32; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let from = (i * pw + j) * d;
            let to = (i * w + j) * d;
            out[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    Ok(Tensor::from_vec(&[h, w, d], out)?)
}

fn noise_map_for(model_config: &HsdtConfig, shape: &[usize], sigma: Option<f64>) -> Option<Tensor<f32>> {
    if model_config.input_channels != 2 {
        return None;
    }
    let sigma = match sigma {
        Some(s) => s,
        None => usage_exit("this checkpoint is a two-channel (blind) model: --sigma is required"),
    };
    Some(Tensor::full(shape, (sigma / 255.0) as f32).expect("static shape"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { input, kind, sigma, lo, hi, seed, output, log } => {
            let noise = parse_noise(&kind, sigma, lo, hi);
            let (clean, dtype) = read_hsi_file(&input)?;
            let (noisy, record) = apply(&clean, &noise, seed)?;
            write_hsi_file(&output, &noisy, dtype)?;
            if let Some(path) = log {
                fs::write(&path, record.to_text())
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            println!("wrote {} ({} degradation, seed {seed})", output.display(), record.kind);
        }

        Command::Train { config, data, kind, sigma, lo, hi, seed, output, curve } => {
            let noise = parse_noise(&kind, sigma, lo, hi);
            let RunConfig { model: model_cfg, mut train, schedule } = config::load(&config)?;
            train.seed = seed;
            let mut paths: Vec<PathBuf> = fs::read_dir(&data)
                .with_context(|| format!("cannot read dataset dir {}", data.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "hsic"))
                .collect();
            paths.sort();
            let dataset: Vec<Tensor<f32>> = paths
                .iter()
                .map(|p| read_hsi_file(p).map(|(cube, _)| to_f32(&cube)))
                .collect::<Result<_>>()?;
            if dataset.is_empty() {
                bail!("no .hsic files in {}", data.display());
            }

            let (model, mut store) = build_model::<f32>(&model_cfg, seed)?;
            let mut adam = AdamState::new(&store)?;
            let report =
                train_loop(&model, &mut store, &mut adam, &dataset, &noise, &schedule, &train)?;

            let file = fs::File::create(&output)
                .with_context(|| format!("cannot create {}", output.display()))?;
            let mut writer = BufWriter::new(file);
            save_checkpoint(&mut writer, &store, &adam)?;
            writer.flush()?;

            if let Some(path) = curve {
                let mut text = String::from("loss-curve v1\n");
                for e in &report.epochs {
                    text.push_str(&format!(
                        "epoch {} mean_loss {:.6e} last_lr {:.6e} steps {}\n",
                        e.epoch, e.mean_loss, e.last_lr, e.steps
                    ));
                }
                fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
            }
            let last = report.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
            println!(
                "wrote {} after {} epochs on {} cubes (final loss {last:.6})",
                output.display(),
                report.epochs.len(),
                dataset.len()
            );
        }

        Command::Denoise { checkpoint, config, input, output, sigma } => {
            let cfg = config::load(&config)?.model;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let (noisy, _) = read_hsi_file(&input)?;
            let noisy = to_f32(&noisy);
            let &[h, w, _] = noisy.shape() else {
                bail!("expected an [H, W, D] cube, got {:?}", noisy.shape());
            };
            let padded = pad_to_multiple(&noisy, cfg.spatial_multiple())?;
            let map = noise_map_for(&cfg, padded.shape(), sigma);
            let restored = model.infer(&store, &padded, map.as_ref())?;
            let restored = crop(&restored, h, w)?;
            write_hsi_file(&output, &to_f64(&restored), HsiDtype::Single)?;
            println!("wrote {}", output.display());
        }

        Command::Eval { reference, restored } => {
            let (reference_cube, _) = read_hsi_file(&reference)?;
            let (restored_cube, _) = read_hsi_file(&restored)?;
            let name = restored
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| restored.display().to_string());
            let report = MetricReport::evaluate(name, &reference_cube, &restored_cube)?;
            print!("{}", report_text(&[report]));
        }

        Command::Params { config } => {
            let cfg = config::load(&config)?.model;
            let (model, store) = build_model::<f32>(&cfg, 0)?;
            println!("parameter-report v1");
            println!("config {config}");
            println!("total_trainable {}", model.count_params(&store));
            for id in store.ids() {
                let t = store.get(id);
                println!(
                    "{} {:?} {} {}",
                    store.name(id),
                    t.shape(),
                    t.numel(),
                    if store.is_trainable(id) { "trainable" } else { "frozen" }
                );
            }
        }

        Command::Gradcheck => {
            let results = gradcheck::run_full_suite()?;
            print!("{}", gradcheck::report_text(&results));
            if !gradcheck::all_pass(&results) {
                bail!("gradient checks failed");
            }
        }

        Command::Pnp {
            task,
            observation,
            scale,
            bands,
            step,
            mask,
            seed,
            checkpoint,
            config,
            iterations,
            rho_start,
            rho_end,
            sigma_start,
            sigma_end,
            output,
            diagnostics,
        } => {
            let (obs, _) = read_hsi_file(&observation)?;
            let obs = to_f32(&obs);

            let loaded = match (&checkpoint, &config) {
                (Some(ckpt), Some(cfg_name)) => {
                    let cfg = config::load(cfg_name)?.model;
                    Some(load_model(&cfg, ckpt)?)
                }
                (Some(_), None) => usage_exit("--checkpoint needs --config"),
                (None, Some(_)) => usage_exit("--config needs --checkpoint"),
                (None, None) => None,
            };
            let identity = IdentityDenoiser;
            let model_denoiser = match &loaded {
                Some((model, store)) => Some(ModelDenoiser::new(model, store)?),
                None => None,
            };
            let denoiser: &dyn Denoiser<f32> = match &model_denoiser {
                Some(d) => d,
                None => &identity,
            };

            let sr_op;
            let cassi_op;
            let operator: &dyn LinearOperator<f32>;
            let observed: Tensor<f32>;
            match task.as_str() {
                "sr" => {
                    let &[h, w, d] = obs.shape() else {
                        bail!("sr expects an [H, W, D] observation, got {:?}", obs.shape());
                    };
                    sr_op = SrOperator::new(&[h * scale, w * scale, d], scale)?;
                    operator = &sr_op;
                    observed = obs;
                }
                "cassi" => {
                    let Some(d) = bands else {
                        usage_exit("--task cassi requires --bands");
                    };
                    let &[h, w_obs, one] = obs.shape() else {
                        bail!("cassi expects the observation as [H, W', 1], got {:?}", obs.shape());
                    };
                    if one != 1 {
                        bail!("cassi observation must hold exactly one band, got {one}");
                    }
                    if w_obs <= (d - 1) * step {
                        bail!("observation width {w_obs} cannot hold {d} bands at step {step}");
                    }
                    let w = w_obs - (d - 1) * step;
                    let mask_plane = match (&mask, seed) {
                        (Some(path), _) => {
                            let (m, _) = read_hsi_file(path)?;
                            let &[mh, mw, mone] = m.shape() else {
                                bail!("mask must be [H, W, 1], got {:?}", m.shape());
                            };
                            if (mh, mw, mone) != (h, w, 1) {
                                bail!("mask {mh}x{mw}x{mone} does not fit a {h}x{w} aperture");
                            }
                            Tensor::from_vec(&[mh, mw], m.data().iter().map(|&v| v as f32).collect())?
                        }
                        (None, Some(s)) => CassiOperator::<f32>::random_mask(h, w, s)?,
                        (None, None) => {
                            usage_exit("--task cassi without --mask draws a random mask: --seed is required")
                        }
                    };
                    cassi_op = CassiOperator::new(&[h, w, d], mask_plane, step)?;
                    operator = &cassi_op;
                    observed = Tensor::from_vec(&[h, w_obs], obs.data().to_vec())?;
                }
                other => usage_exit(&format!("unknown task {other:?}")),
            }

            let mut problem = AdmmProblem::new(operator, observed, denoiser, iterations)?;
            if rho_start.is_some() || rho_end.is_some() {
                let lo = rho_start.unwrap_or(problem.rho[0]);
                let hi = rho_end.unwrap_or(*problem.rho.last().expect("nonempty plan"));
                problem.rho = log_linear(lo, hi, iterations)?;
            }
            if sigma_start.is_some() || sigma_end.is_some() {
                let lo = sigma_start.map(|s| s / 255.0).unwrap_or(problem.sigma[0]);
                let hi = sigma_end
                    .map(|s| s / 255.0)
                    .unwrap_or(*problem.sigma.last().expect("nonempty plan"));
                problem.sigma = log_linear(lo, hi, iterations)?;
            }
            let (restored, diags) = admm_restore(&problem)?;

            let out_cube = if restored.rank() == 3 {
                to_f64(&restored)
            } else {
                bail!("restoration produced rank {}, expected 3", restored.rank());
            };
            write_hsi_file(&output, &out_cube, HsiDtype::Single)?;
            if let Some(path) = diagnostics {
                fs::write(&path, diagnostics_text(&diags))
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            let last = diags.last().map(|d| d.fidelity).unwrap_or(f64::NAN);
            println!(
                "wrote {} after {} iterations (final fidelity {last:.4e})",
                output.display(),
                diags.len()
            );
        }

        Command::Attnmap { checkpoint, config, input, mode, sigma, outdir } => {
            let cfg = config::load(&config)?.model;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let (cube, _) = read_hsi_file(&input)?;
            let cube = to_f32(&cube);
            let attn_mode = match mode.as_str() {
                "self" => AttnMode::SelfAttn,
                "cross" => AttnMode::CrossAttn,
                other => usage_exit(&format!("unknown attention mode {other:?}")),
            };
            let padded = pad_to_multiple(&cube, cfg.spatial_multiple())?;
            let map = noise_map_for(&cfg, padded.shape(), sigma);
            let maps = model.attention_maps(&store, &padded, map.as_ref(), attn_mode)?;
            fs::create_dir_all(&outdir)
                .with_context(|| format!("cannot create {}", outdir.display()))?;
            let mut index = String::from("attention-maps v1\n");
            for (name, attn) in &maps {
                let &[rows, cols] = attn.shape() else {
                    bail!("attention map {name} is not a matrix: {:?}", attn.shape());
                };
                let file = format!("{}.pgm", name.replace('.', "-"));
                let values: Vec<f64> = attn.data().iter().map(|&v| v as f64).collect();
                pgm::write_pgm16_file(&outdir.join(&file), cols, rows, &pgm::quantize_unit(&values))?;
                index.push_str(&format!("{name} {file} {rows}x{cols}\n"));
            }
            fs::write(outdir.join("index.txt"), &index)
                .with_context(|| format!("cannot write {}", outdir.join("index.txt").display()))?;
            println!("wrote {} attention maps to {}", maps.len(), outdir.display());
        }
    }
    Ok(())
}
