//! End-to-end acceptance checks. Each test exercises one release criterion
//! and prints a single `criterion NN: PASS/FAIL` line with the measured
//! numbers, so a full run doubles as a sign-off report.

use hsdt_core::blocks::{AttnMode, GssaLayer, S3ConvVariant, SmFfnLayer, TransformerBlock};
use hsdt_core::gradcheck;
use hsdt_core::metrics::{psnr, sam, ssim};
use hsdt_core::network::{build_model, HsdtConfig};
use hsdt_core::noise::{apply, NoiseKind};
use hsdt_core::param::ParamStore;
use hsdt_core::pnp::{
    admm_restore, bicubic_upsample, log_linear, AdmmProblem, CassiOperator, LinearOperator,
    ModelDenoiser, SrOperator,
};
use hsdt_core::rng::{splitmix64, stream, LANE_GLOBAL};
use hsdt_core::tensor::ops::{Eval, Ops};
use hsdt_core::tensor::{Scalar, Tensor};
use hsdt_core::train::{
    synth, train_loop, AdamState, AttnPolicy, LossKind, Schedule, Stage, TrainOptions,
};
use hsdt_core::Error;
use std::time::Instant;

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n:02}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n:02} failed: {detail}");
}

/// Deterministic filler in [-0.5, 0.5); value content is irrelevant, only
/// reproducibility matters.
fn filled<T: Scalar>(shape: &[usize], lane: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<T> = (0..n)
        .map(|i| T::from_f64((splitmix64(lane * 1_000_003 + i as u64) % 4096) as f64 / 4096.0 - 0.5))
        .collect();
    Tensor::from_vec(shape, v).expect("static shape")
}

#[test]
fn criterion_01_every_gradient_matches_finite_differences() {
    let started = Instant::now();
    let results = gradcheck::run_full_suite().expect("suite runs");
    let elapsed = started.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    let ok = gradcheck::all_pass(&results) && worst < 1e-4 && elapsed.as_secs() < 120;
    report(
        1,
        ok,
        &format!(
            "{} checks, worst rel err {worst:.3e} (< 1e-4), {:?} (< 2 min)",
            results.len(),
            elapsed
        ),
    );
}

#[test]
fn criterion_02_fast_and_naive_attention_agree() {
    let mut worst = 0.0f64;
    let band_counts = [1usize, 4, 31, 2, 7, 16, 5, 3, 9, 12];
    for trial in 0..20 {
        let d = band_counts[trial % band_counts.len()];
        let (h, w, c) = (3 + trial % 3, 2 + trial % 4, 2 + trial % 5);
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(50 + trial as u64, LANE_GLOBAL + 900);
        let layer = GssaLayer::new(&mut store, &mut rng, "g", c, d).expect("layer");
        let x = filled::<f64>(&[h, w, d, c], 60 + trial as u64);
        let mut rt = Eval::new();
        let bound = store.bind(&mut rt);
        let leaf = rt.leaf(x);
        let (fast, _) = layer
            .forward(&mut rt, &bound, &leaf, AttnMode::SelfAttn, true)
            .expect("fast path");
        let (naive, _) = layer
            .forward(&mut rt, &bound, &leaf, AttnMode::SelfAttn, false)
            .expect("naive path");
        let diff = fast
            .data()
            .iter()
            .zip(naive.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff);
    }
    report(
        2,
        worst <= 1e-5,
        &format!("20 inputs with band counts incl. 1/4/31, max |fast − naive| {worst:.3e} (≤ 1e-5)"),
    );
}

#[test]
fn criterion_03_attention_is_stochastic_equivariant_and_checked() {
    let (h, w, d, c) = (4usize, 5usize, 6usize, 3usize);
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream(77, LANE_GLOBAL + 900);
    let layer = GssaLayer::new(&mut store, &mut rng, "g", c, d).expect("layer");
    let x = filled::<f64>(&[h, w, d, c], 70);

    // Row-stochastic attention, both modes.
    let mut row_err = 0.0f64;
    for mode in [AttnMode::SelfAttn, AttnMode::CrossAttn] {
        let attn = layer.attention_map(&store, &x, mode).expect("map");
        for row in attn.data().chunks_exact(d) {
            let s: f64 = row.iter().sum();
            row_err = row_err.max((s - 1.0).abs());
        }
    }

    // Self-attention output commutes with any band permutation.
    let perm: Vec<usize> = (0..d).map(|i| (i * 5 + 2) % d).collect();
    let permute = |t: &Tensor<f64>| {
        let src = t.data();
        let mut out = vec![0.0f64; src.len()];
        for pos in 0..h * w {
            for (dst_band, &src_band) in perm.iter().enumerate() {
                let from = (pos * d + src_band) * c;
                let to = (pos * d + dst_band) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
        Tensor::from_vec(&[h, w, d, c], out).expect("same shape")
    };
    let run = |input: &Tensor<f64>| {
        let mut rt = Eval::new();
        let bound = store.bind(&mut rt);
        let leaf = rt.leaf(input.clone());
        let (out, _) = layer
            .forward(&mut rt, &bound, &leaf, AttnMode::SelfAttn, true)
            .expect("forward");
        out
    };
    let direct = permute(&run(&x));
    let permuted_first = run(&permute(&x));
    let equiv_err = direct
        .data()
        .iter()
        .zip(permuted_first.data().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // Cross-attention must refuse a band count it was not sized for.
    let wrong = filled::<f64>(&[h, w, d + 1, c], 71);
    let mut rt = Eval::new();
    let bound = store.bind(&mut rt);
    let leaf = rt.leaf(wrong);
    let rejected = matches!(
        layer.forward(&mut rt, &bound, &leaf, AttnMode::CrossAttn, true),
        Err(Error::BandCount { expected: 6, got: 7 })
    );

    let ok = row_err <= 1e-6 && equiv_err <= 1e-5 && rejected;
    report(
        3,
        ok,
        &format!(
            "row-sum err {row_err:.2e} (≤ 1e-6), permutation err {equiv_err:.2e} (≤ 1e-5), \
             cross-attention band mismatch rejected: {rejected}"
        ),
    );
}

#[test]
fn criterion_04_gate_branch_reduces_to_swish_exactly() {
    let c = 5usize;
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream(91, LANE_GLOBAL + 900);
    let layer = SmFfnLayer::new(&mut store, &mut rng, "f", c).expect("layer");

    // Split projection = [I | I] with zero bias, MLP output weights zeroed:
    // the forward collapses to x * sigmoid(x) with no rounding slack at all.
    let mut w3 = vec![0.0f64; c * 2 * c];
    for i in 0..c {
        w3[i * 2 * c + i] = 1.0;
        w3[i * 2 * c + c + i] = 1.0;
    }
    let set = |store: &mut ParamStore<f64>, name: &str, value: Tensor<f64>| {
        let id = store.find(name).expect("parameter exists");
        store.set(id, value).expect("shapes match");
    };
    set(&mut store, "f.w3.weight", Tensor::from_vec(&[c, 2 * c], w3).unwrap());
    set(&mut store, "f.w3.bias", Tensor::zeros(&[2 * c]).unwrap());
    set(&mut store, "f.w1.weight", Tensor::zeros(&[2 * c, c]).unwrap());
    set(&mut store, "f.w1.bias", Tensor::zeros(&[c]).unwrap());

    let x = filled::<f64>(&[3, 4, 2, c], 80);
    let mut rt = Eval::new();
    let bound = store.bind(&mut rt);
    let leaf = rt.leaf(x.clone());
    let out = layer.forward(&mut rt, &bound, &leaf).expect("forward");
    let sig = rt.sigmoid(&leaf).expect("sigmoid");
    let want = rt.mul(&leaf, &sig).expect("product");
    let exact = out
        .data()
        .iter()
        .zip(want.data().iter())
        .all(|(a, b)| a == b);
    report(
        4,
        exact,
        &format!("doctored layer == x·sigmoid(x) on all {} doubles", out.numel()),
    );
}

#[test]
fn criterion_05_parameter_budgets_hold() {
    let count = |config: &HsdtConfig| -> usize {
        let (model, store) = build_model::<f32>(config, 1).expect("model builds");
        model.count_params(&store)
    };
    let small = count(&HsdtConfig::small());
    let medium = count(&HsdtConfig::medium());
    let large = count(&HsdtConfig::large());
    let dense = count(&HsdtConfig::medium().with_conv_variant(S3ConvVariant::Dense3d));

    let small_ok = (small as f64 - 130_000.0).abs() <= 0.15 * 130_000.0;
    let ratio_ms = medium as f64 / small as f64;
    let ratio_ms_ok = (3.6..=4.0).contains(&ratio_ms);

    // The large variant is the mid one plus a single extra innermost block.
    let mut store = ParamStore::<f32>::new();
    let mut rng = stream(1, LANE_GLOBAL + 1);
    let width = HsdtConfig::medium().base_channels;
    let block = TransformerBlock::new(
        &mut store,
        &mut rng,
        "blk",
        S3ConvVariant::Parallel2,
        width,
        width,
        1,
        31,
    )
    .expect("block builds");
    let _ = &block;
    let block_params = store.trainable_scalars();
    let delta_ok = large - medium == block_params;

    let ratio_dense = dense as f64 / medium as f64;
    let dense_ok = (1.05..=1.25).contains(&ratio_dense);

    let ok = small_ok && ratio_ms_ok && delta_ok && dense_ok;
    report(
        5,
        ok,
        &format!(
            "small {small} (0.13M ± 15%), medium/small {ratio_ms:.3} ∈ [3.6, 4.0], \
             large − medium = {} == inner block {block_params}, dense/medium {ratio_dense:.3} ∈ [1.05, 1.25]",
            large - medium
        ),
    );
}

#[test]
fn criterion_06_one_model_spans_arbitrary_band_counts() {
    let (model, store) = build_model::<f32>(&HsdtConfig::small(), 5).expect("model builds");
    let mut ok = true;
    let mut details = Vec::new();
    for d in [5usize, 31, 210] {
        let x = filled::<f32>(&[64, 64, d], 90 + d as u64);
        let started = Instant::now();
        let y = model.infer(&store, &x, None).expect("inference");
        let elapsed = started.elapsed();
        let shape_ok = y.shape() == x.shape();
        let time_ok = elapsed.as_secs_f64() < 30.0;
        ok &= shape_ok && time_ok;
        details.push(format!("D={d} {:.2}s", elapsed.as_secs_f64()));
    }
    report(
        6,
        ok,
        &format!("one instance, shapes preserved, {} (each < 30s)", details.join(", ")),
    );
}

#[test]
fn criterion_07_short_training_run_denoises_held_out_data() {
    let config = HsdtConfig::small().with_base_channels(8).with_d_train(8);
    let (model, mut store) = build_model::<f32>(&config, 11).expect("model builds");
    let mut adam = AdamState::new(&store).expect("fresh state");
    let dataset: Vec<Tensor<f32>> = (0..4)
        .map(|i| synth::low_rank_hsi(32, 32, 8, 3, 100 + i).expect("synthetic image"))
        .collect();
    let schedule =
        Schedule::new(vec![Stage { start: 0, end: 40, lr: 1e-3, warmup: false }]).expect("schedule");
    let noise = NoiseKind::Gaussian { sigma: 50.0 };
    let opts = TrainOptions {
        epochs: 6,
        batch: 4,
        patch: (16, 16),
        loss: LossKind::Mse,
        clip_norm: Some(5.0),
        steps_per_epoch: Some(25),
        attn: AttnPolicy::SelfOnly,
        seed: 7,
    };
    let rep = train_loop(&model, &mut store, &mut adam, &dataset, &noise, &schedule, &opts)
        .expect("training runs");
    let steps: usize = rep.epochs.iter().map(|e| e.steps).sum();

    let held = synth::low_rank_hsi::<f32>(32, 32, 8, 3, 999).expect("held-out image");
    let (noisy, _) = apply(&held, &noise, 424242).expect("degradation");
    let denoised = model.infer(&store, &noisy, None).expect("inference");
    let p_noisy = psnr(&held, &noisy, 1.0).expect("psnr");
    let p_denoised = psnr(&held, &denoised, 1.0).expect("psnr");
    let s_noisy = sam(&held, &noisy).expect("sam").radians;
    let s_denoised = sam(&held, &denoised).expect("sam").radians;

    let ok = steps <= 1000 && p_denoised >= p_noisy + 5.0 && s_denoised < s_noisy;
    report(
        7,
        ok,
        &format!(
            "{steps} steps (≤ 1000), psnr {p_noisy:.2} → {p_denoised:.2} dB (≥ +5), \
             sam {s_noisy:.3} → {s_denoised:.3} rad (decreased)"
        ),
    );
}

#[test]
fn criterion_08_degradations_follow_the_protocol() {
    let (h, w, d) = (16usize, 20usize, 9usize);
    let clean = filled::<f32>(&[h, w, d], 95).map(|v| v + 0.5);

    // Stripes: exactly max(1, D/3) bands carry them, counts clamped to
    // round(f·W) for f in [0.05, 0.15].
    let (_, stripe_log) = apply(&clean, &NoiseKind::Stripe, 31).expect("stripe");
    let striped: Vec<_> = stripe_log.bands.iter().filter(|b| !b.stripes.is_empty()).collect();
    let stripe_bands_ok = striped.len() == d / 3;
    let lo = 1usize; // clamp(round(0.05 · 20), 1, 20)
    let hi = 3usize; // clamp(round(0.15 · 20), 1, 20)
    let stripe_counts_ok = striped
        .iter()
        .all(|b| (lo..=hi).contains(&b.stripes.len()));

    // Dead columns zero out every row of the hit bands; a two-band cube
    // still degrades one band thanks to the max(1, ·) floor.
    let (dead_img, dead_log) = apply(&clean, &NoiseKind::Deadline, 32).expect("deadline");
    let dead: Vec<_> = dead_log.bands.iter().filter(|b| !b.dead_cols.is_empty()).collect();
    let dead_bands_ok = dead.len() == d / 3;
    let mut zeros_ok = true;
    for band in &dead {
        for &col in &band.dead_cols {
            for row in 0..h {
                zeros_ok &= dead_img.data()[(row * w + col) * d + band.band] == 0.0;
            }
        }
    }
    let tiny = filled::<f32>(&[6, 8, 2], 96).map(|v| v + 0.5);
    let (_, tiny_log) = apply(&tiny, &NoiseKind::Deadline, 33).expect("deadline tiny");
    let floor_ok = tiny_log.bands.iter().filter(|b| !b.dead_cols.is_empty()).count() == 1;

    // Impulse hits the same-size band subset.
    let (_, imp_log) = apply(&clean, &NoiseKind::Impulse, 34).expect("impulse");
    let imp_bands_ok =
        imp_log.bands.iter().filter(|b| b.impulse_density.is_some()).count() == d / 3;

    // Every kind reproduces bit-for-bit from its seed.
    let mut repro_ok = true;
    for kind in [
        NoiseKind::Gaussian { sigma: 30.0 },
        NoiseKind::GaussianBlind { lo: 10.0, hi: 70.0 },
        NoiseKind::NonIid,
        NoiseKind::Stripe,
        NoiseKind::Deadline,
        NoiseKind::Impulse,
        NoiseKind::Mixture,
    ] {
        let (a, log_a) = apply(&clean, &kind, 4242).expect("first draw");
        let (b, log_b) = apply(&clean, &kind, 4242).expect("second draw");
        repro_ok &= log_a == log_b
            && a.data()
                .iter()
                .zip(b.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
    }

    let ok = stripe_bands_ok
        && stripe_counts_ok
        && dead_bands_ok
        && zeros_ok
        && floor_ok
        && imp_bands_ok
        && repro_ok;
    report(
        8,
        ok,
        &format!(
            "band subsets {}/{}/{} of {d} (= max(1, D/3)), stripe counts within [{lo}, {hi}], \
             dead columns exactly zero: {zeros_ok}, two-band floor: {floor_ok}, \
             bitwise reproducible across all kinds: {repro_ok}",
            striped.len(),
            dead.len(),
            imp_log.bands.iter().filter(|b| b.impulse_density.is_some()).count()
        ),
    );
}

#[test]
fn criterion_09_metric_fixed_points_hold() {
    let flat = Tensor::full(&[8, 8, 3], 0.4f64).expect("flat cube");
    let shifted = flat.map(|v| v + 0.1);
    let p = psnr(&flat, &shifted, 1.0).expect("psnr");
    let psnr_ok = (p - 20.0).abs() <= 1e-6;

    // Orthogonal spectra meet at a right angle.
    let a = Tensor::from_vec(&[1, 1, 2], vec![1.0f64, 0.0]).unwrap();
    let b = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 1.0]).unwrap();
    let angle = sam(&a, &b).expect("sam").radians;
    let sam_ok = (angle - std::f64::consts::FRAC_PI_2).abs() <= 1e-9;

    let x = filled::<f64>(&[16, 16, 2], 97);
    let s = ssim(&x, &x, 1.0).expect("ssim");
    let ssim_ok = s == 1.0;

    report(
        9,
        psnr_ok && sam_ok && ssim_ok,
        &format!(
            "psnr(x, x+0.1) = {p:.8} dB (20 ± 1e-6), orthogonal sam = {angle:.12} rad \
             (π/2 ± 1e-9), ssim(x, x) = {s} (exactly 1)"
        ),
    );
}

#[test]
fn criterion_10_the_published_rate_table_is_reproduced() {
    let schedule = Schedule::standard();
    let stages = schedule.stages();
    let spe = 10usize;
    let mut ok = stages.len() == 13 && schedule.total_epochs() == 110;
    let mut cells = 0usize;
    for stage in stages {
        for epoch in stage.start..stage.end {
            for step in [0usize, spe / 2, spe - 1] {
                let lr = schedule.lr_at(epoch, step, spe).expect("within plan");
                let expected = if stage.warmup && epoch == stage.start {
                    stage.lr * (step + 1) as f64 / spe as f64
                } else {
                    stage.lr
                };
                ok &= lr == expected;
                cells += 1;
            }
        }
    }
    ok &= schedule.lr_at(110, 0, spe).is_err();
    report(
        10,
        ok,
        &format!(
            "13 stages over 110 epochs, {cells} sampled cells match exactly, \
             warm-up ramps only the first epoch of its stage, epoch 110 rejected"
        ),
    );
}

#[test]
fn criterion_11_plug_and_play_restoration_beats_its_baseline() {
    // Adjointness of both forward operators, 20 trials each in doubles.
    let dotp = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
    };
    let mut adj_worst = 0.0f64;
    let sr = SrOperator::new(&[32, 32, 4], 2).expect("operator");
    let mask = CassiOperator::<f64>::random_mask(8, 10, 77).expect("mask");
    let cassi = CassiOperator::new(&[8, 10, 5], mask, 1).expect("operator");
    let ops: [&dyn LinearOperator<f64>; 2] = [&sr, &cassi];
    for (which, op) in ops.iter().enumerate() {
        for trial in 0..20u64 {
            let x = filled::<f64>(op.domain(), 200 + trial);
            let ax = op.forward(&x).expect("forward");
            let y = filled::<f64>(ax.shape(), 300 + trial);
            let aty = op.adjoint(&y).expect("adjoint");
            let lhs = dotp(&ax, &y);
            let rhs = dotp(&x, &aty);
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            adj_worst = adj_worst.max((lhs - rhs).abs() / scale);
            let _ = which;
        }
    }
    let adj_ok = adj_worst <= 1e-6;

    // A blind denoiser trained on the synthetic family…
    let config = HsdtConfig::small()
        .with_base_channels(8)
        .with_d_train(4)
        .with_input_channels(2);
    let (model, mut store) = build_model::<f32>(&config, 21).expect("model builds");
    let mut adam = AdamState::new(&store).expect("fresh state");
    let dataset: Vec<Tensor<f32>> = (0..4)
        .map(|i| synth::low_rank_hsi(32, 32, 4, 8, 300 + i).expect("synthetic image"))
        .collect();
    let schedule =
        Schedule::new(vec![Stage { start: 0, end: 40, lr: 1e-3, warmup: false }]).expect("schedule");
    let opts = TrainOptions {
        epochs: 10,
        batch: 4,
        patch: (16, 16),
        loss: LossKind::Mse,
        clip_norm: Some(5.0),
        steps_per_epoch: Some(20),
        attn: AttnPolicy::SelfOnly,
        seed: 17,
    };
    train_loop(
        &model,
        &mut store,
        &mut adam,
        &dataset,
        &NoiseKind::GaussianBlind { lo: 5.0, hi: 55.0 },
        &schedule,
        &opts,
    )
    .expect("training runs");

    // …drives half-scale restoration past the bicubic baseline on a
    // held-out image, with a gentle prior weight so the data term leads.
    let truth = synth::low_rank_hsi::<f32>(32, 32, 4, 8, 888).expect("held-out image");
    let op32 = SrOperator::new(&[32, 32, 4], 2).expect("operator");
    let y = op32.forward(&truth).expect("observation");
    let denoiser = ModelDenoiser::new(&model, &store).expect("two-channel model");
    let mut problem = AdmmProblem::new(&op32, y.clone(), &denoiser, 6).expect("problem");
    problem.rho = log_linear(0.02, 0.02, 6).expect("plan");
    problem.sigma = log_linear(5.0 / 255.0, 5.0 / 255.0, 6).expect("plan");
    let (restored, diags) = admm_restore(&problem).expect("solver runs");
    let p_pnp = psnr(&truth, &restored, 1.0).expect("psnr");
    let p_bicubic =
        psnr(&truth, &bicubic_upsample(&y, 2).expect("baseline"), 1.0).expect("psnr");
    let fid1 = diags[0].fidelity;
    let fid5 = diags[4].fidelity;

    let ok = adj_ok && p_pnp >= p_bicubic && fid5 < fid1;
    report(
        11,
        ok,
        &format!(
            "adjointness worst rel {adj_worst:.2e} (≤ 1e-6), psnr {p_pnp:.2} vs bicubic \
             {p_bicubic:.2} dB, fidelity {fid1:.3e} → {fid5:.3e} by iteration 5"
        ),
    );
}

#[test]
fn criterion_12_attention_cost_scales_linearly_in_pixels() {
    let (d, c) = (8usize, 4usize);
    let mut store = ParamStore::<f32>::new();
    let mut rng = stream(33, LANE_GLOBAL + 900);
    let layer = GssaLayer::new(&mut store, &mut rng, "g", c, d).expect("layer");
    let count = |h: usize, w: usize| -> u64 {
        let x = filled::<f32>(&[h, w, d, c], 400 + (h * w) as u64);
        let mut rt = Eval::new();
        let bound = store.bind(&mut rt);
        let leaf = rt.leaf(x);
        rt.reset_arith_ops();
        let _ = layer
            .forward(&mut rt, &bound, &leaf, AttnMode::SelfAttn, true)
            .expect("forward");
        rt.arith_ops()
    };
    let base = count(16, 16);
    let quad = count(32, 32);
    let ratio = quad as f64 / base as f64;
    let ok = (3.8..=4.2).contains(&ratio);
    report(
        12,
        ok,
        &format!("4× pixels cost {ratio:.4}× operations (within 4 ± 5%)"),
    );
}
