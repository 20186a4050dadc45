//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::unnecessary_cast)]

mod common;

use std::time::Instant;

use common::*;
use glowin::checkpoint::Checkpoint;
use glowin::data::{self, detect_blob, ellipse_area, generate_corpus, Corpus, GrayImage, SynthParams};
use glowin::latent::{interpolate_factor, noise_sweep, Selection};
use glowin::model::{FlowConfig, Glow, LatentBundle};
use glowin::objective::{factor_loss, FactorSpec};
use glowin::probes::{factor_report, mean_metric, sweep_classification, MlpRegressor};
use glowin::train::{TrainConfig, Trainer};
use glowin::{Float, Rng, Tensor};

const FLOAT_IS_F32: bool = cfg!(feature = "f32");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Desk {
    model: Glow,
    spec: FactorSpec,
    params: SynthParams,
    /// Images the model never saw, used by every downstream check.
    fresh: Corpus,
}

const DESK_IMAGES: usize = 4000;
const DESK_STEPS: u64 = 5000;
const PROBE_SEEDS: [u64; 3] = [0, 1, 2];
const INTERP_PAIRS: usize = 50;

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        levels: 2,
        steps: 8,
        hidden_width: 64,
        factor_widths: vec![3, 4, 1],
        factor_mix: vec![0.8, 0.2],
        max_steps: DESK_STEPS,
        holdout_fraction: 0.1,
        holdout_max: 100,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn train_desk() -> glowin::Result<Desk> {
    let params = SynthParams::default();
    let corpus = generate_corpus(1, DESK_IMAGES, &params)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(desk_train_config(), corpus)?;
    trainer.run(|_, m| {
        if m.step % 500 == 0 {
            eprintln!(
                "  desk training step {} loss {:.2} ({:.0}s)",
                m.step,
                m.loss_total,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let spec = trainer.spec().clone();
    Ok(Desk {
        model: trainer.into_model(),
        spec,
        params: params.clone(),
        fresh: generate_corpus(2, 2000, &params)?,
    })
}

fn invertibility() -> glowin::Result<Outcome> {
    let tol = if FLOAT_IS_F32 { 1e-4 } else { 1e-8 };
    let mut rng = Rng::new(100);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let levels = 1 + rng.below(3);
        let steps = [1, 2, 4][rng.below(3)];
        let min_size = 1 << levels;
        let size = loop {
            let s = [4, 8, 16, 32][rng.below(4)];
            if s >= min_size {
                break s;
            }
        };
        let cfg = FlowConfig {
            levels,
            steps,
            input_shape: [1, size, size],
            hidden_width: 16,
            ..FlowConfig::default()
        };
        let model = random_model(cfg.clone(), 200 + i, 0.05);
        let x = random_input(&cfg, &mut rng);
        let back = model.decode_bundle(&model.encode(&x)?)?;
        worst = worst.max(x.max_abs_diff(&back) as f64);
    }
    Ok(outcome(
        worst < tol,
        format!("20 configs, max |x - decode(encode(x))| = {worst:.2e} (tol {tol:.0e})"),
    ))
}

fn jacobian() -> glowin::Result<Outcome> {
    let cfg = FlowConfig {
        levels: 2,
        steps: 2,
        input_shape: [1, 8, 8],
        hidden_width: 16,
        ..FlowConfig::default()
    };
    let model = random_model(cfg.clone(), 31, 0.1);
    let x = random_input(&cfg, &mut Rng::new(32));
    let analytic = model.encode(&x)?.total_logdet as f64;
    let eps = if FLOAT_IS_F32 { 1e-2 } else { 1e-5 };
    let numeric = numerical_log_det(&model, &x, eps);
    let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
    Ok(outcome(
        rel < 1e-3,
        format!("analytic {analytic:.8} vs 64x64 numerical {numeric:.8}, rel err {rel:.2e} (tol 1e-3)"),
    ))
}

fn gradient() -> glowin::Result<Outcome> {
    let tol = if FLOAT_IS_F32 { 1e-2 } else { 1e-4 };
    let model = random_model(desk_config(), 41, 0.05);
    let spec = desk_spec();
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut floor: f64 = 0.0;
    let mut checked = 0;
    for (i, f) in [Some(0), Some(1)].into_iter().enumerate() {
        let r = pair_loss_grad_check(&model, &spec, f, 120, 42 + i as u64)?;
        worst = worst.max(r.max_rel_err as f64);
        worst_abs = worst_abs.max(r.max_abs_err as f64);
        floor = floor.max(r.floor as f64);
        checked += r.checked;
    }
    Ok(outcome(
        worst < tol && checked >= 200,
        format!(
            "{checked} of {} parameters, max rel err {worst:.2e} (tol {tol:.0e}, roundoff floor {floor:.1e}), \
             max abs err {worst_abs:.1e}",
            model.num_params()
        ),
    ))
}

fn bundle(z: Tensor) -> LatentBundle {
    LatentBundle {
        intermediates: vec![],
        final_latent: z,
        scale_logdets: vec![0.0],
        total_logdet: 0.0,
    }
}

fn factor_values() -> glowin::Result<Outcome> {
    let tol = if FLOAT_IS_F32 { 1e-5 } else { 1e-10 };
    let spec = FactorSpec::new(vec![1, 1], 0.85)?;
    let a = bundle(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0])?);
    let b = bundle(Tensor::new(vec![2, 1, 1], vec![0.85, 0.0])?);
    let toy = factor_loss(&a, &b, Some(0), &spec)? as f64;

    // Identical latents: the shared factor keeps (1-s)/(1+s) of its norm.
    let spec = FactorSpec::anomaly_slice([3, 4, 1], 0.85)?;
    let z = glowin::rng::randn(&mut Rng::new(5), &[8, 2, 2])?;
    let zb = bundle(z.clone());
    let s = 0.85;
    let mut worst: f64 = 0.0;
    for f in 0..2 {
        let norms: Vec<f64> = (0..3)
            .map(|k| z.channel_slice(spec.offset(k), spec.widths[k]).unwrap().sum_sq() as f64)
            .collect();
        let others: f64 = (0..3).filter(|&k| k != f).map(|k| norms[k]).sum();
        let expected = norms.iter().sum::<f64>() + others + norms[f] * (1.0 - s) / (1.0 + s);
        let got = factor_loss(&zb, &zb, Some(f), &spec)? as f64;
        worst = worst.max((got - expected).abs());
    }
    let toy_err = (toy - 1.0).abs();
    Ok(outcome(
        toy_err < tol && worst < tol,
        format!("toy loss {toy:.12} (err {toy_err:.1e}); identical-pair identity err {worst:.1e}"),
    ))
}

fn dimensions() -> glowin::Result<Outcome> {
    let cfg = FlowConfig::reference();
    let zl = cfg.final_latent_shape();
    let spec = FactorSpec::anomaly_slice([6, 8, 2], 0.85)?;
    let per_channel = zl[1] * zl[2];
    let dims: Vec<usize> = spec.widths.iter().map(|w| w * per_channel).collect();
    let total: usize = cfg
        .intermediate_shapes()
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum::<usize>()
        + zl.iter().product::<usize>();
    let pass = zl == [16, 8, 8] && dims == [384, 512, 128] && total == 4096 && spec.channels() == zl[0];
    Ok(outcome(
        pass,
        format!("z_L {zl:?}, factor dims {dims:?}, total latent dims {total}"),
    ))
}

fn disentanglement(desk: &Desk) -> glowin::Result<Outcome> {
    let recs = factor_report(&desk.model, &desk.spec, &desk.fresh, &PROBE_SEEDS, MlpRegressor::EPOCHS)?;
    let get = |task, set, metric| mean_metric(&recs, task, set, metric).unwrap_or(f64::NAN);
    let acc_anomaly = get("classification", "anomaly", "accuracy");
    let acc_residual = get("classification", "residual", "accuracy");
    let mae_slice = get("regression", "slice_index", "mae");
    let mae_anomaly = get("regression", "anomaly", "mae");
    let pass = acc_anomaly - acc_residual >= 0.1 && mae_slice <= 0.75 * mae_anomaly;
    Ok(outcome(
        pass,
        format!(
            "accuracy anomaly {acc_anomaly:.3} vs residual {acc_residual:.3}; \
             slice MAE slice {mae_slice:.3} vs anomaly {mae_anomaly:.3} (ratio {:.2})",
            mae_slice / mae_anomaly
        ),
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Swap factor `m` of `a` for that of `b` and decode. Returns the
/// reconstruction of `a` and the swapped image, or `None` when the decoder
/// leaves the valid domain.
fn swap(desk: &Desk, a: &GrayImage, b: &GrayImage, m: usize) -> glowin::Result<Option<(GrayImage, GrayImage)>> {
    let n_bits = desk.model.config().n_bits;
    let xa = data::to_model_input(a, n_bits)?;
    let xb = data::to_model_input(b, n_bits)?;
    match interpolate_factor(&desk.model, &desk.spec, &xa, &xb, m, 2) {
        Ok(seq) => Ok(Some((
            data::to_image(&seq[0], n_bits)?,
            data::to_image(&seq[1], n_bits)?,
        ))),
        Err(glowin::Error::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn relative_change(before: &GrayImage, after: &GrayImage, p: &SynthParams) -> f64 {
    let a0 = ellipse_area(before, p);
    (ellipse_area(after, p) - a0).abs() / a0
}

fn interpolation(desk: &Desk) -> glowin::Result<Outcome> {
    let p = &desk.params;
    let samples = &desk.fresh.samples;
    let anomaly = desk.spec.index_of("anomaly").expect("anomaly factor");
    let slice = desk.spec.index_of("slice_index").expect("slice factor");

    // Anomaly factor: anomalous image takes a healthy image's anomaly factor.
    let sick = samples.iter().filter(|s| s.label.anomaly);
    let healthy = samples.iter().filter(|s| !s.label.anomaly);
    let (mut flips, mut changes) = (0, Vec::new());
    for (a, b) in sick.zip(healthy).take(INTERP_PAIRS) {
        match swap(desk, &a.image, &b.image, anomaly)? {
            Some((rec, out)) => {
                if detect_blob(&rec, p) && !detect_blob(&out, p) {
                    flips += 1;
                }
                changes.push(relative_change(&rec, &out, p));
            }
            None => changes.push(f64::INFINITY),
        }
    }
    let flip_rate = flips as f64 / INTERP_PAIRS as f64;
    let area_a = median(changes);

    // Slice factor: mid-volume image takes the slice factor of an extreme
    // slice with the opposite anomaly status.
    let mid: Vec<_> = samples
        .iter()
        .filter(|s| (0.35..0.65).contains(&s.label.slice_index))
        .collect();
    let edge: Vec<_> = samples
        .iter()
        .filter(|s| !(0.15..0.85).contains(&s.label.slice_index))
        .collect();
    let (mut kept, mut changes) = (0, Vec::new());
    let mut used = vec![false; edge.len()];
    for a in mid.iter().take(INTERP_PAIRS) {
        let j = (0..edge.len())
            .find(|&j| !used[j] && edge[j].label.anomaly != a.label.anomaly)
            .expect("enough extreme slices");
        used[j] = true;
        match swap(desk, &a.image, &edge[j].image, slice)? {
            Some((rec, out)) => {
                if detect_blob(&rec, p) == detect_blob(&out, p) {
                    kept += 1;
                }
                changes.push(relative_change(&rec, &out, p));
            }
            None => changes.push(f64::NAN),
        }
    }
    let keep_rate = kept as f64 / INTERP_PAIRS as f64;
    let area_s = median(changes.into_iter().map(|c| if c.is_nan() { 0.0 } else { c }).collect());

    let pass = flip_rate >= 0.7 && area_a < 0.15 && keep_rate >= 0.7 && area_s >= 0.15;
    Ok(outcome(
        pass,
        format!(
            "anomaly swap: detector flips {flips}/{INTERP_PAIRS}, median size change {area_a:.3}; \
             slice swap: detector kept {kept}/{INTERP_PAIRS}, median size change {area_s:.3}"
        ),
    ))
}

fn noise(desk: &Desk) -> glowin::Result<Outcome> {
    let weights: [Float; 5] = [0.0, 0.05, 0.1, 0.2, 0.3];
    let corpus = desk.fresh.subset(&(0..1000).collect::<Vec<_>>());
    let anomaly = desk.spec.index_of("anomaly").expect("anomaly factor");
    let sweep = noise_sweep(
        &desk.model,
        &desk.spec,
        &corpus,
        &weights,
        Selection::Factor(anomaly),
        7,
    )?;
    let rows = sweep_classification(&sweep, &PROBE_SEEDS)?;
    let mean_auc = |w: Float| {
        let v: Vec<f64> = rows.iter().filter(|r| r.0 == w as f64).map(|r| r.2.auc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let table: Vec<String> = weights.iter().map(|&w| format!("{w}:{:.3}", mean_auc(w))).collect();
    let pass = rows.len() == 15 && mean_auc(0.3) <= mean_auc(0.0);
    Ok(outcome(pass, format!("AUC by weight {}", table.join(" "))))
}

fn determinism() -> glowin::Result<Outcome> {
    let corpus = generate_corpus(9, 80, &SynthParams::default())?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        levels: 2,
        steps: 2,
        hidden_width: 16,
        factor_widths: vec![3, 4, 1],
        max_steps: 10,
        holdout_fraction: 0.2,
        holdout_max: 8,
        slice_bins: 4,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = |stop: u64| -> glowin::Result<(Vec<String>, Trainer)> {
        let mut c = cfg.clone();
        c.max_steps = stop;
        let mut t = Trainer::new(c, corpus.clone())?;
        let mut rows = Vec::new();
        t.run(|_, m| {
            rows.push(m.csv_row());
            Ok(())
        })?;
        Ok((rows, t))
    };
    let (first, _) = run(10)?;
    let (second, _) = run(10)?;
    let identical = first == second;

    let (_, half) = run(5)?;
    let bytes = Checkpoint::from_trainer(&half).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes)?.into_trainer(corpus.clone(), Some(cfg.clone()))?;
    let next = resumed.train_step()?.csv_row();
    let resume_matches = next == first[5];
    Ok(outcome(
        identical && resume_matches,
        format!("metrics rows identical across runs: {identical}; resumed step 6 matches: {resume_matches}"),
    ))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, start: Instant, r: glowin::Result<Outcome>| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
    };

    let t = Instant::now();
    report(1, "invertibility", t, invertibility());
    let t = Instant::now();
    report(2, "jacobian", t, jacobian());
    let t = Instant::now();
    report(3, "gradient", t, gradient());
    let t = Instant::now();
    report(4, "factor loss values", t, factor_values());
    let t = Instant::now();
    report(5, "dimensions", t, dimensions());

    let t = Instant::now();
    match train_desk() {
        Ok(desk) => {
            let trained = t.elapsed().as_secs_f64();
            eprintln!("  desk model trained in {trained:.0}s");
            report(6, "disentanglement", t, disentanglement(&desk));
            let t = Instant::now();
            report(7, "interpolation", t, interpolation(&desk));
            let t = Instant::now();
            report(8, "noise sweep", t, noise(&desk));
        }
        Err(e) => {
            for (id, name) in [(6, "disentanglement"), (7, "interpolation"), (8, "noise sweep")] {
                report(
                    id,
                    name,
                    t,
                    Err(glowin::Error::InvalidArgument(format!("desk training failed: {e}"))),
                );
            }
        }
    }
    let t = Instant::now();
    report(9, "determinism", t, determinism());
    println!(
        "INFO 10 reference-scale numbers (bits/dim 2.588 and 2.602, accuracy 77.23% with AUC 0.85, \
         MAE 0.048 with R2 0.868) need the full MRI dataset and multi-GPU training; not reproduced here"
    );

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
