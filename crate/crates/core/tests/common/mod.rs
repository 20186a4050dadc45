#![allow(dead_code, clippy::unnecessary_cast)]

use glowin::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph};
use glowin::model::{FlowConfig, Glow};
use glowin::objective::{pair_loss_graph, FactorSpec};
use glowin::rng::rand_uniform;
use glowin::{Float, Result, Rng, Tensor};
use nalgebra::DMatrix;

pub fn random_model(config: FlowConfig, seed: u64, scale: Float) -> Glow {
    let mut rng = Rng::new(seed);
    let mut model = Glow::new(config, &mut rng).unwrap();
    model.perturb_parameters(&mut rng, scale).unwrap();
    model
}

pub fn random_input(config: &FlowConfig, rng: &mut Rng) -> Tensor {
    rand_uniform(rng, &config.input_shape, -0.5, 0.5).unwrap()
}

/// Central-difference Jacobian of the flattened encoder output, reduced to
/// log|det| with an LU from nalgebra.
pub fn numerical_log_det(model: &Glow, x: &Tensor, eps: Float) -> f64 {
    let n = x.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut work = x.clone();
    for j in 0..n {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + eps;
        let up = model.encode(&work).unwrap().flatten();
        work.data_mut()[j] = orig - eps;
        let down = model.encode(&work).unwrap().flatten();
        work.data_mut()[j] = orig;
        for i in 0..n {
            jac[(i, j)] = ((up[i] - down[i]) / (2.0 * eps)) as f64;
        }
    }
    let lu = jac.lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

pub fn desk_config() -> FlowConfig {
    FlowConfig::default()
}

pub fn desk_spec() -> FactorSpec {
    FactorSpec::anomaly_slice([3, 4, 1], 0.85).unwrap()
}

/// Finite-difference check of the full pair loss with respect to every model
/// parameter, on `sample` randomly chosen coordinates.
pub fn pair_loss_grad_check(
    model: &Glow,
    spec: &FactorSpec,
    f: Option<usize>,
    sample: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let x_a = random_input(model.config(), &mut rng);
    let x_b = random_input(model.config(), &mut rng);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let opts = GradCheckOptions {
        sample: Some(sample),
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(
        |g: &mut Graph, vars| {
            let a = g.constant(x_a.clone());
            let b = g.constant(x_b.clone());
            Ok(pair_loss_graph(g, model, vars, a, b, f, spec)?.total)
        },
        &params,
        &opts,
    )
}
