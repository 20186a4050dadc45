//! Central finite-difference check of graph gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: Float,
    /// Pass threshold on the maximum relative error.
    pub tol: Float,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    /// The floor is raised further to `machine_eps * |f| / (eps * tol)`, the
    /// smallest gradient central differences can resolve to `tol` given
    /// roundoff in `f` itself.
    pub floor: Float,
    /// Check only this many randomly chosen coordinates (all when `None`).
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: if cfg!(feature = "f32") { 1e-2 } else { 1e-6 },
            tol: if cfg!(feature = "f32") { 1e-2 } else { 1e-4 },
            floor: 1e-6,
            sample: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: Float,
    pub max_abs_err: Float,
    /// `(param index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    /// Denominator floor actually used.
    pub floor: Float,
    pub passed: bool,
}

/// Compare the reverse-mode gradient of a scalar `f` against central
/// differences, perturbing `params` one coordinate at a time.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<Float> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let value = g.value(root).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let floor = opts
        .floor
        .max(Float::EPSILON * value.abs().max(1.0) / (opts.eps * opts.tol));
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |k| (pi, k)))
        .collect();
    if let Some(n) = opts.sample {
        let mut rng = Rng::new(opts.seed);
        rng.shuffle(&mut coords);
        coords.truncate(n);
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        floor,
        passed: true,
    };
    for (pi, k) in coords {
        let orig = work[pi].data()[k];
        work[pi].data_mut()[k] = orig + opts.eps;
        let up = eval(&work)?;
        work[pi].data_mut()[k] = orig - opts.eps;
        let down = eval(&work)?;
        work[pi].data_mut()[k] = orig;

        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[pi].data()[k];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (pi, k);
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}
