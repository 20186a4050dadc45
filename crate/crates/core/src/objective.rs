//! Channel factorization of the final latent and the pair objective:
//! per-scale Gaussian loss on the intermediate latents, the factor loss
//! coupling the shared factor of two images, and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{EncodedVars, Glow, LatentBundle, HALF_LOG_2PI};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_SIGMA: Float = 0.85;

/// Factor layout of `z_L`: `widths[0..M]` are semantic factors, the last
/// entry is the residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub widths: Vec<usize>,
    /// Correlation used when factor `m` is the shared one.
    pub sigmas: Vec<Float>,
    pub names: Vec<String>,
    /// Add the `0.5 ln 2pi` per-dimension constant of `z_L` to the factor
    /// loss. Gradients are unaffected.
    pub include_constants: bool,
}

impl FactorSpec {
    /// Widths with every sigma set to `sigma`. Names default to
    /// `factor0, factor1, ..., residual`.
    pub fn new(widths: Vec<usize>, sigma: Float) -> Result<Self> {
        let n = widths.len();
        let names = (0..n)
            .map(|i| {
                if i + 1 == n {
                    "residual".to_string()
                } else {
                    format!("factor{i}")
                }
            })
            .collect();
        let spec = FactorSpec {
            sigmas: vec![sigma; n],
            widths,
            names,
            include_constants: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The two-factor layout used for the synthetic corpus.
    pub fn anomaly_slice(widths: [usize; 3], sigma: Float) -> Result<Self> {
        let mut spec = Self::new(widths.to_vec(), sigma)?;
        spec.names = vec!["anomaly".into(), "slice_index".into(), "residual".into()];
        Ok(spec)
    }

    /// A single residual factor: no pairing, plain likelihood on `z_L`.
    pub fn residual_only(channels: usize) -> Self {
        FactorSpec {
            widths: vec![channels],
            sigmas: vec![DEFAULT_SIGMA],
            names: vec!["residual".into()],
            include_constants: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "factor widths {:?} must be positive",
                self.widths
            )));
        }
        if self.sigmas.len() != self.widths.len() || self.names.len() != self.widths.len() {
            return Err(Error::invalid("factor sigmas/names do not match widths"));
        }
        for &s in &self.sigmas {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::invalid(format!("sigma {s} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Number of semantic factors (M).
    pub fn semantic_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn channels(&self) -> usize {
        self.widths.iter().sum()
    }

    /// First channel of factor `m`.
    pub fn offset(&self, m: usize) -> usize {
        self.widths[..m].iter().sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if self.channels() != c {
            return Err(Error::invalid(format!(
                "factor widths {:?} sum to {}, latent has {c} channels",
                self.widths,
                self.channels()
            )));
        }
        Ok(())
    }

    fn check_factor(&self, f: Option<usize>) -> Result<()> {
        match f {
            Some(f) if f >= self.widths.len() => Err(Error::invalid(format!(
                "factor index {f} outside 0..={}",
                self.widths.len() - 1
            ))),
            _ => Ok(()),
        }
    }
}

/// Contiguous channel slices of `z` in declared order.
pub fn factorize(z: &Tensor, spec: &FactorSpec) -> Result<Vec<Tensor>> {
    let (c, _, _) = z.chw()?;
    spec.check_channels(c)?;
    spec.widths
        .iter()
        .enumerate()
        .map(|(m, &w)| z.channel_slice(spec.offset(m), w))
        .collect()
}

pub fn unfactorize(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_channels(&refs)
}

/// Individual terms of the factor loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTerms {
    /// `||z_a^k||^2` for every factor.
    pub norms_a: Vec<Float>,
    /// `||z_b^k||^2` for every factor (including the shared one, which the
    /// loss itself replaces by the correlated term).
    pub norms_b: Vec<Float>,
    /// `||z_b^F - sigma z_a^F||^2 / (1 - sigma^2)`, zero without a shared
    /// factor.
    pub correlated: Float,
    pub logdet_a: Float,
    pub logdet_b: Float,
    pub total: Float,
}

/// Factor loss on the final latents of a pair, with `f` the shared factor
/// (`None`: the images are scored independently).
pub fn factor_terms(a: &LatentBundle, b: &LatentBundle, f: Option<usize>, spec: &FactorSpec) -> Result<FactorTerms> {
    spec.check_factor(f)?;
    if a.final_latent.shape() != b.final_latent.shape() {
        return Err(Error::shape(format!(
            "final latents differ: {:?} vs {:?}",
            a.final_latent.shape(),
            b.final_latent.shape()
        )));
    }
    let fa = factorize(&a.final_latent, spec)?;
    let fb = factorize(&b.final_latent, spec)?;
    let norms_a: Vec<Float> = fa.iter().map(Tensor::sum_sq).collect();
    let norms_b: Vec<Float> = fb.iter().map(Tensor::sum_sq).collect();
    let correlated = match f {
        Some(f) => {
            let s = spec.sigmas[f];
            fb[f].zip_map(&fa[f], |zb, za| zb - s * za)?.sum_sq() / (1.0 - s * s)
        }
        None => 0.0,
    };
    let logdet_a = *a
        .scale_logdets
        .last()
        .ok_or_else(|| Error::invalid("bundle has no scales"))?;
    let logdet_b = *b
        .scale_logdets
        .last()
        .ok_or_else(|| Error::invalid("bundle has no scales"))?;
    let b_rest: Float = norms_b
        .iter()
        .enumerate()
        .filter(|&(k, _)| Some(k) != f)
        .map(|(_, v)| v)
        .sum();
    let mut total = norms_a.iter().sum::<Float>() - logdet_a + b_rest - logdet_b + correlated;
    if spec.include_constants {
        total += 2.0 * HALF_LOG_2PI * a.final_latent.len() as Float;
    }
    Ok(FactorTerms {
        norms_a,
        norms_b,
        correlated,
        logdet_a,
        logdet_b,
        total,
    })
}

pub fn factor_loss(a: &LatentBundle, b: &LatentBundle, f: Option<usize>, spec: &FactorSpec) -> Result<Float> {
    Ok(factor_terms(a, b, f, spec)?.total)
}

/// `sum_i [0.5 (D_i ln 2pi + ||z_i||^2) - logdet_i]` over the intermediate
/// scales, with the constant counted once per latent dimension.
pub fn scale_loss(b: &LatentBundle) -> Float {
    b.intermediates
        .iter()
        .zip(&b.scale_logdets)
        .map(|(z, ld)| HALF_LOG_2PI * z.len() as Float + 0.5 * z.sum_sq() - ld)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairLossBreakdown {
    pub l_s_a: Float,
    pub l_s_b: Float,
    pub l_f: Float,
    pub total: Float,
    pub factor: FactorTerms,
}

/// Graph nodes of one pair's loss.
#[derive(Clone, Copy, Debug)]
pub struct PairLossVars {
    pub l_s_a: Var,
    pub l_s_b: Var,
    pub l_f: Var,
    pub total: Var,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

pub fn scale_loss_graph(g: &mut Graph, enc: &EncodedVars) -> Result<Var> {
    let mut terms = Vec::with_capacity(enc.intermediates.len());
    for (&z, &ld) in enc.intermediates.iter().zip(&enc.scale_logdets) {
        let d = g.value(z).len() as Float;
        let sq = g.sum_sq(z)?;
        let half = g.mul_scalar(sq, 0.5)?;
        let with_const = g.add_scalar(half, HALF_LOG_2PI * d)?;
        terms.push(g.sub(with_const, ld)?);
    }
    match sum_vars(g, &terms)? {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

pub fn factor_loss_graph(
    g: &mut Graph,
    a: &EncodedVars,
    b: &EncodedVars,
    f: Option<usize>,
    spec: &FactorSpec,
) -> Result<Var> {
    spec.check_factor(f)?;
    let c = g.shape(a.final_latent)[0];
    spec.check_channels(c)?;
    let mut terms = Vec::new();
    for (m, &w) in spec.widths.iter().enumerate() {
        let off = spec.offset(m);
        let za = g.slice_channels(a.final_latent, off, w)?;
        terms.push(g.sum_sq(za)?);
    }
    let ld_a = *a.scale_logdets.last().ok_or_else(|| Error::invalid("no scales"))?;
    terms.push(g.neg(ld_a)?);
    for (m, &w) in spec.widths.iter().enumerate() {
        let off = spec.offset(m);
        let zb = g.slice_channels(b.final_latent, off, w)?;
        if Some(m) == f {
            let s = spec.sigmas[m];
            let za = g.slice_channels(a.final_latent, off, w)?;
            let sza = g.mul_scalar(za, s)?;
            let diff = g.sub(zb, sza)?;
            let sq = g.sum_sq(diff)?;
            terms.push(g.mul_scalar(sq, 1.0 / (1.0 - s * s))?);
        } else {
            terms.push(g.sum_sq(zb)?);
        }
    }
    let ld_b = *b.scale_logdets.last().ok_or_else(|| Error::invalid("no scales"))?;
    terms.push(g.neg(ld_b)?);
    let mut total = sum_vars(g, &terms)?.expect("nonempty");
    if spec.include_constants {
        let d = g.value(a.final_latent).len() as Float;
        total = g.add_scalar(total, 2.0 * HALF_LOG_2PI * d)?;
    }
    Ok(total)
}

/// Differentiable pair loss with model parameters already bound.
pub fn pair_loss_graph(
    g: &mut Graph,
    model: &Glow,
    params: &[Var],
    x_a: Var,
    x_b: Var,
    f: Option<usize>,
    spec: &FactorSpec,
) -> Result<PairLossVars> {
    let ea = model.encode_graph(g, params, x_a)?;
    let eb = model.encode_graph(g, params, x_b)?;
    let l_s_a = scale_loss_graph(g, &ea)?;
    let l_s_b = scale_loss_graph(g, &eb)?;
    let l_f = factor_loss_graph(g, &ea, &eb, f, spec)?;
    let s = g.add(l_s_a, l_s_b)?;
    let total = g.add(s, l_f)?;
    Ok(PairLossVars {
        l_s_a,
        l_s_b,
        l_f,
        total,
    })
}

/// Pair loss of two dequantized images.
pub fn pair_loss(
    model: &Glow,
    x_a: &Tensor,
    x_b: &Tensor,
    f: Option<usize>,
    spec: &FactorSpec,
) -> Result<PairLossBreakdown> {
    let a = model.encode(x_a)?;
    let b = model.encode(x_b)?;
    pair_loss_from_bundles(&a, &b, f, spec)
}

pub fn pair_loss_from_bundles(
    a: &LatentBundle,
    b: &LatentBundle,
    f: Option<usize>,
    spec: &FactorSpec,
) -> Result<PairLossBreakdown> {
    let factor = factor_terms(a, b, f, spec)?;
    let l_s_a = scale_loss(a);
    let l_s_b = scale_loss(b);
    let l_f = factor.total;
    let total = l_s_a + l_s_b + l_f;
    if !total.is_finite() {
        return Err(Error::NonFinite("pair loss".into()));
    }
    Ok(PairLossBreakdown {
        l_s_a,
        l_s_b,
        l_f,
        total,
        factor,
    })
}
