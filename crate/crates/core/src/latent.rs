//! Latent-space manipulation of a trained model: factor and full
//! interpolation, latent tables, and noisy-input exports.

use std::path::Path;

use crate::data::{self, Corpus, Label};
use crate::error::{Error, Result};
use crate::model::{Glow, LatentBundle};
use crate::objective::{factorize, FactorSpec};
use crate::rng::{randn, Rng};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_NOISE_WEIGHTS: [Float; 5] = [0.0, 0.05, 0.1, 0.2, 0.3];

fn lambdas(steps: usize) -> Result<Vec<Float>> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    Ok((0..steps).map(|i| i as Float / (steps - 1) as Float).collect())
}

fn lerp(a: &Tensor, b: &Tensor, t: Float) -> Result<Tensor> {
    a.zip_map(b, |x, y| (1.0 - t) * x + t * y)
}

/// Latents along a factor interpolation: only the channel slice of factor
/// `m` in seed 1's `z_L` moves toward seed 2's; everything else is seed 1's.
pub fn factor_path(
    seed1: &LatentBundle,
    seed2: &LatentBundle,
    spec: &FactorSpec,
    m: usize,
    steps: usize,
) -> Result<Vec<(Vec<Tensor>, Tensor)>> {
    if m >= spec.widths.len() {
        return Err(Error::invalid(format!("factor index {m} out of range")));
    }
    let p1 = factorize(&seed1.final_latent, spec)?;
    let p2 = factorize(&seed2.final_latent, spec)?;
    lambdas(steps)?
        .into_iter()
        .map(|t| {
            let mut parts = p1.clone();
            parts[m] = lerp(&p1[m], &p2[m], t)?;
            let refs: Vec<&Tensor> = parts.iter().collect();
            Ok((seed1.intermediates.clone(), Tensor::concat_channels(&refs)?))
        })
        .collect()
}

/// Decode a factor interpolation from `x1` toward `x2`.
pub fn interpolate_factor(
    model: &Glow,
    spec: &FactorSpec,
    x1: &Tensor,
    x2: &Tensor,
    m: usize,
    steps: usize,
) -> Result<Vec<Tensor>> {
    let b1 = model.encode(x1)?;
    let b2 = model.encode(x2)?;
    factor_path(&b1, &b2, spec, m, steps)?
        .iter()
        .map(|(zs, top)| model.decode(zs, top))
        .collect()
}

/// Latents along a linear path between two bundles, all coordinates moving.
pub fn full_path(b1: &LatentBundle, b2: &LatentBundle, steps: usize) -> Result<Vec<(Vec<Tensor>, Tensor)>> {
    lambdas(steps)?
        .into_iter()
        .map(|t| {
            let zs = b1
                .intermediates
                .iter()
                .zip(&b2.intermediates)
                .map(|(a, b)| lerp(a, b, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((zs, lerp(&b1.final_latent, &b2.final_latent, t)?))
        })
        .collect()
}

pub fn interpolate_full(model: &Glow, x1: &Tensor, x2: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    let b1 = model.encode(x1)?;
    let b2 = model.encode(x2)?;
    full_path(&b1, &b2, steps)?
        .iter()
        .map(|(zs, top)| model.decode(zs, top))
        .collect()
}

/// Which latent coordinates to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// The flattened final latent `z_L`.
    Final,
    /// One factor of `z_L`.
    Factor(usize),
    /// Every latent, intermediates first.
    All,
}

impl Selection {
    /// `full`, `all`, or a factor name from `spec`.
    pub fn parse(s: &str, spec: &FactorSpec) -> Result<Self> {
        match s {
            "full" => Ok(Selection::Final),
            "all" => Ok(Selection::All),
            name => spec.index_of(name).map(Selection::Factor).ok_or_else(|| {
                Error::invalid(format!(
                    "unknown factor `{name}`; expected full, all or one of {:?}",
                    spec.names
                ))
            }),
        }
    }

    pub fn extract(&self, b: &LatentBundle, spec: &FactorSpec) -> Result<Vec<Float>> {
        Ok(match *self {
            Selection::Final => b.final_latent.data().to_vec(),
            Selection::Factor(m) => {
                let parts = factorize(&b.final_latent, spec)?;
                parts
                    .get(m)
                    .ok_or_else(|| Error::invalid(format!("factor index {m} out of range")))?
                    .data()
                    .to_vec()
            }
            Selection::All => b.flatten(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub filename: String,
    pub label: Label,
    pub values: Vec<Float>,
}

/// One row of latent values per image.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LatentTable {
    pub rows: Vec<LatentRow>,
}

impl LatentTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.values.len())
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.values.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Header `filename,anomaly,slice_index,z_0,...`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::data(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["filename".to_string(), "anomaly".into(), "slice_index".into()];
        header.extend((0..self.dim()).map(|i| format!("z_{i}")));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.filename.clone(),
                (r.label.anomaly as u8).to_string(),
                r.label.slice_index.to_string(),
            ];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::data(path, e.to_string());
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let header = r.headers().map_err(err)?.clone();
        let dim = header.len().saturating_sub(3);
        let expected: Vec<String> = ["filename", "anomaly", "slice_index"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..dim).map(|i| format!("z_{i}")))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) || dim == 0 {
            return Err(Error::data(path, "header must be filename,anomaly,slice_index,z_0,..."));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(err)?;
            let line = i + 2;
            let bad = |what: &str| Error::data(path, format!("line {line}: bad {what}"));
            let anomaly = match &rec[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("anomaly")),
            };
            let slice_index: f64 = rec[2].parse().map_err(|_| bad("slice_index"))?;
            let values = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<Float>().map_err(|_| bad("latent value")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LatentRow {
                filename: rec[0].to_string(),
                label: Label { anomaly, slice_index },
                values,
            });
        }
        if rows.is_empty() {
            return Err(Error::data(path, "no rows"));
        }
        Ok(LatentTable { rows })
    }
}

fn export_inputs(
    model: &Glow,
    spec: &FactorSpec,
    corpus: &Corpus,
    which: Selection,
    mut perturb: impl FnMut(Tensor) -> Result<Tensor>,
) -> Result<LatentTable> {
    let n_bits = model.config().n_bits;
    let rows = corpus
        .samples
        .iter()
        .map(|s| {
            let x = perturb(data::to_model_input(&s.image, n_bits)?)?;
            let b = model.encode(&x)?;
            Ok(LatentRow {
                filename: s.filename.clone(),
                label: s.label,
                values: which.extract(&b, spec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentTable { rows })
}

/// Encode every image at its bin centre and collect the selected latents.
pub fn export_latents(model: &Glow, spec: &FactorSpec, corpus: &Corpus, which: Selection) -> Result<LatentTable> {
    export_inputs(model, spec, corpus, which, Ok)
}

/// For each weight `w`, export latents of `clip(x + w * eps)` with
/// `eps ~ N(0, I)` and the clip to the model's input range `[-0.5, 0.5]`.
/// Weight `i` draws its noise from its own stream derived from `seed`.
pub fn noise_sweep(
    model: &Glow,
    spec: &FactorSpec,
    corpus: &Corpus,
    weights: &[Float],
    which: Selection,
    seed: u64,
) -> Result<Vec<(Float, LatentTable)>> {
    weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if !(w >= 0.0) {
                return Err(Error::invalid(format!("noise weight {w} is negative")));
            }
            let mut rng = Rng::derived(seed, i as u64);
            let table = export_inputs(model, spec, corpus, which, |x| {
                let eps = randn(&mut rng, x.shape())?;
                x.zip_map(&eps, |v, e| (v + w * e).clamp(-0.5, 0.5))
            })?;
            Ok((w, table))
        })
        .collect()
}
