//! Synthetic "axial slice" images: a soft-edged ellipse whose radii and
//! vertical position follow the slice index, optionally carrying a bright
//! Gaussian blob. Also the pixel-statistics oracles that recover both
//! factors.

use std::f64::consts::PI;

use super::{Corpus, GrayImage, Label, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    /// Probability that an image carries a blob.
    pub anomaly_rate: f64,
    pub background: f64,
    pub tissue: f64,
    pub blob_amplitude: f64,
    /// Blob standard deviation as a fraction of the image size.
    pub blob_sigma: f64,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
    /// Vertical travel of the ellipse centre over `t in [0, 1]`, as a
    /// fraction of the image size.
    pub shift: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 16,
            anomaly_rate: 0.5,
            background: 0.05,
            tissue: 0.45,
            blob_amplitude: 0.5,
            blob_sigma: 0.18,
            noise: 0.02,
            shift: 0.3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::invalid(format!("image size {} is below 8", self.size)));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::invalid(format!(
                "anomaly_rate {} outside [0, 1]",
                self.anomaly_rate
            )));
        }
        if !(self.tissue - self.background > 0.25) || self.noise < 0.0 {
            return Err(Error::invalid("tissue must exceed background by more than 0.25"));
        }
        Ok(())
    }

    /// `key=value` lines describing these parameters.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        [
            ("size", self.size.to_string()),
            ("anomaly_rate", self.anomaly_rate.to_string()),
            ("background", self.background.to_string()),
            ("tissue", self.tissue.to_string()),
            ("blob_amplitude", self.blob_amplitude.to_string()),
            ("blob_sigma", self.blob_sigma.to_string()),
            ("noise", self.noise.to_string()),
            ("shift", self.shift.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn centre(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    /// `(cy, ry, rx)` of the ellipse at slice index `t`.
    fn geometry(&self, t: f64) -> (f64, f64, f64) {
        let n = self.size as f64;
        let s = (PI * t).sin();
        let cy = self.centre() + self.shift * n * (t - 0.5);
        (cy, n * (0.17 + 0.2 * s), n * (0.2 + 0.22 * s))
    }

    /// Lower and upper intensities of the ramp used by the ellipse oracles.
    fn ramp(&self) -> (f64, f64) {
        (self.background + 0.1, self.tissue - 0.1)
    }
}

/// Render one image for `label`; `rng` supplies the blob position and noise.
pub fn render(label: Label, p: &SynthParams, rng: &mut Rng) -> Result<GrayImage> {
    p.validate()?;
    if !(0.0..=1.0).contains(&label.slice_index) {
        return Err(Error::invalid(format!(
            "slice_index {} outside [0, 1]",
            label.slice_index
        )));
    }
    let n = p.size;
    let cx = p.centre();
    let (cy, ry, rx) = p.geometry(label.slice_index);
    let r_edge = rx.min(ry);
    let blob = label.anomaly.then(|| {
        // Uniform point in the inner 55% of the ellipse.
        let (u, v) = loop {
            let u = rng.uniform(-1.0, 1.0);
            let v = rng.uniform(-1.0, 1.0);
            if u * u + v * v <= 1.0 {
                break (u, v);
            }
        };
        (cy + 0.55 * ry * v, cx + 0.55 * rx * u)
    });
    let bs = p.blob_sigma * n as f64;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let d = (((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2)).sqrt();
            let inside = ((1.0 - d) * r_edge + 0.5).clamp(0.0, 1.0);
            let mut v = p.background + (p.tissue - p.background) * inside;
            if let Some((by, bx)) = blob {
                let r2 = (fy - by).powi(2) + (fx - bx).powi(2);
                v += p.blob_amplitude * (-r2 / (2.0 * bs * bs)).exp() * inside;
            }
            v += p.noise * rng.normal();
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    GrayImage::new(n, pixels)
}

/// `count` images with labels drawn uniformly (`t ~ U[0,1]`,
/// `anomaly ~ Bernoulli(anomaly_rate)`). Image `i` uses its own stream
/// derived from `seed`, so the corpus does not depend on generation order.
pub fn generate_corpus(seed: u64, count: usize, p: &SynthParams) -> Result<Corpus> {
    p.validate()?;
    if count == 0 {
        return Err(Error::invalid("corpus count must be at least 1"));
    }
    let samples = (0..count)
        .map(|i| {
            let mut rng = Rng::derived(seed, i as u64);
            let label = Label {
                anomaly: rng.bernoulli(p.anomaly_rate),
                slice_index: rng.next_f64(),
            };
            Ok(Sample {
                filename: format!("img_{i:05}.pgm"),
                image: render(label, p, &mut rng)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { samples })
}

/// Oracle anomaly detector: any pixel clearly brighter than healthy tissue.
pub fn detect_blob(image: &GrayImage, p: &SynthParams) -> bool {
    let threshold = p.tissue + 0.2;
    image.intensities().into_iter().any(|v| v > threshold)
}

/// Per-pixel ellipse membership in `[0, 1]`, saturating inside the tissue so
/// that a blob does not change it.
fn membership(image: &GrayImage, p: &SynthParams) -> Vec<f64> {
    let (lo, hi) = p.ramp();
    image
        .intensities()
        .into_iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

/// Oracle ellipse size: soft pixel count of the tissue region.
pub fn ellipse_area(image: &GrayImage, p: &SynthParams) -> f64 {
    membership(image, p).iter().sum()
}

/// Oracle slice index from the vertical centroid of the tissue region.
pub fn estimate_slice(image: &GrayImage, p: &SynthParams) -> f64 {
    let w = membership(image, p);
    let n = image.size;
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.5;
    }
    let cy = w.iter().enumerate().map(|(i, &m)| (i / n) as f64 * m).sum::<f64>() / total;
    (0.5 + (cy - p.centre()) / (p.shift * n as f64)).clamp(0.0, 1.0)
}
