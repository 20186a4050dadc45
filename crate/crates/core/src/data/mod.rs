//! Corpora of 8-bit grayscale images with anomaly / slice-index labels.

mod io;
mod pairs;
mod synth;

pub use io::{load_corpus, read_labels, read_pgm, save_corpus, write_labels, write_pgm, LABELS_FILE, META_FILE};
pub use pairs::{shares, stratum, PairBatch, PairSampler, ANOMALY, DEFAULT_BINS, SLICE};
pub use synth::{detect_blob, ellipse_area, estimate_slice, generate_corpus, render, SynthParams};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub anomaly: bool,
    /// In `[0, 1]`.
    pub slice_index: f64,
}

/// Square 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::shape(format!(
                "{} pixels for a {size}x{size} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { size, pixels })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    /// Intensities in `[0, 1]`.
    pub fn intensities(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub filename: String,
    pub image: GrayImage,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.size)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn check_bits(n_bits: u32) -> Result<()> {
    if !(1..=8).contains(&n_bits) {
        return Err(Error::invalid(format!("n_bits {n_bits} outside 1..=8")));
    }
    Ok(())
}

/// Quantization level of every pixel: `p >> (8 - n_bits)`.
pub fn quantize(image: &GrayImage, n_bits: u32) -> Result<Vec<u8>> {
    check_bits(n_bits)?;
    Ok(image.pixels.iter().map(|&p| p >> (8 - n_bits)).collect())
}

fn levels_to_tensor(image: &GrayImage, n_bits: u32, mut offset: impl FnMut() -> f64) -> Result<Tensor> {
    let bins = (1u32 << n_bits) as f64;
    let data = quantize(image, n_bits)?
        .into_iter()
        .map(|q| ((q as f64 + offset()) / bins - 0.5) as Float)
        .collect();
    Tensor::new(vec![1, image.size, image.size], data)
}

/// `(q + u) / 2^n - 0.5` with `u ~ U[0, 1)`: a point uniformly inside the
/// pixel's quantization bin, in `[-0.5, 0.5)`.
pub fn dequantize(image: &GrayImage, n_bits: u32, rng: &mut Rng) -> Result<Tensor> {
    levels_to_tensor(image, n_bits, || rng.next_f64())
}

/// Bin centre `(q + 0.5) / 2^n - 0.5`; the noise-free counterpart of
/// [`dequantize`] used for evaluation and export.
pub fn to_model_input(image: &GrayImage, n_bits: u32) -> Result<Tensor> {
    levels_to_tensor(image, n_bits, || 0.5)
}

/// Map a model-space tensor `[1, S, S]` back to 8-bit pixels. The value is
/// binned to `2^n_bits` levels, then spread over `0..=255`.
pub fn to_image(x: &Tensor, n_bits: u32) -> Result<GrayImage> {
    check_bits(n_bits)?;
    let (c, h, w) = x.chw()?;
    if c != 1 || h != w {
        return Err(Error::shape(format!("expected [1, S, S], got {:?}", x.shape())));
    }
    let levels = (1u32 << n_bits) as f64;
    let top = levels - 1.0;
    let pixels = x
        .data()
        .iter()
        .map(|&v| {
            let q = ((v as f64 + 0.5) * levels).floor().clamp(0.0, top);
            (q * 255.0 / top).round() as u8
        })
        .collect();
    GrayImage::new(h, pixels)
}
