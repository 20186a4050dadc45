//! Pair training loop: sample pairs sharing a factor, dequantize, minimize
//! the pair loss with Adam, track held-out bits/dim.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{self, Corpus, GrayImage, PairBatch, PairSampler};
use crate::error::{Error, Result};
use crate::model::{FlowConfig, Glow};
use crate::objective::{pair_loss_graph, FactorSpec};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TRAIN: u64 = 3;

pub const METRICS_HEADER: &str = "step,epoch,loss_total,loss_s_a,loss_s_b,loss_F,bpd_holdout";

/// Training hyperparameters. Unset keys in a config file keep these
/// defaults, which reproduce the reference 64x64 setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Pairs per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub n_bits: u32,
    pub sigma_ab: f64,
    pub seed: u64,
    /// Global-norm clip; 0 disables.
    pub grad_clip_norm: f64,
    /// Steps between checkpoints written by the CLI; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub levels: usize,
    pub steps: usize,
    pub hidden_width: usize,
    /// Channel widths of `[anomaly, slice_index, residual]`, or a single
    /// residual width for unpaired training.
    pub factor_widths: Vec<usize>,
    pub actnorm: bool,
    /// Stop after this many steps (0: run `epochs` epochs).
    pub max_steps: u64,
    pub holdout_fraction: f64,
    /// Cap on held-out images scored per evaluation.
    pub holdout_max: usize,
    /// Relative frequency of anomaly-sharing vs slice-sharing pairs.
    pub factor_mix: Vec<f64>,
    pub slice_bins: usize,
    /// Draw the shared factor per pair instead of per batch.
    pub per_pair_factor: bool,
    pub include_constants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 80,
            epochs: 100,
            n_bits: 6,
            sigma_ab: 0.85,
            seed: 0,
            grad_clip_norm: 50.0,
            checkpoint_every: 0,
            levels: 3,
            steps: 16,
            hidden_width: 512,
            factor_widths: vec![6, 8, 2],
            actnorm: true,
            max_steps: 0,
            holdout_fraction: 0.1,
            holdout_max: 256,
            factor_mix: vec![0.5, 0.5],
            slice_bins: data::DEFAULT_BINS,
            per_pair_factor: false,
            include_constants: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn flow_config(&self, image_size: usize) -> FlowConfig {
        FlowConfig {
            levels: self.levels,
            steps: self.steps,
            input_shape: [1, image_size, image_size],
            hidden_width: self.hidden_width,
            n_bits: self.n_bits,
            actnorm: self.actnorm,
        }
    }

    pub fn factor_spec(&self) -> Result<FactorSpec> {
        let mut spec = match self.factor_widths[..] {
            [a, s, r] => FactorSpec::anomaly_slice([a, s, r], self.sigma_ab as Float)?,
            [r] => FactorSpec::residual_only(r),
            _ => {
                return Err(Error::Config(format!(
                    "factor_widths {:?} must list anomaly, slice_index and residual widths, or one residual width",
                    self.factor_widths
                )))
            }
        };
        spec.include_constants = self.include_constants;
        Ok(spec)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("either epochs or max_steps must be positive".into());
        }
        if !(self.sigma_ab > 0.0 && self.sigma_ab < 1.0) {
            return bad(format!("sigma_ab {} outside (0, 1)", self.sigma_ab));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be non-negative".into());
        }
        let flow = self.flow_config(image_size);
        flow.validate().map_err(|e| Error::Config(e.to_string()))?;
        let spec = self.factor_spec()?;
        let c = flow.final_latent_shape()[0];
        if spec.channels() != c {
            return bad(format!(
                "factor_widths {:?} sum to {}, the final latent has {c} channels",
                self.factor_widths,
                spec.channels()
            ));
        }
        Ok(())
    }

    /// Whether a checkpoint trained under `self` can be resumed under
    /// `other`: everything but the stopping criteria and checkpoint cadence
    /// must agree.
    pub fn resumable_as(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            max_steps: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: Float,
    pub loss_s_a: Float,
    pub loss_s_b: Float,
    pub loss_f: Float,
    pub bpd_holdout: Option<Float>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},",
            self.step, self.epoch, self.loss_total, self.loss_s_a, self.loss_s_b, self.loss_f
        );
        if let Some(b) = self.bpd_holdout {
            write!(s, "{b}").expect("write to string");
        }
        s
    }
}

/// Mean bits/dim over `images`, each dequantized with noise from `rng`.
pub fn mean_bpd<'a>(model: &Glow, images: impl IntoIterator<Item = &'a GrayImage>, rng: &mut Rng) -> Result<Float> {
    let n_bits = model.config().n_bits;
    let mut total = 0.0;
    let mut n = 0usize;
    for img in images {
        let x = data::dequantize(img, n_bits, rng)?;
        total += model.bits_per_dim(&x)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no images to evaluate"));
    }
    Ok(total / n as Float)
}

/// Training state: model, optimizer, sampling stream and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    spec: FactorSpec,
    model: Glow,
    adam: Adam,
    rng: Rng,
    step: u64,
    corpus: Corpus,
    train_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
    sampler: PairSampler,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        let size = corpus
            .image_size()
            .ok_or_else(|| Error::invalid("training corpus is empty"))?;
        config.validate(size)?;
        let model = Glow::new(config.flow_config(size), &mut Rng::derived(config.seed, STREAM_INIT))?;
        let adam = Adam::for_params(config.learning_rate as Float, &model.params());
        let rng = Rng::derived(config.seed, STREAM_TRAIN);
        Self::assemble(config, corpus, model, adam, rng, 0)
    }

    /// Rebuild a trainer around restored state.
    pub(crate) fn assemble(
        config: TrainConfig,
        corpus: Corpus,
        model: Glow,
        adam: Adam,
        rng: Rng,
        step: u64,
    ) -> Result<Self> {
        let size = corpus
            .image_size()
            .ok_or_else(|| Error::invalid("training corpus is empty"))?;
        config.validate(size)?;
        if model.config() != &config.flow_config(size) {
            return Err(Error::Config(format!(
                "model expects {:?} inputs, corpus has {size}x{size} images",
                model.config().input_shape
            )));
        }
        let spec = config.factor_spec()?;
        let (train_idx, holdout_idx) = split(corpus.len(), config.holdout_fraction, config.seed)?;
        let labels: Vec<_> = train_idx.iter().map(|&i| corpus.samples[i].label).collect();
        let sampler = PairSampler::new(&labels, config.slice_bins, &config.factor_mix, config.per_pair_factor)?;
        Ok(Trainer {
            config,
            spec,
            model,
            adam,
            rng,
            step,
            corpus,
            train_idx,
            holdout_idx,
            sampler,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &FactorSpec {
        &self.spec
    }

    pub fn model(&self) -> &Glow {
        &self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn holdout_indices(&self) -> &[usize] {
        &self.holdout_idx
    }

    /// Steps per nominal epoch: enough pairs to touch every training image
    /// once in expectation.
    pub fn steps_per_epoch(&self) -> u64 {
        let per_step = 2 * self.config.batch_size;
        self.train_idx.len().div_ceil(per_step).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        if self.config.max_steps > 0 {
            self.config.max_steps
        } else {
            self.config.epochs as u64 * self.steps_per_epoch()
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Mean bits/dim on the held-out split, with one fixed noise draw.
    pub fn holdout_bpd(&self) -> Result<Option<Float>> {
        if self.holdout_idx.is_empty() {
            return Ok(None);
        }
        let mut rng = Rng::derived(self.config.seed, STREAM_EVAL);
        let images = self
            .holdout_idx
            .iter()
            .take(self.config.holdout_max.max(1))
            .map(|&i| &self.corpus.samples[i].image);
        mean_bpd(&self.model, images, &mut rng).map(Some)
    }

    fn shared_factor(&self, sampler_factor: usize) -> Option<usize> {
        (self.spec.semantic_count() > 0).then_some(sampler_factor)
    }

    /// One optimization step. On a non-finite loss or gradient the model and
    /// optimizer are left untouched and an error is returned.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch: PairBatch = self.sampler.sample(&mut self.rng, self.config.batch_size)?;
        let n_bits = self.config.n_bits;
        let image = |k: usize| &self.corpus.samples[self.train_idx[k]].image;
        let mut pairs = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let xa = data::dequantize(image(batch.a[i]), n_bits, &mut self.rng)?;
            let xb = data::dequantize(image(batch.b[i]), n_bits, &mut self.rng)?;
            pairs.push((xa, xb, self.shared_factor(batch.factors[i])));
        }
        if !self.model.is_initialized() {
            let init: Vec<Tensor> = pairs.iter().flat_map(|(a, b, _)| [a.clone(), b.clone()]).collect();
            self.model.initialize(&init)?;
        }

        let mut grads: Option<Vec<Tensor>> = None;
        let (mut s_a, mut s_b, mut l_f) = (0.0, 0.0, 0.0);
        for (xa, xb, f) in &pairs {
            let mut g = Graph::new();
            let params = self.model.bind(&mut g, true);
            let a = g.constant(xa.clone());
            let b = g.constant(xb.clone());
            let loss = pair_loss_graph(&mut g, &self.model, &params, a, b, *f, &self.spec)?;
            s_a += g.value(loss.l_s_a).item();
            s_b += g.value(loss.l_s_b).item();
            l_f += g.value(loss.l_f).item();
            let mut back = g.backward(loss.total)?;
            let pair_grads: Vec<Tensor> = params.iter().map(|&p| back.take(p)).collect();
            match &mut grads {
                None => grads = Some(pair_grads),
                Some(acc) => {
                    for (a, p) in acc.iter_mut().zip(&pair_grads) {
                        a.add_assign(p);
                    }
                }
            }
        }
        let n = pairs.len() as Float;
        let (s_a, s_b, l_f) = (s_a / n, s_b / n, l_f / n);
        let total = s_a + s_b + l_f;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        let mut grads: Vec<Tensor> = grads
            .expect("batch is nonempty")
            .iter()
            .map(|g| g.scale(1.0 / n))
            .collect();
        if !grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step + 1)));
        }
        clip_grad_norm(&mut grads, self.config.grad_clip_norm as Float);
        self.adam.step(&mut self.model.params_mut(), &grads)?;
        self.step += 1;

        let per_epoch = self.steps_per_epoch();
        let bpd_holdout = if self.step.is_multiple_of(per_epoch) {
            self.holdout_bpd()?
        } else {
            None
        };
        Ok(StepMetrics {
            step: self.step,
            epoch: (self.step - 1) / per_epoch,
            loss_total: total,
            loss_s_a: s_a,
            loss_s_b: s_b,
            loss_f: l_f,
            bpd_holdout,
        })
    }

    /// Train until [`Trainer::total_steps`], calling `on_step` after every
    /// step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let m = self.train_step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }

    pub fn into_model(self) -> Glow {
        self.model
    }
}

/// Deterministic disjoint train / holdout split.
fn split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derived(seed, STREAM_SPLIT).shuffle(&mut idx);
    let hold = ((n as f64) * fraction).round() as usize;
    if n - hold.min(n) < 2 {
        return Err(Error::invalid(format!("{n} images leave fewer than 2 for training")));
    }
    let train = idx.split_off(hold);
    Ok((train, idx))
}
