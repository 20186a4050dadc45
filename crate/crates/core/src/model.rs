//! The L-scale flow: per scale, squeeze, K steps of
//! (actnorm, invertible 1x1 conv, affine coupling), then factor out half of
//! the channels. The last scale keeps all of its channels as the final latent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, ActNorm, Coupling, FlowLayer, InvConv};
use crate::rng::{randn, Rng};
use crate::tensor::{Float, Tensor};

/// `0.5 * ln(2 pi)`, the per-dimension constant of a unit Gaussian NLL.
pub const HALF_LOG_2PI: Float = (0.918_938_533_204_672_7_f64) as Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of scales (L).
    pub levels: usize,
    /// Flow steps per scale (K).
    pub steps: usize,
    /// `[C, H, W]` of the input.
    pub input_shape: [usize; 3],
    pub hidden_width: usize,
    pub n_bits: u32,
    pub actnorm: bool,
}

impl Default for FlowConfig {
    /// Small configuration used for tests and desk-scale experiments.
    fn default() -> Self {
        FlowConfig {
            levels: 2,
            steps: 4,
            input_shape: [1, 16, 16],
            hidden_width: 32,
            n_bits: 6,
            actnorm: true,
        }
    }
}

impl FlowConfig {
    /// Architecture used for 64x64 single-channel images.
    pub fn reference() -> Self {
        FlowConfig {
            levels: 3,
            steps: 16,
            input_shape: [1, 64, 64],
            hidden_width: 512,
            n_bits: 6,
            actnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if self.levels == 0 || self.steps == 0 || self.hidden_width == 0 || c == 0 {
            return Err(Error::invalid(format!("degenerate flow config {self:?}")));
        }
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        if !(1..=8).contains(&self.n_bits) {
            return Err(Error::invalid(format!("n_bits {} outside 1..=8", self.n_bits)));
        }
        Ok(())
    }

    /// Channel count entering the flow steps of scale `level` (0-based).
    fn level_channels(&self, level: usize) -> usize {
        // 4x per squeeze, halved by each preceding split.
        self.input_shape[0] * 4usize.pow(level as u32 + 1) / 2usize.pow(level as u32)
    }

    fn level_spatial(&self, level: usize) -> (usize, usize) {
        let f = 1usize << (level + 1);
        (self.input_shape[1] / f, self.input_shape[2] / f)
    }

    /// Shapes of `z_1 .. z_{L-1}`.
    pub fn intermediate_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels - 1)
            .map(|l| {
                let (h, w) = self.level_spatial(l);
                [self.level_channels(l) / 2, h, w]
            })
            .collect()
    }

    /// `[C0 * 4^L / 2^(L-1), H0 / 2^L, W0 / 2^L]`.
    pub fn final_latent_shape(&self) -> [usize; 3] {
        let l = self.levels - 1;
        let (h, w) = self.level_spatial(l);
        [self.level_channels(l), h, w]
    }

    pub fn input_dims(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// One flow step.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: Option<ActNorm>,
    pub invconv: InvConv,
    pub coupling: Coupling,
}

impl FlowStep {
    fn layers(&self) -> Vec<&dyn FlowLayer> {
        let mut v: Vec<&dyn FlowLayer> = Vec::with_capacity(3);
        if let Some(a) = &self.actnorm {
            v.push(a);
        }
        v.push(&self.invconv);
        v.push(&self.coupling);
        v
    }
}

/// Latents of one image plus the log-determinant bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    /// `z_1 .. z_{L-1}`, factored out at the intermediate scales.
    pub intermediates: Vec<Tensor>,
    /// `z_L`.
    pub final_latent: Tensor,
    /// Log-determinant accumulated within each scale, `L` entries.
    pub scale_logdets: Vec<Float>,
    pub total_logdet: Float,
}

impl LatentBundle {
    pub fn dims(&self) -> usize {
        self.intermediates.iter().map(Tensor::len).sum::<usize>() + self.final_latent.len()
    }

    /// All latent values, intermediates first, as one vector.
    pub fn flatten(&self) -> Vec<Float> {
        let mut v = Vec::with_capacity(self.dims());
        for z in &self.intermediates {
            v.extend_from_slice(z.data());
        }
        v.extend_from_slice(self.final_latent.data());
        v
    }
}

/// Graph-side counterpart of [`LatentBundle`].
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub intermediates: Vec<Var>,
    pub final_latent: Var,
    pub scale_logdets: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Glow {
    config: FlowConfig,
    levels: Vec<Vec<FlowStep>>,
}

impl Glow {
    pub fn new(config: FlowConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let levels = (0..config.levels)
            .map(|l| {
                let c = config.level_channels(l);
                (0..config.steps)
                    .map(|_| {
                        Ok(FlowStep {
                            actnorm: config.actnorm.then(|| ActNorm::new(c)),
                            invconv: InvConv::random(rng, c)?,
                            coupling: Coupling::new(rng, c, config.hidden_width)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Glow { config, levels })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.levels.iter().flatten()
    }

    /// Trainable tensors in canonical (construction) order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.steps()
            .flat_map(|s| s.layers().into_iter().flat_map(|l| l.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for step in self.levels.iter_mut().flatten() {
            if let Some(a) = &mut step.actnorm {
                out.extend(a.params_mut());
            }
            out.extend(step.invconv.params_mut());
            out.extend(step.coupling.params_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Frozen tensors (1x1 conv permutation and diagonal signs).
    pub fn buffers(&self) -> Vec<&Tensor> {
        self.steps().flat_map(|s| [&s.invconv.perm, &s.invconv.sign]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels
            .iter_mut()
            .flatten()
            .flat_map(|s| [&mut s.invconv.perm, &mut s.invconv.sign])
            .collect()
    }

    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.steps()
            .filter_map(|s| s.actnorm.as_ref().map(|a| a.initialized))
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let mut acts: Vec<&mut ActNorm> = self
            .levels
            .iter_mut()
            .flatten()
            .filter_map(|s| s.actnorm.as_mut())
            .collect();
        if acts.len() != flags.len() {
            return Err(Error::shape(format!(
                "{} actnorm flags for {} layers",
                flags.len(),
                acts.len()
            )));
        }
        for (a, &f) in acts.iter_mut().zip(flags) {
            a.initialized = f;
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorm_flags().iter().all(|&f| f)
    }

    /// Add N(0, scale^2) noise to every parameter and mark actnorms as
    /// initialized. Useful for exercising invertibility away from the
    /// near-identity initialization.
    pub fn perturb_parameters(&mut self, rng: &mut Rng, scale: Float) -> Result<()> {
        for p in self.params_mut() {
            let noise = randn(rng, p.shape())?.scale(scale);
            p.add_assign(&noise);
        }
        let n = self.actnorm_flags().len();
        self.set_actnorm_flags(&vec![true; n])
    }

    /// Data-dependent actnorm initialization: walks `batch` through the
    /// network, initializing every uninitialized actnorm from the activations
    /// that reach it.
    pub fn initialize(&mut self, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("initialization batch is empty"));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let mut hs: Vec<Tensor> = batch.to_vec();
        let n_levels = self.levels.len();
        for (l, level) in self.levels.iter_mut().enumerate() {
            hs = hs.iter().map(layers::squeeze).collect::<Result<_>>()?;
            for step in level.iter_mut() {
                if let Some(a) = &mut step.actnorm {
                    hs = a.forward_init(&hs)?.into_iter().map(|o| o.output).collect();
                }
                hs = hs
                    .iter()
                    .map(|h| step.invconv.forward_tensor(h).map(|o| o.output))
                    .collect::<Result<_>>()?;
                hs = hs
                    .iter()
                    .map(|h| step.coupling.forward_tensor(h).map(|o| o.output))
                    .collect::<Result<_>>()?;
            }
            if l + 1 < n_levels {
                hs = hs
                    .iter()
                    .map(|h| layers::split(h).map(|(_, rest)| rest))
                    .collect::<Result<_>>()?;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.input_shape {
            return Err(Error::shape(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Bind every parameter as a graph leaf, in [`Glow::params`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Differentiable encode of `x` using parameters bound by [`Glow::bind`].
    pub fn encode_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<EncodedVars> {
        if g.shape(x) != self.config.input_shape {
            return Err(Error::shape(format!(
                "input {:?}, model expects {:?}",
                g.shape(x),
                self.config.input_shape
            )));
        }
        let mut cursor = 0;
        let mut h = x;
        let mut intermediates = Vec::new();
        let mut scale_logdets = Vec::new();
        let n_levels = self.levels.len();
        for (l, level) in self.levels.iter().enumerate() {
            h = g.squeeze(h)?;
            let mut level_logdet: Option<Var> = None;
            for step in level {
                for layer in step.layers() {
                    let n = layer.params().len();
                    let out = layer.forward(g, &params[cursor..cursor + n], h)?;
                    cursor += n;
                    h = out.output;
                    level_logdet = Some(match level_logdet {
                        Some(acc) => g.add(acc, out.logdet)?,
                        None => out.logdet,
                    });
                }
            }
            scale_logdets.push(level_logdet.expect("scale with zero steps"));
            if l + 1 < n_levels {
                let (z, rest) = layers::split_vars(g, h)?;
                intermediates.push(z);
                h = rest;
            }
        }
        if cursor != params.len() {
            return Err(Error::invalid(format!(
                "bound {} parameters, model uses {cursor}",
                params.len()
            )));
        }
        Ok(EncodedVars {
            intermediates,
            final_latent: h,
            scale_logdets,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<LatentBundle> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let enc = self.encode_graph(&mut g, &params, xv)?;
        let scale_logdets: Vec<Float> = enc.scale_logdets.iter().map(|&v| g.value(v).item()).collect();
        Ok(LatentBundle {
            intermediates: enc.intermediates.iter().map(|&v| g.value(v).clone()).collect(),
            final_latent: g.value(enc.final_latent).clone(),
            total_logdet: scale_logdets.iter().sum(),
            scale_logdets,
        })
    }

    /// Exact inverse of [`Glow::encode`].
    pub fn decode(&self, intermediates: &[Tensor], final_latent: &Tensor) -> Result<Tensor> {
        let expected = self.config.intermediate_shapes();
        if intermediates.len() != expected.len() {
            return Err(Error::shape(format!(
                "{} intermediate latents, model has {}",
                intermediates.len(),
                expected.len()
            )));
        }
        for (z, s) in intermediates.iter().zip(&expected) {
            if z.shape() != s {
                return Err(Error::shape(format!(
                    "intermediate latent {:?}, expected {s:?}",
                    z.shape()
                )));
            }
        }
        if final_latent.shape() != self.config.final_latent_shape() {
            return Err(Error::shape(format!(
                "final latent {:?}, expected {:?}",
                final_latent.shape(),
                self.config.final_latent_shape()
            )));
        }
        let mut h = final_latent.clone();
        for (l, level) in self.levels.iter().enumerate().rev() {
            if l < intermediates.len() {
                h = layers::unsplit(&intermediates[l], &h)?;
            }
            for step in level.iter().rev() {
                for layer in step.layers().into_iter().rev() {
                    h = layer.inverse(&h)?;
                }
            }
            h = layers::unsqueeze(&h)?;
        }
        h.ensure_finite("decode")?;
        Ok(h)
    }

    pub fn decode_bundle(&self, bundle: &LatentBundle) -> Result<Tensor> {
        self.decode(&bundle.intermediates, &bundle.final_latent)
    }

    /// Negative log-likelihood in nats of a dequantized input, with every
    /// latent scored under a unit Gaussian.
    pub fn nll(&self, x: &Tensor) -> Result<Float> {
        let b = self.encode(x)?;
        let nll = gaussian_nll(&b) - b.total_logdet;
        if !nll.is_finite() {
            return Err(Error::NonFinite("nll".into()));
        }
        Ok(nll)
    }

    /// `nll / (D ln 2) + n_bits`, accounting for the width of a
    /// quantization bin of inputs scaled to `[-0.5, 0.5]`.
    pub fn bits_per_dim(&self, x: &Tensor) -> Result<Float> {
        Ok(nll_to_bpd(self.nll(x)?, x.len(), self.config.n_bits))
    }

    /// Draw every latent from `N(0, T^2 I)` and decode.
    pub fn sample(&self, rng: &mut Rng, temperature: Float, count: usize) -> Result<Vec<Tensor>> {
        if !(temperature >= 0.0) {
            return Err(Error::invalid(format!("negative temperature {temperature}")));
        }
        (0..count)
            .map(|_| {
                let (zs, top) = self.draw_latents(rng, temperature)?;
                self.decode(&zs, &top)
            })
            .collect()
    }

    /// Latents drawn from `N(0, T^2 I)`, in the layout `decode` expects.
    pub fn draw_latents(&self, rng: &mut Rng, temperature: Float) -> Result<(Vec<Tensor>, Tensor)> {
        let zs = self
            .config
            .intermediate_shapes()
            .iter()
            .map(|s| randn(rng, s).map(|t| t.scale(temperature)))
            .collect::<Result<Vec<_>>>()?;
        let top = randn(rng, &self.config.final_latent_shape())?.scale(temperature);
        Ok((zs, top))
    }
}

/// `sum 0.5 (z^2 + ln 2 pi)` over every latent coordinate.
pub fn gaussian_nll(b: &LatentBundle) -> Float {
    let sq: Float = b.intermediates.iter().map(Tensor::sum_sq).sum::<Float>() + b.final_latent.sum_sq();
    0.5 * sq + HALF_LOG_2PI * b.dims() as Float
}

pub fn nll_to_bpd(nll: Float, dims: usize, n_bits: u32) -> Float {
    nll / (dims as Float * std::f64::consts::LN_2 as Float) + n_bits as Float
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FlowConfig {
        FlowConfig {
            levels: 2,
            steps: 2,
            input_shape: [1, 8, 8],
            hidden_width: 8,
            n_bits: 6,
            actnorm: true,
        }
    }

    fn random_model(cfg: FlowConfig, seed: u64) -> Glow {
        let mut rng = Rng::new(seed);
        let mut m = Glow::new(cfg, &mut rng).unwrap();
        m.perturb_parameters(&mut rng, 0.05).unwrap();
        m
    }

    #[test]
    fn reference_shape_arithmetic() {
        let cfg = FlowConfig::reference();
        assert_eq!(cfg.intermediate_shapes(), vec![[2, 32, 32], [4, 16, 16]]);
        assert_eq!(cfg.final_latent_shape(), [16, 8, 8]);
        let dims: usize = cfg
            .intermediate_shapes()
            .iter()
            .chain([cfg.final_latent_shape()].iter())
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(dims, 4096);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.input_shape = [1, 12, 8];
        cfg.levels = 3;
        assert!(cfg.validate().is_err());
        cfg.levels = 2;
        assert!(cfg.validate().is_ok());
        cfg.n_bits = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_shapes_and_dimension_conservation() {
        let m = random_model(tiny(), 0);
        let x = randn(&mut Rng::new(1), &[1, 8, 8]).unwrap();
        let b = m.encode(&x).unwrap();
        assert_eq!(b.intermediates[0].shape(), &[2, 4, 4]);
        assert_eq!(b.final_latent.shape(), &[8, 2, 2]);
        assert_eq!(b.dims(), 64);
        assert_eq!(b.scale_logdets.len(), 2);
    }

    #[test]
    fn decode_inverts_encode_and_vice_versa() {
        let m = random_model(tiny(), 2);
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, &[1, 8, 8]).unwrap().scale(0.3);
        let b = m.encode(&x).unwrap();
        let back = m.decode_bundle(&b).unwrap();
        let tol = if cfg!(feature = "f32") { 1e-3 } else { 1e-8 };
        assert!(back.max_abs_diff(&x) < tol);

        let (zs, top) = m.draw_latents(&mut rng, 0.7).unwrap();
        let img = m.decode(&zs, &top).unwrap();
        let again = m.encode(&img).unwrap();
        assert!(again.final_latent.max_abs_diff(&top) < tol * 10.0);
        assert!(again.intermediates[0].max_abs_diff(&zs[0]) < tol * 10.0);
    }

    #[test]
    fn uninitialized_model_refuses_to_encode() {
        let m = Glow::new(tiny(), &mut Rng::new(0)).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros(&[1, 8, 8])),
            Err(Error::Uninitialized)
        ));
    }

    #[test]
    fn initialize_normalizes_first_actnorm() {
        let mut rng = Rng::new(4);
        let mut m = Glow::new(tiny(), &mut rng).unwrap();
        let batch: Vec<Tensor> = (0..6)
            .map(|_| randn(&mut rng, &[1, 8, 8]).unwrap().scale(0.2))
            .collect();
        m.initialize(&batch).unwrap();
        assert!(m.is_initialized());
        let first = m.steps().next().unwrap().actnorm.as_ref().unwrap();
        // std of 0.2 scaled noise => log_scale near -ln 0.2
        let ls = first.log_scale.data()[0];
        assert!((ls + (0.2 as Float).ln()).abs() < 0.2, "{ls}");
    }

    #[test]
    fn shape_errors() {
        let m = random_model(tiny(), 5);
        assert!(m.encode(&Tensor::zeros(&[1, 4, 4])).is_err());
        let b = m.encode(&Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(m.decode(&[], &b.final_latent).is_err());
        assert!(m.decode(&b.intermediates, &Tensor::zeros(&[4, 2, 2])).is_err());
    }

    #[test]
    fn zero_temperature_sampling_is_deterministic() {
        let m = random_model(tiny(), 6);
        let a = m.sample(&mut Rng::new(1), 0.0, 2).unwrap();
        let b = m.sample(&mut Rng::new(99), 0.0, 1).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0], b[0]);
        let zero = m
            .decode(&[Tensor::zeros(&[2, 4, 4])], &Tensor::zeros(&[8, 2, 2]))
            .unwrap();
        assert_eq!(zero, a[0]);
        assert!(m.sample(&mut Rng::new(1), -0.1, 1).is_err());
    }

    #[test]
    fn fixed_seed_sampling_is_reproducible() {
        let m = random_model(tiny(), 7);
        let a = m.sample(&mut Rng::new(5), 0.7, 3).unwrap();
        let b = m.sample(&mut Rng::new(5), 0.7, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nll_of_identity_like_model_at_mode() {
        // One scale, identity 1x1 conv, zero coupling output, actnorm off:
        // logdet is steps * C/2 * H * W * ln sigmoid(2). At z = 0 the Gaussian
        // part is D * 0.5 ln 2 pi.
        let cfg = FlowConfig {
            levels: 1,
            steps: 1,
            input_shape: [1, 2, 2],
            hidden_width: 4,
            n_bits: 6,
            actnorm: false,
        };
        let mut m = Glow::new(cfg, &mut Rng::new(0)).unwrap();
        m.levels[0][0].invconv = InvConv::from_weight(&Tensor::eye(4)).unwrap();
        let x = Tensor::zeros(&[1, 2, 2]);
        let b = m.encode(&x).unwrap();
        let expected_logdet = 2.0 * crate::autodiff::kernels::log_sigmoid(2.0);
        assert!((b.total_logdet - expected_logdet).abs() < 1e-6);
        let nll = m.nll(&x).unwrap();
        assert!((nll - (4.0 * HALF_LOG_2PI - expected_logdet)).abs() < 1e-6);
    }

    #[test]
    fn bpd_formula_on_a_closed_form_gaussian() {
        // A 1-D standard Gaussian density at x has nll 0.5 x^2 + 0.5 ln 2 pi.
        // Its bits/dim with n_bits = 6 is nll / ln 2 + 6.
        let x: Float = 0.3;
        let nll = 0.5 * x * x + HALF_LOG_2PI;
        let bpd = nll_to_bpd(nll, 1, 6);
        let expected = (0.5 * 0.09 + 0.5 * (2.0 * std::f64::consts::PI).ln()) / std::f64::consts::LN_2 + 6.0;
        assert!((bpd as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn nll_is_invariant_to_summation_order() {
        let m = random_model(tiny(), 8);
        let x = randn(&mut Rng::new(9), &[1, 8, 8]).unwrap().scale(0.3);
        let b = m.encode(&x).unwrap();
        let forward = gaussian_nll(&b) - b.total_logdet;
        let mut flat = b.flatten();
        flat.reverse();
        let reversed = 0.5 * flat.iter().map(|v| v * v).sum::<Float>() + HALF_LOG_2PI * flat.len() as Float
            - b.scale_logdets.iter().rev().sum::<Float>();
        let tol = if cfg!(feature = "f32") { 1e-5 } else { 1e-10 };
        assert!(((forward - reversed) / forward).abs() < tol);
    }
}
