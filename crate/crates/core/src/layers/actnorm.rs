use super::{FlowLayer, LayerIO, LayerVars};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Per-channel affine map `y = (x + bias) * exp(log_scale)` with
/// data-dependent initialization.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub log_scale: Tensor,
    pub bias: Tensor,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(channels: usize) -> Self {
        ActNorm {
            log_scale: Tensor::zeros(&[channels]),
            bias: Tensor::zeros(&[channels]),
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.log_scale.len()
    }

    /// Set `bias` and `log_scale` so that `batch` comes out with zero mean
    /// and unit variance per channel.
    pub fn initialize(&mut self, batch: &[Tensor]) -> Result<()> {
        let c = self.channels();
        if batch.is_empty() {
            return Err(Error::invalid("actnorm init on an empty batch"));
        }
        let mut sum = vec![0.0; c];
        let mut sum_sq = vec![0.0; c];
        let mut count = 0usize;
        for x in batch {
            let (xc, h, w) = x.chw()?;
            if xc != c {
                return Err(Error::shape(format!("actnorm: {xc} channels, expected {c}")));
            }
            for (ch, plane) in x.data().chunks(h * w).enumerate() {
                sum[ch] += plane.iter().sum::<Float>();
                sum_sq[ch] += plane.iter().map(|v| v * v).sum::<Float>();
            }
            count += h * w;
        }
        for ch in 0..c {
            let mean = sum[ch] / count as Float;
            let var = (sum_sq[ch] / count as Float - mean * mean).max(0.0);
            self.bias.data_mut()[ch] = -mean;
            self.log_scale.data_mut()[ch] = -(var.sqrt() + 1e-6).ln();
        }
        self.initialized = true;
        Ok(())
    }

    /// Forward pass that first initializes from `batch` when needed.
    pub fn forward_init(&mut self, batch: &[Tensor]) -> Result<Vec<LayerIO>> {
        if !self.initialized {
            self.initialize(batch)?;
        }
        batch.iter().map(|x| self.forward_tensor(x)).collect()
    }
}

impl FlowLayer for ActNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.log_scale, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.log_scale, &mut self.bias]
    }

    fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerVars> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let [log_scale, bias] = params[..] else {
            return Err(Error::invalid("actnorm expects 2 parameters"));
        };
        let shape = g.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(format!("actnorm input {shape:?}")));
        };
        if c != self.channels() {
            return Err(Error::shape(format!(
                "actnorm: {c} channels, expected {}",
                self.channels()
            )));
        }
        let b = g.expand_channels(bias, h, w)?;
        let shifted = g.add(x, b)?;
        let scale = g.exp(log_scale)?;
        let scale = g.expand_channels(scale, h, w)?;
        let output = g.mul(shifted, scale)?;
        let s = g.sum_all(log_scale)?;
        let logdet = g.mul_scalar(s, (h * w) as Float)?;
        Ok(LayerVars { output, logdet })
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let (c, h, w) = y.chw()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "actnorm: {c} channels, expected {}",
                self.channels()
            )));
        }
        let mut x = y.clone();
        for (ch, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
            let inv = (-self.log_scale.data()[ch]).exp();
            let b = self.bias.data()[ch];
            plane.iter_mut().for_each(|v| *v = *v * inv - b);
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    #[cfg(not(feature = "f32"))]
    use crate::layers::testutil::numeric_logdet;
    use crate::rng::{randn, Rng};

    fn ready(c: usize) -> ActNorm {
        let mut a = ActNorm::new(c);
        a.initialized = true;
        a
    }

    #[test]
    fn zero_params_are_identity() {
        let x = randn(&mut Rng::new(0), &[3, 2, 2]).unwrap();
        let out = ready(3).forward_tensor(&x).unwrap();
        assert_eq!(out.output, x);
        assert_eq!(out.logdet, 0.0);
    }

    #[test]
    fn logdet_is_plane_size_times_log_scale() {
        let mut a = ready(1);
        a.log_scale = Tensor::from_vec(vec![(2.0 as Float).ln()]);
        let out = a.forward_tensor(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!((out.logdet - 4.0 * (2.0 as Float).ln()).abs() < 1e-6);
    }

    #[test]
    fn round_trip() {
        let mut rng = Rng::new(3);
        let mut a = ready(4);
        a.log_scale = randn(&mut rng, &[4]).unwrap();
        a.bias = randn(&mut rng, &[4]).unwrap();
        let x = randn(&mut rng, &[4, 3, 3]).unwrap();
        let y = a.forward_tensor(&x).unwrap().output;
        let err = a.inverse(&y).unwrap().max_abs_diff(&x);
        let tol = if cfg!(feature = "f32") { 1e-5 } else { 1e-10 };
        assert!(err < tol, "err {err}");
    }

    #[test]
    fn data_init_normalizes_batch() {
        let mut rng = Rng::new(4);
        let batch: Vec<Tensor> = (0..8)
            .map(|_| randn(&mut rng, &[2, 4, 4]).unwrap().map(|v| 3.0 * v + 5.0))
            .collect();
        let mut a = ActNorm::new(2);
        let outs = a.forward_init(&batch).unwrap();
        for ch in 0..2 {
            let vals: Vec<Float> = outs
                .iter()
                .flat_map(|o| o.output.data()[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<Float>() / vals.len() as Float;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<Float>() / vals.len() as Float;
            assert!(mean.abs() < 1e-3, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn uninitialized_inverse_is_an_error() {
        assert!(matches!(
            ActNorm::new(1).inverse(&Tensor::zeros(&[1, 2, 2])),
            Err(Error::Uninitialized)
        ));
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn logdet_matches_numeric_jacobian() {
        let mut rng = Rng::new(5);
        let mut a = ready(2);
        a.log_scale = randn(&mut rng, &[2]).unwrap().scale(0.5);
        a.bias = randn(&mut rng, &[2]).unwrap();
        let x = randn(&mut rng, &[2, 2, 2]).unwrap();
        let analytic = a.forward_tensor(&x).unwrap().logdet;
        let numeric = numeric_logdet(|t| a.forward_tensor(t).unwrap().output, &x, 1e-6);
        assert!(((analytic - numeric) / analytic).abs() < 1e-6);
    }
}
