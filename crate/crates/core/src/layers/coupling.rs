use super::{FlowLayer, LayerVars};
use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{randn, Rng};
use crate::tensor::{Float, Tensor};

/// Offset added to the raw scale before the sigmoid, so a zero network output
/// gives `s = sigmoid(2)`.
pub const SCALE_OFFSET: Float = 2.0;

/// Affine coupling. The first `ceil(C/2)` channels condition a
/// 3x3 -> 1x1 -> 3x3 network whose output gives a raw scale and a shift for
/// the remaining `floor(C/2)` channels:
/// `y2 = (x2 + t) * sigmoid(raw + 2)`.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub channels: usize,
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
    pub k3: Tensor,
    pub b3: Tensor,
}

impl Coupling {
    /// Hidden layers drawn from N(0, 0.05^2); the output layer starts at zero.
    pub fn new(rng: &mut Rng, channels: usize, hidden: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(format!("coupling needs >= 2 channels, got {channels}")));
        }
        if hidden == 0 {
            return Err(Error::invalid("coupling hidden width must be positive"));
        }
        let (c1, c2) = Self::halves(channels);
        Ok(Coupling {
            channels,
            k1: randn(rng, &[hidden, c1, 3, 3])?.scale(0.05),
            b1: Tensor::zeros(&[hidden]),
            k2: randn(rng, &[hidden, hidden, 1, 1])?.scale(0.05),
            b2: Tensor::zeros(&[hidden]),
            k3: Tensor::zeros(&[2 * c2, hidden, 3, 3]),
            b3: Tensor::zeros(&[2 * c2]),
        })
    }

    /// `(conditioning, transformed)` channel counts.
    pub fn halves(channels: usize) -> (usize, usize) {
        (channels.div_ceil(2), channels / 2)
    }

    /// Returns `(raw_scale, shift)` for the conditioning half.
    fn network(&self, g: &mut Graph, p: &[Var], x1: Var) -> Result<(Var, Var)> {
        let [k1, b1, k2, b2, k3, b3] = p[..] else {
            return Err(Error::invalid("coupling expects 6 parameters"));
        };
        let (_, c2) = Self::halves(self.channels);
        let h = g.conv2d(x1, k1, Some(b1), 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, k2, Some(b2), 0)?;
        let h = g.relu(h)?;
        let out = g.conv2d(h, k3, Some(b3), 1)?;
        let raw = g.slice_channels(out, 0, c2)?;
        let shift = g.slice_channels(out, c2, c2)?;
        Ok((raw, shift))
    }
}

impl FlowLayer for Coupling {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.k1, &self.b1, &self.k2, &self.b2, &self.k3, &self.b3]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.k1,
            &mut self.b1,
            &mut self.k2,
            &mut self.b2,
            &mut self.k3,
            &mut self.b3,
        ]
    }

    fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerVars> {
        let c = g.shape(x)[0];
        if c != self.channels {
            return Err(Error::shape(format!(
                "coupling: {c} channels, expected {}",
                self.channels
            )));
        }
        let (c1, c2) = Self::halves(c);
        let x1 = g.slice_channels(x, 0, c1)?;
        let x2 = g.slice_channels(x, c1, c2)?;
        let (raw, shift) = self.network(g, params, x1)?;
        let z = g.add_scalar(raw, SCALE_OFFSET)?;
        let scale = g.sigmoid(z)?;
        let moved = g.add(x2, shift)?;
        let y2 = g.mul(moved, scale)?;
        let output = g.concat_channels(&[x1, y2])?;
        let log_scale = g.log_sigmoid(z)?;
        let logdet = g.sum_all(log_scale)?;
        Ok(LayerVars { output, logdet })
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let (c, _, _) = y.chw()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "coupling: {c} channels, expected {}",
                self.channels
            )));
        }
        let (c1, c2) = Self::halves(c);
        let y1 = y.channel_slice(0, c1)?;
        let y2 = y.channel_slice(c1, c2)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let y1v = g.constant(y1.clone());
        let (raw, shift) = self.network(&mut g, &params, y1v)?;
        let (raw, shift) = (g.value(raw), g.value(shift));
        let mut x2 = y2.clone();
        for ((v, &r), &t) in x2.data_mut().iter_mut().zip(raw.data()).zip(shift.data()) {
            *v = *v / kernels::sigmoid(r + SCALE_OFFSET) - t;
        }
        x2.ensure_finite("coupling inverse")?;
        Tensor::concat_channels(&[&y1, &x2])
    }
}
