use super::{FlowLayer, LayerVars};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, lu_decompose};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Invertible 1x1 convolution with weight `W = P L (U + diag(sign * exp(log_s)))`.
///
/// `P` and `sign` are frozen at construction. `lower` and `upper` are stored
/// as full `[C,C]` matrices of which only the strictly lower (upper) part is
/// used, so their other entries always receive zero gradient.
#[derive(Clone, Debug)]
pub struct InvConv {
    pub lower: Tensor,
    pub upper: Tensor,
    pub log_s: Tensor,
    pub perm: Tensor,
    pub sign: Tensor,
}

impl InvConv {
    /// LU-factor a random rotation.
    pub fn random(rng: &mut Rng, channels: usize) -> Result<Self> {
        let w = linalg::random_orthogonal(rng, channels)?;
        Self::from_weight(&w)
    }

    pub fn from_weight(w: &Tensor) -> Result<Self> {
        let f = lu_decompose(w)?;
        let n = f.u.shape()[0];
        let mut upper = f.u.clone();
        let mut log_s = Tensor::zeros(&[n]);
        let mut sign = Tensor::zeros(&[n]);
        for i in 0..n {
            let d = f.u.data()[i * n + i];
            log_s.data_mut()[i] = d.abs().ln();
            sign.data_mut()[i] = if d < 0.0 { -1.0 } else { 1.0 };
            upper.data_mut()[i * n + i] = 0.0;
        }
        let mut lower = f.l.clone();
        for i in 0..n {
            lower.data_mut()[i * n + i] = 0.0;
        }
        Ok(InvConv {
            lower,
            upper,
            log_s,
            perm: f.p,
            sign,
        })
    }

    pub fn channels(&self) -> usize {
        self.log_s.len()
    }

    fn masks(&self) -> (Tensor, Tensor) {
        let n = self.channels();
        let mut lo = Tensor::zeros(&[n, n]);
        let mut up = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lo.data_mut()[i * n + j] = 1.0;
                } else if j > i {
                    up.data_mut()[i * n + j] = 1.0;
                }
            }
        }
        (lo, up)
    }

    fn lu_parts(&self) -> (Tensor, Tensor) {
        let n = self.channels();
        let (lo_mask, up_mask) = self.masks();
        let mut l = self.lower.zip_map(&lo_mask, |a, m| a * m).unwrap();
        let mut u = self.upper.zip_map(&up_mask, |a, m| a * m).unwrap();
        for i in 0..n {
            l.data_mut()[i * n + i] = 1.0;
            u.data_mut()[i * n + i] = self.sign.data()[i] * self.log_s.data()[i].exp();
        }
        (l, u)
    }

    /// Reconstructed weight matrix.
    pub fn weight(&self) -> Tensor {
        let (l, u) = self.lu_parts();
        linalg::matmul(&self.perm, &linalg::matmul(&l, &u).unwrap()).unwrap()
    }

    pub fn inverse_weight(&self) -> Result<Tensor> {
        let (l, u) = self.lu_parts();
        let ui = linalg::invert_upper(&u)?;
        let li = linalg::invert_lower(&l)?;
        linalg::matmul(&ui, &linalg::matmul(&li, &linalg::transpose(&self.perm)?)?)
    }
}

fn mix_channels(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = x.chw()?;
    if w.shape() != [c, c] {
        return Err(Error::shape(format!(
            "invconv: weight {:?} for {c} channels",
            w.shape()
        )));
    }
    let flat = x.reshape(&[c, h * wd])?;
    linalg::matmul(w, &flat)?.reshape(&[c, h, wd])
}

impl FlowLayer for InvConv {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.lower, &self.upper, &self.log_s]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_s]
    }

    fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerVars> {
        let [lower, upper, log_s] = params[..] else {
            return Err(Error::invalid("invconv expects 3 parameters"));
        };
        let n = self.channels();
        let shape = g.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(format!("invconv input {shape:?}")));
        };
        if c != n {
            return Err(Error::shape(format!("invconv: {c} channels, expected {n}")));
        }
        let (lo_mask, up_mask) = self.masks();
        let lo_mask = g.constant(lo_mask);
        let up_mask = g.constant(up_mask);
        let eye = g.constant(Tensor::eye(n));
        let perm = g.constant(self.perm.clone());
        let sign = g.constant(self.sign.clone());

        let l = g.mul(lower, lo_mask)?;
        let l = g.add(l, eye)?;
        let s = g.exp(log_s)?;
        let s = g.mul(s, sign)?;
        let s = g.diag(s)?;
        let u = g.mul(upper, up_mask)?;
        let u = g.add(u, s)?;
        let lu = g.matmul(l, u)?;
        let weight = g.matmul(perm, lu)?;
        let kernel = g.reshape(weight, &[n, n, 1, 1])?;
        let output = g.conv2d(x, kernel, None, 0)?;

        let total = g.sum_all(log_s)?;
        let logdet = g.mul_scalar(total, (h * w) as Float)?;
        Ok(LayerVars { output, logdet })
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        mix_channels(&self.inverse_weight()?, y)
    }
}
