//! Invertible flow layers. Each layer maps `[C,H,W]` to `[C,H,W]`, reports
//! its log-determinant contribution in nats, and has an exact inverse.

mod actnorm;
mod coupling;
mod invconv;

pub use actnorm::ActNorm;
pub use coupling::Coupling;
pub use invconv::InvConv;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Output of a layer on a concrete tensor.
#[derive(Clone, Debug)]
pub struct LayerIO {
    pub output: Tensor,
    pub logdet: Float,
}

/// Graph-side output of a layer. `logdet` is a `[1]` node.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub output: Var,
    pub logdet: Var,
}

pub trait FlowLayer {
    /// Parameter tensors in canonical order.
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Forward pass on a graph, with `params` bound in [`FlowLayer::params`]
    /// order.
    fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerVars>;

    fn inverse(&self, y: &Tensor) -> Result<Tensor>;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
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

    /// Forward pass on a concrete tensor.
    fn forward_tensor(&self, x: &Tensor) -> Result<LayerIO> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv)?;
        Ok(LayerIO {
            output: g.value(out.output).clone(),
            logdet: g.value(out.logdet).item(),
        })
    }
}

/// Volume-preserving space-to-channel reshuffle `[C,H,W] -> [4C,H/2,W/2]`.
pub fn squeeze(x: &Tensor) -> Result<Tensor> {
    crate::autodiff::squeeze_tensor(x)
}

pub fn unsqueeze(x: &Tensor) -> Result<Tensor> {
    crate::autodiff::unsqueeze_tensor(x)
}

/// Factor out the first half of the channels: returns `(z, rest)`.
pub fn split(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = h.chw()?;
    if c % 2 != 0 {
        return Err(Error::shape(format!("split: odd channel count {c}")));
    }
    Ok((h.channel_slice(0, c / 2)?, h.channel_slice(c / 2, c / 2)?))
}

pub fn unsplit(z: &Tensor, rest: &Tensor) -> Result<Tensor> {
    Tensor::concat_channels(&[z, rest])
}

pub(crate) fn split_vars(g: &mut Graph, h: Var) -> Result<(Var, Var)> {
    let c = g.shape(h)[0];
    if !c.is_multiple_of(2) {
        return Err(Error::shape(format!("split: odd channel count {c}")));
    }
    Ok((g.slice_channels(h, 0, c / 2)?, g.slice_channels(h, c / 2, c / 2)?))
}

#[cfg(all(test, not(feature = "f32")))]
pub(crate) mod testutil {
    use super::*;

    /// Log |det| of the Jacobian of `f` at `x`, assembled column by column
    /// with central differences and reduced with nalgebra's LU.
    pub fn numeric_logdet(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> f64 {
        let n = x.len();
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut up = x.clone();
            up.data_mut()[j] += eps as Float;
            let mut down = x.clone();
            down.data_mut()[j] -= eps as Float;
            let (fu, fd) = (f(&up), f(&down));
            for i in 0..n {
                jac[(i, j)] = (fu.data()[i] - fd.data()[i]) as f64 / (2.0 * eps);
            }
        }
        jac.lu().determinant().abs().ln()
    }
}
