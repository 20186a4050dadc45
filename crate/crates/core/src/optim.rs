//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Zero moments for tensors of the given shapes.
    pub fn new(lr: Float, shapes: &[&[usize]]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: Float, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(lr, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restore a saved state; shapes must match the current moments.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let same =
            |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&self.m, &m) || !same(&self.v, &v) {
            return Err(Error::shape("optimizer moments do not match parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "adam: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Tensor]) -> Float {
    grads.iter().map(Tensor::sum_sq).sum::<Float>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; a
/// non-positive `max_norm` disables clipping. Returns the norm before
/// clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: Float) -> Float {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let before = p.clone();
        let mut opt = Adam::new(0.1, &[&[2]]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(0.1, &[&[1]]);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-7, "{}", p.item());
    }

    #[test]
    fn converges_on_a_parabola() {
        let mut x = Tensor::scalar(5.0);
        let mut opt = Adam::new(0.1, &[&[1]]);
        let mut hit = None;
        for i in 0..2000 {
            let g = Tensor::scalar(2.0 * x.item());
            opt.step(&mut [&mut x], &[g]).unwrap();
            if x.item().abs() < 1e-3 {
                hit = Some(i);
                break;
            }
        }
        assert!(hit.is_some(), "x = {}", x.item());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = Adam::new(0.1, &[&[2]]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(&mut [], &[]).is_err());
    }

    #[test]
    fn clipping_disabled_at_zero() {
        let mut g = vec![Tensor::from_vec(vec![30.0, 40.0])];
        assert_eq!(clip_grad_norm(&mut g, 0.0), 50.0);
        assert_eq!(g[0].data(), &[30.0, 40.0]);
        clip_grad_norm(&mut g, 5.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn clipping_never_increases_norm(v in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.0f64..80.0) {
            let mut g = vec![Tensor::from_vec(v.iter().map(|&x| x as Float).collect())];
            let before = global_norm(&g);
            clip_grad_norm(&mut g, max as Float);
            prop_assert!(global_norm(&g) <= before * (1.0 + 1e-6));
        }
    }
}
