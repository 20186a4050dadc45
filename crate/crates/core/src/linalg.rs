//! Small dense matrix routines used to initialize and invert the 1x1
//! convolution. Matrices are row-major `[n, n]` tensors.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

fn square_dim(a: &Tensor) -> Result<usize> {
    match a.shape()[..] {
        [r, c] if r == c => Ok(r),
        _ => Err(Error::shape(format!("expected a square matrix, got {:?}", a.shape()))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    crate::autodiff::kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let [m, n] = a.shape()[..] else {
        return Err(Error::shape(format!("transpose {:?}", a.shape())));
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Orthogonal factor of the QR decomposition (modified Gram-Schmidt on
/// columns).
pub fn qr_orthogonal(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    let mut cols: Vec<Vec<Float>> = (0..n).map(|j| (0..n).map(|i| a.data()[i * n + j]).collect()).collect();
    for j in 0..n {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: Float = done[p].iter().zip(&rest[0]).map(|(x, y)| x * y).sum();
            for (x, q) in rest[0].iter_mut().zip(&done[p]) {
                *x -= dot * q;
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<Float>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain("qr: rank-deficient matrix".into()));
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q[i * n + j] = v;
        }
    }
    Tensor::new(vec![n, n], q)
}

/// Uniformly-ish random rotation: orthogonal factor of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Result<Tensor> {
    let g = crate::rng::randn(rng, &[n, n])?;
    qr_orthogonal(&g)
}

/// `A = P L U` with `P` a permutation matrix, `L` unit lower triangular and
/// `U` upper triangular (partial pivoting).
#[derive(Clone, Debug)]
pub struct LuFactors {
    pub p: Tensor,
    pub l: Tensor,
    pub u: Tensor,
}

pub fn lu_decompose(a: &Tensor) -> Result<LuFactors> {
    let n = square_dim(a)?;
    let mut u = a.data().to_vec();
    let mut l = vec![0.0; n * n];
    // row_of[i]: original row now sitting at position i.
    let mut row_of: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| u[i * n + k].abs().total_cmp(&u[j * n + k].abs()))
            .unwrap();
        if u[pivot * n + k].abs() < Float::MIN_POSITIVE {
            return Err(Error::Domain("lu: singular matrix".into()));
        }
        if pivot != k {
            for c in 0..n {
                u.swap(k * n + c, pivot * n + c);
                l.swap(k * n + c, pivot * n + c);
            }
            row_of.swap(k, pivot);
        }
        for i in k + 1..n {
            let f = u[i * n + k] / u[k * n + k];
            l[i * n + k] = f;
            for c in k..n {
                u[i * n + c] -= f * u[k * n + c];
            }
            u[i * n + k] = 0.0;
        }
    }
    for i in 0..n {
        l[i * n + i] = 1.0;
    }
    // Row i of (L U) is original row row_of[i], so A = P (L U) with
    // P[row_of[i], i] = 1.
    let mut p = vec![0.0; n * n];
    for (i, &r) in row_of.iter().enumerate() {
        p[r * n + i] = 1.0;
    }
    Ok(LuFactors {
        p: Tensor::new(vec![n, n], p)?,
        l: Tensor::new(vec![n, n], l)?,
        u: Tensor::new(vec![n, n], u)?,
    })
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn invert_lower(l: &Tensor) -> Result<Tensor> {
    let n = square_dim(l)?;
    let a = l.data();
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= a[i * n + k] * inv[k * n + col];
            }
            let d = a[i * n + i];
            if d == 0.0 {
                return Err(Error::Domain("singular triangular matrix".into()));
            }
            inv[i * n + col] = s / d;
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Inverse of an upper-triangular matrix by back substitution.
pub fn invert_upper(u: &Tensor) -> Result<Tensor> {
    let t = transpose(u)?;
    transpose(&invert_lower(&t)?)
}
