//! Small building blocks shared by the coordinate network and the denoiser:
//! row-major matrix products, parameter initialization and optimizers.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Row-major matrix view over a slice.
#[inline]
pub fn view<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

#[inline]
pub fn view_mut<F>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view shape")
}

/// `c = a · bᵀ + beta·c` for row-major `a (m×k)`, `b (n×k)`, `c (m×n)`.
pub fn matmul_abt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, beta: F) {
    let a = view(a, m, k);
    let b = view(b, n, k);
    let mut c = view_mut(c, m, n);
    general_mat_mul(F::one(), &a, &b.t(), beta, &mut c);
}

/// `c = a · b + beta·c` for row-major `a (m×k)`, `b (k×n)`, `c (m×n)`.
pub fn matmul_ab<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, beta: F) {
    let a = view(a, m, k);
    let b = view(b, k, n);
    let mut c = view_mut(c, m, n);
    general_mat_mul(F::one(), &a, &b, beta, &mut c);
}

/// `c = aᵀ · b + beta·c` for row-major `a (k×m)`, `b (k×n)`, `c (m×n)`.
pub fn matmul_atb<F: Scalar>(a: &[F], b: &[F], c: &mut [F], k: usize, m: usize, n: usize, beta: F) {
    let a = view(a, k, m);
    let b = view(b, k, n);
    let mut c = view_mut(c, m, n);
    general_mat_mul(F::one(), &a.t(), &b, beta, &mut c);
}

pub fn fill_uniform<F: Scalar, R: Rng>(rng: &mut R, out: &mut [F], bound: f64) {
    for v in out.iter_mut() {
        *v = F::of(rng.random_range(-bound..=bound));
    }
}

/// Element-wise `acc += x`.
pub fn add_into<F: Scalar>(acc: &mut [F], x: &[F]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            step: 0,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }

    pub fn update(&mut self, params: &mut [F], grad: &[F]) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one = F::one();
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = F::of(c.lr * bc2.sqrt() / bc1);
        let eps = F::of(c.eps * bc2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Optimizer choice for parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent `φ ← φ − lr·g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<F> {
    Adam(Adam<F>),
    Sgd { lr: f64 },
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig::with_lr(lr), n)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn update(&mut self, params: &mut [F], grad: &[F]) {
        match self {
            Optimizer::Adam(a) => a.update(params, grad),
            Optimizer::Sgd { lr } => {
                let lr = F::of(*lr);
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul_abt(&a, &b, &mut c, m, k, n, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a (m×k) viewed as aᵀ of a (k×m) matrix stored transposed
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..k * n).map(|idx| b[(idx % n) * k + idx / n]).collect();
        let mut c2 = vec![0.0; m * n];
        matmul_atb(&at, &bt, &mut c2, k, m, n, 0.0);
        let mut c3 = vec![0.0; m * n];
        matmul_ab(&a, &bt, &mut c3, m, k, n, 0.0);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![1.0f64, 1.0];
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), 2);
        opt.update(&mut p, &[4.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }
}
