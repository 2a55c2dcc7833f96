//! Random orthogonal matrices for fixed channel mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::num::tensor::Tensor;

/// Haar-distributed `n x n` orthogonal matrix, deterministic in `seed`.
///
/// Householder QR of a Gaussian matrix with the sign of `R`'s diagonal
/// folded into `Q`. The result is returned row-major as `[n, n]`.
pub fn rand_orthogonal(n: usize, seed: u64) -> Tensor {
    assert!(n >= 1, "orthogonal matrix needs n >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Tensor::randn(&[n, n], &mut rng);
    let mut a: Vec<f64> = g.into_data();
    // q accumulates the product of reflectors, starting from identity.
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut signs = vec![1.0; n];
    for k in 0..n {
        let norm: f64 = (k..n).map(|i| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        let akk = a[k * n + k];
        let alpha = if akk >= 0.0 { -norm } else { norm };
        signs[k] = if alpha < 0.0 { -1.0 } else { 1.0 };
        let mut v: Vec<f64> = (0..n)
            .map(|i| if i < k { 0.0 } else { a[i * n + k] })
            .collect();
        v[k] -= alpha;
        let vn: f64 = v.iter().map(|x| x * x).sum();
        if vn < 1e-300 {
            continue;
        }
        // A <- H A and Q <- Q H with H = I - 2 v v^T / (v^T v).
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * a[i * n + j]).sum();
            let f = 2.0 * dot / vn;
            for i in k..n {
                a[i * n + j] -= f * v[i];
            }
        }
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q[i * n + j] * v[j]).sum();
            let f = 2.0 * dot / vn;
            for j in k..n {
                q[i * n + j] -= f * v[j];
            }
        }
    }
    // R's diagonal equals `alpha_k`; scaling column k of Q by its sign makes
    // the factorization unique, hence Haar distributed.
    for i in 0..n {
        for (k, s) in signs.iter().enumerate() {
            q[i * n + k] *= s;
        }
    }
    Tensor::new(vec![n, n], q).expect("square matrix")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_deviation(q: &Tensor) -> f64 {
        let n = q.shape()[0];
        let d = q.data();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| d[k * n + i] * d[k * n + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn one_by_one_is_plus_or_minus_one() {
        for seed in 0..10 {
            let q = rand_orthogonal(1, seed);
            assert!((q.data()[0].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn columns_are_orthonormal() {
        for seed in 0..20 {
            assert!(gram_deviation(&rand_orthogonal(4, seed)) < 1e-5);
        }
        assert!(gram_deviation(&rand_orthogonal(64, 3)) < 1e-10);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(rand_orthogonal(8, 17), rand_orthogonal(8, 17));
        assert_ne!(rand_orthogonal(8, 17), rand_orthogonal(8, 18));
    }
}
