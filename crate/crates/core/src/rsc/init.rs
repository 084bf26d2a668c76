use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `rows x dim` matrix with orthonormal rows, from Gram-Schmidt over
/// seeded Gaussian draws (two passes for accuracy).
pub fn orthonormal_rows(rows: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if rows > dim {
        return Err(Error::Config(format!(
            "cannot draw {rows} orthonormal rows in {dim} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while m.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &m {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, a) in v.iter_mut().zip(u) {
                    *x -= d * a;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a draw (numerically) inside the span of earlier rows is redrawn
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        m.push(v);
    }
    Tensor::new(vec![rows, dim], m.concat())
}

/// The four configuration prototypes as a `4 x e1` matrix.
pub fn init_prototypes(seed: u64, e1: usize) -> Result<Tensor> {
    orthonormal_rows(super::CONFIGS.len(), e1, seed)
}

/// One sub-bank of basis vectors.
pub fn init_bank(seed: u64, rows: usize, e2: usize) -> Result<Tensor> {
    orthonormal_rows(rows, e2, seed)
}

/// Largest deviation of `m m^T` from the identity.
pub fn gram_deviation(m: &Tensor) -> f64 {
    let (r, n) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..n).map(|k| d[i * n + k] * d[j * n + k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_orthonormal_and_seeded() {
        let p = init_prototypes(11, 16).unwrap();
        assert!(gram_deviation(&p) < 1e-9);
        assert_eq!(p, init_prototypes(11, 16).unwrap());
        let b = init_bank(3, 32, 256).unwrap();
        assert!(gram_deviation(&b) < 1e-9);
        assert_ne!(b, init_bank(4, 32, 256).unwrap());
    }

    #[test]
    fn square_case_and_overflow() {
        assert!(gram_deviation(&orthonormal_rows(8, 8, 1).unwrap()) < 1e-9);
        assert!(orthonormal_rows(9, 8, 1).is_err());
    }
}
