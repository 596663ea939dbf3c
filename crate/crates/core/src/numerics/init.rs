//! Parameter initializers. All return `f64` values; callers cast to the
//! training precision.

use alloc::vec;
use alloc::vec::Vec;

use super::Rng;

/// `U(−1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
}

/// A `rows × cols` matrix with orthonormal rows (`rows ≤ cols`) or orthonormal
/// columns (`rows > cols`), from modified Gram-Schmidt on Gaussian draws.
pub fn orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let (n_vec, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while basis.len() < n_vec {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
        }
        let norm = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}
