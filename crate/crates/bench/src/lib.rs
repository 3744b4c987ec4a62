//! Fixtures shared by the benchmarks.

use srcl_core::{Matrix, Rng};

/// Two random `n x d` embedding matrices.
pub fn embeddings(n: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let a = Matrix::from_fn(n, d, |_, _| rng.normal());
    let b = Matrix::from_fn(n, d, |_, _| rng.normal());
    (a, b)
}

/// An `n x n` grid of exp-cosine similarities.
pub fn similarities(n: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0).exp())
}
