//! Seeded random streams.
//!
//! Every stochastic choice draws from ChaCha8 (8-round ChaCha stream cipher
//! used as a counter-mode generator). A master seed is expanded with
//! `seed_from_u64` and each purpose gets its own ChaCha stream id, so adding
//! draws for one purpose never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, SymmetricMatrix};

/// Sub-stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Weights = 1,
    Data = 2,
    BatchOrder = 3,
    GradCheck = 4,
    Geometry = 5,
    Loss = 6,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Position of a generator, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_matrix<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian samples are finite")
}

/// Orthonormalizes the rows of `m` in place (modified Gram-Schmidt, two
/// passes). Rows that collapse numerically are left as zero.
pub(crate) fn orthonormalize_rows(m: &mut Matrix<f64>) {
    let (r, c) = m.shape();
    for i in 0..r {
        for _ in 0..2 {
            for k in 0..i {
                let dot: f64 = (0..c).map(|j| m[(i, j)] * m[(k, j)]).sum();
                for j in 0..c {
                    let v = m[(k, j)];
                    m[(i, j)] -= dot * v;
                }
            }
        }
        let norm = (0..c).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt();
        for j in 0..c {
            m[(i, j)] = if norm > 1e-12 { m[(i, j)] / norm } else { 0.0 };
        }
    }
}

/// Haar-like random orthogonal matrix.
pub fn random_orthogonal<R: rand::Rng + ?Sized>(rng: &mut R, d: usize) -> Matrix<f64> {
    let mut m = gaussian_matrix(rng, d, d);
    orthonormalize_rows(&mut m);
    m.transpose()
}

/// Random SPD matrix `U diag(λ) Uᵀ` with log-uniform eigenvalues in
/// `[1/cond, 1]`, `cond` drawn log-uniformly from `cond_range`. The extreme
/// eigenvalues are pinned so the condition number is exact.
pub fn random_spd<R: rand::Rng + ?Sized>(rng: &mut R, d: usize, cond_range: (f64, f64)) -> SymmetricMatrix<f64> {
    let (lo, hi) = cond_range;
    let cond = (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp();
    let u = random_orthogonal(rng, d);
    let mut lambda: Vec<f64> = (0..d)
        .map(|i| match i {
            0 => 1.0,
            _ if i == d - 1 => 1.0 / cond,
            _ => (-cond.ln() * rng.random::<f64>()).exp(),
        })
        .collect();
    lambda.sort_by(|a, b| b.total_cmp(a));
    crate::linalg::spectral_product(&u, &lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, Purpose::Data).random()).collect();
        let mut s = stream(7, Purpose::Data);
        let b: Vec<u64> = (0..4).map(|_| s.random()).collect();
        let mut w = stream(7, Purpose::Weights);
        let c: Vec<u64> = (0..4).map(|_| w.random()).collect();
        assert_eq!(a[0], b[0]);
        assert_ne!(b, c);
    }

    #[test]
    fn state_round_trip() {
        let mut rng = stream(3, Purpose::BatchOrder);
        for _ in 0..13 {
            let _: u32 = rng.random();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = stream(1, Purpose::GradCheck);
        let u = random_orthogonal(&mut rng, 9);
        let err = u.t_matmul(&u).sub(&Matrix::identity(9)).max_abs();
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn spd_condition_number() {
        let mut rng = stream(2, Purpose::Data);
        let p = random_spd(&mut rng, 5, (10.0, 10.0));
        let e = crate::linalg::sym_eig(&p).unwrap();
        assert!((e.lambda[0] / e.lambda[4] - 10.0).abs() < 1e-9);
    }
}
