//! Backward pass of the pooling layer.
//!
//! Two routes to `∂l/∂P` are provided:
//!
//! * the eigenvector/eigenvalue route: `∂l/∂Q → (∂l/∂U, ∂l/∂Λ)` followed by
//!   the eigendecomposition adjoint built from the reciprocal-gap matrix `K`;
//! * a fused divided-difference (Loewner) route that never divides by an
//!   eigenvalue gap, and so stays finite for repeated eigenvalues.
//!
//! Both agree on well-separated spectra. Eigenvalues truncated to zero in
//! the forward pass contribute nothing wherever the derivative of the
//! spectral function would be evaluated at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_product, Matrix, Real, SymmetricMatrix};
use crate::pool::{center_rows, pow0, spectral_values, upper_len, PoolingTape, Rescale, Variant};

/// `∂l/∂U` and the diagonal of `∂l/∂Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrads<T: Real> {
    pub dl_du: Matrix<T>,
    pub dl_dlambda: Vec<T>,
}

/// Reciprocal eigenvalue gaps, `Kᵢⱼ = 1/(λᵢ − λⱼ)` off the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix<T: Real> {
    pub entries: Matrix<T>,
    pub gap_floor: T,
}

impl<T: Real> KMatrix<T> {
    /// Entries whose gap is below `gap_floor` are set to zero.
    pub fn new(lambda: &[T], gap_floor: T) -> Self {
        let d = lambda.len();
        let entries = Matrix::from_fn(d, d, |i, j| {
            let gap = lambda[i] - lambda[j];
            if i == j || gap.abs() < gap_floor || gap == T::zero() {
                T::zero()
            } else {
                T::one() / gap
            }
        });
        Self { entries, gap_floor }
    }
}

/// Default gap floor, `1e-10 · max(λ₁, 1)`.
pub fn default_gap_floor<T: Real>(lambda: &[T]) -> T {
    let l1 = lambda.first().copied().unwrap_or_else(T::zero);
    T::lit(1e-10) * l1.max(T::one())
}

/// How a vectorized upper-triangle gradient is spread back onto the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpperSplit {
    /// Off-diagonal gradient split evenly onto `(i, j)` and `(j, i)`.
    #[default]
    Half,
    /// Off-diagonal gradient placed on `(i, j)` only.
    Full,
}

/// Route used for the spectral part of the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMethod {
    /// `∂l/∂Q → (∂l/∂U, ∂l/∂Λ) → ∂l/∂P` through the `K` matrix.
    Eigen,
    /// Divided-difference form, finite for repeated eigenvalues.
    #[default]
    Fused,
}

/// `d/dλ λ^α`, taken as zero at a truncated-zero eigenvalue unless `α = 1`.
#[inline]
fn power_derivative<T: Real>(lambda: T, alpha: T) -> T {
    if lambda == T::zero() {
        if alpha == T::one() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        alpha * lambda.powf(alpha - T::one())
    }
}

/// Column `j` of `m` scaled by `s[j]`.
fn scale_columns<T: Real>(m: &Matrix<T>, s: &[T]) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * s[j])
}

/// Diagonal of `Uᵀ G U`.
fn projected_diagonal<T: Real>(u: &Matrix<T>, g: &Matrix<T>) -> Vec<T> {
    let gu = g.matmul(u);
    (0..u.cols())
        .map(|k| (0..u.rows()).map(|i| u[(i, k)] * gu[(i, k)]).sum())
        .collect()
}

/// Gradients of the spectral normalization with respect to `U` and `Λ`.
///
/// `∂l/∂U = (G + Gᵀ) U F` for every variant; `∂l/∂Λ` follows the variant's
/// normalization, including the extra normalizer terms for the spectral- and
/// Frobenius-norm rescalings.
pub fn grad_normalization<T: Real>(tape: &PoolingTape<T>, dl_dq: &Matrix<T>) -> Result<SpectralGrads<T>> {
    let spec = &tape.spec;
    if spec.variant == Variant::ElemwisePower {
        return Err(Error::UnsupportedVariant(spec.variant.name()));
    }
    let d = tape.dim();
    if dl_dq.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "∂l/∂Q is {}x{}, expected {d}x{d}",
            dl_dq.rows(),
            dl_dq.cols()
        )));
    }
    let u = &tape.eig.u;
    let lambda = &tape.eig.lambda;
    let f = spectral_values(lambda, spec)?;

    let g_sum = dl_dq.add(&dl_dq.transpose());
    let dl_du = scale_columns(&g_sum.matmul(u), &f);
    let s = projected_diagonal(u, dl_dq);

    let dl_dlambda = match spec.power() {
        None => {
            let eps = T::lit(spec.eps_log);
            lambda.iter().zip(&s).map(|(&l, &si)| si / (l + eps)).collect()
        }
        Some(alpha) => {
            let alpha = T::lit(alpha);
            let base: Vec<T> = lambda
                .iter()
                .zip(&s)
                .map(|(&l, &si)| power_derivative(l, alpha) * si)
                .collect();
            let tr_qg = tape.q.inner(dl_dq);
            match spec.rescale() {
                Rescale::None => base,
                Rescale::Spectral => {
                    let l1 = lambda[0];
                    let c = T::one() / l1.powf(alpha);
                    let mut out: Vec<T> = base.into_iter().map(|b| c * b).collect();
                    out[0] -= alpha / l1 * tr_qg;
                    out
                }
                Rescale::Frobenius => {
                    let sum: T = lambda.iter().map(|&l| pow0(l, alpha + alpha)).sum();
                    let c = T::one() / sum.sqrt();
                    let two_alpha_m1 = alpha + alpha - T::one();
                    base.into_iter()
                        .zip(lambda)
                        .map(|(b, &l)| c * b - alpha / sum * tr_qg * pow0(l, two_alpha_m1))
                        .collect()
                }
            }
        }
    };

    let grads = SpectralGrads { dl_du, dl_dlambda };
    check_finite_grads(&grads)?;
    Ok(grads)
}

fn check_finite_grads<T: Real>(g: &SpectralGrads<T>) -> Result<()> {
    if g.dl_dlambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            layer: "spectral normalization (∂l/∂Λ)".into(),
        });
    }
    if g.dl_du.check_finite().is_err() {
        return Err(Error::NonFiniteGradient {
            layer: "spectral normalization (∂l/∂U)".into(),
        });
    }
    Ok(())
}

/// Eigendecomposition adjoint:
/// `∂l/∂P = U((Kᵀ ∘ (Uᵀ ∂l/∂U)) + (∂l/∂Λ)_diag)Uᵀ`, symmetrized.
///
/// `∘` is the element-wise product. Gaps under `gap_floor` give zero `K`
/// entries, so the result is finite but no longer exact there.
pub fn grad_eig<T: Real>(
    eig: &crate::linalg::EigenSystem<T>,
    grads: &SpectralGrads<T>,
    gap_floor: T,
) -> SymmetricMatrix<T> {
    let u = &eig.u;
    let k = KMatrix::new(&eig.lambda, gap_floor);
    let mut inner = u.t_matmul(&grads.dl_du);
    let d = eig.dim();
    for i in 0..d {
        for j in 0..d {
            inner[(i, j)] = if i == j {
                grads.dl_dlambda[i]
            } else {
                k.entries[(j, i)] * inner[(i, j)]
            };
        }
    }
    SymmetricMatrix::symmetrize(&u.matmul(&inner).matmul_t(u))
}

/// `∂l/∂X = (G + Gᵀ) X Ī` for `P = X Ī Xᵀ`.
pub fn grad_covariance<T: Real>(x: &Matrix<T>, dl_dp: &Matrix<T>) -> Result<Matrix<T>> {
    let d = x.rows();
    if dl_dp.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "∂l/∂P is {}x{}, expected {d}x{d}",
            dl_dp.rows(),
            dl_dp.cols()
        )));
    }
    let inv_n = T::one() / T::from_usize(x.cols()).expect("sample count fits the scalar type");
    let g_sum = dl_dp.add(&dl_dp.transpose());
    Ok(g_sum.matmul(&center_rows(x)).scale(inv_n))
}

/// Backward pass of the element-wise signed power:
/// `∂l/∂Pᵢⱼ = Gᵢⱼ β(|pᵢⱼ| + ε)^{β−1}`, the sign factor cancelling for
/// `p ≠ 0`. The same expression is used at `p = 0`; when `ε = 0` as well
/// the entry is zero.
pub fn grad_elemwise<T: Real>(tape: &PoolingTape<T>, dl_dq: &Matrix<T>) -> Result<SymmetricMatrix<T>> {
    let spec = &tape.spec;
    if spec.variant != Variant::ElemwisePower {
        return Err(Error::UnsupportedVariant(spec.variant.name()));
    }
    let d = tape.dim();
    if dl_dq.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "∂l/∂Q is {}x{}, expected {d}x{d}",
            dl_dq.rows(),
            dl_dq.cols()
        )));
    }
    let beta = T::lit(spec.beta);
    let eps = T::lit(spec.eps_elem);
    let g = SymmetricMatrix::symmetrize(dl_dq);
    let out = g.zip_map(&tape.p, |gij, pij| {
        let base = pij.abs() + eps;
        if base == T::zero() {
            T::zero()
        } else {
            gij * beta * base.powf(beta - T::one())
        }
    });
    Ok(SymmetricMatrix::symmetrize(&out))
}

/// Loewner matrix of divided differences, `f'` on near-coincident pairs.
fn loewner<T: Real>(lambda: &[T], f: &[T], df: &[T], gap_floor: T) -> Matrix<T> {
    let d = lambda.len();
    let half = T::lit(0.5);
    Matrix::from_fn(d, d, |i, j| {
        let gap = lambda[i] - lambda[j];
        if i == j {
            df[i]
        } else if gap.abs() < gap_floor || gap == T::zero() {
            half * (df[i] + df[j])
        } else {
            (f[i] - f[j]) / gap
        }
    })
}

/// Fused spectral backward with the default gap floor.
pub fn fused_spectral_backward<T: Real>(tape: &PoolingTape<T>, dl_dq: &Matrix<T>) -> Result<SymmetricMatrix<T>> {
    fused_spectral_backward_with_floor(tape, dl_dq, default_gap_floor(&tape.eig.lambda))
}

/// `∂l/∂P = U(L ∘ (Uᵀ sym(G) U))Uᵀ` plus, for the norm-rescaled variants,
/// the gradient of the scalar normalizer.
pub fn fused_spectral_backward_with_floor<T: Real>(
    tape: &PoolingTape<T>,
    dl_dq: &Matrix<T>,
    gap_floor: T,
) -> Result<SymmetricMatrix<T>> {
    let spec = &tape.spec;
    if !spec.variant.is_spectral() {
        return Err(Error::UnsupportedVariant(spec.variant.name()));
    }
    let d = tape.dim();
    if dl_dq.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "∂l/∂Q is {}x{}, expected {d}x{d}",
            dl_dq.rows(),
            dl_dq.cols()
        )));
    }
    let u = &tape.eig.u;
    let lambda = &tape.eig.lambda;
    let g = SymmetricMatrix::symmetrize(dl_dq);
    let s = u.t_matmul(&g.matmul(u));

    let (f, df, c, normalizer_grad): (Vec<T>, Vec<T>, T, Vec<T>) = match spec.power() {
        None => {
            let eps = T::lit(spec.eps_log);
            let f = lambda.iter().map(|&l| (l + eps).ln()).collect();
            let df = lambda.iter().map(|&l| T::one() / (l + eps)).collect();
            (f, df, T::one(), vec![T::zero(); d])
        }
        Some(alpha) => {
            let alpha = T::lit(alpha);
            let r: Vec<T> = lambda.iter().map(|&l| pow0(l, alpha)).collect();
            let dr: Vec<T> = lambda.iter().map(|&l| power_derivative(l, alpha)).collect();
            // dl/dc for Q = c·R is ⟨G, R⟩ = Σ rₖ Sₖₖ.
            let dl_dc: T = (0..d).map(|k| r[k] * s[(k, k)]).sum();
            match spec.rescale() {
                Rescale::None => (r, dr, T::one(), vec![T::zero(); d]),
                Rescale::Spectral => {
                    let l1 = lambda[0];
                    if l1 <= T::zero() {
                        return Err(Error::Precondition {
                            variant: spec.variant.name(),
                            requirement: "λ₁ > 0",
                            index: 0,
                            eigenvalue: l1.as_f64(),
                        });
                    }
                    let c = T::one() / r[0];
                    let mut ng = vec![T::zero(); d];
                    ng[0] = dl_dc * (-alpha * c / l1);
                    (r, dr, c, ng)
                }
                Rescale::Frobenius => {
                    let sum: T = r.iter().map(|&v| v * v).sum();
                    if sum <= T::zero() {
                        return Err(Error::Precondition {
                            variant: spec.variant.name(),
                            requirement: "Σ λₖ^{2α} > 0",
                            index: 0,
                            eigenvalue: lambda[0].as_f64(),
                        });
                    }
                    let c = T::one() / sum.sqrt();
                    let c3 = c * c * c;
                    let ng = lambda
                        .iter()
                        .map(|&l| dl_dc * (-c3 * alpha * pow0(l, alpha + alpha - T::one())))
                        .collect();
                    (r, dr, c, ng)
                }
            }
        }
    };

    let l = loewner(lambda, &f, &df, gap_floor);
    let mut inner = l.hadamard(&s).scale(c);
    for k in 0..d {
        inner[(k, k)] += normalizer_grad[k];
    }
    let out = SymmetricMatrix::symmetrize(&u.matmul(&inner).matmul_t(u));
    if out.check_finite().is_err() {
        return Err(Error::NonFiniteGradient {
            layer: "fused spectral backward".into(),
        });
    }
    Ok(out)
}

/// Eigen-route backward (`grad_normalization → grad_eig → grad_covariance`,
/// or the element-wise route) with the default gap floor.
pub fn pool_backward<T: Real>(tape: &PoolingTape<T>, dl_dq: &Matrix<T>) -> Result<Matrix<T>> {
    pool_backward_with(tape, dl_dq, BackwardMethod::Eigen)
}

/// `∂l/∂P` for the tape's variant via the chosen route.
pub fn grad_p<T: Real>(tape: &PoolingTape<T>, dl_dq: &Matrix<T>, method: BackwardMethod) -> Result<SymmetricMatrix<T>> {
    if tape.spec.variant == Variant::ElemwisePower {
        return grad_elemwise(tape, dl_dq);
    }
    match method {
        BackwardMethod::Eigen => {
            let grads = grad_normalization(tape, dl_dq)?;
            Ok(grad_eig(&tape.eig, &grads, default_gap_floor(&tape.eig.lambda)))
        }
        BackwardMethod::Fused => fused_spectral_backward(tape, dl_dq),
    }
}

pub fn pool_backward_with<T: Real>(
    tape: &PoolingTape<T>,
    dl_dq: &Matrix<T>,
    method: BackwardMethod,
) -> Result<Matrix<T>> {
    let dl_dp = grad_p(tape, dl_dq, method)?;
    grad_covariance(&tape.x, &dl_dp)
}

/// Backward pass from a gradient with respect to `vectorize_upper(Q)`.
pub fn pool_backward_vectorized<T: Real>(
    tape: &PoolingTape<T>,
    dl_dvec: &[T],
    split: UpperSplit,
    method: BackwardMethod,
) -> Result<Matrix<T>> {
    let g = unvectorize_upper_with(dl_dvec, tape.dim(), split)?;
    pool_backward_with(tape, &g, method)
}

/// Adjoint of `vectorize_upper` with the default half split.
pub fn unvectorize_upper<T: Real>(g: &[T], d: usize) -> Result<SymmetricMatrix<T>> {
    unvectorize_upper_with(g, d, UpperSplit::Half).map(SymmetricMatrix::from_exact)
}

pub fn unvectorize_upper_with<T: Real>(g: &[T], d: usize, split: UpperSplit) -> Result<Matrix<T>> {
    if g.len() != upper_len(d) {
        return Err(Error::Shape(format!(
            "vector of length {} cannot be an upper triangle of a {d}x{d} matrix (expected {})",
            g.len(),
            upper_len(d)
        )));
    }
    let half = T::lit(0.5);
    let mut m = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            let v = g[k];
            k += 1;
            if i == j {
                m[(i, i)] = v;
            } else {
                match split {
                    UpperSplit::Half => {
                        m[(i, j)] = half * v;
                        m[(j, i)] = half * v;
                    }
                    UpperSplit::Full => m[(i, j)] = v,
                }
            }
        }
    }
    Ok(m)
}

/// Convenience: `U diag(v) Uᵀ` for test assertions on the diagonal route.
pub fn diag_in_basis<T: Real>(u: &Matrix<T>, v: &[T]) -> SymmetricMatrix<T> {
    spectral_product(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sym_eig, EigenSystem};
    use crate::pool::{pool_forward, vectorize_upper, NormalizationSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(d: usize, n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_g(d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn diag_tape(lambda: &[f64], spec: NormalizationSpec) -> PoolingTape<f64> {
        let d = lambda.len();
        let eig = EigenSystem {
            u: Matrix::identity(d),
            lambda: lambda.to_vec(),
        };
        let p = eig.reconstruct();
        let q = crate::pool::normalize_spectrum(&eig, &spec).unwrap();
        PoolingTape {
            x: Matrix::zeros(d, 2),
            p,
            eig,
            q,
            spec,
        }
    }

    #[test]
    fn diagonal_mpn_gradient_is_power_derivative() {
        let lambda = [4.0, 2.0, 0.5];
        for alpha in [0.5, 0.7, 1.0] {
            let tape = diag_tape(&lambda, NormalizationSpec::new(Variant::Mpn).with_alpha(alpha));
            let g = grad_normalization(&tape, &Matrix::identity(3)).unwrap();
            for (dl, l) in g.dl_dlambda.iter().zip(lambda) {
                assert_relative_eq!(*dl, alpha * l.powf(alpha - 1.0), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let x = random_x(4, 9, 1);
        for variant in Variant::ALL {
            let (_, tape) = pool_forward(&x, &NormalizationSpec::new(variant)).unwrap();
            let z = Matrix::zeros(4, 4);
            if variant.is_spectral() {
                let g = grad_normalization(&tape, &z).unwrap();
                assert_eq!(g.dl_du.max_abs(), 0.0);
                assert!(g.dl_dlambda.iter().all(|&v| v == 0.0));
                assert_eq!(grad_eig(&tape.eig, &g, 0.0).max_abs(), 0.0);
            }
            assert_eq!(pool_backward(&tape, &z).unwrap().max_abs(), 0.0);
        }
        assert_eq!(grad_covariance(&x, &Matrix::zeros(4, 4)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn elemwise_routed_to_normalization_is_an_error() {
        let x = random_x(3, 6, 2);
        let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::ElemwisePower)).unwrap();
        assert!(matches!(
            grad_normalization(&tape, &Matrix::identity(3)),
            Err(Error::UnsupportedVariant("elemwise"))
        ));
        let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::Mpn)).unwrap();
        assert!(grad_elemwise(&tape, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn eig_adjoint_diagonal_term() {
        let eig = EigenSystem {
            u: Matrix::<f64>::identity(3),
            lambda: vec![3.0, 2.0, 1.0],
        };
        let grads = SpectralGrads {
            dl_du: Matrix::zeros(3, 3),
            dl_dlambda: vec![1.0, 0.0, 0.0],
        };
        assert_eq!(grad_eig(&eig, &grads, 0.0).as_matrix(), &Matrix::from_diag(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn grad_eig_output_is_exactly_symmetric() {
        let x = random_x(6, 11, 3);
        let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::Mpn)).unwrap();
        let grads = grad_normalization(&tape, &random_g(6, 4)).unwrap();
        let g = grad_eig(&tape.eig, &grads, 1e-12);
        assert_eq!(g.sub(&g.transpose()).frobenius_norm(), 0.0);
    }

    #[test]
    fn centered_identity_gradient() {
        // Rows centered by construction.
        let mut x = random_x(3, 8, 5);
        x = center_rows(&x);
        let g = grad_covariance(&x, &Matrix::identity(3)).unwrap();
        let expected = x.scale(2.0 / 8.0);
        assert!(g.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn elemwise_scalar_derivative() {
        let p = SymmetricMatrix::from_diag(&[4.0]);
        let spec = NormalizationSpec {
            eps_elem: 0.0,
            ..NormalizationSpec::new(Variant::ElemwisePower)
        };
        let tape = PoolingTape {
            x: Matrix::zeros(1, 1),
            q: crate::pool::elemwise_power(&p, 0.5, 0.0),
            eig: sym_eig(&p).unwrap(),
            p,
            spec,
        };
        let g = grad_elemwise(&tape, &Matrix::identity(1)).unwrap();
        assert_eq!(g[(0, 0)], 0.25);
        let g = grad_elemwise(&tape, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn elemwise_matches_scalar_differences() {
        let beta = 0.5;
        let eps = 1e-5;
        let h = 1e-6;
        let f = |p: f64| p.signum() * (p.abs() + eps).powf(beta);
        for p in [0.7, -0.3, 2.5, -1.1, 0.05] {
            let numeric = (f(p + h) - f(p - h)) / (2.0 * h);
            let analytic = beta * (p.abs() + eps).powf(beta - 1.0);
            assert!((numeric - analytic).abs() < 1e-8, "p={p}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn plain_backward_is_transparent() {
        let x = random_x(5, 10, 6);
        let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::Plain)).unwrap();
        let id = Matrix::identity(5);
        let via_chain = pool_backward(&tape, &id).unwrap();
        let direct = grad_covariance(&x, &id).unwrap();
        assert!(via_chain.sub(&direct).max_abs() <= 1e-12 * direct.max_abs());
    }

    #[test]
    fn fused_identity_function_is_symmetrization() {
        let x = random_x(4, 9, 7);
        let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::Plain)).unwrap();
        let g = random_g(4, 8);
        let out = fused_spectral_backward(&tape, &g).unwrap();
        let sym = SymmetricMatrix::symmetrize(&g);
        assert!(out.sub(&sym).max_abs() < 1e-13);
    }

    #[test]
    fn fused_repeated_eigenvalues_use_derivative() {
        let tape = diag_tape(&[2.0, 2.0], NormalizationSpec::new(Variant::Mpn));
        let g = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let out = fused_spectral_backward(&tape, &g).unwrap();
        let expected = 1.0 / (2.0 * 2f64.sqrt());
        assert_relative_eq!(out[(0, 1)], expected, max_relative = 1e-14);
        assert_relative_eq!(out[(1, 0)], expected, max_relative = 1e-14);
        assert_eq!(out[(0, 0)], 0.0);
    }

    #[test]
    fn fused_matches_eigen_route_on_separated_spectra() {
        let x = random_x(6, 14, 9);
        for variant in Variant::ALL.into_iter().filter(|v| v.is_spectral()) {
            for alpha in [0.5, 0.7, 1.0, 1.5] {
                let spec = NormalizationSpec::new(variant).with_alpha(alpha);
                let (_, tape) = pool_forward(&x, &spec).unwrap();
                let g = random_g(6, 10);
                let a = grad_p(&tape, &g, BackwardMethod::Eigen).unwrap();
                let b = grad_p(&tape, &g, BackwardMethod::Fused).unwrap();
                let rel = a.sub(&b).frobenius_norm() / a.frobenius_norm();
                assert!(rel < 1e-9, "{variant} α={alpha}: {rel}");
            }
        }
    }

    #[test]
    fn rank_deficient_mpn_gradients_are_finite() {
        // N = 4 samples in d = 7 dimensions: at least 4 zero eigenvalues.
        let x = random_x(7, 4, 11);
        let spec = NormalizationSpec::new(Variant::Mpn);
        let (_, tape) = pool_forward(&x, &spec).unwrap();
        assert!(tape.eig.lambda.iter().filter(|&&l| l == 0.0).count() >= 4);
        let g = random_g(7, 12);
        for method in [BackwardMethod::Eigen, BackwardMethod::Fused] {
            let dx = pool_backward_with(&tape, &g, method).unwrap();
            assert!(dx.check_finite().is_ok());
        }
        let a = grad_p(&tape, &g, BackwardMethod::Eigen).unwrap();
        let b = grad_p(&tape, &g, BackwardMethod::Fused).unwrap();
        assert!(a.sub(&b).frobenius_norm() <= 1e-9 * a.frobenius_norm());
    }

    #[test]
    fn unvectorize_examples() {
        let m = unvectorize_upper(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(m.as_matrix(), &Matrix::from_rows(&[[1.0, 1.0], [1.0, 3.0]]).unwrap());
        assert_eq!(unvectorize_upper(&[0.0; 6], 3).unwrap().max_abs(), 0.0);
        assert!(matches!(unvectorize_upper(&[1.0, 2.0], 2), Err(Error::Shape(_))));
        let full = unvectorize_upper_with(&[1.0, 2.0, 3.0], 2, UpperSplit::Full).unwrap();
        assert_eq!(full, Matrix::from_rows(&[[1.0, 2.0], [0.0, 3.0]]).unwrap());
    }

    #[test]
    fn split_conventions_agree_through_the_chain() {
        let x = random_x(5, 12, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w: Vec<f64> = (0..upper_len(5)).map(|_| rng.random_range(-1.0..1.0)).collect();
        for variant in Variant::ALL {
            let (_, tape) = pool_forward(&x, &NormalizationSpec::new(variant)).unwrap();
            for method in [BackwardMethod::Eigen, BackwardMethod::Fused] {
                let a = pool_backward_vectorized(&tape, &w, UpperSplit::Half, method).unwrap();
                let b = pool_backward_vectorized(&tape, &w, UpperSplit::Full, method).unwrap();
                assert!(a.sub(&b).max_abs() <= 1e-12 * a.max_abs(), "{variant} {method:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unvectorize_is_the_adjoint(d in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..upper_len(d)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = SymmetricMatrix::symmetrize(&Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)));
            let lhs = unvectorize_upper(&g, d).unwrap().inner(&s);
            let rhs: f64 = g.iter().zip(vectorize_upper(&s)).map(|(a, b)| a * b).sum();
            // ⟨unvec(g), S⟩ counts each off-diagonal twice at half weight.
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn backward_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x = random_x(5, 11, seed);
            let (_, tape) = pool_forward(&x, &NormalizationSpec::new(Variant::Mpn)).unwrap();
            let g1 = random_g(5, seed ^ 1);
            let g2 = random_g(5, seed ^ 2);
            let combo = g1.scale(a).add(&g2.scale(b));
            let lhs = pool_backward(&tape, &combo).unwrap();
            let rhs = pool_backward(&tape, &g1).unwrap().scale(a).add(&pool_backward(&tape, &g2).unwrap().scale(b));
            prop_assert!(lhs.sub(&rhs).frobenius_norm() <= 1e-12 * rhs.frobenius_norm().max(1e-300));
        }
    }
}
