//! Forward pass of global covariance pooling and its baselines.
//!
//! The main chain is `X → P → (U, Λ) → Q`: sample covariance, symmetric
//! eigendecomposition, truncation of eigenvalues below `eps(λ₁)`, then a
//! spectral normalization. The element-wise signed power baseline acts on
//! `P` directly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_product, sym_eig, EigenSystem, Matrix, Precision, Real, SymmetricMatrix};

/// Normalization applied to the pooled covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// No normalization, `Q = P`.
    #[serde(rename = "plain")]
    Plain,
    /// Matrix power `Q = P^α`.
    #[serde(rename = "mpn")]
    Mpn,
    /// Matrix power followed by division by the spectral norm.
    #[serde(rename = "mpn-l2")]
    MpnL2,
    /// Matrix power followed by division by the Frobenius norm.
    #[serde(rename = "mpn-fro")]
    MpnFro,
    /// Spectral-norm division alone (`α = 1`).
    #[serde(rename = "m-l2")]
    ML2Only,
    /// Frobenius-norm division alone (`α = 1`).
    #[serde(rename = "m-fro")]
    MFroOnly,
    /// Matrix logarithm of `P + ε I`.
    #[serde(rename = "loge")]
    LogE,
    /// Element-wise `sign(p)(|p| + ε)^β`.
    #[serde(rename = "elemwise")]
    ElemwisePower,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Plain,
        Variant::Mpn,
        Variant::MpnL2,
        Variant::MpnFro,
        Variant::ML2Only,
        Variant::MFroOnly,
        Variant::LogE,
        Variant::ElemwisePower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Mpn => "mpn",
            Variant::MpnL2 => "mpn-l2",
            Variant::MpnFro => "mpn-fro",
            Variant::ML2Only => "m-l2",
            Variant::MFroOnly => "m-fro",
            Variant::LogE => "loge",
            Variant::ElemwisePower => "elemwise",
        }
    }

    /// Whether the variant is a function of the spectrum of `P`.
    pub fn is_spectral(self) -> bool {
        self != Variant::ElemwisePower
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant '{s}'")))
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_eps_log() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    0.5
}
fn default_eps_elem() -> f64 {
    1e-5
}

/// Variant tag plus the parameters it reads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub variant: Variant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eps_log")]
    pub eps_log: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_eps_elem")]
    pub eps_elem: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::new(Variant::Mpn)
    }
}

impl NormalizationSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            alpha: default_alpha(),
            eps_log: default_eps_log(),
            beta: default_beta(),
            eps_elem: default_eps_elem(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.eps_log > 0.0 && self.eps_log.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps_log must be > 0, got {}",
                self.eps_log
            )));
        }
        if !(self.eps_elem >= 0.0 && self.eps_elem.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eps_elem must be >= 0, got {}",
                self.eps_elem
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Exponent applied to the eigenvalues, `None` for the logarithm and the
    /// element-wise baseline.
    pub fn power(&self) -> Option<f64> {
        match self.variant {
            Variant::Mpn | Variant::MpnL2 | Variant::MpnFro => Some(self.alpha),
            Variant::Plain | Variant::ML2Only | Variant::MFroOnly => Some(1.0),
            Variant::LogE | Variant::ElemwisePower => None,
        }
    }

    pub fn rescale(&self) -> Rescale {
        match self.variant {
            Variant::MpnL2 | Variant::ML2Only => Rescale::Spectral,
            Variant::MpnFro | Variant::MFroOnly => Rescale::Frobenius,
            _ => Rescale::None,
        }
    }
}

/// Post-power rescaling of the spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescale {
    None,
    /// Divide by `λ₁^α`.
    Spectral,
    /// Divide by `(Σ λₖ^{2α})^½`.
    Frobenius,
}

/// `λ^α` with `0^α := 0`.
#[inline]
pub fn pow0<T: Real>(lambda: T, alpha: T) -> T {
    if lambda == T::zero() {
        T::zero()
    } else {
        lambda.powf(alpha)
    }
}

/// Cached forward intermediates.
#[derive(Debug, Clone)]
pub struct PoolingTape<T: Real> {
    pub x: Matrix<T>,
    pub p: SymmetricMatrix<T>,
    /// Eigendecomposition of `p` after truncation.
    pub eig: EigenSystem<T>,
    pub q: SymmetricMatrix<T>,
    pub spec: NormalizationSpec,
}

impl<T: Real> PoolingTape<T> {
    pub fn dim(&self) -> usize {
        self.p.dim()
    }
}

/// Sample covariance `P = X Ī Xᵀ` with `Ī = (1/N)(I − (1/N)𝟙𝟙ᵀ)`.
///
/// Columns of `x` are the samples. Computed as `(1/N) Xc Xcᵀ` with
/// row-centered `Xc`, which is the same matrix without forming `Ī`.
pub fn covariance<T: Real>(x: &Matrix<T>) -> SymmetricMatrix<T> {
    let (d, n) = x.shape();
    assert!(n >= 1, "covariance needs at least one sample");
    let inv_n = T::one() / T::from_usize(n).expect("sample count fits the scalar type");
    let centered = center_rows(x);
    let mut p = Matrix::zeros(d, d);
    for i in 0..d {
        let ri = centered.row(i);
        for j in i..d {
            let rj = centered.row(j);
            let s = ri.iter().zip(rj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * inv_n;
            p[(i, j)] = s;
            p[(j, i)] = s;
        }
    }
    SymmetricMatrix::from_exact(p)
}

/// Subtracts each row's mean from the row.
pub(crate) fn center_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let (d, n) = x.shape();
    let inv_n = T::one() / T::from_usize(n).expect("sample count fits the scalar type");
    let mut c = x.clone();
    for i in 0..d {
        let row = c.row_mut(i);
        let mean = row.iter().copied().sum::<T>() * inv_n;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    c
}

/// Zeroes every eigenvalue below `eps(λ₁)` in the given precision. A
/// non-positive `λ₁` yields an all-zero spectrum.
pub fn truncate_eigenvalues<T: Real>(eig: &EigenSystem<T>, profile: Precision) -> EigenSystem<T> {
    let l1 = eig.lambda.first().copied().unwrap_or_else(T::zero);
    if l1 <= T::zero() {
        return eig.with_lambda(vec![T::zero(); eig.dim()]);
    }
    let threshold = T::lit(profile.ulp(l1.as_f64()));
    eig.with_lambda(
        eig.lambda
            .iter()
            .map(|&l| if l < threshold { T::zero() } else { l })
            .collect(),
    )
}

/// Normalized spectrum `F(Λ)` for a spectral variant.
pub fn spectral_values<T: Real>(lambda: &[T], spec: &NormalizationSpec) -> Result<Vec<T>> {
    let name = spec.variant.name();
    match spec.variant {
        Variant::ElemwisePower => Err(Error::UnsupportedVariant(name)),
        Variant::LogE => {
            let eps = T::lit(spec.eps_log);
            lambda
                .iter()
                .enumerate()
                .map(|(index, &l)| {
                    if l + eps > T::zero() {
                        Ok((l + eps).ln())
                    } else {
                        Err(Error::Precondition {
                            variant: name,
                            requirement: "λ + eps_log > 0",
                            index,
                            eigenvalue: l.as_f64(),
                        })
                    }
                })
                .collect()
        }
        _ => {
            let alpha = T::lit(spec.power().expect("power variant"));
            if let Some(index) = lambda.iter().position(|&l| l < T::zero()) {
                return Err(Error::Precondition {
                    variant: name,
                    requirement: "non-negative eigenvalues",
                    index,
                    eigenvalue: lambda[index].as_f64(),
                });
            }
            let powered: Vec<T> = lambda.iter().map(|&l| pow0(l, alpha)).collect();
            let scale = match spec.rescale() {
                Rescale::None => T::one(),
                Rescale::Spectral => {
                    let l1 = lambda.first().copied().unwrap_or_else(T::zero);
                    if l1 <= T::zero() {
                        return Err(Error::Precondition {
                            variant: name,
                            requirement: "λ₁ > 0",
                            index: 0,
                            eigenvalue: l1.as_f64(),
                        });
                    }
                    T::one() / powered[0]
                }
                Rescale::Frobenius => {
                    let s: T = powered.iter().map(|&v| v * v).sum();
                    if s <= T::zero() {
                        return Err(Error::Precondition {
                            variant: name,
                            requirement: "Σ λₖ^{2α} > 0",
                            index: 0,
                            eigenvalue: lambda.first().map_or(0.0, |l| l.as_f64()),
                        });
                    }
                    T::one() / s.sqrt()
                }
            };
            Ok(powered.into_iter().map(|v| v * scale).collect())
        }
    }
}

/// `Q = U F(Λ) Uᵀ` for a spectral variant; expects a truncated spectrum.
pub fn normalize_spectrum<T: Real>(
    eig: &EigenSystem<T>,
    spec: &NormalizationSpec,
) -> Result<SymmetricMatrix<T>> {
    let values = spectral_values(&eig.lambda, spec)?;
    Ok(spectral_product(&eig.u, &values))
}

/// `Qᵢⱼ = sign(pᵢⱼ)(|pᵢⱼ| + ε)^β`.
pub fn elemwise_power<T: Real>(p: &SymmetricMatrix<T>, beta: f64, eps_elem: f64) -> SymmetricMatrix<T> {
    let beta = T::lit(beta);
    let eps = T::lit(eps_elem);
    SymmetricMatrix::from_exact(p.map(|v| {
        if v == T::zero() {
            T::zero()
        } else {
            v.signum() * (v.abs() + eps).powf(beta)
        }
    }))
}

/// Full forward chain; returns `Q` and the tape the backward pass needs.
pub fn pool_forward<T: Real>(
    x: &Matrix<T>,
    spec: &NormalizationSpec,
) -> Result<(SymmetricMatrix<T>, PoolingTape<T>)> {
    spec.validate()?;
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Shape(format!(
            "feature matrix must be non-empty, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    x.check_finite()?;
    let p = covariance(x);
    let eig = truncate_eigenvalues(&sym_eig(&p)?, T::PRECISION);
    let q = match spec.variant {
        Variant::ElemwisePower => elemwise_power(&p, spec.beta, spec.eps_elem),
        _ => normalize_spectrum(&eig, spec)?,
    };
    let tape = PoolingTape {
        x: x.clone(),
        p,
        eig,
        q: q.clone(),
        spec: *spec,
    };
    Ok((q, tape))
}

/// Row-major concatenation of the upper triangle (`i ≤ j`), length
/// `d(d+1)/2`. Off-diagonal entries are not rescaled.
pub fn vectorize_upper<T: Real>(q: &SymmetricMatrix<T>) -> Vec<T> {
    let d = q.dim();
    let mut v = Vec::with_capacity(upper_len(d));
    for i in 0..d {
        v.extend_from_slice(&q.row(i)[i..]);
    }
    v
}

pub fn upper_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// First-order global pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstOrderKind {
    Average,
    Max,
}

impl FromStr for FirstOrderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(FirstOrderKind::Average),
            "max" => Ok(FirstOrderKind::Max),
            other => Err(Error::InvalidParameter(format!("unknown first-order pooling '{other}'"))),
        }
    }
}

/// Per-channel mean or max over the columns of `x`.
pub fn first_order_pool<T: Real>(x: &Matrix<T>, kind: FirstOrderKind) -> Vec<T> {
    assert!(x.cols() >= 1, "first-order pooling needs at least one column");
    let n = T::from_usize(x.cols()).expect("column count fits the scalar type");
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            match kind {
                FirstOrderKind::Average => row.iter().copied().sum::<T>() / n,
                FirstOrderKind::Max => row.iter().copied().fold(T::neg_infinity(), T::max),
            }
        })
        .collect()
}
