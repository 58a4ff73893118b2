//! SPD geometry: power- and log-Euclidean distances, the von Neumann
//! regularized likelihood, eigenvalue histograms and shrinkage tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_product, sym_eig, EigenSystem, Matrix, Precision, SymmetricMatrix};
use crate::pool::{covariance, pow0, truncate_eigenvalues};
use crate::rng::{self, Purpose};

fn psd_eig(p: &SymmetricMatrix<f64>) -> Result<EigenSystem<f64>> {
    let e = truncate_eigenvalues(&sym_eig(p)?, Precision::F64);
    // Round-off can leave eigenvalues of a PSD input slightly negative.
    let lambda = e.lambda.iter().map(|&l| l.max(0.0)).collect();
    Ok(e.with_lambda(lambda))
}

fn positive_eig(p: &SymmetricMatrix<f64>) -> Result<EigenSystem<f64>> {
    let e = sym_eig(p)?;
    if let Some((index, &l)) = e.lambda.iter().enumerate().find(|(_, &l)| l <= 0.0) {
        return Err(Error::NotPositiveDefinite { index, eigenvalue: l });
    }
    Ok(e)
}

fn check_dims(a: &SymmetricMatrix<f64>, b: &SymmetricMatrix<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.dim(), a.dim(), b.dim(), b.dim())));
    }
    Ok(())
}

/// Matrix power `P^α` of a PSD matrix, zero eigenvalues mapping to zero.
pub fn psd_power(p: &SymmetricMatrix<f64>, alpha: f64) -> Result<SymmetricMatrix<f64>> {
    let e = psd_eig(p)?;
    let v: Vec<f64> = e.lambda.iter().map(|&l| pow0(l, alpha)).collect();
    Ok(spectral_product(&e.u, &v))
}

/// Matrix logarithm of an SPD matrix.
pub fn spd_log(p: &SymmetricMatrix<f64>) -> Result<SymmetricMatrix<f64>> {
    let e = positive_eig(p)?;
    let v: Vec<f64> = e.lambda.iter().map(|l| l.ln()).collect();
    Ok(spectral_product(&e.u, &v))
}

/// `(1/α)‖P^α − P̃^α‖_F`.
pub fn pow_euclidean_dist(p: &SymmetricMatrix<f64>, p2: &SymmetricMatrix<f64>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    check_dims(p, p2)?;
    let a = psd_power(p, alpha)?;
    let b = psd_power(p2, alpha)?;
    Ok(a.sub(&b).frobenius_norm() / alpha)
}

/// `‖log P − log P̃‖_F`; both inputs must be strictly positive definite.
pub fn log_euclidean_dist(p: &SymmetricMatrix<f64>, p2: &SymmetricMatrix<f64>) -> Result<f64> {
    check_dims(p, p2)?;
    let (a, b) = (spd_log(p)?, spd_log(p2)?);
    Ok(a.sub(&b).frobenius_norm())
}

/// `log|Σ| + tr(Σ⁻¹P) + tr(−log Σ − I + Σ)`.
pub fn vnmle_objective(sigma: &SymmetricMatrix<f64>, p: &SymmetricMatrix<f64>) -> Result<f64> {
    check_dims(sigma, p)?;
    let e = positive_eig(sigma)?;
    Ok(objective_in_basis(&e.u, &e.lambda, p))
}

/// The objective at `Σ = U diag(σ) Uᵀ`, with `U` orthogonal and `σ > 0`.
fn objective_in_basis(u: &Matrix<f64>, sigma: &[f64], p: &SymmetricMatrix<f64>) -> f64 {
    let pu = p.matmul(u);
    let mut log_det = 0.0;
    let mut trace_term = 0.0;
    let mut divergence = 0.0;
    for (k, &s) in sigma.iter().enumerate() {
        let upu: f64 = (0..u.rows()).map(|i| u[(i, k)] * pu[(i, k)]).sum();
        log_det += s.ln();
        trace_term += upu / s;
        divergence += -s.ln() - 1.0 + s;
    }
    log_det + trace_term + divergence
}

/// Golden-section tolerance on each eigenvalue of `Σ`.
pub const VNMLE_TOL: f64 = 1e-10;
const GOLDEN_MAX_ITERS: usize = 400;

/// Minimizes `f` on `[a, b]` by golden-section search.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_MAX_ITERS {
        if b - a <= tol * (1.0 + 0.5 * (a + b).abs()) {
            return Ok(0.5 * (a + b));
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Err(Error::Minimization { residual: b - a })
}

/// Numerical minimizer of [`vnmle_objective`] over SPD `Σ` sharing `P`'s
/// eigenvectors, one golden-section search per eigenvalue of `Σ`.
pub fn vnmle_minimize(p: &SymmetricMatrix<f64>) -> Result<SymmetricMatrix<f64>> {
    let e = psd_eig(p)?;
    let d = e.dim();
    let mut sigma = vec![1.0; d];
    for k in 0..d {
        let upper = 2.0 * e.lambda[k].max(1.0);
        let objective = |s: f64| {
            let mut trial = sigma.clone();
            trial[k] = s;
            objective_in_basis(&e.u, &trial, p)
        };
        let lower = f64::MIN_POSITIVE;
        let s = golden_section(objective, lower, upper, VNMLE_TOL)?;
        if s >= upper * (1.0 - 1e-9) {
            return Err(Error::Minimization { residual: upper - s });
        }
        sigma[k] = s;
    }
    Ok(spectral_product(&e.u, &sigma))
}

/// Condition-number range of [`random_spd_pair`].
pub const PAIR_COND: (f64, f64) = (2.0, 20.0);

/// Two random SPD matrices from the `Geometry` stream, each scaled to unit
/// determinant so the log-spectra straddle zero.
pub fn random_spd_pair(seed: u64, d: usize) -> (SymmetricMatrix<f64>, SymmetricMatrix<f64>) {
    let mut r = rng::stream(seed, Purpose::Geometry);
    let mut draw = || {
        let p = rng::random_spd(&mut r, d, PAIR_COND);
        let e = sym_eig(&p).expect("finite SPD matrix");
        let g = (e.lambda.iter().map(|l| l.ln()).sum::<f64>() / d as f64).exp();
        e.with_lambda(e.lambda.iter().map(|l| l / g).collect()).reconstruct()
    };
    let p = draw();
    (p, draw())
}

/// Default histogram range.
pub const HIST_RANGE: (f64, f64) = (1e-8, 1e3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_matrices: usize,
    pub zero_count: u64,
}

impl SpectrumHistogram {
    pub fn new(bins: usize, range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = range;
        if bins < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 bins, got {bins}")));
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid histogram range [{lo}, {hi}]")));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let bin_edges = (0..=bins).map(|i| 10f64.powf(a + (b - a) * i as f64 / bins as f64)).collect();
        Ok(Self {
            bin_edges,
            counts: vec![0; bins],
            n_matrices: 0,
            zero_count: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.zero_count
    }

    /// Nonzero eigenvalues outside the range are clamped into the end bins,
    /// so every eigenvalue is counted exactly once.
    pub fn add_eigenvalue(&mut self, l: f64) {
        if l <= 0.0 {
            self.zero_count += 1;
            return;
        }
        let bins = self.bins();
        let (lo, hi) = (self.bin_edges[0].log10(), self.bin_edges[bins].log10());
        let pos = (l.log10() - lo) / (hi - lo) * bins as f64;
        let idx = if pos.is_nan() || pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
        self.counts[idx] += 1;
    }

    /// Covariance of `x`, eigenvalues truncated at the ulp of `λ₁` in the
    /// given profile, then accumulated.
    pub fn add_features(&mut self, x: &Matrix<f64>, truncation: Precision) -> Result<()> {
        x.check_finite()?;
        let e = sym_eig(&covariance(x))?;
        let e = truncate_eigenvalues(&e, truncation);
        for &l in &e.lambda {
            self.add_eigenvalue(l);
        }
        self.n_matrices += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.bin_edges != other.bin_edges {
            return Err(Error::Shape("histograms have different bins".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.zero_count += other.zero_count;
        self.n_matrices += other.n_matrices;
        Ok(())
    }

    /// One row per bin, then a final `0,0,zero_count` row for the
    /// truncated eigenvalues.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:e},{:e},{}\n", self.bin_edges[i], self.bin_edges[i + 1], c));
        }
        out.push_str(&format!("0,0,{}\n", self.zero_count));
        out
    }
}

/// Eigenvalue histogram over a stream of feature matrices. Truncation uses
/// the single-precision ulp of `λ₁`, well above double-precision round-off
/// of rank-deficient covariances.
pub fn spectrum_histogram<I>(features: I, bins: usize) -> Result<SpectrumHistogram>
where
    I: IntoIterator<Item = Matrix<f64>>,
{
    let mut h = SpectrumHistogram::new(bins, HIST_RANGE)?;
    for x in features {
        h.add_features(&x, Precision::F32)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageRow {
    pub lambda: f64,
    pub f_sqrt: f64,
    pub f_log: f64,
    pub d_sqrt: f64,
    pub d_log: f64,
}

pub fn shrinkage_table(lambdas: &[f64]) -> Result<Vec<ShrinkageRow>> {
    lambdas
        .iter()
        .map(|&l| {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!("λ must be positive and finite, got {l}")));
            }
            Ok(ShrinkageRow {
                lambda: l,
                f_sqrt: l.sqrt(),
                f_log: l.ln(),
                d_sqrt: 0.5 / l.sqrt(),
                d_log: 1.0 / l,
            })
        })
        .collect()
}

pub fn shrinkage_csv(rows: &[ShrinkageRow]) -> String {
    let mut out = String::from("lambda,f_sqrt,f_log,d_sqrt,d_log\n");
    for r in rows {
        out.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.lambda, r.f_sqrt, r.f_log, r.d_sqrt, r.d_log));
    }
    out
}

/// Grid spacing for [`LambdaGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridScale {
    Log,
    Linear,
}

/// `lo:hi:log|lin:count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub scale: GridScale,
    pub count: usize,
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        // Multiplying before dividing keeps decade points exact on grids
        // whose step divides the decade count.
        let n = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| match self.scale {
                GridScale::Log => {
                    let (a, b) = (self.lo.log10(), self.hi.log10());
                    if i == self.count - 1 {
                        self.hi
                    } else {
                        10f64.powf(a + (b - a) * i as f64 / n)
                    }
                }
                GridScale::Linear => self.lo + (self.hi - self.lo) * i as f64 / n,
            })
            .collect()
    }
}

impl std::str::FromStr for LambdaGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("expected lo:hi:log|lin:count, got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].parse().map_err(|_| bad())?;
        let scale = match parts[2] {
            "log" => GridScale::Log,
            "lin" | "linear" => GridScale::Linear,
            _ => return Err(bad()),
        };
        let count: usize = parts[3].parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || count == 0 {
            return Err(bad());
        }
        Ok(Self { lo, hi, scale, count })
    }
}
