//! Central finite differences and the analytic-vs-numeric report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backgrad::{pool_backward_with, unvectorize_upper, BackwardMethod};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Precision, Real};
use crate::pool::{pool_forward, upper_len, vectorize_upper, NormalizationSpec, Variant};
use crate::rng::{self, Purpose};

pub const DEFAULT_H: f64 = 1e-5;
pub const F64_THRESHOLD: f64 = 1e-5;
/// The f32 analytic path carries roughly single-precision relative noise,
/// amplified by eigenvector conditioning.
pub const F32_THRESHOLD: f64 = 2e-2;
/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// How each entry is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    /// `x ± h·E_ij`.
    Entrywise,
    /// `x ± h·(E_ij + E_ji)` off the diagonal, halved, so the result is the
    /// symmetric part of the gradient.
    Symmetric,
}

/// Central differences; exactly symmetric square inputs are perturbed
/// symmetrically.
pub fn finite_diff<F>(f: F, x: &Matrix<f64>, h: f64) -> Result<Matrix<f64>>
where
    F: Fn(&Matrix<f64>) -> f64,
{
    let symmetric = x.is_square() && *x == x.transpose();
    let mode = if symmetric { FdMode::Symmetric } else { FdMode::Entrywise };
    finite_diff_with(f, x, h, mode)
}

pub fn finite_diff_with<F>(f: F, x: &Matrix<f64>, h: f64, mode: FdMode) -> Result<Matrix<f64>>
where
    F: Fn(&Matrix<f64>) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    if mode == FdMode::Symmetric && !x.is_square() {
        return Err(Error::Shape("symmetric perturbation needs a square matrix".into()));
    }
    let (r, c) = x.shape();
    let mut out = Matrix::zeros(r, c);
    let mut probe = x.clone();
    for i in 0..r {
        for j in 0..c {
            if mode == FdMode::Symmetric && j < i {
                continue;
            }
            let pair = mode == FdMode::Symmetric && i != j;
            let eval = |probe: &mut Matrix<f64>, step: f64| {
                probe[(i, j)] = x[(i, j)] + step;
                if pair {
                    probe[(j, i)] = x[(j, i)] + step;
                }
                let v = f(probe);
                probe[(i, j)] = x[(i, j)];
                if pair {
                    probe[(j, i)] = x[(j, i)];
                }
                v
            };
            let plus = eval(&mut probe, h);
            let minus = eval(&mut probe, -h);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::FiniteDifference { row: i, col: j });
            }
            let mut g = (plus - minus) / (2.0 * h);
            if pair {
                g *= 0.5;
                out[(j, i)] = g;
            }
            out[(i, j)] = g;
        }
    }
    Ok(out)
}

/// Element-wise comparison; returns `(max_rel, max_abs, worst_entry)`.
pub fn compare(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> (f64, f64, (usize, usize)) {
    let mut max_rel = 0.0;
    let mut max_abs = 0.0;
    let mut worst = (0, 0);
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            let a = analytic[(i, j)];
            let n = numeric[(i, j)];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
            if rel > max_rel || (max_rel == 0.0 && rel.is_nan()) {
                max_rel = rel;
                worst = (i, j);
            }
            if abs > max_abs {
                max_abs = abs;
            }
        }
    }
    (max_rel, max_abs, worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub alpha: f64,
    pub dims: (usize, usize),
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_entry: (usize, usize),
    pub passed: bool,
    pub seed: u64,
    pub threshold: f64,
    pub precision: Precision,
    pub method: BackwardMethod,
}

/// Eigenvalue profile of the generated covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum Spectrum {
    /// `d` values log-spaced from `hi` down to `lo`.
    LogSpaced { hi: f64, lo: f64 },
    /// Explicit descending eigenvalues; length must equal `d`.
    Explicit(Vec<f64>),
}

impl Default for Spectrum {
    fn default() -> Self {
        Spectrum::LogSpaced { hi: 1.0, lo: 0.1 }
    }
}

impl Spectrum {
    fn values(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            Spectrum::LogSpaced { hi, lo } => {
                if d == 1 {
                    return Ok(vec![*hi]);
                }
                let (a, b) = (hi.ln(), lo.ln());
                Ok((0..d).map(|i| (a + (b - a) * i as f64 / (d - 1) as f64).exp()).collect())
            }
            Spectrum::Explicit(v) if v.len() == d => Ok(v.clone()),
            Spectrum::Explicit(v) => Err(Error::Shape(format!("spectrum has {} values, d = {d}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Pass threshold; `None` picks the precision's default.
    pub threshold: Option<f64>,
    pub precision: Precision,
    pub method: BackwardMethod,
    pub spectrum: Spectrum,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            threshold: None,
            precision: Precision::F64,
            method: BackwardMethod::Eigen,
            spectrum: Spectrum::default(),
        }
    }
}

/// Feature matrix whose covariance is `U diag(λ) Uᵀ` (up to rounding) with a
/// random orthogonal `U`. When `n − 1 < d` only the leading `n − 1`
/// eigenvalues survive.
pub fn controlled_features<R: rand::Rng + ?Sized>(rng: &mut R, lambda: &[f64], n: usize) -> Matrix<f64> {
    let d = lambda.len();
    let u = rng::random_orthogonal(rng, d);
    // Rows orthonormal and orthogonal to the all-ones vector, scaled by √n
    // so that Z Ī Zᵀ = I on the non-degenerate rows.
    let mut z = Matrix::zeros(d + 1, n);
    let inv = 1.0 / (n as f64).sqrt();
    for j in 0..n {
        z[(0, j)] = inv;
    }
    for i in 1..=d {
        for j in 0..n {
            z[(i, j)] = rng::normal(rng);
        }
    }
    rng::orthonormalize_rows(&mut z);
    let scale = (n as f64).sqrt();
    let zs = Matrix::from_fn(d, n, |i, j| z[(i + 1, j)] * scale * lambda[i].max(0.0).sqrt());
    u.matmul(&zs)
}

/// Loss `⟨W, vec(Q(X))⟩` evaluated in precision `T`.
fn loss<T: Real>(x: &Matrix<f64>, spec: &NormalizationSpec, w: &[f64]) -> f64 {
    match pool_forward(&x.cast::<T>(), spec) {
        Ok((q, _)) => vectorize_upper(&q).iter().zip(w).map(|(a, b)| a.as_f64() * b).sum(),
        Err(_) => f64::NAN,
    }
}

fn analytic<T: Real>(x: &Matrix<f64>, spec: &NormalizationSpec, w: &[f64], method: BackwardMethod) -> Result<Matrix<f64>> {
    let xt = x.cast::<T>();
    let (_, tape) = pool_forward(&xt, spec)?;
    let wt: Vec<T> = w.iter().map(|&v| T::lit(v)).collect();
    let g = unvectorize_upper(&wt, x.rows())?;
    Ok(pool_backward_with(&tape, &g, method)?.cast())
}

/// Draws a test problem: features with the requested spectrum, and a
/// random loss weight vector.
pub fn draw_problem(spec: &NormalizationSpec, d: usize, n: usize, seed: u64, spectrum: &Spectrum) -> Result<(Matrix<f64>, Vec<f64>)> {
    let lambda = spectrum.values(d)?;
    let mut rng = rng::stream(seed, Purpose::GradCheck);
    let mut x = controlled_features(&mut rng, &lambda, n);
    if spec.variant == Variant::ElemwisePower {
        // Keep every covariance entry away from the kink of sign(p)|p|^β.
        for _ in 0..1000 {
            let p = crate::pool::covariance(&x);
            let floor = 1e-2 * p.max_abs();
            if p.data().iter().all(|v| v.abs() >= floor) {
                break;
            }
            x = controlled_features(&mut rng, &lambda, n);
        }
    }
    let mut wrng = rng::stream(seed, Purpose::Loss);
    let w = (0..upper_len(d)).map(|_| rng::normal(&mut wrng)).collect();
    Ok((x, w))
}

pub fn run_gradcheck(spec: &NormalizationSpec, d: usize, n: usize, seed: u64) -> Result<GradCheckReport> {
    run_gradcheck_with(spec, d, n, seed, &GradCheckOptions::default())
}

pub fn run_gradcheck_with(
    spec: &NormalizationSpec,
    d: usize,
    n: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    spec.validate()?;
    if d < 2 || 2 * n < d || n < 2 {
        return Err(Error::InvalidParameter(format!("need d ≥ 2 and n ≥ d/2, got d = {d}, n = {n}")));
    }
    let (x, w) = draw_problem(spec, d, n, seed, &opts.spectrum)?;
    let numeric = finite_diff_with(|x| loss::<f64>(x, spec, &w), &x, opts.h, FdMode::Entrywise)?;
    let analytic = match opts.precision {
        Precision::F64 => analytic::<f64>(&x, spec, &w, opts.method)?,
        Precision::F32 => analytic::<f32>(&x, spec, &w, opts.method)?,
    };
    let (max_rel_err, max_abs_err, worst_entry) = compare(&analytic, &numeric);
    let threshold = opts.threshold.unwrap_or(match opts.precision {
        Precision::F64 => F64_THRESHOLD,
        Precision::F32 => F32_THRESHOLD,
    });
    Ok(GradCheckReport {
        variant: spec.variant,
        alpha: spec.alpha,
        dims: (d, n),
        max_rel_err,
        max_abs_err,
        worst_entry,
        passed: max_rel_err < threshold,
        seed,
        threshold,
        precision: opts.precision,
        method: opts.method,
    })
}

/// One report per `(variant, α, seed)` in that nesting order.
pub fn run_grid(
    variants: &[Variant],
    alphas: &[f64],
    seeds: &[u64],
    d: usize,
    n: usize,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>> {
    let mut jobs = Vec::new();
    for &v in variants {
        for &a in alphas {
            for &s in seeds {
                jobs.push((NormalizationSpec::new(v).with_alpha(a), s));
            }
        }
    }
    jobs.par_iter()
        .map(|(spec, seed)| run_gradcheck_with(spec, d, n, *seed, opts))
        .collect()
}
