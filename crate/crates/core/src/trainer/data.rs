use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix, SymmetricMatrix};
use crate::rng::{self, Purpose};

/// Labelled images stored channel-major (`[c][h][w]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: (usize, usize, usize),
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reorders samples: position `i` of the result holds sample `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            shape: self.shape,
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Zero-mean Gaussian classes that differ only in their covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Dimension of each generated vector; must be a perfect square.
    #[serde(default = "default_d_gen")]
    pub d_gen: usize,
    /// Vectors per image; must be a perfect square.
    #[serde(default = "default_n_pos")]
    pub n_pos: usize,
    #[serde(default = "default_cond")]
    pub cond_range: (f64, f64),
    /// Per-image amplitude multiplier, log-uniform over `(low, high)`.
    /// `(1, 1)` leaves samples unscaled and draws nothing.
    #[serde(default = "default_amplitude")]
    pub amplitude_range: (f64, f64),
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Explicit class covariances, overriding the random draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
}

fn default_d_gen() -> usize {
    4
}

fn default_n_pos() -> usize {
    64
}

fn default_cond() -> (f64, f64) {
    (4.0, 40.0)
}

fn default_amplitude() -> (f64, f64) {
    (1.0, 1.0)
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl SyntheticSpec {
    pub fn new(classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            d_gen: default_d_gen(),
            n_pos: default_n_pos(),
            cond_range: default_cond(),
            amplitude_range: default_amplitude(),
            train_per_class,
            test_per_class,
            seed,
            covariances: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if exact_sqrt(self.d_gen).is_none() || exact_sqrt(self.n_pos).is_none() || self.d_gen == 0 || self.n_pos == 0 {
            return Err(Error::InvalidParameter(format!(
                "d_gen ({}) and n_pos ({}) must be positive perfect squares",
                self.d_gen, self.n_pos
            )));
        }
        let (lo, hi) = self.cond_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("cond_range must satisfy 1 ≤ low ≤ high, got {:?}", self.cond_range)));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude_range must satisfy 0 < low ≤ high, got {:?}",
                self.amplitude_range
            )));
        }
        if let Some(covs) = &self.covariances {
            if covs.len() != self.classes {
                return Err(Error::Shape(format!("{} covariances for {} classes", covs.len(), self.classes)));
            }
        }
        Ok(())
    }

    /// Image shape `(1, h, w)`: each vector becomes a `√d_gen × √d_gen`
    /// tile, tiles laid out on a `√n_pos × √n_pos` grid.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let t = exact_sqrt(self.d_gen).unwrap_or(1);
        let g = exact_sqrt(self.n_pos).unwrap_or(1);
        (1, t * g, t * g)
    }

    /// Class covariances: explicit if given, else random SPD matrices with
    /// condition numbers drawn from `cond_range`.
    pub fn class_covariances(&self) -> Result<Vec<SymmetricMatrix<f64>>> {
        self.validate()?;
        match &self.covariances {
            Some(covs) => covs
                .iter()
                .map(|rows| {
                    let m = Matrix::from_rows(rows)?;
                    if m.shape() != (self.d_gen, self.d_gen) {
                        return Err(Error::Shape(format!("covariance must be {0}x{0}", self.d_gen)));
                    }
                    let s = SymmetricMatrix::new(m)?;
                    let e = sym_eig(&s)?;
                    if let Some((index, &l)) = e.lambda.iter().enumerate().find(|(_, &l)| l < 0.0) {
                        return Err(Error::NotPositiveDefinite { index, eigenvalue: l });
                    }
                    Ok(s)
                })
                .collect(),
            None => {
                let mut r = rng::stream(self.seed, Purpose::Geometry);
                Ok((0..self.classes)
                    .map(|_| rng::random_spd(&mut r, self.d_gen, self.cond_range))
                    .collect())
            }
        }
    }
}

/// Places a `d_gen × n_pos` sample matrix on the image grid.
pub fn tile(x: &Matrix<f64>) -> Vec<f64> {
    let (d, n) = x.shape();
    let t = exact_sqrt(d).expect("square tile");
    let g = exact_sqrt(n).expect("square grid");
    let side = t * g;
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            img[r * side + c] = x[((r % t) * t + c % t, (r / t) * g + c / t)];
        }
    }
    img
}

/// Inverse of [`tile`].
pub fn untile(img: &[f64], d_gen: usize, n_pos: usize) -> Matrix<f64> {
    let t = exact_sqrt(d_gen).expect("square tile");
    let g = exact_sqrt(n_pos).expect("square grid");
    let side = t * g;
    let mut x = Matrix::zeros(d_gen, n_pos);
    for r in 0..side {
        for c in 0..side {
            x[((r % t) * t + c % t, (r / t) * g + c / t)] = img[r * side + c];
        }
    }
    x
}

/// Training and test sets, samples interleaved by class
/// (`0, 1, …, K−1, 0, 1, …`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let covs = spec.class_covariances()?;
    let roots: Vec<Matrix<f64>> = covs
        .iter()
        .map(|s| {
            let e = sym_eig(s)?;
            let v: Vec<f64> = e.lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
            Ok(crate::linalg::spectral_product(&e.u, &v).into_matrix())
        })
        .collect::<Result<_>>()?;
    let mut r = rng::stream(spec.seed, Purpose::Data);
    let shape = spec.image_shape();
    let mut make = |per_class: usize| {
        let mut images = Vec::with_capacity(per_class * spec.classes);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (k, root) in roots.iter().enumerate() {
                let (lo, hi) = spec.amplitude_range;
                let amp = if hi > lo { (r.random_range(lo.ln()..hi.ln())).exp() } else { lo };
                let z = rng::gaussian_matrix(&mut r, spec.d_gen, spec.n_pos);
                let mut img = tile(&root.matmul(&z));
                if amp != 1.0 {
                    img.iter_mut().for_each(|v| *v *= amp);
                }
                images.push(img);
                labels.push(k);
            }
        }
        Dataset {
            shape,
            images,
            labels,
            classes: spec.classes,
        }
    };
    let train = make(spec.train_per_class);
    let test = make(spec.test_per_class);
    Ok((train, test))
}

/// Shuffled mini-batches of sample indices for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates with explicit integer draws keeps the permutation tied to
    // the generator's documented output stream.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch).map(|c| c.to_vec()).collect()
}
