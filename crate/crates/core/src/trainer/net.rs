//! Conv feature extractor, 1×1 reduction, global pooling and a linear
//! classifier with softmax cross-entropy.

use rayon::prelude::*;

use super::config::{conv_output, pad_for, NetworkConfig, Padding, PoolingConfig, WeightInit};
use crate::backgrad::{pool_backward_vectorized, BackwardMethod, UpperSplit};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pool::{pool_forward, vectorize_upper, FirstOrderKind, PoolingTape};
use crate::rng::{self, Purpose};

/// A named parameter tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `(c·k·k) × (oh·ow)` matrix.
    fn im2col(&self, input: &[f64]) -> Matrix<f64> {
        let mut cols = Matrix::zeros(self.patch(), self.positions());
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let out = cols.row_mut(row);
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if x < 0 || x >= self.in_w as isize {
                                continue;
                            }
                            out[oy * self.out_w + ox] = input[(c * self.in_h + y as usize) * self.in_w + x as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`].
    fn col2im(&self, cols: &Matrix<f64>) -> Vec<f64> {
        let mut img = vec![0.0; self.in_c * self.in_h * self.in_w];
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = cols.row((c * self.k + ky) * self.k + kx);
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if x < 0 || x >= self.in_w as isize {
                                continue;
                            }
                            img[(c * self.in_h + y as usize) * self.in_w + x as usize] += row[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    /// `conv{i}.weight`, `conv{i}.bias`, …, `reduce.*`, `fc.*`.
    pub params: Vec<Param>,
    geoms: Vec<ConvGeom>,
}

/// Gradients aligned with [`Network::params`].
pub type Grads = Vec<Vec<f64>>;

enum PoolTape {
    Covariance(Box<PoolingTape<f64>>),
    Average,
    Max(Vec<usize>),
}

/// Intermediates of one sample's forward pass.
pub struct SampleTape {
    /// Inputs to each conv layer (the reduction is the last entry) as
    /// unfolded patch matrices.
    cols: Vec<Matrix<f64>>,
    /// Post-activation outputs of each conv layer.
    outputs: Vec<Vec<f64>>,
    pool: PoolTape,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub loss: f64,
    label: usize,
}

/// Stable `log Σ exp` and softmax probabilities.
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Network {
    /// Randomly initialized network; weights drawn from the `Weights`
    /// sub-stream of `cfg.seed`, biases zero.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let geoms = Self::geometry(&cfg);
        let mut r = rng::stream(cfg.seed, Purpose::Weights);
        let mut params = Vec::new();
        let std_for = |fan_in: usize| match cfg.init {
            WeightInit::Normal { std } => std,
            WeightInit::He => (2.0 / fan_in as f64).sqrt(),
            WeightInit::FanIn => (1.0 / fan_in as f64).sqrt(),
        };
        let n_conv = cfg.conv_layers.len();
        for (i, g) in geoms.iter().enumerate() {
            let prefix = if i < n_conv { format!("conv{i}") } else { "reduce".to_string() };
            let std = std_for(g.patch());
            params.push(Param {
                name: format!("{prefix}.weight"),
                shape: vec![g.out_c, g.in_c, g.k, g.k],
                value: (0..g.out_c * g.patch()).map(|_| std * rng::normal(&mut r)).collect(),
            });
            params.push(Param {
                name: format!("{prefix}.bias"),
                shape: vec![g.out_c],
                value: vec![0.0; g.out_c],
            });
        }
        let d = cfg.reduce_channels;
        let feat = cfg.pooling.output_len(d);
        let std = std_for(feat);
        params.push(Param {
            name: "fc.weight".into(),
            shape: vec![cfg.classes, feat],
            value: (0..cfg.classes * feat).map(|_| std * rng::normal(&mut r)).collect(),
        });
        params.push(Param {
            name: "fc.bias".into(),
            shape: vec![cfg.classes],
            value: vec![0.0; cfg.classes],
        });
        Ok(Self { cfg, params, geoms })
    }

    /// Network with the given parameters, checked against the config's shapes.
    pub fn from_params(cfg: NetworkConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(NetworkConfig {
            init: WeightInit::Normal { std: 0.0 },
            ..cfg.clone()
        })?;
        if template.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.shape != p.shape || p.value.len() != t.value.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {} with shape {:?}",
                    p.name, p.shape, t.name, t.shape
                )));
            }
        }
        Ok(Self {
            cfg,
            params,
            geoms: template.geoms,
        })
    }

    fn geometry(cfg: &NetworkConfig) -> Vec<ConvGeom> {
        let (mut c, mut h, mut w) = cfg.input;
        let mut out = Vec::new();
        let layers = cfg.conv_layers.iter().map(|l| (l.filters, l.kernel, l.stride, l.padding, l.relu)).chain(std::iter::once((
            cfg.reduce_channels,
            1,
            1,
            Padding::Valid,
            false,
        )));
        for (filters, k, stride, padding, relu) in layers {
            let (oh, ow) = conv_output(h, w, k, stride, padding).expect("validated config");
            out.push(ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: filters,
                out_h: oh,
                out_w: ow,
                k,
                stride,
                pad: pad_for(k, padding),
                relu,
            });
            (c, h, w) = (filters, oh, ow);
        }
        out
    }

    /// Number of parameter tensors in front of the pooling layer.
    pub fn pre_pooling_len(&self) -> usize {
        2 * self.geoms.len()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    fn fc_index(&self) -> usize {
        self.params.len() - 2
    }

    pub fn forward_sample(&self, image: &[f64], label: usize) -> Result<SampleTape> {
        let (c, h, w) = self.cfg.input;
        if image.len() != c * h * w {
            return Err(Error::Shape(format!("image has {} values, expected {}", image.len(), c * h * w)));
        }
        if label >= self.cfg.classes {
            return Err(Error::Shape(format!("label {label} out of range for {} classes", self.cfg.classes)));
        }
        let mut cols = Vec::with_capacity(self.geoms.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.geoms.len());
        for (i, g) in self.geoms.iter().enumerate() {
            let input = if i == 0 { image } else { &outputs[i - 1] };
            let col = g.im2col(input);
            let wm = Matrix::from_vec(g.out_c, g.patch(), self.params[2 * i].value.clone())?;
            let bias = &self.params[2 * i + 1].value;
            let mut out = wm.matmul(&col).into_vec();
            let p = g.positions();
            for o in 0..g.out_c {
                for v in &mut out[o * p..(o + 1) * p] {
                    *v += bias[o];
                    if g.relu && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cols.push(col);
            outputs.push(out);
        }
        let last = self.geoms.last().expect("at least the reduction layer");
        let features = Matrix::from_vec(last.out_c, last.positions(), outputs.last().expect("non-empty").clone())?;
        let (pool, pooled) = match &self.cfg.pooling {
            PoolingConfig::Covariance(spec) => {
                let (q, tape) = pool_forward(&features, spec)?;
                (PoolTape::Covariance(Box::new(tape)), vectorize_upper(&q))
            }
            PoolingConfig::FirstOrder { mode: FirstOrderKind::Average } => {
                (PoolTape::Average, crate::pool::first_order_pool(&features, FirstOrderKind::Average))
            }
            PoolingConfig::FirstOrder { mode: FirstOrderKind::Max } => {
                let idx: Vec<usize> = (0..features.rows()).map(|i| argmax(features.row(i))).collect();
                let v = idx.iter().enumerate().map(|(i, &j)| features[(i, j)]).collect();
                (PoolTape::Max(idx), v)
            }
        };
        let fi = self.fc_index();
        let fw = &self.params[fi].value;
        let fb = &self.params[fi + 1].value;
        let n = pooled.len();
        let logits: Vec<f64> = (0..self.cfg.classes)
            .map(|k| fb[k] + fw[k * n..(k + 1) * n].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let (lse, _) = softmax(&logits);
        let loss = lse - logits[label];
        Ok(SampleTape {
            cols,
            outputs,
            pool,
            pooled,
            logits,
            loss,
            label,
        })
    }

    /// Gradient of this sample's loss with respect to every parameter.
    pub fn backward_sample(&self, tape: &SampleTape, method: BackwardMethod) -> Result<Grads> {
        let mut grads: Grads = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let (_, mut dlogits) = softmax(&tape.logits);
        dlogits[tape.label] -= 1.0;

        let fi = self.fc_index();
        let n = tape.pooled.len();
        let fw = &self.params[fi].value;
        let mut dpooled = vec![0.0; n];
        for (k, &dk) in dlogits.iter().enumerate() {
            for j in 0..n {
                grads[fi][k * n + j] = dk * tape.pooled[j];
                dpooled[j] += fw[k * n + j] * dk;
            }
            grads[fi + 1][k] = dk;
        }

        let last = self.geoms.last().expect("reduction layer");
        let (d, npos) = (last.out_c, last.positions());
        let dfeat: Vec<f64> = match &tape.pool {
            PoolTape::Covariance(pt) => pool_backward_vectorized(pt, &dpooled, UpperSplit::Half, method)?.into_vec(),
            PoolTape::Average => {
                let inv = 1.0 / npos as f64;
                (0..d * npos).map(|k| dpooled[k / npos] * inv).collect()
            }
            PoolTape::Max(idx) => {
                let mut g = vec![0.0; d * npos];
                for (i, &j) in idx.iter().enumerate() {
                    g[i * npos + j] = dpooled[i];
                }
                g
            }
        };
        if dfeat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: "pooling".into() });
        }

        let mut dout = dfeat;
        for i in (0..self.geoms.len()).rev() {
            let g = &self.geoms[i];
            let p = g.positions();
            if g.relu {
                for (dv, &o) in dout.iter_mut().zip(&tape.outputs[i]) {
                    if o <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let dm = Matrix::from_vec(g.out_c, p, dout)?;
            grads[2 * i] = dm.matmul_t(&tape.cols[i]).into_vec();
            grads[2 * i + 1] = (0..g.out_c).map(|o| dm.row(o).iter().sum()).collect();
            if i > 0 {
                let wm = Matrix::from_vec(g.out_c, g.patch(), self.params[2 * i].value.clone())?;
                dout = g.col2im(&wm.t_matmul(&dm));
            } else {
                dout = Vec::new();
            }
            let name = &self.params[2 * i].name;
            if grads[2 * i].iter().chain(&grads[2 * i + 1]).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: name.trim_end_matches(".weight").into() });
            }
        }
        if grads[fi].iter().chain(&grads[fi + 1]).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: "fc".into() });
        }
        Ok(grads)
    }
}

/// Per-sample tapes of one batch.
pub struct BatchTape {
    pub samples: Vec<SampleTape>,
}

/// Forward pass over `(image, label)` pairs. Returns the logits, the mean
/// cross-entropy and the tape. Samples run in parallel; results keep
/// sample order.
pub fn forward(net: &Network, batch: &[(&[f64], usize)]) -> Result<(Vec<Vec<f64>>, f64, BatchTape)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let samples: Vec<SampleTape> = batch
        .par_iter()
        .map(|(img, label)| net.forward_sample(img, *label))
        .collect::<Result<_>>()?;
    let loss = samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64;
    let logits = samples.iter().map(|s| s.logits.clone()).collect();
    Ok((logits, loss, BatchTape { samples }))
}

/// Mean gradient over the batch, reduced in sample order.
pub fn backward(net: &Network, tape: &BatchTape, method: BackwardMethod) -> Result<Grads> {
    let per_sample: Vec<Grads> = tape
        .samples
        .par_iter()
        .map(|s| net.backward_sample(s, method))
        .collect::<Result<_>>()?;
    let mut total: Grads = net.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for g in &per_sample {
        for (t, s) in total.iter_mut().zip(g) {
            for (a, b) in t.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / tape.samples.len() as f64;
    for t in &mut total {
        for a in t.iter_mut() {
            *a *= inv;
        }
    }
    Ok(total)
}
