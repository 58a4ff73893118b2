use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backgrad::BackwardMethod;
use crate::error::{Error, Result};
use crate::pool::{FirstOrderKind, NormalizationSpec, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub relu: bool,
    #[serde(default)]
    pub padding: Padding,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Global pooling placed between the 1×1 reduction and the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolingConfig {
    Covariance(NormalizationSpec),
    FirstOrder { mode: FirstOrderKind },
}

impl PoolingConfig {
    pub fn covariance(variant: Variant, alpha: f64) -> Self {
        PoolingConfig::Covariance(NormalizationSpec::new(variant).with_alpha(alpha))
    }

    /// Length of the pooled vector for `d` channels.
    pub fn output_len(&self, d: usize) -> usize {
        match self {
            PoolingConfig::Covariance(_) => d * (d + 1) / 2,
            PoolingConfig::FirstOrder { .. } => d,
        }
    }
}

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightInit {
    /// `N(0, std²)` for every weight.
    Normal { std: f64 },
    /// `N(0, 2/fan_in)`.
    He,
    /// `N(0, 1/fan_in)`; keeps activation variance through linear layers.
    FanIn,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::Normal { std: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub conv_layers: Vec<ConvLayerConfig>,
    #[serde(default = "default_reduce")]
    pub reduce_channels: usize,
    pub pooling: PoolingConfig,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: WeightInit,
}

fn default_reduce() -> usize {
    16
}

impl NetworkConfig {
    /// 1×16×16 input, two 3×3 ReLU conv layers (8 and 16 filters), 1×1
    /// reduction to 16 channels, 10 classes.
    pub fn toy(pooling: PoolingConfig, seed: u64) -> Self {
        Self {
            input: (1, 16, 16),
            conv_layers: vec![
                ConvLayerConfig {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    relu: true,
                    padding: Padding::Valid,
                },
                ConvLayerConfig {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                    relu: true,
                    padding: Padding::Valid,
                },
            ],
            reduce_channels: 16,
            pooling,
            classes: 10,
            seed,
            init: WeightInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidParameter(format!("input shape {:?} has a zero dimension", self.input)));
        }
        if self.conv_layers.is_empty() {
            return Err(Error::InvalidParameter("at least one conv layer is required".into()));
        }
        if self.reduce_channels == 0 {
            return Err(Error::InvalidParameter("reduce_channels must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if let PoolingConfig::Covariance(spec) = &self.pooling {
            spec.validate()?;
        }
        if let WeightInit::Normal { std } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::InvalidParameter(format!("init std must be non-negative, got {std}")));
            }
        }
        let (mut h, mut w) = (h, w);
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.filters == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::InvalidParameter(format!("conv{i}: filters, kernel and stride must be positive")));
            }
            let (oh, ow) = conv_output(h, w, l.kernel, l.stride, l.padding)
                .ok_or_else(|| Error::Shape(format!("conv{i}: {h}x{w} input is smaller than a {}x{} kernel", l.kernel, l.kernel)))?;
            h = oh;
            w = ow;
        }
        Ok(())
    }

    /// Spatial size of the feature map fed to the pooling layer.
    pub fn feature_map(&self) -> Result<(usize, usize)> {
        self.validate()?;
        let (_, mut h, mut w) = self.input;
        for l in &self.conv_layers {
            (h, w) = conv_output(h, w, l.kernel, l.stride, l.padding).expect("validated");
        }
        Ok((h, w))
    }
}

/// Zero padding on each side.
pub(crate) fn pad_for(kernel: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => (kernel - 1) / 2,
    }
}

pub(crate) fn conv_output(h: usize, w: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    let p = pad_for(kernel, padding);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    if hp < kernel || wp < kernel {
        return None;
    }
    Some(((hp - kernel) / stride + 1, (wp - kernel) / stride + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Random,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub warm_source: Option<PathBuf>,
    #[serde(default)]
    pub backward: BackwardMethod,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl TrainConfig {
    /// `10^-1.2 → 10^-5` for covariance pooling, `10^-1 → 10^-4` otherwise.
    pub fn for_pooling(pooling: &PoolingConfig, epochs: usize, batch: usize) -> Self {
        let (lr_start, lr_end) = match pooling {
            PoolingConfig::Covariance(_) => (10f64.powf(-1.2), 1e-5),
            PoolingConfig::FirstOrder { .. } => (1e-1, 1e-4),
        };
        Self {
            epochs,
            batch,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_start,
            lr_end,
            init: InitMode::Random,
            warm_source: None,
            backward: BackwardMethod::default(),
        }
    }

    /// Fine-tuning from a first-order network: `10^-2 → 10^-5`.
    pub fn warm(source: PathBuf, epochs: usize, batch: usize) -> Self {
        Self {
            lr_start: 1e-2,
            lr_end: 1e-5,
            init: InitMode::Warm,
            warm_source: Some(source),
            ..Self::for_pooling(&PoolingConfig::FirstOrder { mode: FirstOrderKind::Average }, epochs, batch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need lr_start ≥ lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.init == InitMode::Warm && self.warm_source.is_none() {
            return Err(Error::InvalidParameter("warm init needs a warm_source checkpoint".into()));
        }
        Ok(())
    }

    /// Learning rate of epoch `e` (1-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        logspace(self.lr_start.log10(), self.lr_end.log10(), self.epochs)[epoch - 1]
    }
}

/// `n` points from `10^a` to `10^b`, evenly spaced in the exponent. A single
/// point is `10^b`.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![10f64.powf(b)],
        _ => (0..n)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let cfg = NetworkConfig::toy(PoolingConfig::covariance(Variant::Mpn, 0.5), 0);
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_map().unwrap(), (12, 12));
        assert_eq!(cfg.pooling.output_len(16), 136);
    }

    #[test]
    fn padding_and_stride() {
        assert_eq!(conv_output(16, 16, 3, 1, Padding::Same), Some((16, 16)));
        assert_eq!(conv_output(16, 16, 3, 2, Padding::Valid), Some((7, 7)));
        assert_eq!(conv_output(2, 2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = NetworkConfig::toy(PoolingConfig::FirstOrder { mode: FirstOrderKind::Average }, 0);
        cfg.conv_layers.clear();
        assert!(cfg.validate().is_err());
        let mut t = TrainConfig::for_pooling(&cfg.pooling, 3, 8);
        t.momentum = 1.0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::for_pooling(&cfg.pooling, 3, 8);
        t.lr_end = t.lr_start * 2.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn logspace_schedule() {
        let lr = logspace(-2.0, -5.0, 20);
        for (e, v) in lr.iter().enumerate() {
            let expected = 10f64.powf(-2.0 - 3.0 * e as f64 / 19.0);
            assert!((v - expected).abs() <= 1e-15 * expected);
        }
        assert_eq!(logspace(-1.0, -4.0, 1), vec![1e-4]);
        let t = TrainConfig::for_pooling(&PoolingConfig::covariance(Variant::Mpn, 0.5), 20, 8);
        assert!((t.lr(1) - 10f64.powf(-1.2)).abs() < 1e-15);
        assert!((t.lr(20) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn json_round_trip() {
        let cfg = NetworkConfig::toy(PoolingConfig::covariance(Variant::MpnFro, 0.7), 3);
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"kind\":\"covariance\""));
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), cfg);
        let t: TrainConfig = serde_json::from_str(r#"{"epochs":2,"batch":4,"lr_start":0.1,"lr_end":0.001}"#).unwrap();
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.weight_decay, 5e-4);
        assert_eq!(t.backward, BackwardMethod::Fused);
    }
}
