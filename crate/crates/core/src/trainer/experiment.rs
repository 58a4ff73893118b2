//! A complete training run: network, optimizer schedule and synthetic data.

use serde::{Deserialize, Serialize};

use super::config::{ConvLayerConfig, NetworkConfig, Padding, PoolingConfig, TrainConfig, WeightInit};
use super::data::{generate_synthetic, Dataset, SyntheticSpec};
use super::train::{train, TrainOutcome};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

impl ExperimentConfig {
    /// The reference toy task: 10 classes, 200/50 samples per class,
    /// 16-dimensional vectors on 4×4 tiles at 16 positions, per-image
    /// amplitude in [0.5, 2]. The first conv layer covers exactly one tile
    /// per output position; all conv layers are linear.
    pub fn acceptance(pooling: PoolingConfig, seed: u64) -> Self {
        let mut data = SyntheticSpec::new(10, 200, 50, seed);
        data.d_gen = 16;
        data.n_pos = 16;
        data.amplitude_range = (0.5, 2.0);
        let layer = |filters, kernel| ConvLayerConfig {
            filters,
            kernel,
            stride: kernel,
            relu: false,
            padding: Padding::Valid,
        };
        let net = NetworkConfig {
            input: data.image_shape(),
            conv_layers: vec![layer(16, 4), layer(16, 1)],
            reduce_channels: 16,
            pooling: pooling.clone(),
            classes: data.classes,
            seed,
            init: WeightInit::FanIn,
        };
        let train = TrainConfig::for_pooling(&pooling, 20, 32);
        Self { net, train, data }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.image_shape() != self.net.input || self.data.classes != self.net.classes {
            return Err(crate::error::Error::Shape(format!(
                "data produces {:?} images over {} classes, network expects {:?} over {}",
                self.data.image_shape(),
                self.data.classes,
                self.net.input,
                self.net.classes
            )));
        }
        Ok(())
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        generate_synthetic(&self.data)
    }

    /// Generates the data and trains from random initialization.
    pub fn run(&self) -> Result<TrainOutcome> {
        let (tr, te) = self.datasets()?;
        train(&self.net, &self.train, &tr, &te, None)
    }
}
