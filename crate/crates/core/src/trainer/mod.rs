//! Toy end-to-end classifier: conv layers, 1×1 reduction, global pooling,
//! linear classifier, softmax cross-entropy and SGD with momentum.

pub mod config;
pub mod data;
pub mod experiment;
pub mod net;
pub mod train;

pub use config::{ConvLayerConfig, InitMode, NetworkConfig, Padding, PoolingConfig, TrainConfig, WeightInit};
pub use data::{generate_synthetic, Dataset, SyntheticSpec};
pub use experiment::ExperimentConfig;
pub use net::{backward, forward, Network, Param};
pub use train::{evaluate, history_csv, train, train_with_plan, warm_init, EpochRecord, Evaluation, Sgd, TrainOutcome};
