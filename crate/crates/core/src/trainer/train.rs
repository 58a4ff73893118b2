use serde::{Deserialize, Serialize};

use super::config::{InitMode, NetworkConfig, TrainConfig};
use super::data::{epoch_batches, Dataset};
use super::net::{argmax, backward, forward, Grads, Network};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, RngState};

/// Momentum buffers aligned with the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Grads,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: net.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// `v ← μv − lr·m·(g + λw)`, `w ← w + v`, with a per-tensor learning
    /// rate multiplier `m`.
    pub fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64, multipliers: &[f64], cfg: &TrainConfig) {
        for (((p, v), g), &m) in net.params.iter_mut().zip(&mut self.velocity).zip(grads).zip(multipliers) {
            for ((w, vi), gi) in p.value.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = cfg.momentum * *vi - lr * m * (gi + cfg.weight_decay * *w);
                *w += *vi;
            }
        }
    }
}

/// One SGD step on a batch: forward, backward, update. Returns the batch
/// loss before the update.
pub fn backward_step(
    net: &mut Network,
    opt: &mut Sgd,
    batch: &[(&[f64], usize)],
    cfg: &TrainConfig,
    lr: f64,
    multipliers: &[f64],
) -> Result<f64> {
    let (_, loss, tape) = forward(net, batch)?;
    let grads = backward(net, &tape, cfg.backward)?;
    opt.step(net, &grads, lr, multipliers, cfg);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_err,test_loss,test_err,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.train_loss, r.train_err, r.test_loss, r.test_err, r.lr
        ));
    }
    out
}

/// Trained parameters plus the state needed to reproduce or resume.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub epoch: usize,
    pub rng_state: RngState,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1_error: f64,
    pub loss: f64,
    /// Error rate of each class; `NaN`-free, classes without samples report 0.
    pub per_class: Vec<f64>,
}

/// Top-1 error with ties broken to the lowest class index.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    if data.classes != net.cfg.classes || data.shape != net.cfg.input {
        return Err(Error::Shape(format!(
            "dataset ({} classes, {:?}) does not match network ({} classes, {:?})",
            data.classes, data.shape, net.cfg.classes, net.cfg.input
        )));
    }
    let mut wrong = vec![0usize; data.classes];
    let mut seen = vec![0usize; data.classes];
    let mut loss = 0.0;
    const CHUNK: usize = 256;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let batch: Vec<(&[f64], usize)> = (start..end).map(|i| (&data.images[i][..], data.labels[i])).collect();
        let (logits, l, _) = forward(net, &batch)?;
        loss += l * (end - start) as f64;
        for (z, &(_, y)) in logits.iter().zip(&batch) {
            seen[y] += 1;
            if argmax(z) != y {
                wrong[y] += 1;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        top1_error: wrong.iter().sum::<usize>() as f64 / n,
        loss: loss / n,
        per_class: wrong
            .iter()
            .zip(&seen)
            .map(|(&w, &s)| if s == 0 { 0.0 } else { w as f64 / s as f64 })
            .collect(),
    })
}

/// Copies every pre-pooling parameter of `source` into `net`.
pub fn warm_init(mut net: Network, source: &Network) -> Result<Network> {
    let k = net.pre_pooling_len();
    if source.pre_pooling_len() != k {
        return Err(Error::Shape(format!(
            "source has {} pre-pooling tensors, target {}",
            source.pre_pooling_len(),
            k
        )));
    }
    for (dst, src) in net.params[..k].iter_mut().zip(&source.params[..k]) {
        if dst.name != src.name || dst.shape != src.shape {
            return Err(Error::Shape(format!(
                "layer {}: source shape {:?}, target {} shape {:?}",
                src.name, src.shape, dst.name, dst.shape
            )));
        }
        dst.value = src.value.clone();
    }
    Ok(net)
}

/// Per-tensor learning rate multipliers: layers after the pooling layer run
/// at twice the schedule when warm-started.
pub fn lr_multipliers(net: &Network, init: InitMode) -> Vec<f64> {
    let k = net.pre_pooling_len();
    (0..net.params.len())
        .map(|i| if init == InitMode::Warm && i >= k { 2.0 } else { 1.0 })
        .collect()
}

/// Batches for every epoch, drawn from the `BatchOrder` stream.
pub fn batch_plan(seed: u64, n: usize, batch: usize, epochs: usize) -> (Vec<Vec<Vec<usize>>>, RngState) {
    let mut r = rng::stream(seed, Purpose::BatchOrder);
    let plan = (0..epochs).map(|_| epoch_batches(&mut r, n, batch)).collect();
    (plan, RngState::capture(&r))
}

/// Trains from the configured initialization with the seeded batch plan.
pub fn train(net_cfg: &NetworkConfig, cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset, warm: Option<&Network>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = Network::new(net_cfg.clone())?;
    if cfg.init == InitMode::Warm {
        let src = warm.ok_or_else(|| Error::InvalidParameter("warm init requested without a source network".into()))?;
        net = warm_init(net, src)?;
    }
    let (plan, rng_state) = batch_plan(net_cfg.seed, train_set.len(), cfg.batch, cfg.epochs);
    let mut out = train_with_plan(net, cfg, train_set, test_set, &plan)?;
    out.rng_state = rng_state;
    Ok(out)
}

/// Non-finite activations reaching the pooling layer mean training diverged.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::SpectralNonFinite { .. } | Error::NoConvergence { .. } => Error::NonFiniteLoss { epoch },
        other => other,
    }
}

/// Trains `net` following an explicit batch plan (`plan[epoch][batch]`
/// lists sample indices).
pub fn train_with_plan(
    mut net: Network,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    plan: &[Vec<Vec<usize>>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if plan.len() != cfg.epochs {
        return Err(Error::InvalidParameter(format!("plan covers {} epochs, config {}", plan.len(), cfg.epochs)));
    }
    let mut opt = Sgd::new(&net);
    let mults = lr_multipliers(&net, cfg.init);
    let mut history = Vec::with_capacity(cfg.epochs);
    for (e, batches) in plan.iter().enumerate() {
        let epoch = e + 1;
        let lr = cfg.lr(epoch);
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        let mut seen = 0usize;
        for idx in batches {
            let batch: Vec<(&[f64], usize)> = idx.iter().map(|&i| (&train_set.images[i][..], train_set.labels[i])).collect();
            let (logits, loss, tape) = forward(&net, &batch).map_err(|e| diverged(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = backward(&net, &tape, cfg.backward)?;
            opt.step(&mut net, &grads, lr, &mults, cfg);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            wrong += logits.iter().zip(&batch).filter(|(z, (_, y))| argmax(z) != *y).count();
        }
        let test = evaluate(&net, test_set).map_err(|e| diverged(e, epoch))?;
        if !test.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_err: wrong as f64 / seen.max(1) as f64,
            test_loss: test.loss,
            test_err: test.top1_error,
            lr,
        });
    }
    let rng_state = RngState::capture(&rng::stream(net.cfg.seed, Purpose::BatchOrder));
    Ok(TrainOutcome {
        net,
        epoch: cfg.epochs,
        rng_state,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{FirstOrderKind, Variant};
    use crate::trainer::config::{ConvLayerConfig, Padding, PoolingConfig, WeightInit};
    use crate::trainer::data::{generate_synthetic, SyntheticSpec};

    fn small_cfg(pooling: PoolingConfig, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input: (1, 8, 8),
            conv_layers: vec![ConvLayerConfig {
                filters: 4,
                kernel: 3,
                stride: 1,
                relu: false,
                padding: Padding::Same,
            }],
            reduce_channels: 4,
            pooling,
            classes: 3,
            seed,
            init: WeightInit::He,
        }
    }

    fn small_data(seed: u64) -> (Dataset, Dataset) {
        let mut spec = SyntheticSpec::new(3, 10, 4, seed);
        spec.n_pos = 16;
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let net0 = Network::new(small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 1)).unwrap();
        let mut net = net0.clone();
        let (train, _) = small_data(1);
        let cfg = TrainConfig::for_pooling(&net.cfg.pooling, 1, 4);
        let batch: Vec<(&[f64], usize)> = (0..4).map(|i| (&train.images[i][..], train.labels[i])).collect();
        let mut opt = Sgd::new(&net);
        let mults = lr_multipliers(&net, InitMode::Random);
        backward_step(&mut net, &mut opt, &batch, &cfg, 0.0, &mults).unwrap();
        assert_eq!(net.params, net0.params);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 2);
        let (train_set, test_set) = small_data(2);
        let t = TrainConfig::for_pooling(&cfg.pooling, 0, 4);
        let out = train(&cfg, &t, &train_set, &test_set, None).unwrap();
        assert_eq!(out.net.params, Network::new(cfg).unwrap().params);
        assert!(out.history.is_empty());
    }

    #[test]
    fn small_step_descends() {
        let (train_set, _) = small_data(3);
        let mut successes = 0;
        for seed in 0..20 {
            let cfg = small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), seed);
            let mut net = Network::new(cfg).unwrap();
            let t = TrainConfig::for_pooling(&net.cfg.pooling, 1, 8);
            let batch: Vec<(&[f64], usize)> = (0..8).map(|i| (&train_set.images[i][..], train_set.labels[i])).collect();
            let mut opt = Sgd::new(&net);
            let mults = lr_multipliers(&net, InitMode::Random);
            let before = backward_step(&mut net, &mut opt, &batch, &t, 1e-3, &mults).unwrap();
            let (_, after, _) = forward(&net, &batch).unwrap();
            if after < before {
                successes += 1;
            }
        }
        assert!(successes >= 18, "{successes}/20");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 4);
        let (train_set, test_set) = small_data(4);
        let t = TrainConfig::for_pooling(&cfg.pooling, 2, 5);
        let a = train(&cfg, &t, &train_set, &test_set, None).unwrap();
        let b = train(&cfg, &t, &train_set, &test_set, None).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.rng_state, b.rng_state);
    }

    #[test]
    fn permuted_dataset_with_matching_plan_is_identical() {
        let cfg = small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 5);
        let (train_set, test_set) = small_data(5);
        let t = TrainConfig::for_pooling(&cfg.pooling, 2, 6);
        let (plan, _) = batch_plan(9, train_set.len(), t.batch, t.epochs);
        let a = train_with_plan(Network::new(cfg.clone()).unwrap(), &t, &train_set, &test_set, &plan).unwrap();

        let n = train_set.len();
        let order: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permuted = train_set.permuted(&order);
        let mut position = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let remapped: Vec<Vec<Vec<usize>>> = plan
            .iter()
            .map(|e| e.iter().map(|b| b.iter().map(|&i| position[i]).collect()).collect())
            .collect();
        let b = train_with_plan(Network::new(cfg).unwrap(), &t, &permuted, &test_set, &remapped).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn evaluate_examples() {
        let cfg = small_cfg(PoolingConfig::FirstOrder { mode: FirstOrderKind::Average }, 6);
        let mut net = Network::new(cfg).unwrap();
        let fi = net.params.len() - 2;
        net.params[fi].value.iter_mut().for_each(|v| *v = 0.0);
        let (_, test_set) = small_data(6);
        let e = evaluate(&net, &test_set).unwrap();
        // Constant logits: everything predicted as class 0.
        assert!((e.top1_error - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.per_class, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn warm_init_copies_pre_pooling_layers() {
        let src_cfg = small_cfg(PoolingConfig::FirstOrder { mode: FirstOrderKind::Max }, 7);
        let src = Network::new(src_cfg).unwrap();
        let dst = Network::new(small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 8)).unwrap();
        let warm = warm_init(dst.clone(), &src).unwrap();
        let k = warm.pre_pooling_len();
        assert_eq!(&warm.params[..k], &src.params[..k]);
        assert_eq!(&warm.params[k..], &dst.params[k..]);
        let m = lr_multipliers(&warm, InitMode::Warm);
        assert!(m[..k].iter().all(|&v| v == 1.0) && m[k..].iter().all(|&v| v == 2.0));

        let mut other = small_cfg(PoolingConfig::covariance(Variant::Mpn, 0.5), 8);
        other.conv_layers[0].filters = 5;
        assert!(warm_init(Network::new(other).unwrap(), &src).is_err());
    }

    #[test]
    fn history_csv_header() {
        let csv = history_csv(&[EpochRecord {
            epoch: 1,
            train_loss: 1.0,
            train_err: 0.5,
            test_loss: 1.1,
            test_err: 0.6,
            lr: 0.1,
        }]);
        assert!(csv.starts_with("epoch,train_loss,train_err,test_loss,test_err,lr\n1,"));
    }
}
