//! Adam training of the merge network.

use super::maps::{LabelMap, ProjectedStack};
use super::network::{encode_stack, MergeNetwork, NetworkConfig, Target};
use super::MvpmError;
use crate::rig::CameraId;
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One training view: its stack and the target camera's ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stack: ProjectedStack,
    target: Target,
}

impl Sample {
    pub fn new(stack: ProjectedStack, labels: &LabelMap) -> Result<Self, MvpmError> {
        let target = Target::new(&stack, labels)?;
        Ok(Self { stack, target })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability that a training view loses one to three of its
    /// non-target cameras, removed in [`drop_order`].
    pub camera_drop: f64,
}

impl TrainConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            network: NetworkConfig::new(classes),
            learning_rate: 2e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            camera_drop: 0.0,
        }
    }
}

/// Benchmark-scale settings for the nine-class simulator taxonomy.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            epochs: 12,
            camera_drop: 0.5,
            ..Self::new(crate::simulator::NUM_CLASSES)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Non-target cameras in reverse canonical order (BASE first).
pub fn drop_order(target: CameraId) -> [CameraId; 3] {
    let mut out = [CameraId::Base; 3];
    let mut n = 0;
    for cam in CameraId::ALL.iter().rev() {
        if *cam != target {
            out[n] = *cam;
            n += 1;
        }
    }
    out
}

impl ProjectedStack {
    /// Keeps the target and the first `cameras − 1` survivors of
    /// [`drop_order`]; the rest are cleared.
    pub fn with_camera_count(&self, cameras: usize) -> ProjectedStack {
        let dropped = 4usize.saturating_sub(cameras.clamp(1, 4));
        self.without(&drop_order(self.target)[..dropped])
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean loss of `net` over `set`.
pub fn mean_loss(net: &MergeNetwork, set: &[Sample]) -> Result<f64, MvpmError> {
    let losses: Result<Vec<f64>, MvpmError> = set
        .par_iter()
        .map(|s| net.loss(&encode_stack(&s.stack, net.config.depth_scale), &s.target))
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains from a seeded initialization and returns the weights of the epoch
/// with the lowest validation loss (training loss if `val` is empty).
pub fn train_merge(
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(MergeNetwork, TrainReport), MvpmError> {
    if train.is_empty() {
        return Err(MvpmError::EmptyDataset);
    }
    let mut net = MergeNetwork::init(config.network.clone(), config.seed);
    let mut adam = Adam::new(net.params().len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = stream(config.seed, 1, 0);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, net.clone());
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut rng = stream(config.seed, epoch as u64 + 2, idx as u64);
                    let sample = &train[idx];
                    let stack = if config.camera_drop > 0.0 && rng.random::<f64>() < config.camera_drop {
                        sample.stack.with_camera_count(rng.random_range(1..4))
                    } else {
                        sample.stack.clone()
                    };
                    let x = encode_stack(&stack, net.config.depth_scale);
                    net.loss_and_gradient_dropout(&x, &sample.target, &mut rng)
                })
                .collect();
            let mut grad = vec![0.0; net.params().len()];
            let scale = 1.0 / chunk.len() as f64;
            for (loss, g) in &results {
                epoch_loss += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
            adam.step(net.params_mut(), &grad, config.learning_rate);
        }
        epoch_loss /= train.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(MvpmError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        report.train_loss.push(epoch_loss);
        let score = if val.is_empty() {
            mean_loss(&net, train)?
        } else {
            mean_loss(&net, val)?
        };
        report.val_loss.push(score);
        if score < best.0 {
            best = (score, net.clone());
            report.best_epoch = epoch;
        }
    }
    Ok((best.1, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvpm::AugmentedMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_sample(seed: u64) -> Sample {
        // Slot 0 is noisy, slot 1 carries the truth: the net must learn to
        // trust the second camera.
        let (w, h, c) = (8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..w * h).map(|i| ((i / w + seed as usize) % 3) as u8).collect();
        let noisy: Vec<u8> = labels
            .iter()
            .map(|&l| {
                if rng.random::<f64>() < 0.4 {
                    rng.random_range(0..3)
                } else {
                    l
                }
            })
            .collect();
        let mk = |ls: &[u8]| {
            let mut data = Vec::new();
            for &l in ls {
                for k in 0..c {
                    data.push(if k == l as usize { 0.8 } else { 0.1 });
                }
                data.push(2.0);
            }
            AugmentedMap::new(w, h, c, data, vec![true; w * h]).unwrap()
        };
        let e = AugmentedMap::new(w, h, c, vec![0.0; w * h * (c + 1)], vec![false; w * h]).unwrap();
        let stack = ProjectedStack {
            target: CameraId::Op,
            order: CameraId::Op.slot_order(),
            slots: [mk(&noisy), mk(&labels), e.clone(), e],
        };
        Sample::new(stack, &LabelMap::new(w, h, c, labels).unwrap()).unwrap()
    }

    fn config() -> TrainConfig {
        let mut cfg = TrainConfig::new(3);
        cfg.network.widths = [6, 8, 6];
        cfg.epochs = 10;
        cfg.batch_size = 4;
        cfg.learning_rate = 5e-3;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn training_loss_decreases_and_is_deterministic() {
        let data: Vec<Sample> = (0..20).map(toy_sample).collect();
        let (net_a, rep) = train_merge(&data, &[], &config()).unwrap();
        let smooth: Vec<f64> = rep.train_loss.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{:?}", rep.train_loss);
        let (net_b, _) = train_merge(&data, &[], &config()).unwrap();
        assert_eq!(net_a.params(), net_b.params());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert_eq!(train_merge(&[], &[], &config()).unwrap_err(), MvpmError::EmptyDataset);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data: Vec<Sample> = (0..4).map(toy_sample).collect();
        let mut cfg = config();
        cfg.learning_rate = 1e300;
        cfg.epochs = 3;
        assert!(matches!(
            train_merge(&data, &[], &cfg),
            Err(MvpmError::Diverged { epoch: 1, .. })
        ));
    }

    #[test]
    fn drop_order_is_reverse_canonical() {
        use CameraId::*;
        assert_eq!(drop_order(Op), [Base, Usm4, Usm1]);
        assert_eq!(drop_order(Usm4), [Base, Usm1, Op]);
        assert_eq!(drop_order(Base), [Usm4, Usm1, Op]);
        let s = toy_sample(0).stack.with_camera_count(1);
        assert_eq!(s.slots[1].valid_count(), 0);
        assert_eq!(s.slots[0].valid_count(), 64);
    }
}
