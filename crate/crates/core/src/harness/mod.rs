//! Experiment harness: training configuration, the learning-rate schedule,
//! run records, analyzers and sweep/ablation drivers.

mod analyze;
mod optim;
mod sweep;
mod train;

pub use analyze::{
    centersim, distance_report, pca_project, CentersimConfig, CentersimRecord, DistanceReport,
    DistanceRow, EmbeddingMode, TrajectoryPoint,
};
pub use optim::Adam;
pub use sweep::{
    ablate, ablation_csv, sweep, AblationKind, AblationRow, SweepParam, SweepResult, SweepRow,
    MARGIN_STABLE_RANGE,
};
pub use train::{embeddings, evaluate, train, ClassAccuracy, EvalReport, TrainResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossKind, NegativeSelection};
use crate::network::NetworkConfig;

/// Piecewise learning-rate schedule: x0.65 every 10 epochs up to epoch 100,
/// then x0.95 every 20 epochs from the epoch-100 value on. The late flat
/// factor keeps the rate from vanishing.
pub fn lr_at(lr0: f64, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::Contract(format!("epoch must be nonnegative, got {epoch}")));
    }
    let epoch = epoch as u64;
    if epoch <= 100 {
        Ok(lr0 * 0.65f64.powi((epoch / 10) as i32))
    } else {
        Ok(lr0 * 0.65f64.powi(10) * 0.95f64.powi(((epoch - 100) / 20) as i32))
    }
}

/// Early-stop thresholds checked after each epoch's evaluation pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarlyStop {
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Full training configuration. The paper defaults live in
/// [`TrainConfig::full`]; [`TrainConfig::desk`] is the reduced variant the
/// desk-scale experiments run on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Weight of the metric term in the joint loss.
    pub lambda: f64,
    /// Margin `m` of the metric loss.
    pub margin: f64,
    /// Center learning rate `eta`.
    pub center_eta: f64,
    pub loss: LossKind,
    pub selection: NegativeSelection,
    pub seed: u64,
    /// Apply the rotation/flip/shift/crop pipeline each epoch. Requires
    /// source rasters larger than the network input side.
    pub augment: bool,
    pub keep_best: bool,
    /// Stop after this many optimizer steps (dry runs).
    pub max_steps: Option<usize>,
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    /// Published settings: 180 epochs, batch 28, lr 0.001, lambda 0.024,
    /// m 4.5, compact triplet-center loss with random negatives.
    pub fn full() -> TrainConfig {
        TrainConfig {
            net: NetworkConfig::full(250),
            epochs: 180,
            batch_size: 28,
            lr0: 1e-3,
            lambda: 0.024,
            margin: 4.5,
            center_eta: 0.5,
            loss: LossKind::Ctcl,
            selection: NegativeSelection::Random,
            seed: 0,
            augment: true,
            keep_best: true,
            max_steps: None,
            early_stop: None,
        }
    }

    /// Reduced configuration for CPU-scale runs on synthetic data.
    pub fn desk(classes: usize) -> TrainConfig {
        TrainConfig {
            net: NetworkConfig::desk(classes),
            epochs: 30,
            batch_size: 16,
            augment: false,
            keep_best: false,
            ..TrainConfig::full()
        }
    }

    pub fn lr_at(&self, epoch: i64) -> Result<f64> {
        lr_at(self.lr0, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Contract("learning rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Contract("lambda must be nonnegative".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Contract("margin must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_eta) {
            return Err(Error::Contract("center eta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-step summary, one JSON line each in the replay log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub metric: f64,
    pub mean_d_pos: f64,
    pub mean_d_neg: f64,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Append-only record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Wall-clock seconds; excluded from the replay log.
    pub wall_secs: f64,
}

impl RunRecord {
    /// Deterministic replay log: configuration, then every step and epoch
    /// record as JSON lines. Two runs with the same seed and config must
    /// produce byte-identical logs.
    pub fn replay_log(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.config).expect("config serializes"));
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch serializes"));
            out.push('\n');
        }
        if let Some(acc) = self.final_test_acc {
            out.push_str(&format!("{{\"final_test_acc\":{acc}}}\n"));
        }
        out
    }

    pub fn replay_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.replay_log().hash(&mut h);
        h.finish()
    }
}
