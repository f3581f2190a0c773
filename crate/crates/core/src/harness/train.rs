//! Training and evaluation loops.
//!
//! A step samples a batch, runs the branch-sampling forward per sample,
//! backs the mean joint loss into the accumulated gradients, applies one
//! Adam update, then applies the center rule to the batch's recorded
//! embeddings. All randomness is derived from the run seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, EpochRecord, RunRecord, StepRecord, TrainConfig};
use crate::data::{augment, SketchSample};
use crate::error::{Error, Result};
use crate::losses::{
    joint_loss, update_centers_for, CenterBank, JointLossConfig, SampleMetric,
};
use crate::network::Network;
use crate::rng::{derive, rng_from, sample_rng};

/// Everything a run leaves behind.
pub struct TrainResult {
    pub network: Network,
    pub bank: CenterBank,
    pub record: RunRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub misclassified: Vec<String>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode pass: top-1 accuracy, mean cross-entropy, per-class table and
/// the ids of misclassified samples.
pub fn evaluate(net: &Network, samples: &[SketchSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let n_classes = net.config.classes;
    let mut per_class = vec![(0usize, 0usize); n_classes];
    let mut misclassified = Vec::new();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for sample in samples {
        if sample.label >= n_classes {
            return Err(Error::Contract(format!(
                "sample {} labeled {} but the model has {} classes",
                sample.id, sample.label, n_classes
            )));
        }
        let out = net.forward_eval(&sample.raster.to_tensor())?;
        let logits = out.logits.to_vec();
        loss_sum += out.logits.softmax_cross_entropy(sample.label)?.item()?;
        let pred = argmax(&logits);
        per_class[sample.label].1 += 1;
        if pred == sample.label {
            per_class[sample.label].0 += 1;
            correct += 1;
        } else {
            misclassified.push(sample.id.clone());
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        mean_loss: loss_sum / samples.len() as f64,
        per_class: per_class
            .into_iter()
            .enumerate()
            .map(|(class, (correct, total))| ClassAccuracy { class, correct, total })
            .collect(),
        misclassified,
    })
}

/// Eval-mode embeddings of a sample list, as a flat `[N x d]` matrix.
pub fn embeddings(net: &Network, samples: &[SketchSample]) -> Result<(Vec<f64>, usize)> {
    let dim = net.config.embedding_dim();
    let mut out = Vec::with_capacity(samples.len() * dim);
    for sample in samples {
        let fwd = net.forward_eval(&sample.raster.to_tensor())?;
        out.extend_from_slice(&fwd.embedding.values());
    }
    Ok((out, dim))
}

struct BestSnapshot {
    epoch: usize,
    val_acc: f64,
    params: Vec<Vec<f64>>,
    norms: Vec<(Vec<f64>, Vec<f64>)>,
    bank: CenterBank,
}

fn take_snapshot(net: &Network, bank: &CenterBank, epoch: usize, val_acc: f64) -> BestSnapshot {
    let mut params = Vec::new();
    net.visit_params(&mut |_, t| params.push(t.to_vec()));
    let mut norms = Vec::new();
    net.visit_norms(&mut |_, bn| norms.push((bn.running_mean(), bn.running_var())));
    BestSnapshot {
        epoch,
        val_acc,
        params,
        norms,
        bank: bank.clone(),
    }
}

fn restore_snapshot(net: &Network, bank: &mut CenterBank, snap: &BestSnapshot) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    net.visit_params(&mut |_, t| {
        if err.is_none() {
            if let Err(e) = t.set_values(&snap.params[i]) {
                err = Some(e);
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut j = 0;
    net.visit_norms(&mut |_, bn| {
        bn.set_running_stats(snap.norms[j].0.clone(), snap.norms[j].1.clone());
        j += 1;
    });
    *bank = snap.bank.clone();
    Ok(())
}

/// Train a fresh network on `train_set`, validating on `val_set` after each
/// epoch. Every epoch visits each training sample exactly once, in an order
/// shuffled without replacement.
pub fn train(train_set: &[SketchSample], val_set: &[SketchSample], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let started = Instant::now();
    let net = Network::new(cfg.net.clone(), derive(cfg.seed, 1))?;
    let mut bank = CenterBank::seeded(
        cfg.net.classes,
        cfg.net.embedding_dim(),
        cfg.margin,
        cfg.center_eta,
        derive(cfg.seed, 2),
    )?;
    let joint_cfg = JointLossConfig {
        lambda: cfg.lambda,
        kind: cfg.loss,
        selection: cfg.selection,
    };
    let params = net.parameters();
    let mut adam = Adam::new(cfg.lr0);
    let mut branch_rng = rng_from(derive(cfg.seed, 3));
    let mut neg_rng = rng_from(derive(cfg.seed, 4));
    let mut shuffle_rng = rng_from(derive(cfg.seed, 5));

    let dim = cfg.net.embedding_dim();
    let mut record = RunRecord {
        config: cfg.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        final_test_acc: None,
        best_epoch: None,
        wall_secs: 0.0,
    };
    let mut best: Option<BestSnapshot> = None;
    let mut step = 0usize;
    let mut stopped = false;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch as i64)?;
        adam.set_lr(lr);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(cfg.batch_size) {
            net.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            let mut batch_embeddings: Vec<f64> = Vec::with_capacity(batch.len() * dim);
            let mut batch_labels: Vec<usize> = Vec::with_capacity(batch.len());
            let mut batch_samples: Vec<SampleMetric> = Vec::with_capacity(batch.len());
            let mut sums = (0.0, 0.0, 0.0); // total, ce, metric

            for (pos, &idx) in batch.iter().enumerate() {
                let sample = &train_set[idx];
                let raster = if cfg.augment {
                    let mut arng = sample_rng(cfg.seed, epoch as u64, idx as u64);
                    augment(sample, cfg.net.input_side, &mut arng)?.raster
                } else {
                    sample.raster.clone()
                };
                let x = raster.to_tensor();
                let out = net.forward_train(&x, &mut branch_rng)?;
                let (loss, report) = joint_loss(
                    &out.logits,
                    &out.embedding,
                    sample.label,
                    &bank,
                    &joint_cfg,
                    &mut neg_rng,
                )?;
                let loss_value = loss.item()?;
                if !loss_value.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|&i| train_set[i].id.as_str()).collect();
                    return Err(Error::Contract(format!(
                        "non-finite loss {loss_value} at step {step} (epoch {epoch}); batch ids: [{}]",
                        ids.join(", ")
                    )));
                }
                // Mean over the batch via linearity: scale, then accumulate.
                loss.scale(inv).backward()?;
                sums.0 += report.total;
                sums.1 += report.softmax;
                sums.2 += report.metric;
                if cfg.lambda > 0.0 {
                    batch_embeddings.extend_from_slice(&out.embedding.values());
                    batch_labels.push(sample.label);
                    let mut s = report.samples[0].clone();
                    s.index = pos;
                    batch_samples.push(s);
                }
            }

            adam.step(&params);
            if cfg.lambda > 0.0 {
                update_centers_for(
                    cfg.loss,
                    &mut bank,
                    &batch_embeddings,
                    dim,
                    &batch_labels,
                    &batch_samples,
                )?;
            }
            let n = batch.len() as f64;
            let batch_report = crate::losses::LossReport {
                softmax: sums.1 / n,
                lambda: cfg.lambda,
                metric: sums.2 / n,
                total: sums.0 / n,
                samples: batch_samples,
            };
            record.steps.push(StepRecord {
                step,
                epoch,
                total: batch_report.total,
                ce: batch_report.softmax,
                metric: batch_report.metric,
                mean_d_pos: batch_report.mean_d_pos(),
                mean_d_neg: batch_report.mean_d_neg(),
                active_fraction: batch_report.active_fraction(),
            });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stopped = true;
                break 'epochs;
            }
        }

        let train_eval = evaluate(&net, train_set)?;
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let v = evaluate(&net, val_set)?;
            (Some(v.mean_loss), Some(v.accuracy))
        };
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: train_eval.mean_loss,
            train_acc: train_eval.accuracy,
            val_loss,
            val_acc,
        });
        if cfg.keep_best {
            if let Some(acc) = val_acc {
                if best.as_ref().is_none_or(|b| acc > b.val_acc) {
                    best = Some(take_snapshot(&net, &bank, epoch, acc));
                }
            }
        }
        if let Some(stop) = cfg.early_stop {
            let val_ok = val_acc.map_or(true, |a| a >= stop.val_acc);
            if train_eval.accuracy >= stop.train_acc && val_ok {
                break 'epochs;
            }
        }
    }
    let _ = stopped;

    if let Some(snap) = &best {
        restore_snapshot(&net, &mut bank, snap)?;
        record.best_epoch = Some(snap.epoch);
    }
    record.wall_secs = started.elapsed().as_secs_f64();
    Ok(TrainResult {
        network: net,
        bank,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_sketches;
    use crate::losses::LossKind;
    use crate::network::{NetworkConfig, StagePlan};

    fn tiny_config(classes: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk(classes);
        cfg.net = NetworkConfig {
            input_side: 32,
            stages: vec![
                StagePlan { channels: 4, blocks: 1 },
                StagePlan { channels: 8, blocks: 1 },
                StagePlan { channels: 8, blocks: 1 },
                StagePlan { channels: 16, blocks: 1 },
            ],
            classes,
            ..NetworkConfig::desk(classes)
        };
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn shuffled_epoch_order_is_a_permutation() {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::rng_from(1);
        let mut order: Vec<usize> = (0..57).collect();
        order.shuffle(&mut rng);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_run_completes_and_records_steps() {
        let data = generate_synthetic_sketches(2, 6, 32, 3).unwrap();
        let cfg = tiny_config(2);
        let result = train(&data.samples, &[], &cfg).unwrap();
        // 12 samples / batch 4 = 3 steps per epoch, 2 epochs.
        assert_eq!(result.record.steps.len(), 6);
        assert_eq!(result.record.epochs.len(), 2);
        assert!(result.bank.all_finite());
    }

    #[test]
    fn lambda_zero_and_joint_runs_share_the_seed_but_differ_in_metric_only() {
        let data = generate_synthetic_sketches(2, 6, 32, 4).unwrap();
        let mut cfg = tiny_config(2);
        cfg.loss = LossKind::Ctcl;
        let joint = train(&data.samples, &[], &cfg).unwrap();
        cfg.lambda = 0.0;
        let control = train(&data.samples, &[], &cfg).unwrap();
        for (a, b) in joint.record.steps.iter().zip(control.record.steps.iter()) {
            assert!(a.metric >= 0.0);
            assert_eq!(b.metric, 0.0);
        }
    }

    #[test]
    fn identical_seeds_replay_identically() {
        let data = generate_synthetic_sketches(2, 6, 32, 5).unwrap();
        let cfg = tiny_config(2);
        let a = train(&data.samples, &[], &cfg).unwrap();
        let b = train(&data.samples, &[], &cfg).unwrap();
        assert_eq!(a.record.replay_log(), b.record.replay_log());
        assert_eq!(a.record.replay_hash(), b.record.replay_hash());
    }

    #[test]
    fn max_steps_truncates_the_run() {
        let data = generate_synthetic_sketches(2, 6, 32, 6).unwrap();
        let mut cfg = tiny_config(2);
        cfg.max_steps = Some(1);
        let result = train(&data.samples, &[], &cfg).unwrap();
        assert_eq!(result.record.steps.len(), 1);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = generate_synthetic_sketches(2, 4, 32, 7).unwrap();
        let cfg = tiny_config(2);
        let result = train(&data.samples, &[], &cfg).unwrap();
        let e1 = evaluate(&result.network, &data.samples).unwrap();
        let e2 = evaluate(&result.network, &data.samples).unwrap();
        assert_eq!(e1.accuracy, e2.accuracy);
        assert_eq!(e1.misclassified, e2.misclassified);
    }
}
