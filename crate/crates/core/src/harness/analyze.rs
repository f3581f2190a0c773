//! Analyzers: PCA projection, sample-to-center distance tables, and the
//! feature-cloud dynamics driver (`centersim`) behind the loss-shape
//! experiments.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::data::FeatureCloud;
use crate::error::{Error, Result};
use crate::losses::{
    update_centers_for, CenterBank, LossKind, NegativeSelection, SampleMetric,
};
use crate::rng::{derive, rng_from};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

fn power_iteration(cov: &[f64], dim: usize, ortho_to: Option<&[f64]>) -> (Vec<f64>, f64) {
    // Deterministic start: the axis with the largest variance.
    let mut start = 0;
    for j in 1..dim {
        if cov[j * dim + j] > cov[start * dim + start] {
            start = j;
        }
    }
    let mut v = vec![0.0; dim];
    v[start] = 1.0;
    if let Some(u) = ortho_to {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= dot * ui;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Start vector was parallel to the first component; take the
            // next axis and re-orthogonalize.
            v.iter_mut().for_each(|x| *x = 0.0);
            v[(start + 1) % dim] = 1.0;
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }

    let mut eigenvalue = 0.0;
    for _ in 0..600 {
        let mut w = vec![0.0; dim];
        for i in 0..dim {
            let row = &cov[i * dim..(i + 1) * dim];
            w[i] = row.iter().zip(&v).map(|(c, x)| c * x).sum();
        }
        if let Some(u) = ortho_to {
            let dot: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= dot * ui;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            // Degenerate direction (e.g. rank-deficient data): keep the
            // current orthonormal v with a zero eigenvalue.
            eigenvalue = 0.0;
            break;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        eigenvalue = norm;
        if delta < 1e-14 {
            break;
        }
    }
    // Sign convention: the largest-magnitude loading is positive.
    let mut lead = 0;
    for j in 1..dim {
        if v[j].abs() > v[lead].abs() {
            lead = j;
        }
    }
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, eigenvalue)
}

/// Project `[n x dim]` features onto their top-2 principal components.
/// Deterministic, with the largest-magnitude loading of each component
/// oriented positive.
pub fn pca_project(features: &[f64], n: usize, dim: usize) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::Contract(format!("PCA needs at least 3 points, got {n}")));
    }
    if features.len() != n * dim || dim == 0 {
        return Err(Error::Dimension(format!(
            "feature matrix {n}x{dim} expects {} values, got {}",
            n * dim,
            features.len()
        )));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for d in 0..dim {
            mean[d] += features[i * dim + d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n * dim)
        .map(|idx| features[idx] - mean[idx % dim])
        .collect();

    let mut cov = vec![0.0; dim * dim];
    for row in centered.chunks(dim) {
        for i in 0..dim {
            let ri = row[i];
            let c = &mut cov[i * dim..(i + 1) * dim];
            for (cj, rj) in c.iter_mut().zip(row) {
                *cj += ri * rj;
            }
        }
    }
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);

    let (v1, _) = power_iteration(&cov, dim, None);
    // Deflate before extracting the second component.
    let (v2, _) = {
        let mut deflated = cov.clone();
        let lambda1 = {
            let mut acc = 0.0;
            for i in 0..dim {
                let row = &cov[i * dim..(i + 1) * dim];
                let wi: f64 = row.iter().zip(&v1).map(|(c, x)| c * x).sum();
                acc += v1[i] * wi;
            }
            acc
        };
        for i in 0..dim {
            for j in 0..dim {
                deflated[i * dim + j] -= lambda1 * v1[i] * v1[j];
            }
        }
        power_iteration(&deflated, dim, Some(&v1))
    };

    let mut out = Vec::with_capacity(n * 2);
    for row in centered.chunks(dim) {
        out.push(row.iter().zip(&v1).map(|(x, v)| x * v).sum());
        out.push(row.iter().zip(&v2).map(|(x, v)| x * v).sum());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Distance report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceRow {
    pub index: usize,
    pub label: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Per-sample squared distances to the own and the selected negative
/// center, with summary statistics over the whole feature set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Display rows: one sample per distinct class, up to `n_show`.
    pub rows: Vec<DistanceRow>,
    pub mean_d_pos: f64,
    pub std_d_pos: f64,
    pub mean_d_neg: f64,
    pub std_d_neg: f64,
}

impl DistanceReport {
    pub fn ratio(&self) -> f64 {
        self.mean_d_pos / self.mean_d_neg
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,negative,d_pos,d_neg\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.index, r.label, r.negative, r.d_pos, r.d_neg
            ));
        }
        out.push_str(&format!(
            "# mean_d_pos={} std_d_pos={} mean_d_neg={} std_d_neg={} ratio={}\n",
            self.mean_d_pos,
            self.std_d_pos,
            self.mean_d_neg,
            self.std_d_neg,
            self.ratio()
        ));
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Build the distance table for a feature matrix against a center bank.
/// `n_show` display rows come from distinct classes (clipped with a warning
/// when fewer classes exist); the summary statistics cover every sample.
pub fn distance_report(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    bank: &CenterBank,
    selection: NegativeSelection,
    n_show: usize,
    seed: u64,
) -> Result<DistanceReport> {
    if features.len() != labels.len() * dim || dim != bank.dim {
        return Err(Error::Dimension("feature matrix does not match the bank".into()));
    }
    let mut rng = rng_from(derive(seed, 0xd157));
    let mut d_pos_all = Vec::with_capacity(labels.len());
    let mut d_neg_all = Vec::with_capacity(labels.len());
    let mut per_sample = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let x = &features[i * dim..(i + 1) * dim];
        let d_pos = bank.distance_to(x, label);
        let (neg, d_neg) = match selection {
            NegativeSelection::Nearest => bank.nearest_negative(x, label)?,
            NegativeSelection::Random => {
                let neg = bank.draw_negative(label, &mut rng)?;
                (neg, bank.distance_to(x, neg))
            }
        };
        d_pos_all.push(d_pos);
        d_neg_all.push(d_neg);
        per_sample.push(DistanceRow {
            index: i,
            label,
            negative: neg,
            d_pos,
            d_neg,
        });
    }

    let n_show_eff = n_show.min(bank.n_classes);
    if n_show_eff < n_show {
        log::warn!("n_show {n_show} clipped to {n_show_eff} available classes");
    }
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::with_capacity(n_show_eff);
    for row in &per_sample {
        if rows.len() == n_show_eff {
            break;
        }
        if seen.insert(row.label) {
            rows.push(row.clone());
        }
    }

    let (mean_d_pos, std_d_pos) = mean_std(&d_pos_all);
    let (mean_d_neg, std_d_neg) = mean_std(&d_neg_all);
    Ok(DistanceReport {
        rows,
        mean_d_pos,
        std_d_pos,
        mean_d_neg,
        std_d_neg,
    })
}

// ---------------------------------------------------------------------------
// centersim: loss dynamics on a feature cloud
// ---------------------------------------------------------------------------

/// How the features move during the simulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// A trainable linear map `W` (identity-initialized) embeds the cloud;
    /// Adam updates `W` from the loss gradient.
    Linear { lr: f64 },
    /// Features move directly along the analytic loss gradient.
    Direct { lr: f64 },
    /// Features stay fixed; only the centers update.
    Frozen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentersimConfig {
    pub kind: LossKind,
    pub selection: NegativeSelection,
    pub margin: f64,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub embedding: EmbeddingMode,
    pub seed: u64,
    pub record_every: usize,
}

impl CentersimConfig {
    pub fn new(kind: LossKind, margin: f64, steps: usize, seed: u64) -> CentersimConfig {
        CentersimConfig {
            kind,
            selection: kind.default_selection(),
            margin,
            eta: 0.1,
            steps,
            batch_size: 32,
            embedding: EmbeddingMode::Linear { lr: 0.01 },
            seed,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub mean_d_pos: f64,
    pub mean_d_neg: f64,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentersimRecord {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_mean_d_pos: f64,
    pub final_mean_d_neg: f64,
    pub final_ratio: f64,
    pub report: DistanceReport,
}

impl CentersimRecord {
    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.trajectory {
            out.push_str(&serde_json::to_string(p).expect("trajectory point"));
            out.push('\n');
        }
        out
    }
}

fn survey(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    bank: &CenterBank,
    selection: NegativeSelection,
    margin: f64,
    kind: LossKind,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let mut d_pos_sum = 0.0;
    let mut d_neg_sum = 0.0;
    let mut active = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let x = &features[i * dim..(i + 1) * dim];
        let d_pos = bank.distance_to(x, label);
        let d_neg = match selection {
            NegativeSelection::Nearest => bank.nearest_negative(x, label)?.1,
            NegativeSelection::Random => {
                let neg = bank.draw_negative(label, rng)?;
                bank.distance_to(x, neg)
            }
        };
        let hinge = match kind {
            LossKind::Tcl => d_pos + margin - d_neg,
            LossKind::Ctcl => margin * d_pos - d_neg,
        };
        if hinge > 0.0 {
            active += 1;
        }
        d_pos_sum += d_pos;
        d_neg_sum += d_neg;
    }
    let n = labels.len() as f64;
    Ok((d_pos_sum / n, d_neg_sum / n, active as f64 / n))
}

/// Run the loss dynamics on a feature cloud: minibatch steps that move the
/// embedding per `cfg.embedding`, apply the center rule, and record the
/// distance trajectory.
pub fn centersim(cloud: &FeatureCloud, cfg: &CentersimConfig) -> Result<CentersimRecord> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Contract("centersim needs steps and a batch size".into()));
    }
    let dim = cloud.dim;
    let n = cloud.len();
    let mut bank = CenterBank::seeded(cloud.n_classes, dim, cfg.margin, cfg.eta, derive(cfg.seed, 1))?;
    let mut neg_rng = rng_from(derive(cfg.seed, 2));
    let mut order_rng = rng_from(derive(cfg.seed, 3));
    let mut survey_rng = rng_from(derive(cfg.seed, 4));

    // Linear mode state.
    let weight: Option<Tensor> = match cfg.embedding {
        EmbeddingMode::Linear { .. } => {
            let mut eye = vec![0.0; dim * dim];
            for d in 0..dim {
                eye[d * dim + d] = 1.0;
            }
            Some(Tensor::param(&[dim, dim, 1, 1], eye)?)
        }
        _ => None,
    };
    let mut adam = match cfg.embedding {
        EmbeddingMode::Linear { lr } => Some(Adam::new(lr)),
        _ => None,
    };
    // Direct/frozen mode state.
    let mut features = cloud.points.clone();

    let embed_all = |w: &Tensor| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n * dim);
        for i in 0..n {
            let p = Tensor::new(&[dim, 1, 1], cloud.point(i).to_vec())?;
            let e = p.conv2d(w, None, 1, 0)?;
            out.extend_from_slice(&e.values());
        }
        Ok(out)
    };
    if let Some(w) = &weight {
        features = embed_all(w)?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut trajectory = Vec::new();

    for step in 0..cfg.steps {
        // Draw the batch: cyclic over a shuffled order.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(n) {
            if cursor >= n {
                use rand::seq::SliceRandom;
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut batch_embeddings = Vec::with_capacity(batch.len() * dim);
        let mut batch_labels = Vec::with_capacity(batch.len());
        let mut batch_samples: Vec<SampleMetric> = Vec::with_capacity(batch.len());
        let inv = 1.0 / batch.len() as f64;

        match cfg.embedding {
            EmbeddingMode::Linear { .. } => {
                let w = weight.as_ref().expect("linear weight");
                w.zero_grad();
                for (pos, &i) in batch.iter().enumerate() {
                    let p = Tensor::new(&[dim, 1, 1], cloud.point(i).to_vec())?;
                    let emb = p.conv2d(w, None, 1, 0)?.reshape(&[dim])?;
                    let x = emb.to_vec();
                    let label = cloud.labels[i];
                    let neg = match cfg.selection {
                        NegativeSelection::Random => bank.draw_negative(label, &mut neg_rng)?,
                        NegativeSelection::Nearest => bank.nearest_negative(&x, label)?.0,
                    };
                    let term = match cfg.kind {
                        LossKind::Ctcl => {
                            crate::losses::ctcl_term(&emb, bank.center(label), bank.center(neg), cfg.margin)?
                        }
                        LossKind::Tcl => {
                            crate::losses::tcl_term(&emb, bank.center(label), bank.center(neg), cfg.margin)?
                        }
                    };
                    let loss_value = term.item()?;
                    term.scale(inv).backward()?;
                    let d_pos = bank.distance_to(&x, label);
                    let d_neg = bank.distance_to(&x, neg);
                    batch_embeddings.extend_from_slice(&x);
                    batch_labels.push(label);
                    batch_samples.push(SampleMetric {
                        index: pos,
                        label,
                        negative: neg,
                        d_pos,
                        d_neg,
                        loss: loss_value,
                        active: loss_value > 0.0,
                    });
                }
                adam.as_mut().expect("adam").step(std::slice::from_ref(w));
            }
            EmbeddingMode::Direct { .. } | EmbeddingMode::Frozen => {
                let feature_lr = match cfg.embedding {
                    EmbeddingMode::Direct { lr } => Some(lr),
                    _ => None,
                };
                for (pos, &i) in batch.iter().enumerate() {
                    let x: Vec<f64> = features[i * dim..(i + 1) * dim].to_vec();
                    let label = cloud.labels[i];
                    let neg = match cfg.selection {
                        NegativeSelection::Random => bank.draw_negative(label, &mut neg_rng)?,
                        NegativeSelection::Nearest => bank.nearest_negative(&x, label)?.0,
                    };
                    let d_pos = bank.distance_to(&x, label);
                    let d_neg = bank.distance_to(&x, neg);
                    let (loss, active) = match cfg.kind {
                        LossKind::Ctcl => {
                            let h = cfg.margin * d_pos - d_neg;
                            (h.max(0.0), h > 0.0)
                        }
                        LossKind::Tcl => {
                            let h = d_pos + cfg.margin - d_neg;
                            (h.max(0.0), h > 0.0)
                        }
                    };
                    if let (true, Some(lr)) = (active, feature_lr) {
                        let c_pos = bank.center(label).to_vec();
                        let c_neg = bank.center(neg).to_vec();
                        let target = &mut features[i * dim..(i + 1) * dim];
                        for d in 0..dim {
                            // d/dx of the active hinge, factor 2 of the
                            // squared distances included.
                            let grad = match cfg.kind {
                                LossKind::Ctcl => {
                                    2.0 * ((cfg.margin - 1.0) * x[d] - cfg.margin * c_pos[d] + c_neg[d])
                                }
                                LossKind::Tcl => 2.0 * (c_neg[d] - c_pos[d]),
                            };
                            target[d] -= lr * grad;
                        }
                    }
                    batch_embeddings.extend_from_slice(&x);
                    batch_labels.push(label);
                    batch_samples.push(SampleMetric {
                        index: pos,
                        label,
                        negative: neg,
                        d_pos,
                        d_neg,
                        loss,
                        active,
                    });
                }
            }
        }

        update_centers_for(cfg.kind, &mut bank, &batch_embeddings, dim, &batch_labels, &batch_samples)?;
        if !bank.all_finite() {
            return Err(Error::Contract(format!("centers diverged at step {step}")));
        }
        if let Some(w) = &weight {
            features = embed_all(w)?;
        }

        if step % cfg.record_every == 0 || step + 1 == cfg.steps {
            let (mean_d_pos, mean_d_neg, active_fraction) = survey(
                &features,
                dim,
                &cloud.labels,
                &bank,
                cfg.selection,
                cfg.margin,
                cfg.kind,
                &mut survey_rng,
            )?;
            trajectory.push(TrajectoryPoint {
                step,
                mean_d_pos,
                mean_d_neg,
                active_fraction,
            });
        }
    }

    let report = distance_report(
        &features,
        dim,
        &cloud.labels,
        &bank,
        cfg.selection,
        20,
        derive(cfg.seed, 5),
    )?;
    let last = trajectory.last().expect("at least one trajectory point");
    Ok(CentersimRecord {
        final_mean_d_pos: last.mean_d_pos,
        final_mean_d_neg: last.mean_d_neg,
        final_ratio: last.mean_d_pos / last.mean_d_neg,
        trajectory,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_feature_cloud_with;

    #[test]
    fn pca_needs_three_points() {
        assert!(matches!(
            pca_project(&[1.0, 2.0, 3.0, 4.0], 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pca_of_2d_data_preserves_pairwise_distances() {
        // Already 2-d and mean-centered: projection is a rotation.
        let pts = vec![1.0, 0.5, -1.0, 1.5, 0.5, -2.5, -0.5, 0.5];
        let mean: (f64, f64) = (
            (pts[0] + pts[2] + pts[4] + pts[6]) / 4.0,
            (pts[1] + pts[3] + pts[5] + pts[7]) / 4.0,
        );
        let centered: Vec<f64> = pts
            .chunks(2)
            .flat_map(|p| [p[0] - mean.0, p[1] - mean.1])
            .collect();
        let proj = pca_project(&centered, 4, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let orig = squared_distance(&centered[i * 2..i * 2 + 2], &centered[j * 2..j * 2 + 2]);
                let new = squared_distance(&proj[i * 2..i * 2 + 2], &proj[j * 2..j * 2 + 2]);
                assert!((orig - new).abs() < 1e-9, "pair {i},{j}: {orig} vs {new}");
            }
        }
    }

    #[test]
    fn pca_rank_one_data_has_null_second_component() {
        let dir = [3.0, -1.0, 0.5];
        let mut pts = Vec::new();
        for i in 0..6 {
            let t = i as f64 - 2.5;
            pts.extend(dir.iter().map(|d| d * t));
        }
        let proj = pca_project(&pts, 6, 3).unwrap();
        for i in 0..6 {
            assert!(proj[i * 2 + 1].abs() <= 1e-9, "second coord {}", proj[i * 2 + 1]);
        }
    }

    #[test]
    fn distance_report_clips_n_show() {
        let cloud = generate_feature_cloud_with(4, 5, 8, 0.5, 1.0, 3).unwrap();
        let bank = CenterBank::at_class_means(&cloud.points, 8, &cloud.labels, 4, 4.5, 0.5).unwrap();
        let rep = distance_report(
            &cloud.points,
            8,
            &cloud.labels,
            &bank,
            NegativeSelection::Nearest,
            20,
            0,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 4);
        let labels: std::collections::HashSet<usize> = rep.rows.iter().map(|r| r.label).collect();
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn zero_spread_cloud_centered_at_means_has_zero_d_pos() {
        let cloud = generate_feature_cloud_with(5, 4, 8, 0.0, 2.0, 7).unwrap();
        let bank = CenterBank::at_class_means(&cloud.points, 8, &cloud.labels, 5, 4.5, 0.5).unwrap();
        let rep = distance_report(
            &cloud.points,
            8,
            &cloud.labels,
            &bank,
            NegativeSelection::Nearest,
            5,
            0,
        )
        .unwrap();
        assert!(rep.mean_d_pos.abs() < 1e-20);
        assert!(rep.mean_d_neg > 0.0);
    }

    #[test]
    fn frozen_features_compress_mean_d_pos_monotonically() {
        let cloud = generate_feature_cloud_with(5, 10, 8, 0.8, 1.0, 11).unwrap();
        let cfg = CentersimConfig {
            kind: LossKind::Ctcl,
            selection: NegativeSelection::Random,
            margin: 4.5,
            eta: 0.01,
            steps: 120,
            batch_size: cloud.len(),
            embedding: EmbeddingMode::Frozen,
            seed: 5,
            record_every: 1,
        };
        let record = centersim(&cloud, &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for point in &record.trajectory {
            if point.active_fraction == 0.0 {
                break;
            }
            assert!(
                point.mean_d_pos <= prev + 1e-12,
                "step {}: {} after {}",
                point.step,
                point.mean_d_pos,
                prev
            );
            prev = point.mean_d_pos;
        }
        assert!(record.trajectory[0].mean_d_pos > record.final_mean_d_pos);
    }
}
