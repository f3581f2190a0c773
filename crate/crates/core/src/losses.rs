//! Classification and metric losses: softmax cross-entropy lives on the
//! tensor type; this module adds the triplet-center loss, the compact
//! triplet-center loss with its dedicated center update rule, and the joint
//! objective that weights the metric term by `lambda`.
//!
//! Distances are squared Euclidean throughout. The center update and the
//! closed-form feature update absorb the squared-distance derivative's
//! factor 2 into the center learning rate `eta`; the autodiff path keeps the
//! true gradient, so the two are related by exactly that factor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, standard_normal};
use crate::tensor::Tensor;

/// Squared Euclidean distance.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Which metric loss supervises the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Baseline triplet-center loss: `max(D_pos + m - min_j D_j, 0)`.
    Tcl,
    /// Compact triplet-center loss: `max(m * D_pos - D_neg, 0)` with a
    /// randomly drawn negative center.
    Ctcl,
}

/// How the negative center of a sample is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSelection {
    Random,
    Nearest,
}

impl LossKind {
    /// The selection rule each loss is defined with.
    pub fn default_selection(self) -> NegativeSelection {
        match self {
            LossKind::Tcl => NegativeSelection::Nearest,
            LossKind::Ctcl => NegativeSelection::Random,
        }
    }
}

/// Configuration of the joint objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointLossConfig {
    /// Weight of the metric term. Must be nonnegative; zero disables the
    /// metric branch entirely.
    pub lambda: f64,
    pub kind: LossKind,
    pub selection: NegativeSelection,
}

impl JointLossConfig {
    pub fn new(lambda: f64, kind: LossKind) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Contract(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(JointLossConfig {
            lambda,
            kind,
            selection: kind.default_selection(),
        })
    }
}

/// Learnable per-class centers, updated by the dedicated rule rather than
/// the network optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenterBank {
    centers: Vec<f64>,
    pub n_classes: usize,
    pub dim: usize,
    /// Margin `m`.
    pub margin: f64,
    /// Center learning rate `eta` in `[0, 1]`.
    pub eta: f64,
}

impl CenterBank {
    pub fn new(centers: Vec<f64>, n_classes: usize, dim: usize, margin: f64, eta: f64) -> Result<Self> {
        if centers.len() != n_classes * dim {
            return Err(Error::Dimension(format!(
                "center matrix expects {} values, got {}",
                n_classes * dim,
                centers.len()
            )));
        }
        if margin <= 0.0 {
            return Err(Error::Contract(format!("margin must be positive, got {margin}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Contract(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(CenterBank {
            centers,
            n_classes,
            dim,
            margin,
            eta,
        })
    }

    /// Small symmetric Gaussian start (sigma 0.01) around the origin.
    pub fn seeded(n_classes: usize, dim: usize, margin: f64, eta: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let centers = (0..n_classes * dim)
            .map(|_| 0.01 * standard_normal(&mut rng))
            .collect();
        CenterBank::new(centers, n_classes, dim, margin, eta)
    }

    /// Centers placed at the per-class means of the given features.
    pub fn at_class_means(
        features: &[f64],
        dim: usize,
        labels: &[usize],
        n_classes: usize,
        margin: f64,
        eta: f64,
    ) -> Result<Self> {
        let mut sums = vec![0.0; n_classes * dim];
        let mut counts = vec![0usize; n_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(Error::Index(format!("label {label} out of range")));
            }
            counts[label] += 1;
            for d in 0..dim {
                sums[label * dim + d] += features[i * dim + d];
            }
        }
        for k in 0..n_classes {
            if counts[k] > 0 {
                for d in 0..dim {
                    sums[k * dim + d] /= counts[k] as f64;
                }
            }
        }
        CenterBank::new(sums, n_classes, dim, margin, eta)
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn all_finite(&self) -> bool {
        self.centers.iter().all(|v| v.is_finite())
    }

    pub fn distance_to(&self, x: &[f64], k: usize) -> f64 {
        squared_distance(x, self.center(k))
    }

    /// Nearest center of a class other than `own`: `(class, distance)`.
    pub fn nearest_negative(&self, x: &[f64], own: usize) -> Result<(usize, f64)> {
        if self.n_classes < 2 {
            return Err(Error::Contract(
                "no negative center exists with fewer than 2 classes".into(),
            ));
        }
        let mut best = (usize::MAX, f64::INFINITY);
        for k in 0..self.n_classes {
            if k == own {
                continue;
            }
            let d = self.distance_to(x, k);
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }

    /// Uniform draw over the other `n_classes - 1` classes.
    pub fn draw_negative(&self, own: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.n_classes < 2 {
            return Err(Error::Contract(
                "no negative center exists with fewer than 2 classes".into(),
            ));
        }
        let idx = rng.gen_range(0..self.n_classes - 1);
        Ok(if idx >= own { idx + 1 } else { idx })
    }
}

/// Per-sample record of one metric-loss evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetric {
    pub index: usize,
    pub label: usize,
    /// The selected negative class (drawn for CTCL, nearest for TCL),
    /// recorded so a batch replays exactly.
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
    pub loss: f64,
    pub active: bool,
}

/// Loss values and per-sample distances for one batch (or one sample).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub softmax: f64,
    pub lambda: f64,
    pub metric: f64,
    pub total: f64,
    pub samples: Vec<SampleMetric>,
}

impl LossReport {
    pub fn mean_d_pos(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.d_pos).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_d_neg(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.d_neg).sum::<f64>() / self.samples.len() as f64
    }

    pub fn active_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.active).count() as f64 / self.samples.len() as f64
    }

    /// One JSON-lines record per training step.
    pub fn jsonl_record(&self, step: usize) -> serde_json::Value {
        serde_json::json!({
            "step": step,
            "total": self.total,
            "ce": self.softmax,
            "metric": self.metric,
            "mean_d_pos": self.mean_d_pos(),
            "mean_d_neg": self.mean_d_neg(),
            "active_fraction": self.active_fraction(),
        })
    }
}

fn check_batch(features: &[f64], dim: usize, labels: &[usize], bank: &CenterBank) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Contract("metric loss needs at least one sample".into()));
    }
    if dim != bank.dim {
        return Err(Error::Dimension(format!(
            "feature dim {dim} does not match bank dim {}",
            bank.dim
        )));
    }
    if features.len() != labels.len() * dim {
        return Err(Error::Dimension(format!(
            "expected {} feature values, got {}",
            labels.len() * dim,
            features.len()
        )));
    }
    if bank.n_classes < 2 {
        return Err(Error::Contract(
            "no negative center exists with fewer than 2 classes".into(),
        ));
    }
    for &l in labels {
        if l >= bank.n_classes {
            return Err(Error::Index(format!("label {l} out of range")));
        }
    }
    Ok(labels.len())
}

/// Baseline triplet-center loss over a batch of plain feature rows:
/// `loss_i = max(D(f_i, c_pos) + m - min_{j != y_i} D(f_i, c_j), 0)`.
pub fn tcl_loss(features: &[f64], dim: usize, labels: &[usize], bank: &CenterBank) -> Result<LossReport> {
    let m_samples = check_batch(features, dim, labels, bank)?;
    let mut report = LossReport {
        lambda: 1.0,
        ..Default::default()
    };
    for i in 0..m_samples {
        let x = &features[i * dim..(i + 1) * dim];
        let d_pos = bank.distance_to(x, labels[i]);
        let (neg, d_neg) = bank.nearest_negative(x, labels[i])?;
        let loss = (d_pos + bank.margin - d_neg).max(0.0);
        report.metric += loss;
        report.samples.push(SampleMetric {
            index: i,
            label: labels[i],
            negative: neg,
            d_pos,
            d_neg,
            loss,
            active: loss > 0.0,
        });
    }
    report.total = report.softmax + report.lambda * report.metric;
    Ok(report)
}

/// Compact triplet-center loss over a batch of plain feature rows:
/// `loss_i = max(m * D(x_i, c_pos) - D(x_i, c_neg), 0)` with `c_neg` drawn
/// uniformly from the other classes. Draws are recorded in the report.
pub fn ctcl_loss(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    bank: &CenterBank,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let m_samples = check_batch(features, dim, labels, bank)?;
    let mut report = LossReport {
        lambda: 1.0,
        ..Default::default()
    };
    for i in 0..m_samples {
        let x = &features[i * dim..(i + 1) * dim];
        let neg = bank.draw_negative(labels[i], rng)?;
        let d_pos = bank.distance_to(x, labels[i]);
        let d_neg = bank.distance_to(x, neg);
        let loss = (bank.margin * d_pos - d_neg).max(0.0);
        report.metric += loss;
        report.samples.push(SampleMetric {
            index: i,
            label: labels[i],
            negative: neg,
            d_pos,
            d_neg,
            loss,
            active: loss > 0.0,
        });
    }
    report.total = report.softmax + report.lambda * report.metric;
    Ok(report)
}

/// Closed-form feature update for a hinge-active compact triplet-center
/// term: `delta_x = eta * ((m - 1) x - m c_pos + c_neg)`. This is `eta / 2`
/// times the analytic gradient; the squared-distance factor 2 is absorbed.
pub fn ctcl_feature_grad(
    x: &[f64],
    c_pos: &[f64],
    c_neg: &[f64],
    margin: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    if x.len() != c_pos.len() || x.len() != c_neg.len() {
        return Err(Error::Dimension(format!(
            "feature/center dims differ: {} / {} / {}",
            x.len(),
            c_pos.len(),
            c_neg.len()
        )));
    }
    let active = margin * squared_distance(x, c_pos) - squared_distance(x, c_neg) > 0.0;
    if !active {
        return Err(Error::Contract(
            "feature update is defined for hinge-active samples only (gradient is zero here)".into(),
        ));
    }
    Ok(x.iter()
        .zip(c_pos.iter().zip(c_neg))
        .map(|(xi, (cp, cn))| eta * ((margin - 1.0) * xi - margin * cp + cn))
        .collect())
}

/// Center update summed over the hinge-active samples of a batch, with the
/// positive-role pull scaled by `pos_scale`:
/// `delta_c_k = sum_i [eta * pos_scale * (x_i - c_pos) + eta * (c_neg - x_i)]`
/// for the roles `k = y_i` and `k = y_j` respectively.
fn apply_center_update(
    bank: &mut CenterBank,
    features: &[f64],
    dim: usize,
    labels: &[usize],
    samples: &[SampleMetric],
    pos_scale: f64,
) -> Result<()> {
    if samples.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} recorded samples for {} labels",
            samples.len(),
            labels.len()
        )));
    }
    if features.len() != labels.len() * dim || dim != bank.dim {
        return Err(Error::Dimension("feature matrix does not match bank".into()));
    }
    let eta = bank.eta;
    let mut delta = vec![0.0; bank.centers.len()];
    for (i, s) in samples.iter().enumerate() {
        if s.label >= bank.n_classes || s.negative >= bank.n_classes {
            return Err(Error::Index(format!(
                "sample {} references class {}/{} outside the bank",
                i, s.label, s.negative
            )));
        }
        if !s.active {
            continue;
        }
        let x = &features[i * dim..(i + 1) * dim];
        let c_pos = bank.center(s.label);
        let c_neg = bank.center(s.negative);
        for d in 0..dim {
            delta[s.label * dim + d] += eta * pos_scale * (x[d] - c_pos[d]);
            delta[s.negative * dim + d] += eta * (c_neg[d] - x[d]);
        }
    }
    for (c, dv) in bank.centers.iter_mut().zip(&delta) {
        *c += dv;
    }
    Ok(())
}

/// The compact triplet-center loss center rule: positive pull scaled by the
/// margin `m`, negative push by the recorded draw.
pub fn update_centers(
    bank: &mut CenterBank,
    features: &[f64],
    dim: usize,
    labels: &[usize],
    samples: &[SampleMetric],
) -> Result<()> {
    let m = bank.margin;
    apply_center_update(bank, features, dim, labels, samples, m)
}

/// Center rule for the baseline loss, whose positive term carries no margin
/// factor; the negative role is the recorded nearest center.
pub fn update_centers_tcl(
    bank: &mut CenterBank,
    features: &[f64],
    dim: usize,
    labels: &[usize],
    samples: &[SampleMetric],
) -> Result<()> {
    apply_center_update(bank, features, dim, labels, samples, 1.0)
}

/// Dispatch to the matching center rule.
pub fn update_centers_for(
    kind: LossKind,
    bank: &mut CenterBank,
    features: &[f64],
    dim: usize,
    labels: &[usize],
    samples: &[SampleMetric],
) -> Result<()> {
    match kind {
        LossKind::Ctcl => update_centers(bank, features, dim, labels, samples),
        LossKind::Tcl => update_centers_tcl(bank, features, dim, labels, samples),
    }
}

/// `sum((x - c)^2)` as a graph node, with `c` a constant.
pub fn squared_distance_term(x: &Tensor, center: &[f64]) -> Result<Tensor> {
    if x.len() != center.len() {
        return Err(Error::Dimension(format!(
            "feature dim {} vs center dim {}",
            x.len(),
            center.len()
        )));
    }
    let c = Tensor::new(&[center.len()], center.to_vec())?;
    let flat = x.reshape(&[x.len()])?;
    let diff = flat.sub(&c)?;
    diff.mul(&diff)?.sum()
}

/// Compact triplet-center term on the graph: `relu(m * D_pos - D_neg)`.
pub fn ctcl_term(x: &Tensor, c_pos: &[f64], c_neg: &[f64], margin: f64) -> Result<Tensor> {
    let d_pos = squared_distance_term(x, c_pos)?;
    let d_neg = squared_distance_term(x, c_neg)?;
    Ok(d_pos.scale(margin).sub(&d_neg)?.relu())
}

/// Baseline triplet-center term on the graph: `relu(D_pos + m - D_neg)`.
pub fn tcl_term(x: &Tensor, c_pos: &[f64], c_neg: &[f64], margin: f64) -> Result<Tensor> {
    let d_pos = squared_distance_term(x, c_pos)?;
    let d_neg = squared_distance_term(x, c_neg)?;
    Ok(d_pos.add(&Tensor::scalar(margin))?.sub(&d_neg)?.relu())
}

/// Joint objective for one sample:
/// `L = softmax_cross_entropy(logits, label) + lambda * metric(embedding)`.
///
/// Gradients flow through both branches; the centers are constants here and
/// are updated separately via the center rule. With `lambda == 0` the metric
/// branch is not evaluated at all and the bank stays untouched.
pub fn joint_loss(
    logits: &Tensor,
    embedding: &Tensor,
    label: usize,
    bank: &CenterBank,
    cfg: &JointLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossReport)> {
    let ce = logits.softmax_cross_entropy(label)?;
    let ce_value = ce.item()?;
    if cfg.lambda == 0.0 {
        let report = LossReport {
            softmax: ce_value,
            lambda: 0.0,
            metric: 0.0,
            total: ce_value,
            samples: vec![],
        };
        return Ok((ce, report));
    }
    if label >= bank.n_classes {
        return Err(Error::Index(format!("label {label} out of range")));
    }
    let x = embedding.to_vec();
    let negative = match cfg.selection {
        NegativeSelection::Random => bank.draw_negative(label, rng)?,
        NegativeSelection::Nearest => bank.nearest_negative(&x, label)?.0,
    };
    let c_pos = bank.center(label).to_vec();
    let c_neg = bank.center(negative).to_vec();
    let metric = match cfg.kind {
        LossKind::Ctcl => ctcl_term(embedding, &c_pos, &c_neg, bank.margin)?,
        LossKind::Tcl => tcl_term(embedding, &c_pos, &c_neg, bank.margin)?,
    };
    let metric_value = metric.item()?;
    let total = ce.add(&metric.scale(cfg.lambda))?;
    let d_pos = squared_distance(&x, &c_pos);
    let d_neg = squared_distance(&x, &c_neg);
    let report = LossReport {
        softmax: ce_value,
        lambda: cfg.lambda,
        metric: metric_value,
        total: total.item()?,
        samples: vec![SampleMetric {
            index: 0,
            label,
            negative,
            d_pos,
            d_neg,
            loss: metric_value,
            active: metric_value > 0.0,
        }],
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2d(centers: Vec<Vec<f64>>, margin: f64, eta: f64) -> CenterBank {
        let n = centers.len();
        let flat: Vec<f64> = centers.into_iter().flatten().collect();
        let dim = flat.len() / n;
        CenterBank::new(flat, n, dim, margin, eta).unwrap()
    }

    #[test]
    fn tcl_hand_example() {
        // f=(1,0), c_pos=(0,0), negatives (3,0) and (0,2), m=5:
        // nearest negative distance is 4, loss = max(1 + 5 - 4, 0) = 2.
        let bank = bank2d(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 2.0]], 5.0, 0.5);
        let report = tcl_loss(&[1.0, 0.0], 2, &[0], &bank).unwrap();
        assert_eq!(report.metric, 2.0);
        assert_eq!(report.samples[0].negative, 1);
        assert_eq!(report.samples[0].d_pos, 1.0);
        assert_eq!(report.samples[0].d_neg, 4.0);
    }

    #[test]
    fn tcl_inactive_when_negative_is_far() {
        let bank = bank2d(vec![vec![0.0, 0.0], vec![100.0, 0.0]], 5.0, 0.5);
        let report = tcl_loss(&[0.0, 0.0], 2, &[0], &bank).unwrap();
        assert_eq!(report.metric, 0.0);
        assert!(!report.samples[0].active);
    }

    #[test]
    fn tcl_zero_margin_boundary() {
        // Equidistant from own and nearest negative center with m = 0 is the
        // hinge boundary; CenterBank requires m > 0, so evaluate the hinge
        // arithmetic directly.
        let d_pos = 2.0;
        let d_neg = 2.0;
        let loss = (d_pos + 0.0 - d_neg).max(0.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn tcl_needs_two_classes() {
        let bank = bank2d(vec![vec![0.0, 0.0]], 5.0, 0.5);
        assert!(matches!(
            tcl_loss(&[1.0, 0.0], 2, &[0], &bank),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ctcl_hand_example() {
        // x=(1,0), c_pos=(0,0), c_neg=(3,0), m=4.5 -> max(4.5*1 - 4, 0) = 0.5
        let bank = bank2d(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 4.5, 0.5);
        let mut rng = rng_from(0);
        let report = ctcl_loss(&[1.0, 0.0], 2, &[0], &bank, &mut rng).unwrap();
        assert_eq!(report.samples[0].negative, 1);
        assert!((report.metric - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ctcl_inactive_sample_has_zero_loss_and_gradient() {
        // m * D_pos <= D_neg: hinge off.
        let bank = bank2d(vec![vec![0.0, 0.0], vec![10.0, 0.0]], 2.0, 0.5);
        let mut rng = rng_from(1);
        let report = ctcl_loss(&[1.0, 0.0], 2, &[0], &bank, &mut rng).unwrap();
        assert_eq!(report.metric, 0.0);

        let x = Tensor::param(&[2], vec![1.0, 0.0]).unwrap();
        let term = ctcl_term(&x, bank.center(0), bank.center(1), 2.0).unwrap();
        term.backward().unwrap();
        assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn ctcl_at_own_center_is_zero() {
        let bank = bank2d(vec![vec![2.0, -1.0], vec![0.0, 0.0]], 4.5, 0.5);
        let mut rng = rng_from(2);
        let report = ctcl_loss(&[2.0, -1.0], 2, &[0], &bank, &mut rng).unwrap();
        assert_eq!(report.metric, 0.0);
    }

    #[test]
    fn feature_grad_hand_example() {
        let delta = ctcl_feature_grad(&[1.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], 4.5, 1.0).unwrap();
        assert_eq!(delta, vec![6.5, 0.0]);
    }

    #[test]
    fn feature_grad_is_half_the_autodiff_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 0.0]).unwrap();
        let term = ctcl_term(&x, &[0.0, 0.0], &[3.0, 0.0], 4.5).unwrap();
        term.backward().unwrap();
        let auto = x.grad_vec().unwrap();
        assert!((auto[0] - 13.0).abs() < 1e-12);
        assert!(auto[1].abs() < 1e-12);
        let delta = ctcl_feature_grad(&[1.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], 4.5, 1.0).unwrap();
        for (a, d) in auto.iter().zip(&delta) {
            assert!((a - 2.0 * d).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_grad_cancels_when_centers_coincide_at_m1() {
        // m=1 and c_pos == c_neg: (m-1)x - m c_pos + c_neg = 0 wherever the
        // hinge is active; here it never activates, which is the contract.
        let err = ctcl_feature_grad(&[1.0, 2.0], &[0.5, 0.5], &[0.5, 0.5], 1.0, 0.7);
        assert!(matches!(err, Err(Error::Contract(_))));
        // The closed form itself cancels:
        let x = [1.0, 2.0];
        let c = [0.5, 0.5];
        let manual: Vec<f64> = x
            .iter()
            .zip(c.iter().zip(c.iter()))
            .map(|(xi, (cp, cn))| 0.7 * ((1.0 - 1.0) * xi - 1.0 * cp + cn))
            .collect();
        assert_eq!(manual, vec![0.0, 0.0]);
    }

    #[test]
    fn feature_grad_rejects_inactive_samples() {
        let err = ctcl_feature_grad(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], 4.5, 1.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn center_update_positive_role() {
        // Single active sample, k = y_i: delta = eta * m * (x - c_pos).
        let mut bank = bank2d(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 4.5, 0.1);
        let samples = vec![SampleMetric {
            index: 0,
            label: 0,
            negative: 1,
            d_pos: 1.0,
            d_neg: 4.0,
            loss: 0.5,
            active: true,
        }];
        update_centers(&mut bank, &[1.0, 0.0], 2, &[0], &samples).unwrap();
        let c0 = bank.center(0);
        assert!((c0[0] - 0.45).abs() < 1e-12);
        assert_eq!(c0[1], 0.0);
        // Negative role on the same sample: delta = eta * (c_neg - x).
        let c1 = bank.center(1);
        assert!((c1[0] - (3.0 + 0.1 * (3.0 - 1.0))).abs() < 1e-12);
    }

    #[test]
    fn center_update_skips_inactive_batches() {
        let mut bank = bank2d(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 4.5, 0.1);
        let before = bank.centers().to_vec();
        let samples = vec![SampleMetric {
            index: 0,
            label: 0,
            negative: 1,
            d_pos: 0.0,
            d_neg: 9.0,
            loss: 0.0,
            active: false,
        }];
        update_centers(&mut bank, &[0.0, 0.0], 2, &[0], &samples).unwrap();
        assert_eq!(bank.centers(), before.as_slice());
    }

    #[test]
    fn center_update_rejects_out_of_range_classes() {
        let mut bank = bank2d(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 4.5, 0.1);
        let samples = vec![SampleMetric {
            index: 0,
            label: 0,
            negative: 7,
            d_pos: 1.0,
            d_neg: 4.0,
            loss: 0.5,
            active: true,
        }];
        assert!(matches!(
            update_centers(&mut bank, &[1.0, 0.0], 2, &[0], &samples),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn hinge_losses_are_nonnegative() {
        let mut rng = rng_from(3);
        for seed in 0..30u64 {
            let bank = CenterBank::seeded(5, 4, 4.5, 0.5, seed).unwrap();
            let features: Vec<f64> = (0..20).map(|_| standard_normal(&mut rng)).collect();
            let labels = vec![0, 1, 2, 3, 4];
            let r1 = tcl_loss(&features, 4, &labels, &bank).unwrap();
            let mut draw = rng_from(seed);
            let r2 = ctcl_loss(&features, 4, &labels, &bank, &mut draw).unwrap();
            for s in r1.samples.iter().chain(r2.samples.iter()) {
                assert!(s.loss >= 0.0);
                assert!(s.d_pos >= 0.0 && s.d_neg >= 0.0);
            }
        }
    }

    #[test]
    fn joint_loss_lambda_zero_is_pure_cross_entropy() {
        let logits = Tensor::param(&[4], vec![0.3, -0.1, 0.9, 0.0]).unwrap();
        let embedding = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bank = CenterBank::seeded(4, 3, 4.5, 0.5, 9).unwrap();
        let before = bank.centers().to_vec();
        let cfg = JointLossConfig::new(0.0, LossKind::Ctcl).unwrap();
        let mut rng = rng_from(4);
        let (loss, report) = joint_loss(&logits, &embedding, 2, &bank, &cfg, &mut rng).unwrap();
        let ce = logits.softmax_cross_entropy(2).unwrap().item().unwrap();
        assert_eq!(loss.item().unwrap(), ce);
        assert_eq!(report.metric, 0.0);
        loss.backward().unwrap();
        assert!(embedding.grad_vec().is_none());
        assert_eq!(bank.centers(), before.as_slice());
    }

    #[test]
    fn joint_loss_total_is_ce_plus_lambda_metric() {
        let logits = Tensor::param(&[4], vec![0.3, -0.1, 0.9, 0.0]).unwrap();
        let embedding = Tensor::param(&[3], vec![2.0, 0.0, 0.0]).unwrap();
        let centers = vec![vec![0.0; 3], vec![3.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0; 3]];
        let bank = CenterBank::new(
            centers.into_iter().flatten().collect(),
            4,
            3,
            4.5,
            0.5,
        )
        .unwrap();
        let cfg = JointLossConfig::new(0.024, LossKind::Ctcl).unwrap();
        let mut rng = rng_from(5);
        let (loss, report) = joint_loss(&logits, &embedding, 0, &bank, &cfg, &mut rng).unwrap();
        assert!(report.metric > 0.0, "pick a geometry with an active hinge");
        let expect = report.softmax + 0.024 * report.metric;
        assert!((loss.item().unwrap() - expect).abs() < 1e-15);
        assert!((report.total - expect).abs() < 1e-15);
    }

    #[test]
    fn report_serializes_the_step_schema() {
        let report = LossReport {
            softmax: 1.5,
            lambda: 0.024,
            metric: 2.0,
            total: 1.5 + 0.024 * 2.0,
            samples: vec![SampleMetric {
                index: 0,
                label: 1,
                negative: 0,
                d_pos: 0.5,
                d_neg: 4.0,
                loss: 2.0,
                active: true,
            }],
        };
        let v = report.jsonl_record(7);
        assert_eq!(v["step"], 7);
        assert_eq!(v["ce"], 1.5);
        assert!(v.get("mean_d_pos").is_some());
        assert!(v.get("active_fraction").is_some());
    }
}
