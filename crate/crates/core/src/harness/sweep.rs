//! Hyper-parameter sweeps and matched-seed ablations over desk-scale runs.

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig};
use crate::data::SketchSample;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::BlockKind;

/// The published stability band for the margin sweep.
pub const MARGIN_STABLE_RANGE: (f64, f64) = (2.5, 5.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Margin,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<SweepParam> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(SweepParam::Beta),
            "m" | "margin" => Ok(SweepParam::Margin),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::Contract(format!("unknown sweep parameter {other}"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::Beta => write!(f, "beta"),
            SweepParam::Margin => write!(f, "margin"),
            SweepParam::Alpha => write!(f, "alpha"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Inside the published stability band (margin sweeps only).
    pub stable: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub best_value: f64,
    pub stable_range: Option<(f64, f64)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},train_acc,test_acc,stable\n", self.param);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.value,
                r.train_acc,
                r.test_acc,
                r.stable.map_or(String::new(), |s| s.to_string())
            ));
        }
        out.push_str(&format!("# best_{}={}\n", self.param, self.best_value));
        if let Some((lo, hi)) = self.stable_range {
            out.push_str(&format!("# stable_range=[{lo},{hi}]\n"));
        }
        out
    }
}

fn apply_param(cfg: &mut TrainConfig, param: SweepParam, value: f64) {
    match param {
        SweepParam::Beta => cfg.net.beta = value,
        SweepParam::Margin => cfg.margin = value,
        SweepParam::Alpha => cfg.net.alpha = value,
    }
}

/// Train one run per value on a shared seed and report the accuracy table
/// plus the argmax value.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    base: &TrainConfig,
    train_set: &[SketchSample],
    val_set: &[SketchSample],
    test_set: &[SketchSample],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Contract("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        apply_param(&mut cfg, param, value);
        let result = train(train_set, val_set, &cfg)?;
        let train_acc = result
            .record
            .epochs
            .last()
            .map(|e| e.train_acc)
            .unwrap_or(0.0);
        let test_acc = evaluate(&result.network, test_set)?.accuracy;
        let stable = (param == SweepParam::Margin)
            .then(|| value >= MARGIN_STABLE_RANGE.0 && value <= MARGIN_STABLE_RANGE.1);
        rows.push(SweepRow {
            value,
            train_acc,
            test_acc,
            stable,
        });
    }
    let best_value = rows
        .iter()
        .max_by(|a, b| a.test_acc.partial_cmp(&b.test_acc).unwrap())
        .map(|r| r.value)
        .unwrap();
    Ok(SweepResult {
        param,
        rows,
        best_value,
        stable_range: (param == SweepParam::Margin).then_some(MARGIN_STABLE_RANGE),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Block,
    ResidualLevel,
    Loss,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<AblationKind> {
        match s.to_ascii_lowercase().as_str() {
            "block" => Ok(AblationKind::Block),
            "residual-level" | "residual" => Ok(AblationKind::ResidualLevel),
            "loss" => Ok(AblationKind::Loss),
            other => Err(Error::Contract(format!("unknown ablation kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,train_acc,test_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.variant, r.train_acc, r.test_acc));
    }
    out
}

/// Matched-seed comparisons: block kind, residual levels, or loss kind.
pub fn ablate(
    kind: AblationKind,
    base: &TrainConfig,
    train_set: &[SketchSample],
    val_set: &[SketchSample],
    test_set: &[SketchSample],
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, TrainConfig)> = match kind {
        AblationKind::Block => {
            let mut basic = base.clone();
            basic.net.block_kind = BlockKind::Basic;
            let mut multi = base.clone();
            multi.net.block_kind = BlockKind::MultiScale;
            vec![
                ("basic-block".into(), basic),
                ("multi-scale-block".into(), multi),
            ]
        }
        AblationKind::ResidualLevel => {
            let mut inner_only = base.clone();
            inner_only.net.outer_skip = false;
            let mut outer_only = base.clone();
            outer_only.net.inner_skips = false;
            let both = base.clone();
            vec![
                ("inner-residual-only".into(), inner_only),
                ("outer-residual-only".into(), outer_only),
                ("inner-and-outer".into(), both),
            ]
        }
        AblationKind::Loss => {
            let mut tcl = base.clone();
            tcl.loss = LossKind::Tcl;
            tcl.selection = LossKind::Tcl.default_selection();
            tcl.margin = 5.0;
            let mut ctcl = base.clone();
            ctcl.loss = LossKind::Ctcl;
            ctcl.selection = LossKind::Ctcl.default_selection();
            ctcl.margin = 4.5;
            vec![
                ("triplet-center-loss".into(), tcl),
                ("compact-triplet-center-loss".into(), ctcl),
            ]
        }
    };

    let mut rows = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let result = train(train_set, val_set, &cfg)?;
        let train_acc = result
            .record
            .epochs
            .last()
            .map(|e| e.train_acc)
            .unwrap_or(0.0);
        let test_acc = evaluate(&result.network, test_set)?.accuracy;
        rows.push(AblationRow {
            variant: name,
            train_acc,
            test_acc,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_sketches;
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
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn empty_sweep_is_a_contract_error() {
        let data = generate_synthetic_sketches(2, 4, 32, 1).unwrap();
        let cfg = tiny_config(2);
        assert!(matches!(
            sweep(SweepParam::Beta, &[], &cfg, &data.samples, &[], &data.samples),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_value_sweep_degenerates_to_train_eval() {
        let data = generate_synthetic_sketches(2, 4, 32, 2).unwrap();
        let cfg = tiny_config(2);
        let result = sweep(SweepParam::Beta, &[0.7], &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(result.rows.len(), 1);
        assert_eq!(result.best_value, 0.7);
    }

    #[test]
    fn beta_sweep_covers_the_boundaries() {
        let data = generate_synthetic_sketches(2, 4, 32, 3).unwrap();
        let cfg = tiny_config(2);
        let values = [0.0, 0.7, 1.0];
        let result = sweep(SweepParam::Beta, &values, &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(result.rows.len(), 3);
        assert_eq!(result.rows[0].value, 0.0);
        assert_eq!(result.rows[2].value, 1.0);
    }

    #[test]
    fn margin_sweep_flags_the_stable_band() {
        let data = generate_synthetic_sketches(2, 4, 32, 4).unwrap();
        let mut cfg = tiny_config(2);
        cfg.max_steps = Some(1);
        let values = [1.0, 2.5, 4.5, 5.5, 7.0];
        let result = sweep(SweepParam::Margin, &values, &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(result.stable_range, Some(MARGIN_STABLE_RANGE));
        let flags: Vec<bool> = result.rows.iter().map(|r| r.stable.unwrap()).collect();
        assert_eq!(flags, vec![false, true, true, true, false]);
    }

    #[test]
    fn loss_ablation_emits_the_published_margins() {
        let data = generate_synthetic_sketches(2, 4, 32, 5).unwrap();
        let mut cfg = tiny_config(2);
        cfg.max_steps = Some(1);
        let rows = ablate(AblationKind::Loss, &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].variant.contains("triplet-center"));
    }

    #[test]
    fn residual_ablation_builds_three_variants() {
        let data = generate_synthetic_sketches(2, 4, 32, 6).unwrap();
        let mut cfg = tiny_config(2);
        cfg.max_steps = Some(1);
        let rows = ablate(AblationKind::ResidualLevel, &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn identical_configs_have_zero_delta() {
        let data = generate_synthetic_sketches(2, 4, 32, 7).unwrap();
        let cfg = tiny_config(2);
        let a = sweep(SweepParam::Beta, &[0.7], &cfg, &data.samples, &[], &data.samples).unwrap();
        let b = sweep(SweepParam::Beta, &[0.7], &cfg, &data.samples, &[], &data.samples).unwrap();
        assert_eq!(a.rows[0].test_acc, b.rows[0].test_acc);
        assert_eq!(a.rows[0].train_acc, b.rows[0].train_acc);
    }
}
