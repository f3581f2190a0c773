//! The full model: a 7x7 stride-2 front end, four stages of residual blocks
//! each wrapped by an inner skip projection, one long outer skip carrying a
//! 9x9 stride-8 projection scaled by `beta`, and a two-branch head that
//! yields class logits and the pooled embedding the metric loss supervises.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BasicBlock, BlockOptions, MultiScaleBlock, Projection};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Mode};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// One stage of the trunk: `blocks` residual blocks at `channels` width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub channels: usize,
    pub blocks: usize,
}

/// Which residual block variant fills the stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    MultiScale,
    Basic,
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub stages: Vec<StagePlan>,
    /// Branch weight / activation probability of the multi-scale blocks.
    pub alpha: f64,
    /// Scale on the outer shortcut. Zero disables the outer contribution
    /// (kept constructible as a boundary diagnostic).
    pub beta: f64,
    pub classes: usize,
    pub block_kind: BlockKind,
    pub inner_skips: bool,
    pub outer_skip: bool,
    pub batch_norm: bool,
    pub activation: bool,
}

impl NetworkConfig {
    /// The published architecture: 224x224 single-channel input, stages of
    /// 3/4/6/3 blocks at 64/128/256/512 channels, 250-way head.
    pub fn full(classes: usize) -> NetworkConfig {
        NetworkConfig {
            input_side: 224,
            input_channels: 1,
            stages: vec![
                StagePlan { channels: 64, blocks: 3 },
                StagePlan { channels: 128, blocks: 4 },
                StagePlan { channels: 256, blocks: 6 },
                StagePlan { channels: 512, blocks: 3 },
            ],
            alpha: 0.75,
            beta: 0.7,
            classes,
            block_kind: BlockKind::MultiScale,
            inner_skips: true,
            outer_skip: true,
            batch_norm: true,
            activation: true,
        }
    }

    /// Reduced variant that trains on a CPU in minutes: 64x64 input, stages
    /// of 2 blocks at 16/32/64/128 channels.
    pub fn desk(classes: usize) -> NetworkConfig {
        NetworkConfig {
            input_side: 64,
            stages: vec![
                StagePlan { channels: 16, blocks: 2 },
                StagePlan { channels: 32, blocks: 2 },
                StagePlan { channels: 64, blocks: 2 },
                StagePlan { channels: 128, blocks: 2 },
            ],
            ..NetworkConfig::full(classes)
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.stages.first().map_or(0, |s| s.channels)
    }

    pub fn embedding_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Spatial side after the front end (7x7 stride-2 pad-3 conv, then
    /// 3x3 stride-2 pad-1 max-pool).
    fn stem_out_side(&self) -> usize {
        let conv = (self.input_side + 2 * 3 - 7) / 2 + 1;
        (conv + 2 * 1 - 3) / 2 + 1
    }

    /// Spatial side after stage `i` (stride-2 transition per later stage).
    fn stage_side(&self, i: usize) -> usize {
        let mut side = self.stem_out_side();
        for _ in 0..i {
            side = (side + 2 - 3) / 2 + 1;
        }
        side
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0) {
            return Err(Error::Contract("stage plan must name nonempty stages".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Contract(format!("alpha must lie in (0,1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Contract(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        if self.classes == 0 {
            return Err(Error::Contract("at least one class required".into()));
        }
        if self.input_side < 9 || self.input_channels == 0 {
            return Err(Error::Contract(format!(
                "input {}x{}x{} too small for the front end",
                self.input_channels, self.input_side, self.input_side
            )));
        }
        let stem = self.stem_out_side();
        let trunk_out = self.stage_side(self.stages.len() - 1);
        if trunk_out == 0 {
            return Err(Error::Contract("stage plan collapses the spatial extent".into()));
        }
        if self.outer_skip {
            if stem + 2 < 9 {
                return Err(Error::Dimension(format!(
                    "outer projection window exceeds the {stem}x{stem} shallow features"
                )));
            }
            let proj_out = (stem + 2 - 9) / 8 + 1;
            if proj_out != trunk_out {
                return Err(Error::Dimension(format!(
                    "outer projection lands at {proj_out}x{proj_out} but the trunk ends at {trunk_out}x{trunk_out}"
                )));
            }
        }
        Ok(())
    }
}

/// Either residual block variant, behind one forward interface.
pub enum Block {
    Basic(BasicBlock),
    Multi(MultiScaleBlock),
}

impl Block {
    fn forward(&self, x: &Tensor, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        match self {
            Block::Basic(b) => b.forward(x, mode),
            Block::Multi(b) => match mode {
                Mode::Eval => b.forward_eval(x),
                Mode::Train => {
                    let rng = rng.ok_or_else(|| {
                        Error::Contract("training forward needs a branch sampler".into())
                    })?;
                    b.forward_train(x, rng)
                }
            },
        }
    }

    pub fn conv_weight_count(&self) -> usize {
        match self {
            Block::Basic(b) => b.conv_weight_count(),
            Block::Multi(b) => b.conv_weight_count(),
        }
    }

    /// True when input and output shapes coincide (no channel growth, no
    /// stride): the geometry the 1.5x parameter comparison is exact for.
    pub fn is_identity_shaped(&self) -> bool {
        match self {
            Block::Basic(b) => b.projection.is_none(),
            Block::Multi(b) => b.projection.is_none(),
        }
    }
}

/// One inner residual block: a stack of blocks plus the stage-level skip.
pub struct Stage {
    pub blocks: Vec<Block>,
    pub skip: Option<Projection>,
}

/// Logits and the embedding the metric loss supervises.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub embedding: Tensor,
}

pub struct Network {
    pub config: NetworkConfig,
    pub stem_conv: Conv2d,
    pub stem_bn: Option<BatchNorm2d>,
    pub stages: Vec<Stage>,
    pub outer: Option<Projection>,
    pub head_conv: Conv2d,
}

impl Network {
    /// Build with Kaiming-uniform weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let opts = BlockOptions {
            batch_norm: config.batch_norm,
            activation: config.activation,
        };

        let stem_channels = config.stem_channels();
        let stem_conv = Conv2d::new(
            config.input_channels,
            stem_channels,
            7,
            2,
            3,
            !config.batch_norm,
            &mut rng,
        );
        let stem_bn = config.batch_norm.then(|| BatchNorm2d::new(stem_channels));

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_channels = stem_channels;
        for (i, plan) in config.stages.iter().enumerate() {
            let stage_stride = if i == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(plan.blocks);
            let mut block_in = in_channels;
            for j in 0..plan.blocks {
                let stride = if j == 0 { stage_stride } else { 1 };
                let block = match config.block_kind {
                    BlockKind::MultiScale => Block::Multi(MultiScaleBlock::new(
                        block_in,
                        plan.channels,
                        stride,
                        config.alpha,
                        opts,
                        &mut rng,
                    )?),
                    BlockKind::Basic => Block::Basic(BasicBlock::new(
                        block_in,
                        plan.channels,
                        stride,
                        opts,
                        &mut rng,
                    )),
                };
                blocks.push(block);
                block_in = plan.channels;
            }
            let skip = config.inner_skips.then(|| {
                Projection::new(in_channels, plan.channels, 1, stage_stride, 0, opts, &mut rng)
            });
            stages.push(Stage { blocks, skip });
            in_channels = plan.channels;
        }

        let outer = config.outer_skip.then(|| {
            Projection::new(stem_channels, in_channels, 9, 8, 1, opts, &mut rng)
        });
        // Classifier conv is not followed by normalization, so it keeps a bias.
        let head_conv = Conv2d::new(in_channels, config.classes, 1, 1, 0, true, &mut rng);

        Ok(Network {
            config,
            stem_conv,
            stem_bn,
            stages,
            outer,
            head_conv,
        })
    }

    /// Shallow feature extraction: 7x7 stride-2 convolution, then 3x3
    /// stride-2 max pooling.
    pub fn front_end(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let expect = [self.config.input_channels, self.config.input_side, self.config.input_side];
        if x.shape() != expect {
            return Err(Error::Dimension(format!(
                "front end expects {:?}, got {:?}",
                expect,
                x.shape()
            )));
        }
        let t = self.stem_conv_forward(x, mode)?;
        t.maxpool2d(3, 2, 1)
    }

    fn stem_conv_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut t = self.stem_conv.forward(x)?;
        if let Some(bn) = &self.stem_bn {
            t = bn.forward(&t, mode)?;
        }
        if self.config.activation {
            t = t.relu();
        }
        Ok(t)
    }

    /// The hierarchical residual structure: stages with inner skips, then
    /// the beta-scaled outer shortcut added on top.
    pub fn hierarchical_forward(
        &self,
        shallow: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mut t = shallow.clone();
        for stage in &self.stages {
            let stage_input = t;
            let mut u = stage_input.clone();
            for block in &stage.blocks {
                u = block.forward(&u, mode, rng.as_deref_mut())?;
            }
            t = match &stage.skip {
                Some(skip) => u.add(&skip.forward(&stage_input, mode)?)?,
                None => u,
            };
        }
        if let Some(outer) = &self.outer {
            if self.config.beta != 0.0 {
                let projected = outer.forward(shallow, mode)?;
                t = t.add(&projected.scale(self.config.beta))?;
            }
        }
        Ok(t)
    }

    /// Two-branch head: a 1x1 convolution then full average pooling for the
    /// logits; full average pooling alone for the embedding.
    pub fn classify(&self, features: &Tensor) -> Result<ForwardOutput> {
        let side = match features.shape() {
            [_, h, w] if h == w => *h,
            s => {
                return Err(Error::Dimension(format!(
                    "classifier expects square [C,S,S] features, got {s:?}"
                )))
            }
        };
        let logits = self
            .head_conv
            .forward(features)?
            .avgpool2d(side, side)?
            .reshape(&[self.config.classes])?;
        let embedding = features
            .avgpool2d(side, side)?
            .reshape(&[features.shape()[0]])?;
        Ok(ForwardOutput { logits, embedding })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let shallow = self.front_end(x, mode)?;
        let deep = self.hierarchical_forward(&shallow, mode, rng.as_deref_mut())?;
        self.classify(&deep)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward(x, Mode::Eval, None)
    }

    pub fn forward_train(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        self.forward(x, Mode::Train, Some(rng))
    }

    /// Eval-mode walk that records every named intermediate shape.
    pub fn shape_trace(&self, x: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        let mut trace = Vec::new();
        let conv = self.stem_conv_forward(x, Mode::Eval)?;
        trace.push(("front.conv".into(), conv.shape().to_vec()));
        let shallow = conv.maxpool2d(3, 2, 1)?;
        trace.push(("front.pool".into(), shallow.shape().to_vec()));

        let mut t = shallow.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let stage_input = t;
            let mut u = stage_input.clone();
            for block in &stage.blocks {
                u = block.forward(&u, Mode::Eval, None)?;
            }
            t = match &stage.skip {
                Some(skip) => u.add(&skip.forward(&stage_input, Mode::Eval)?)?,
                None => u,
            };
            trace.push((format!("stage{}", i + 1), t.shape().to_vec()));
        }
        if let Some(outer) = &self.outer {
            let projected = outer.forward(&shallow, Mode::Eval)?;
            trace.push(("outer.projection".into(), projected.shape().to_vec()));
            if self.config.beta != 0.0 {
                t = t.add(&projected.scale(self.config.beta))?;
            }
        }
        let out = self.classify(&t)?;
        let branch1_conv = self.head_conv.forward(&t)?;
        trace.push(("head.branch1.conv".into(), branch1_conv.shape().to_vec()));
        trace.push(("head.branch1.logits".into(), out.logits.shape().to_vec()));
        trace.push(("head.branch2.embedding".into(), out.embedding.shape().to_vec()));
        Ok(trace)
    }

    /// Visit every trainable parameter with a stable, unique name.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        let conv = |f: &mut dyn FnMut(String, &Tensor), prefix: &str, c: &Conv2d| {
            f(format!("{prefix}.weight"), &c.weight);
            if let Some(b) = &c.bias {
                f(format!("{prefix}.bias"), b);
            }
        };
        let norm = |f: &mut dyn FnMut(String, &Tensor), prefix: &str, n: &Option<BatchNorm2d>| {
            if let Some(bn) = n {
                f(format!("{prefix}.gamma"), &bn.gamma);
                f(format!("{prefix}.beta"), &bn.beta);
            }
        };
        let proj = |f: &mut dyn FnMut(String, &Tensor), prefix: &str, p: &Projection| {
            conv(f, &format!("{prefix}.conv"), &p.conv);
            norm(f, &format!("{prefix}.bn"), &p.norm);
        };

        conv(f, "stem.conv", &self.stem_conv);
        norm(f, "stem.bn", &self.stem_bn);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{}.block{}", i + 1, j + 1);
                match block {
                    Block::Basic(b) => {
                        conv(f, &format!("{p}.conv1"), &b.conv1);
                        norm(f, &format!("{p}.bn1"), &b.bn1);
                        conv(f, &format!("{p}.conv2"), &b.conv2);
                        norm(f, &format!("{p}.bn2"), &b.bn2);
                        if let Some(pr) = &b.projection {
                            proj(f, &format!("{p}.proj"), pr);
                        }
                    }
                    Block::Multi(b) => {
                        conv(f, &format!("{p}.left1"), &b.left1);
                        norm(f, &format!("{p}.lbn1"), &b.lbn1);
                        conv(f, &format!("{p}.left2"), &b.left2);
                        norm(f, &format!("{p}.lbn2"), &b.lbn2);
                        conv(f, &format!("{p}.right"), &b.right);
                        norm(f, &format!("{p}.rbn"), &b.rbn);
                        if let Some(pr) = &b.projection {
                            proj(f, &format!("{p}.proj"), pr);
                        }
                    }
                }
            }
            if let Some(skip) = &stage.skip {
                proj(f, &format!("stage{}.skip", i + 1), skip);
            }
        }
        if let Some(outer) = &self.outer {
            proj(f, "outer", outer);
        }
        conv(f, "head.conv", &self.head_conv);
    }

    /// Visit every normalization layer (for running-statistics bookkeeping).
    pub fn visit_norms(&self, f: &mut dyn FnMut(String, &BatchNorm2d)) {
        let mut visit = |prefix: String, n: &Option<BatchNorm2d>| {
            if let Some(bn) = n {
                f(prefix, bn);
            }
        };
        visit("stem.bn".into(), &self.stem_bn);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{}.block{}", i + 1, j + 1);
                match block {
                    Block::Basic(b) => {
                        visit(format!("{p}.bn1"), &b.bn1);
                        visit(format!("{p}.bn2"), &b.bn2);
                        if let Some(pr) = &b.projection {
                            visit(format!("{p}.proj.bn"), &pr.norm);
                        }
                    }
                    Block::Multi(b) => {
                        visit(format!("{p}.lbn1"), &b.lbn1);
                        visit(format!("{p}.lbn2"), &b.lbn2);
                        visit(format!("{p}.rbn"), &b.rbn);
                        if let Some(pr) = &b.projection {
                            visit(format!("{p}.proj.bn"), &pr.norm);
                        }
                    }
                }
            }
            if let Some(skip) = &stage.skip {
                visit(format!("stage{}.skip.bn", i + 1), &skip.norm);
            }
        }
        if let Some(outer) = &self.outer {
            visit("outer.bn".into(), &outer.norm);
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Exact trainable-parameter total.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.len());
        total
    }

    /// Convolution weights inside the stage blocks (projections excluded).
    pub fn stage_conv_weight_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .map(Block::conv_weight_count)
            .sum()
    }

    /// Same count restricted to identity-shaped blocks, where the
    /// multi-scale/basic comparison is exact.
    pub fn identity_stage_conv_weight_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .filter(|b| b.is_identity_shaped())
            .map(Block::conv_weight_count)
            .sum()
    }

    pub fn zero_grad(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_validates() {
        NetworkConfig::full(250).validate().unwrap();
        NetworkConfig::desk(8).validate().unwrap();
    }

    #[test]
    fn bad_beta_is_rejected_but_zero_is_allowed() {
        let mut cfg = NetworkConfig::desk(8);
        cfg.beta = 0.0;
        cfg.validate().unwrap();
        cfg.beta = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_outer_projection_is_a_construction_error() {
        let mut cfg = NetworkConfig::desk(8);
        cfg.input_side = 48; // stem 12, trunk 12/6/3/2, projection 1x1
        assert!(matches!(Network::new(cfg, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn front_end_table2_shapes() {
        let net = Network::new(NetworkConfig::full(250), 0).unwrap();
        let x = Tensor::zeros(&[1, 224, 224]);
        let f = net.front_end(&x, Mode::Eval).unwrap();
        assert_eq!(f.shape(), &[64, 56, 56]);
    }

    #[test]
    fn front_end_rejects_wrong_channel_count() {
        let net = Network::new(NetworkConfig::desk(8), 0).unwrap();
        let x = Tensor::zeros(&[3, 64, 64]);
        assert!(matches!(net.front_end(&x, Mode::Eval), Err(Error::Dimension(_))));
    }

    #[test]
    fn front_end_zero_input_gives_zero_features() {
        let net = Network::new(NetworkConfig::desk(8), 0).unwrap();
        let x = Tensor::zeros(&[1, 64, 64]);
        let f = net.front_end(&x, Mode::Eval).unwrap();
        assert!(f.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn front_end_desk_side_with_full_stem() {
        // Full config at reduced input side: 1x64x64 -> 64x16x16.
        let mut cfg = NetworkConfig::full(250);
        cfg.input_side = 64;
        let net = Network::new(cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 64, 64]);
        let f = net.front_end(&x, Mode::Eval).unwrap();
        assert_eq!(f.shape(), &[64, 16, 16]);
    }

    #[test]
    fn desk_outer_projection_lands_on_trunk_shape() {
        let net = Network::new(NetworkConfig::desk(8), 0).unwrap();
        let x = Tensor::zeros(&[1, 64, 64]);
        let trace = net.shape_trace(&x).unwrap();
        let outer = trace.iter().find(|(n, _)| n == "outer.projection").unwrap();
        let stage4 = trace.iter().find(|(n, _)| n == "stage4").unwrap();
        assert_eq!(outer.1, stage4.1);
        assert_eq!(outer.1, vec![128, 2, 2]);
    }
}
