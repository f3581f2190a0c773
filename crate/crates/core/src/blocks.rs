//! Residual building blocks: the two-conv basic block and the two-branch
//! multi-scale block with randomized branch activation.
//!
//! In evaluation the multi-scale block fuses its branches,
//! `y = skip + alpha * F33(x) + (1 - alpha) * F3(x)`; in training exactly one
//! branch runs per forward pass, the two-conv branch with probability
//! `alpha`. The inactive branch is never evaluated, so it receives no
//! gradient and its normalization statistics stay untouched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Mode};
use crate::tensor::Tensor;

/// Structural toggles, mostly for tests that need a purely linear block.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub batch_norm: bool,
    pub activation: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            batch_norm: true,
            activation: true,
        }
    }
}

impl BlockOptions {
    /// No normalization, no activation: the block computes an affine map.
    pub fn linear() -> Self {
        BlockOptions {
            batch_norm: false,
            activation: false,
        }
    }
}

/// Convolutional projection used on skip paths when shape changes.
pub struct Projection {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl Projection {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        opts: BlockOptions,
        rng: &mut ChaCha8Rng,
    ) -> Projection {
        let conv = Conv2d::new(
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            !opts.batch_norm,
            rng,
        );
        let norm = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        Projection { conv, norm }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let t = self.conv.forward(x)?;
        match &self.norm {
            Some(bn) => bn.forward(&t, mode),
            None => Ok(t),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.as_ref().map_or(0, BatchNorm2d::param_count)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.conv.parameters();
        if let Some(bn) = &self.norm {
            v.extend(bn.parameters());
        }
        v
    }
}

fn conv_unit(
    conv: &Conv2d,
    norm: &Option<BatchNorm2d>,
    x: &Tensor,
    mode: Mode,
    relu_after: bool,
) -> Result<Tensor> {
    let mut t = conv.forward(x)?;
    if let Some(bn) = norm {
        t = bn.forward(&t, mode)?;
    }
    if relu_after {
        t = t.relu();
    }
    Ok(t)
}

/// Two stacked 3x3 convolutions with an identity (or projected) skip.
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm2d>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm2d>,
    pub projection: Option<Projection>,
    pub opts: BlockOptions,
}

impl BasicBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        opts: BlockOptions,
        rng: &mut ChaCha8Rng,
    ) -> BasicBlock {
        let conv1 = Conv2d::new(in_channels, out_channels, 3, stride, 1, !opts.batch_norm, rng);
        let bn1 = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        let conv2 = Conv2d::new(out_channels, out_channels, 3, 1, 1, !opts.batch_norm, rng);
        let bn2 = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        let projection = (in_channels != out_channels || stride != 1)
            .then(|| Projection::new(in_channels, out_channels, 1, stride, 0, opts, rng));
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
            opts,
        }
    }

    pub fn residual(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let t = conv_unit(&self.conv1, &self.bn1, x, mode, self.opts.activation)?;
        conv_unit(&self.conv2, &self.bn2, &t, mode, false)
    }

    fn skip(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match &self.projection {
            Some(p) => p.forward(x, mode),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let r = self.residual(x, mode)?;
        let s = self.skip(x, mode)?;
        let y = r.add(&s)?;
        Ok(if self.opts.activation { y.relu() } else { y })
    }

    /// Branch convolution weights, projection and norm excluded.
    pub fn conv_weight_count(&self) -> usize {
        self.conv1.weight_count() + self.conv2.weight_count()
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn1.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.bn2.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.projection.as_ref().map_or(0, Projection::param_count)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.conv1.parameters();
        if let Some(bn) = &self.bn1 {
            v.extend(bn.parameters());
        }
        v.extend(self.conv2.parameters());
        if let Some(bn) = &self.bn2 {
            v.extend(bn.parameters());
        }
        if let Some(p) = &self.projection {
            v.extend(p.parameters());
        }
        v
    }
}

/// Which branch of a multi-scale block ran during a training forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchChoice {
    /// The two-conv branch (weight `alpha`).
    Left,
    /// The single-conv branch (weight `1 - alpha`).
    Right,
}

/// Residual block with a two-conv branch and a one-conv branch.
pub struct MultiScaleBlock {
    pub left1: Conv2d,
    pub lbn1: Option<BatchNorm2d>,
    pub left2: Conv2d,
    pub lbn2: Option<BatchNorm2d>,
    pub right: Conv2d,
    pub rbn: Option<BatchNorm2d>,
    pub alpha: f64,
    pub projection: Option<Projection>,
    pub opts: BlockOptions,
}

impl MultiScaleBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        alpha: f64,
        opts: BlockOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<MultiScaleBlock> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Contract(format!(
                "branch weight alpha must lie in (0, 1], got {alpha}"
            )));
        }
        let left1 = Conv2d::new(in_channels, out_channels, 3, stride, 1, !opts.batch_norm, rng);
        let lbn1 = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        let left2 = Conv2d::new(out_channels, out_channels, 3, 1, 1, !opts.batch_norm, rng);
        let lbn2 = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        let right = Conv2d::new(in_channels, out_channels, 3, stride, 1, !opts.batch_norm, rng);
        let rbn = opts.batch_norm.then(|| BatchNorm2d::new(out_channels));
        let projection = (in_channels != out_channels || stride != 1)
            .then(|| Projection::new(in_channels, out_channels, 1, stride, 0, opts, rng));
        Ok(MultiScaleBlock {
            left1,
            lbn1,
            left2,
            lbn2,
            right,
            rbn,
            alpha,
            projection,
            opts,
        })
    }

    /// The two-conv branch `F33`.
    pub fn left_branch(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let t = conv_unit(&self.left1, &self.lbn1, x, mode, self.opts.activation)?;
        conv_unit(&self.left2, &self.lbn2, &t, mode, false)
    }

    /// The single-conv branch `F3`.
    pub fn right_branch(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        conv_unit(&self.right, &self.rbn, x, mode, false)
    }

    fn skip(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match &self.projection {
            Some(p) => p.forward(x, mode),
            None => Ok(x.clone()),
        }
    }

    /// Fused evaluation forward. At `alpha == 1` the right branch is skipped
    /// entirely, which makes the output bit-identical to a basic block that
    /// shares the left-branch weights.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let left = self.left_branch(x, Mode::Eval)?;
        let residual = if self.alpha == 1.0 {
            left
        } else {
            let right = self.right_branch(x, Mode::Eval)?;
            left.scale(self.alpha).add(&right.scale(1.0 - self.alpha))?
        };
        let y = residual.add(&self.skip(x, Mode::Eval)?)?;
        Ok(if self.opts.activation { y.relu() } else { y })
    }

    /// Bernoulli(`alpha`) branch draw used by the training forward.
    pub fn draw_branch(alpha: f64, rng: &mut ChaCha8Rng) -> BranchChoice {
        if rng.gen_bool(alpha) {
            BranchChoice::Left
        } else {
            BranchChoice::Right
        }
    }

    /// Training forward with a forced branch (the randomness factored out).
    pub fn forward_with_branch(&self, x: &Tensor, choice: BranchChoice) -> Result<Tensor> {
        let residual = match choice {
            BranchChoice::Left => self.left_branch(x, Mode::Train)?,
            BranchChoice::Right => self.right_branch(x, Mode::Train)?,
        };
        let y = residual.add(&self.skip(x, Mode::Train)?)?;
        Ok(if self.opts.activation { y.relu() } else { y })
    }

    /// Training forward: activate one branch at random.
    pub fn forward_train(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.forward_with_branch(x, Self::draw_branch(self.alpha, rng))
    }

    /// Branch convolution weights, projection and norm excluded.
    pub fn conv_weight_count(&self) -> usize {
        self.left1.weight_count() + self.left2.weight_count() + self.right.weight_count()
    }

    /// Convolution weights that participate when the given branch is active.
    pub fn active_conv_weight_count(&self, choice: BranchChoice) -> usize {
        match choice {
            BranchChoice::Left => self.left1.weight_count() + self.left2.weight_count(),
            BranchChoice::Right => self.right.weight_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.left1.param_count()
            + self.left2.param_count()
            + self.right.param_count()
            + self.lbn1.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.lbn2.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.rbn.as_ref().map_or(0, BatchNorm2d::param_count)
            + self.projection.as_ref().map_or(0, Projection::param_count)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut v = self.left1.parameters();
        if let Some(bn) = &self.lbn1 {
            v.extend(bn.parameters());
        }
        v.extend(self.left2.parameters());
        if let Some(bn) = &self.lbn2 {
            v.extend(bn.parameters());
        }
        v.extend(self.right.parameters());
        if let Some(bn) = &self.rbn {
            v.extend(bn.parameters());
        }
        if let Some(p) = &self.projection {
            v.extend(p.parameters());
        }
        v
    }

    /// Copy the left-branch (and projection) weights into a basic block of
    /// the same geometry, for equivalence checks.
    pub fn share_left_into(&self, basic: &BasicBlock) -> Result<()> {
        basic.conv1.weight.set_values(&self.left1.weight.to_vec())?;
        basic.conv2.weight.set_values(&self.left2.weight.to_vec())?;
        if let (Some(a), Some(b)) = (&self.left1.bias, &basic.conv1.bias) {
            b.set_values(&a.to_vec())?;
        }
        if let (Some(a), Some(b)) = (&self.left2.bias, &basic.conv2.bias) {
            b.set_values(&a.to_vec())?;
        }
        if let (Some(a), Some(b)) = (&self.lbn1, &basic.bn1) {
            b.gamma.set_values(&a.gamma.to_vec())?;
            b.beta.set_values(&a.beta.to_vec())?;
            b.set_running_stats(a.running_mean(), a.running_var());
        }
        if let (Some(a), Some(b)) = (&self.lbn2, &basic.bn2) {
            b.gamma.set_values(&a.gamma.to_vec())?;
            b.beta.set_values(&a.beta.to_vec())?;
            b.set_running_stats(a.running_mean(), a.running_var());
        }
        if let (Some(a), Some(b)) = (&self.projection, &basic.projection) {
            b.conv.weight.set_values(&a.conv.weight.to_vec())?;
            if let (Some(an), Some(bn)) = (&a.norm, &b.norm) {
                bn.gamma.set_values(&an.gamma.to_vec())?;
                bn.beta.set_values(&an.beta.to_vec())?;
                bn.set_running_stats(an.running_mean(), an.running_var());
            }
        }
        Ok(())
    }
}

/// Expected number of active parameters under random branch activation:
/// `n_p * (alpha + 1) / 2`, which lies in `[n_p / 2, n_p]`.
pub fn expected_active_params(n_p: usize, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "activation probability must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(n_p as f64 * (alpha + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn expected_active_params_formula() {
        assert_eq!(expected_active_params(1000, 0.6).unwrap(), 800.0);
        assert_eq!(expected_active_params(1000, 1.0).unwrap(), 1000.0);
        assert_eq!(expected_active_params(1000, 0.0).unwrap(), 500.0);
        assert!(expected_active_params(10, 1.5).is_err());
        assert!(expected_active_params(10, -0.1).is_err());
    }

    #[test]
    fn multi_scale_block_is_1_5x_basic_in_conv_weights() {
        let mut rng = rng_from(0);
        let basic = BasicBlock::new(64, 64, 1, BlockOptions::default(), &mut rng);
        let multi = MultiScaleBlock::new(64, 64, 1, 0.75, BlockOptions::default(), &mut rng).unwrap();
        // Counted independently: 2*(3*3*64*64) and 3*(3*3*64*64).
        assert_eq!(basic.conv_weight_count(), 73_728);
        assert_eq!(multi.conv_weight_count(), 110_592);
        assert!((multi.conv_weight_count() as f64 / basic.conv_weight_count() as f64 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn branch_shapes_agree() {
        let mut rng = rng_from(3);
        let block = MultiScaleBlock::new(8, 16, 2, 0.75, BlockOptions::default(), &mut rng).unwrap();
        let x = Tensor::zeros(&[8, 10, 10]);
        let l = block.left_branch(&x, Mode::Eval).unwrap();
        let r = block.right_branch(&x, Mode::Eval).unwrap();
        assert_eq!(l.shape(), r.shape());
        assert_eq!(l.shape(), &[16, 5, 5]);
    }

    #[test]
    fn alpha_one_matches_basic_block_bitwise() {
        let mut rng = rng_from(4);
        let multi = MultiScaleBlock::new(6, 6, 1, 1.0, BlockOptions::default(), &mut rng).unwrap();
        let basic = BasicBlock::new(6, 6, 1, BlockOptions::default(), &mut rng);
        multi.share_left_into(&basic).unwrap();

        let x = Tensor::new(&[6, 5, 5], (0..150).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ym = multi.forward_eval(&x).unwrap();
        let yb = basic.forward(&x, Mode::Eval).unwrap();
        let (vm, vb) = (ym.to_vec(), yb.to_vec());
        assert_eq!(vm.len(), vb.len());
        for (a, b) in vm.iter().zip(vb.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fused_output_combines_instrumented_branches() {
        let mut rng = rng_from(5);
        let block = MultiScaleBlock::new(4, 4, 1, 0.5, BlockOptions::linear(), &mut rng).unwrap();
        let x = Tensor::new(&[4, 6, 6], (0..144).map(|i| ((i * 7) % 13) as f64 * 0.1 - 0.6).collect())
            .unwrap();
        let a = block.left_branch(&x, Mode::Eval).unwrap().to_vec();
        let b = block.right_branch(&x, Mode::Eval).unwrap().to_vec();
        let y = block.forward_eval(&x).unwrap().to_vec();
        let skip = x.to_vec();
        for i in 0..y.len() {
            let expect = skip[i] + 0.5 * a[i] + 0.5 * b[i];
            assert!((y[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_branch_weights_pass_skip_through() {
        let mut rng = rng_from(6);
        let block = MultiScaleBlock::new(3, 3, 1, 0.5, BlockOptions::linear(), &mut rng).unwrap();
        for conv in [&block.left1, &block.left2, &block.right] {
            conv.weight.set_values(&vec![0.0; conv.weight.len()]).unwrap();
            if let Some(b) = &conv.bias {
                b.set_values(&vec![0.0; b.len()]).unwrap();
            }
        }
        let x = Tensor::new(&[3, 4, 4], (0..48).map(|i| i as f64 - 20.0).collect()).unwrap();
        assert_eq!(block.forward_eval(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn alpha_one_never_draws_right() {
        let mut rng = rng_from(7);
        for _ in 0..10_000 {
            assert_eq!(MultiScaleBlock::draw_branch(1.0, &mut rng), BranchChoice::Left);
        }
    }

    #[test]
    fn draw_frequency_tracks_alpha() {
        let mut rng = rng_from(8);
        let n = 100_000;
        let left = (0..n)
            .filter(|_| MultiScaleBlock::draw_branch(0.75, &mut rng) == BranchChoice::Left)
            .count();
        let freq = left as f64 / n as f64;
        assert!((0.745..=0.755).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn inactive_branch_gets_no_gradient() {
        let mut rng = rng_from(9);
        let block = MultiScaleBlock::new(3, 3, 1, 0.75, BlockOptions::default(), &mut rng).unwrap();
        let x = Tensor::new(&[3, 4, 4], (0..48).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let y = block.forward_with_branch(&x, BranchChoice::Left).unwrap();
        y.sum().unwrap().backward().unwrap();
        assert!(block.right.weight.grad_vec().is_none());
        assert_eq!(block.right.weight.grad_or_zeros(), vec![0.0; block.right.weight.len()]);
        assert!(block.left1.weight.grad_vec().is_some());
    }

    #[test]
    fn train_expectation_matches_eval_for_linear_block() {
        let mut rng = rng_from(10);
        let block = MultiScaleBlock::new(2, 2, 1, 0.7, BlockOptions::linear(), &mut rng).unwrap();
        let x = Tensor::new(&[2, 3, 3], (0..18).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let eval = block.forward_eval(&x).unwrap().to_vec();

        let mut draw_rng = rng_from(11);
        let n = 10_000;
        let mut mean = vec![0.0; eval.len()];
        for _ in 0..n {
            let y = block.forward_train(&x, &mut draw_rng).unwrap();
            for (m, v) in mean.iter_mut().zip(y.values().iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let err: f64 = mean
            .iter()
            .zip(eval.iter())
            .map(|(m, e)| (m - e) * (m - e))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = eval.iter().map(|e| e * e).sum::<f64>().sqrt();
        assert!(err / norm < 0.01, "relative deviation {}", err / norm);
    }

    #[test]
    fn monte_carlo_active_params_match_expectation() {
        let mut rng = rng_from(12);
        let block = MultiScaleBlock::new(64, 64, 1, 0.75, BlockOptions::default(), &mut rng).unwrap();
        let n_p = BasicBlock::new(64, 64, 1, BlockOptions::default(), &mut rng).conv_weight_count();
        for alpha in [0.25, 0.5, 0.75] {
            let mut draw_rng = rng_from(13);
            let n = 10_000;
            let total: usize = (0..n)
                .map(|_| block.active_conv_weight_count(MultiScaleBlock::draw_branch(alpha, &mut draw_rng)))
                .sum();
            let mean = total as f64 / n as f64;
            let expect = expected_active_params(n_p, alpha).unwrap();
            assert!(
                ((mean - expect) / expect).abs() < 0.01,
                "alpha {alpha}: mean {mean} vs expectation {expect}"
            );
        }
    }
}
