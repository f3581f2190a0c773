//! Forward operators and their backward rules.
//!
//! Convolution and the pools follow the usual shape law
//! `out = floor((in + 2*padding - kernel) / stride) + 1`. All kernels are
//! plain loops over flat buffers; the stride-1 inner loops are written over
//! contiguous rows so they vectorize.

use super::{Op, Tensor};
use crate::error::{Error, Result};

fn out_side(side: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if side + 2 * padding < kernel {
        return Err(Error::Dimension(format!(
            "window {} larger than padded input {} + 2*{}",
            kernel, side, padding
        )));
    }
    Ok((side + 2 * padding - kernel) / stride + 1)
}

fn check_chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Dimension(format!("{what} expects [C,H,W], got {s:?}"))),
    }
}

/// Valid output range along one axis for a fixed kernel offset `k_off`:
/// input index `o*stride + k_off - padding` must land in `[0, in_side)`.
fn valid_out_range(
    in_side: usize,
    out_side: usize,
    stride: usize,
    padding: usize,
    k_off: usize,
) -> (usize, usize) {
    if k_off > in_side - 1 + padding {
        return (0, 0);
    }
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = ((in_side - 1 + padding - k_off) / stride + 1).min(out_side);
    (lo, hi.max(lo))
}

impl Tensor {
    /// 2-D convolution of a `[C_in,H,W]` input with a `[C_out,C_in,k,k]`
    /// kernel. Differentiable w.r.t. input, weight and the optional bias.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (c_in, h, w) = check_chw(self, "conv2d input")?;
        let (c_out, w_cin, kh, kw) = match weight.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "conv2d weight expects [C_out,C_in,k,k], got {s:?}"
                )))
            }
        };
        if kh != kw {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be square, got {kh}x{kw}"
            )));
        }
        if w_cin != c_in {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c_in}, weight expects {w_cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::Dimension(format!(
                    "conv2d bias expects [{c_out}], got {:?}",
                    b.shape()
                )));
            }
        }
        let k = kh;
        let h_out = out_side(h, k, stride, padding)?;
        let w_out = out_side(w, k, stride, padding)?;

        let x = self.values();
        let wt = weight.values();
        let mut out = vec![0.0; c_out * h_out * w_out];
        if let Some(b) = bias {
            let bv = b.values();
            for co in 0..c_out {
                out[co * h_out * w_out..(co + 1) * h_out * w_out].fill(bv[co]);
            }
        }

        for co in 0..c_out {
            let out_ch = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
            for ci in 0..c_in {
                let in_ch = &x[ci * h * w..(ci + 1) * h * w];
                let w_base = (co * c_in + ci) * k * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(h, h_out, stride, padding, ky);
                    for kx in 0..k {
                        let wv = wt[w_base + ky * k + kx];
                        let (ox_lo, ox_hi) = valid_out_range(w, w_out, stride, padding, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_ch[iy * w..iy * w + w];
                            let out_row = &mut out_ch[oy * w_out..oy * w_out + w_out];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let span = ox_hi - ox_lo;
                                let src = &in_row[ix0..ix0 + span];
                                for (o, i) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);

        let requires = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        Ok(Tensor::from_op(
            vec![c_out, h_out, w_out],
            out,
            requires,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Max pooling; gradient routes to the window winner only, ties broken
    /// by the lowest flat input index. Padding cells never win.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (c, h, w) = check_chw(self, "maxpool2d input")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Contract("maxpool2d kernel/stride must be positive".into()));
        }
        if padding >= kernel {
            return Err(Error::Contract(format!(
                "maxpool2d padding {padding} must be smaller than kernel {kernel}"
            )));
        }
        let h_out = out_side(h, kernel, stride, padding)?;
        let w_out = out_side(w, kernel, stride, padding)?;

        let x = self.values();
        let mut out = vec![0.0; c * h_out * w_out];
        let mut argmax = vec![0usize; c * h_out * w_out];
        for ch in 0..c {
            let in_ch = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = oy * stride + ky;
                        if iy < padding || iy >= h + padding {
                            continue;
                        }
                        let iy = iy - padding;
                        for kx in 0..kernel {
                            let ix = ox * stride + kx;
                            if ix < padding || ix >= w + padding {
                                continue;
                            }
                            let ix = ix - padding;
                            let v = in_ch[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    let o = oy * w_out + ox;
                    out[ch * h_out * w_out + o] = best;
                    argmax[ch * h_out * w_out + o] = ch * h * w + best_idx;
                }
            }
        }
        drop(x);

        let requires = self.requires_grad();
        Ok(Tensor::from_op(
            vec![c, h_out, w_out],
            out,
            requires,
            Op::MaxPool2d {
                input: self.clone(),
                argmax,
            },
        ))
    }

    /// Average pooling without padding; each cell is the window mean.
    pub fn avgpool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (c, h, w) = check_chw(self, "avgpool2d input")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Contract("avgpool2d kernel/stride must be positive".into()));
        }
        let h_out = out_side(h, kernel, stride, 0)?;
        let w_out = out_side(w, kernel, stride, 0)?;
        let norm = 1.0 / (kernel * kernel) as f64;

        let x = self.values();
        let mut out = vec![0.0; c * h_out * w_out];
        for ch in 0..c {
            let in_ch = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = &in_ch[(oy * stride + ky) * w..][ox * stride..ox * stride + kernel];
                        acc += row.iter().sum::<f64>();
                    }
                    out[ch * h_out * w_out + oy * w_out + ox] = acc * norm;
                }
            }
        }
        drop(x);

        let requires = self.requires_grad();
        Ok(Tensor::from_op(
            vec![c, h_out, w_out],
            out,
            requires,
            Op::AvgPool2d {
                input: self.clone(),
                kernel,
                stride,
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::Relu { input: self.clone() },
        )
    }

    fn binary_values(&self, other: &Tensor, what: &str) -> Result<(Vec<f64>, bool)> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what} on unequal shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.values();
        let b = other.values();
        let out: Vec<f64> = match what {
            "add" => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
            "sub" => a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(),
            _ => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
        };
        Ok((out, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (out, requires) = self.binary_values(other, "add")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            requires,
            Op::Add {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (out, requires) = self.binary_values(other, "sub")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            requires,
            Op::Sub {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (out, requires) = self.binary_values(other, "mul")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            requires,
            Op::Mul {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::Scale {
                input: self.clone(),
                factor,
            },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.values().iter().sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            self.requires_grad(),
            Op::Sum { input: self.clone() },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            self.requires_grad(),
            Op::Reshape { input: self.clone() },
        ))
    }

    /// Per-channel normalization of a `[C,H,W]` tensor followed by the
    /// affine `gamma * xhat + beta`. In [`BnMode::Batch`] the statistics come
    /// from the tensor itself and are returned so the caller can maintain
    /// running estimates; in [`BnMode::Running`] the provided estimates are
    /// used and treated as constants.
    pub fn batchnorm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        let (c, h, w) = check_chw(self, "batchnorm input")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Dimension(format!(
                "batchnorm affine expects [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let spatial = h * w;
        let x = self.values();
        let (mean, var, batch_stats) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let xs = &x[ch * spatial..(ch + 1) * spatial];
                    let m = xs.iter().sum::<f64>() / spatial as f64;
                    let v = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / spatial as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, true)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "batchnorm running stats expect {c} channels, got {}/{}",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };

        let gv = gamma.values();
        let bv = beta.values();
        let mut xhat = vec![0.0; c * spatial];
        let mut out = vec![0.0; c * spatial];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let is = 1.0 / (var[ch] + eps).sqrt();
            inv_std[ch] = is;
            let m = mean[ch];
            let (g, b) = (gv[ch], bv[ch]);
            let xs = &x[ch * spatial..(ch + 1) * spatial];
            let xh = &mut xhat[ch * spatial..(ch + 1) * spatial];
            let os = &mut out[ch * spatial..(ch + 1) * spatial];
            for i in 0..spatial {
                let n = (xs[i] - m) * is;
                xh[i] = n;
                os[i] = g * n + b;
            }
        }
        drop(x);
        drop(gv);
        drop(bv);

        let requires = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let stats = batch_stats.then(|| (mean, var));
        Ok((
            Tensor::from_op(
                self.shape().to_vec(),
                out,
                requires,
                Op::BatchNorm {
                    input: self.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ),
            stats,
        ))
    }

    /// `-log(softmax(logits)[label])` as a scalar tensor.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Tensor> {
        let n = match self.shape() {
            [n] => *n,
            s => {
                return Err(Error::Dimension(format!(
                    "softmax_cross_entropy expects a logit vector, got {s:?}"
                )))
            }
        };
        if label >= n {
            return Err(Error::Index(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let z = self.values();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut softmax = vec![0.0; n];
        let mut denom = 0.0;
        for i in 0..n {
            let e = (z[i] - zmax).exp();
            softmax[i] = e;
            denom += e;
        }
        for s in softmax.iter_mut() {
            *s /= denom;
        }
        let loss = denom.ln() - (z[label] - zmax);
        drop(z);

        let requires = self.requires_grad();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            requires,
            Op::SoftmaxCrossEntropy {
                logits: self.clone(),
                label,
                softmax,
            },
        ))
    }
}

/// Apply the backward rule of `t`'s producing op, pushing `t`'s gradient to
/// its operands. Contributions are computed first and applied afterwards so
/// an op whose operands alias (e.g. `x.mul(&x)`) accumulates both halves.
pub(super) fn backward_step(t: &Tensor) {
    let g = match t.node.data.borrow().grad.clone() {
        Some(g) => g,
        None => return,
    };
    match &t.node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (d_in, d_w, d_b) = conv2d_backward(&g, t, input, weight, bias.is_some(), *stride, *padding);
            if input.requires_grad() {
                input.accumulate_grad(&d_in);
            }
            if weight.requires_grad() {
                weight.accumulate_grad(&d_w);
            }
            if let Some(b) = bias {
                if b.requires_grad() {
                    b.accumulate_grad(&d_b);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if input.requires_grad() {
                let mut d_in = vec![0.0; input.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    d_in[src] += g[o];
                }
                input.accumulate_grad(&d_in);
            }
        }
        Op::AvgPool2d {
            input,
            kernel,
            stride,
        } => {
            if input.requires_grad() {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (h_out, w_out) = (t.shape()[1], t.shape()[2]);
                let norm = 1.0 / (kernel * kernel) as f64;
                let mut d_in = vec![0.0; input.len()];
                for ch in 0..c {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let gv = g[ch * h_out * w_out + oy * w_out + ox] * norm;
                            for ky in 0..*kernel {
                                let base = ch * h * w + (oy * stride + ky) * w + ox * stride;
                                for d in d_in[base..base + kernel].iter_mut() {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                input.accumulate_grad(&d_in);
            }
        }
        Op::Relu { input } => {
            if input.requires_grad() {
                let x = input.values();
                let d_in: Vec<f64> = x
                    .iter()
                    .zip(g.iter())
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                drop(x);
                input.accumulate_grad(&d_in);
            }
        }
        Op::Add { lhs, rhs } => {
            if lhs.requires_grad() {
                lhs.accumulate_grad(&g);
            }
            if rhs.requires_grad() {
                rhs.accumulate_grad(&g);
            }
        }
        Op::Sub { lhs, rhs } => {
            if lhs.requires_grad() {
                lhs.accumulate_grad(&g);
            }
            if rhs.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                rhs.accumulate_grad(&neg);
            }
        }
        Op::Mul { lhs, rhs } => {
            let d_l = rhs.values().iter().zip(g.iter()).map(|(r, g)| r * g).collect::<Vec<_>>();
            let d_r = lhs.values().iter().zip(g.iter()).map(|(l, g)| l * g).collect::<Vec<_>>();
            if lhs.requires_grad() {
                lhs.accumulate_grad(&d_l);
            }
            if rhs.requires_grad() {
                rhs.accumulate_grad(&d_r);
            }
        }
        Op::Scale { input, factor } => {
            if input.requires_grad() {
                let d_in: Vec<f64> = g.iter().map(|v| v * factor).collect();
                input.accumulate_grad(&d_in);
            }
        }
        Op::Sum { input } => {
            if input.requires_grad() {
                input.accumulate_grad(&vec![g[0]; input.len()]);
            }
        }
        Op::Reshape { input } => {
            if input.requires_grad() {
                input.accumulate_grad(&g);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = gamma.len();
            let spatial = input.len() / c;
            let gv = gamma.values().to_vec();

            let mut d_gamma = vec![0.0; c];
            let mut d_beta = vec![0.0; c];
            for ch in 0..c {
                for i in 0..spatial {
                    let idx = ch * spatial + i;
                    d_gamma[ch] += g[idx] * xhat[idx];
                    d_beta[ch] += g[idx];
                }
            }
            let d_in = if *batch_stats {
                // Both mean and variance depend on x.
                let n = spatial as f64;
                let mut d_in = vec![0.0; input.len()];
                for ch in 0..c {
                    let sum_dxhat: f64 = (0..spatial).map(|i| g[ch * spatial + i] * gv[ch]).sum();
                    let sum_dxhat_xhat: f64 = (0..spatial)
                        .map(|i| g[ch * spatial + i] * gv[ch] * xhat[ch * spatial + i])
                        .sum();
                    let is = inv_std[ch];
                    for i in 0..spatial {
                        let idx = ch * spatial + i;
                        let dxhat = g[idx] * gv[ch];
                        d_in[idx] = is / n * (n * dxhat - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                    }
                }
                d_in
            } else {
                // Running statistics are constants.
                let mut d_in = vec![0.0; input.len()];
                for ch in 0..c {
                    let scale = gv[ch] * inv_std[ch];
                    for i in 0..spatial {
                        let idx = ch * spatial + i;
                        d_in[idx] = g[idx] * scale;
                    }
                }
                d_in
            };
            if input.requires_grad() {
                input.accumulate_grad(&d_in);
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(&d_gamma);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(&d_beta);
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            label,
            softmax,
        } => {
            if logits.requires_grad() {
                let mut d = softmax.clone();
                d[*label] -= 1.0;
                for v in d.iter_mut() {
                    *v *= g[0];
                }
                logits.accumulate_grad(&d);
            }
        }
    }
}

fn conv2d_backward(
    g: &[f64],
    out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, h_out, w_out) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    let k = weight.shape()[2];

    let x = input.values();
    let wt = weight.values();
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; if has_bias { c_out } else { 0 }];

    if has_bias {
        for co in 0..c_out {
            d_b[co] = g[co * h_out * w_out..(co + 1) * h_out * w_out].iter().sum();
        }
    }

    for co in 0..c_out {
        let g_ch = &g[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..c_in {
            let in_ch = &x[ci * h * w..(ci + 1) * h * w];
            let din_ch = &mut d_in[ci * h * w..(ci + 1) * h * w];
            let w_base = (co * c_in + ci) * k * k;
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_out_range(h, h_out, stride, padding, ky);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_out_range(w, w_out, stride, padding, kx);
                    if ox_lo >= ox_hi || oy_lo >= oy_hi {
                        continue;
                    }
                    let wv = wt[w_base + ky * k + kx];
                    let mut dw_acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let g_row = &g_ch[oy * w_out..oy * w_out + w_out];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let span = ox_hi - ox_lo;
                            let in_row = &in_ch[iy * w + ix0..iy * w + ix0 + span];
                            let din_row = &mut din_ch[iy * w + ix0..iy * w + ix0 + span];
                            for ((gv, iv), dv) in
                                g_row[ox_lo..ox_hi].iter().zip(in_row).zip(din_row)
                            {
                                dw_acc += gv * iv;
                                *dv += gv * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - padding;
                                let gv = g_row[ox];
                                dw_acc += gv * in_ch[iy * w + ix];
                                din_ch[iy * w + ix] += gv * wv;
                            }
                        }
                    }
                    d_w[w_base + ky * k + kx] += dw_acc;
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Statistics source for [`Tensor::batchnorm`].
pub enum BnMode<'a> {
    /// Normalize with the tensor's own per-channel statistics.
    Batch,
    /// Normalize with externally maintained estimates.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn conv_front_end_shape() {
        let x = Tensor::zeros(&[1, 224, 224]);
        let w = Tensor::zeros(&[64, 1, 7, 7]);
        let y = x.conv2d(&w, None, 2, 3).unwrap();
        assert_eq!(y.shape(), &[64, 112, 112]);
    }

    #[test]
    fn conv_outer_projection_shape() {
        let x = Tensor::zeros(&[64, 56, 56]);
        let w = Tensor::zeros(&[512, 64, 9, 9]);
        let y = x.conv2d(&w, None, 8, 1).unwrap();
        assert_eq!(y.shape(), &[512, 7, 7]);
    }

    #[test]
    fn conv_identity_1x1() {
        let x = t(&[1, 1, 1], vec![5.0]);
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.to_vec(), vec![5.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(matches!(x.conv2d(&w, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_known_values() {
        // 1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no padding:
        // each output cell sums its 2x2 window.
        let x = t(&[1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn maxpool_table2_shape() {
        let x = Tensor::zeros(&[64, 112, 112]);
        let y = x.maxpool2d(3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[64, 56, 56]);
    }

    #[test]
    fn maxpool_enumerated_window() {
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.maxpool2d(2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.to_vec(), vec![4.0]);
    }

    #[test]
    fn maxpool_constant_ties_route_to_first_index() {
        let x = Tensor::param(&[1, 4, 4], vec![1.0; 16]).unwrap();
        let y = x.maxpool2d(2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![1.0; 4]);
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        // One winner per window, at the window's lowest flat index.
        let expect: Vec<f64> = (0..16)
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 }
            })
            .collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(x.maxpool2d(5, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn avgpool_reduces_7x7_to_vector() {
        let x = Tensor::zeros(&[250, 7, 7]);
        let y = x.avgpool2d(7, 7).unwrap();
        assert_eq!(y.shape(), &[250, 1, 1]);
        let x = Tensor::zeros(&[512, 7, 7]);
        assert_eq!(x.avgpool2d(7, 7).unwrap().shape(), &[512, 1, 1]);
    }

    #[test]
    fn avgpool_all_ones_window() {
        let x = t(&[1, 7, 7], vec![1.0; 49]);
        let y = x.avgpool2d(7, 7).unwrap();
        assert_eq!(y.to_vec(), vec![1.0]);
    }

    #[test]
    fn relu_values() {
        let x = t(&[2], vec![-1.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn scale_multiplies_everything() {
        let x = t(&[3], vec![1.0, -2.0, 4.0]);
        assert_eq!(x.scale(0.7).to_vec(), vec![0.7, -1.4, 2.8]);
    }

    #[test]
    fn add_rejects_unequal_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn batchnorm_zero_variance_channel() {
        let x = t(&[1, 2, 2], vec![3.0; 4]);
        let gamma = t(&[1], vec![1.0]);
        let beta = t(&[1], vec![0.0]);
        let (y, stats) = x.batchnorm(&gamma, &beta, 1e-5, BnMode::Batch).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 4]);
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![3.0]);
        assert_eq!(var, vec![0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = t(&[250], vec![0.0; 250]);
        let loss = x.softmax_cross_entropy(0).unwrap().item().unwrap();
        assert!((loss - 250.0_f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5215).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_dominant_class_goes_to_zero() {
        let mut z = vec![0.0; 10];
        z[3] = 60.0;
        let x = t(&[10], z);
        let loss = x.softmax_cross_entropy(3).unwrap().item().unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let x = t(&[4], vec![0.0; 4]);
        assert!(matches!(x.softmax_cross_entropy(4), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let x = Tensor::param(&[3], vec![0.2, -0.4, 1.1]).unwrap();
        let loss = x.softmax_cross_entropy(2).unwrap();
        loss.backward().unwrap();
        let z = x.to_vec();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let g = x.grad_vec().unwrap();
        for i in 0..3 {
            let expect = exps[i] / denom - if i == 2 { 1.0 } else { 0.0 };
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }
}
