//! Central finite-difference gradient checking for every operator.
//!
//! The checker only ever calls *forward* evaluations, so it stays independent
//! of the backward rules it is judging.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::rng_from;
use crate::tensor::{BnMode, Tensor};

/// Default probe step for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Default elementwise relative-error tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one operator/operand check.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - b| / max(|a| + |b|, guard)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compare autodiff gradients of `forward` against central differences over
/// every element of every input. Returns the worst elementwise rel. error.
///
/// `forward` must be a pure function of the input tensors.
pub fn compare_gradients<F>(inputs: &[Vec<f64>], shapes: &[Vec<usize>], forward: F, step: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    assert_eq!(inputs.len(), shapes.len());
    let params: Vec<Tensor> = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::param(s, v.clone()).expect("gradcheck input"))
        .collect();
    let loss = forward(&params);
    loss.backward().expect("gradcheck backward");
    let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let eval = |probe: &[Vec<f64>]| -> f64 {
        let leaves: Vec<Tensor> = probe
            .iter()
            .zip(shapes)
            .map(|(v, s)| Tensor::new(s, v.clone()).expect("gradcheck probe"))
            .collect();
        forward(&leaves).item().expect("gradcheck scalar")
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Vec<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            probe[i][j] = input[j] + step;
            let up = eval(&probe);
            probe[i][j] = input[j] - step;
            let down = eval(&probe);
            probe[i][j] = input[j];
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_error(fd, grads[i][j]));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so relu/max kinks are not straddled by the
/// probe step.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect()
}

/// Random weighting collapses a tensor output to a scalar without the
/// symmetry a plain sum would introduce.
fn weighted_sum(t: &Tensor, weights: &[f64]) -> Tensor {
    let w = Tensor::new(&[t.len()], weights.to_vec()).unwrap();
    t.reshape(&[t.len()]).unwrap().mul(&w).unwrap().sum().unwrap()
}

/// Run the full operator suite over `seeds` random draws.
pub fn operator_suite(seeds: usize, step: f64, tolerance: f64) -> Vec<OpCheck> {
    let mut results = Vec::new();
    let mut run = |op: &'static str, f: &dyn Fn(u64) -> f64| {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(f(s as u64));
        }
        results.push(OpCheck {
            op,
            seeds,
            max_rel_error: worst,
            tolerance,
        });
    };

    run("conv2d", &|seed| {
        let mut rng = rng_from(seed);
        let (ci, co, k, h, w) = (2, 3, 3, 6, 5);
        let x = uniform(&mut rng, ci * h * w, -1.0, 1.0);
        let wt = uniform(&mut rng, co * ci * k * k, -0.5, 0.5);
        let b = uniform(&mut rng, co, -0.5, 0.5);
        let coeff = uniform(&mut rng, co * 6 * 5, -1.0, 1.0);
        compare_gradients(
            &[x, wt, b],
            &[vec![ci, h, w], vec![co, ci, k, k], vec![co]],
            |t| {
                let y = t[0].conv2d(&t[1], Some(&t[2]), 1, 1).unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("conv2d/strided", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(101));
        let (ci, co, k, h, w) = (2, 2, 3, 7, 7);
        let x = uniform(&mut rng, ci * h * w, -1.0, 1.0);
        let wt = uniform(&mut rng, co * ci * k * k, -0.5, 0.5);
        let coeff = uniform(&mut rng, co * 4 * 4, -1.0, 1.0);
        compare_gradients(
            &[x, wt],
            &[vec![ci, h, w], vec![co, ci, k, k]],
            |t| {
                let y = t[0].conv2d(&t[1], None, 2, 1).unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("maxpool2d", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(202));
        let (c, h, w) = (2, 6, 6);
        // Distinct values keep window maxima unique around the probe step.
        let mut x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        for (i, v) in x.iter_mut().enumerate() {
            *v += i as f64 * 1e-2;
        }
        let coeff = uniform(&mut rng, c * 3 * 3, -1.0, 1.0);
        compare_gradients(
            &[x],
            &[vec![c, h, w]],
            |t| {
                let y = t[0].maxpool2d(3, 2, 1).unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("avgpool2d", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(303));
        let (c, h, w) = (3, 6, 6);
        let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
        let coeff = uniform(&mut rng, c * 3 * 3, -1.0, 1.0);
        compare_gradients(
            &[x],
            &[vec![c, h, w]],
            |t| {
                let y = t[0].avgpool2d(2, 2).unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("relu", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(404));
        let x = off_kink(&mut rng, 24);
        let coeff = uniform(&mut rng, 24, -1.0, 1.0);
        compare_gradients(
            &[x],
            &[vec![24]],
            |t| weighted_sum(&t[0].relu(), &coeff),
            step,
        )
    });

    run("add/sub/mul/scale", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(505));
        let a = uniform(&mut rng, 12, -1.0, 1.0);
        let b = uniform(&mut rng, 12, -1.0, 1.0);
        let coeff = uniform(&mut rng, 12, -1.0, 1.0);
        compare_gradients(
            &[a, b],
            &[vec![12], vec![12]],
            |t| {
                let s = t[0].add(&t[1]).unwrap();
                let d = t[0].sub(&t[1]).unwrap();
                let m = s.mul(&d).unwrap().scale(0.7);
                weighted_sum(&m, &coeff)
            },
            step,
        )
    });

    run("batchnorm/batch-stats", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(606));
        let (c, h, w) = (3, 4, 4);
        let x = uniform(&mut rng, c * h * w, -2.0, 2.0);
        let gamma = uniform(&mut rng, c, 0.5, 1.5);
        let beta = uniform(&mut rng, c, -0.5, 0.5);
        let coeff = uniform(&mut rng, c * h * w, -1.0, 1.0);
        compare_gradients(
            &[x, gamma, beta],
            &[vec![c, h, w], vec![c], vec![c]],
            |t| {
                let (y, _) = t[0].batchnorm(&t[1], &t[2], 1e-5, BnMode::Batch).unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("batchnorm/running-stats", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(707));
        let (c, h, w) = (3, 4, 4);
        let x = uniform(&mut rng, c * h * w, -2.0, 2.0);
        let gamma = uniform(&mut rng, c, 0.5, 1.5);
        let beta = uniform(&mut rng, c, -0.5, 0.5);
        let mean = uniform(&mut rng, c, -0.5, 0.5);
        let var = uniform(&mut rng, c, 0.5, 2.0);
        let coeff = uniform(&mut rng, c * h * w, -1.0, 1.0);
        compare_gradients(
            &[x, gamma, beta],
            &[vec![c, h, w], vec![c], vec![c]],
            |t| {
                let (y, _) = t[0]
                    .batchnorm(&t[1], &t[2], 1e-5, BnMode::Running { mean: &mean, var: &var })
                    .unwrap();
                weighted_sum(&y, &coeff)
            },
            step,
        )
    });

    run("softmax_cross_entropy", &|seed| {
        let mut rng = rng_from(seed.wrapping_add(808));
        let n = 10;
        let z = uniform(&mut rng, n, -2.0, 2.0);
        let label = rng.gen_range(0..n);
        compare_gradients(
            &[z],
            &[vec![n]],
            |t| t[0].softmax_cross_entropy(label).unwrap(),
            step,
        )
    });

    results
}

/// conv -> relu -> maxpool -> cross-entropy, checked end to end.
pub fn composed_pipeline_check(seed: u64, step: f64) -> f64 {
    let mut rng = rng_from(seed.wrapping_add(909));
    let (ci, co, k, h, w) = (1, 4, 3, 8, 8);
    let x = uniform(&mut rng, ci * h * w, -1.0, 1.0);
    let wt = uniform(&mut rng, co * ci * k * k, -0.5, 0.5);
    let label = rng.gen_range(0..co);
    compare_gradients(
        &[x, wt],
        &[vec![ci, h, w], vec![co, ci, k, k]],
        |t| {
            let y = t[0].conv2d(&t[1], None, 1, 1).unwrap();
            let y = y.relu();
            let y = y.maxpool2d(8, 8, 0).unwrap();
            let logits = y.reshape(&[co]).unwrap();
            logits.softmax_cross_entropy(label).unwrap()
        },
        step,
    )
}
