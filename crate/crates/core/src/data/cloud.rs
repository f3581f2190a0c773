//! Seeded Gaussian feature clouds: the substrate for the center-loss
//! dynamics experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, standard_normal};

/// Balanced Gaussian blobs at seeded random means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCloud {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-class covariance scale (isotropic standard deviation).
    pub spread: f64,
    /// Standard deviation of the class-mean placement.
    pub mean_scale: f64,
    pub seed: u64,
    /// Class means, `[n_classes x dim]`.
    pub means: Vec<f64>,
    /// Points, `[n x dim]`, class-major order.
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureCloud {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    /// `x,y,...,label` rows (no header beyond the leading comment line).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# point coordinates, then label\n");
        for (i, &label) in self.labels.iter().enumerate() {
            let coords: Vec<String> = self.point(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&coords.join(","));
            out.push_str(&format!(",{label}\n"));
        }
        out
    }
}

/// Cloud with the default 20 points per class and mean placement scaled
/// like the spread (classes overlap, as sketch features do).
pub fn generate_feature_cloud(n_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<FeatureCloud> {
    generate_feature_cloud_with(n_classes, 20, dim, spread, spread.max(1e-12), seed)
}

pub fn generate_feature_cloud_with(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    mean_scale: f64,
    seed: u64,
) -> Result<FeatureCloud> {
    if dim < 2 {
        return Err(Error::Contract(format!("cloud dimension must be at least 2, got {dim}")));
    }
    if n_classes == 0 || per_class == 0 {
        return Err(Error::Contract("cloud needs at least one class and one point".into()));
    }
    if spread < 0.0 || mean_scale < 0.0 {
        return Err(Error::Contract("spread and mean_scale must be nonnegative".into()));
    }
    let mut rng = rng_from(seed);
    let means: Vec<f64> = (0..n_classes * dim)
        .map(|_| mean_scale * standard_normal(&mut rng))
        .collect();
    let mut points = Vec::with_capacity(n_classes * per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for k in 0..n_classes {
        for _ in 0..per_class {
            for d in 0..dim {
                points.push(means[k * dim + d] + spread * standard_normal(&mut rng));
            }
            labels.push(k);
        }
    }
    Ok(FeatureCloud {
        n_classes,
        per_class,
        dim,
        spread,
        mean_scale,
        seed,
        means,
        points,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_the_paper_scale_20_classes() {
        let cloud = generate_feature_cloud(20, 32, 1.0, 5).unwrap();
        assert_eq!(cloud.n_classes, 20);
        assert_eq!(cloud.dim, 32);
        assert_eq!(cloud.len(), 400);
        let mut counts = vec![0usize; 20];
        for &l in &cloud.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn zero_spread_collapses_to_the_means() {
        let cloud = generate_feature_cloud_with(5, 4, 8, 0.0, 2.0, 9).unwrap();
        for (i, &label) in cloud.labels.iter().enumerate() {
            assert_eq!(cloud.point(i), cloud.mean(label));
        }
    }

    #[test]
    fn same_seed_reproduces_points() {
        let a = generate_feature_cloud(6, 4, 0.7, 11).unwrap();
        let b = generate_feature_cloud(6, 4, 0.7, 11).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn dimension_below_two_is_rejected() {
        assert!(matches!(
            generate_feature_cloud(5, 1, 1.0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sample_means_match_generator_means_statistically() {
        let cloud = generate_feature_cloud_with(10, 200, 2, 0.5, 3.0, 13).unwrap();
        // 3 sigma / sqrt(N) per coordinate.
        let tol = 3.0 * 0.5 / (200.0_f64).sqrt();
        for k in 0..10 {
            let mut mean = vec![0.0; 2];
            let mut n = 0;
            for (i, &l) in cloud.labels.iter().enumerate() {
                if l == k {
                    for d in 0..2 {
                        mean[d] += cloud.point(i)[d];
                    }
                    n += 1;
                }
            }
            for d in 0..2 {
                mean[d] /= n as f64;
                assert!(
                    (mean[d] - cloud.mean(k)[d]).abs() < tol,
                    "class {k} coord {d}: {} vs {}",
                    mean[d],
                    cloud.mean(k)[d]
                );
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let cloud = generate_feature_cloud(3, 2, 1.0, 1).unwrap();
        let csv = cloud.to_csv();
        assert_eq!(csv.lines().count(), 1 + cloud.len());
    }
}
