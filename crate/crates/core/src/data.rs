//! Labelled 2-D toy datasets used as the latent-space data distribution.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledPoints;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    TwoMoons,
}

/// Radius of the circle the mixture means sit on.
pub const MIXTURE_RADIUS: f64 = 3.0;
pub const MIXTURE_STD: f64 = 0.3;
const MOON_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_components: usize,
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_labeled(&self) -> LabeledPoints<'_> {
        LabeledPoints {
            points: self.points.view(),
            labels: &self.labels,
        }
    }

    /// Component centres used for nearest-mode assignment. For the mixture
    /// these are the true means; for two moons, the per-label sample means.
    pub fn centers(&self) -> Array2<f64> {
        match self.kind {
            DatasetKind::GaussianMixture => mixture_means(self.num_components),
            DatasetKind::TwoMoons => {
                let mut sums = Array2::<f64>::zeros((self.num_components, self.dim()));
                let mut counts = vec![0usize; self.num_components];
                for (row, &l) in self.points.rows().into_iter().zip(&self.labels) {
                    let mut dst = sums.row_mut(l);
                    dst += &row;
                    counts[l] += 1;
                }
                for (mut r, &c) in sums.rows_mut().into_iter().zip(&counts) {
                    r /= c.max(1) as f64;
                }
                sums
            }
        }
    }

    /// Points carrying label `class`.
    pub fn component(&self, class: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.points.select(ndarray::Axis(0), &idx)
    }
}

/// Means evenly spaced on a circle, the first at `(R, 0)`.
pub fn mixture_means(k: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, 2), |(i, c)| {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        MIXTURE_RADIUS * if c == 0 { angle.cos() } else { angle.sin() }
    })
}

/// Point `i` gets label `i mod num_components`, so every component is
/// populated whenever `n >= num_components`.
pub fn gen_dataset(kind: DatasetKind, n: usize, num_components: usize, seed: u64) -> Result<ToyDataset> {
    if num_components == 0 || n < num_components {
        return Err(Error::InvalidArgument(format!(
            "need n >= num_components > 0, got n={n}, components={num_components}"
        )));
    }
    if kind == DatasetKind::TwoMoons && num_components != 2 {
        return Err(Error::InvalidArgument("two_moons has exactly 2 components".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % num_components).collect();
    let mut points = Array2::zeros((n, 2));
    match kind {
        DatasetKind::GaussianMixture => {
            let means = mixture_means(num_components);
            for (i, &l) in labels.iter().enumerate() {
                for c in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    points[[i, c]] = means[[l, c]] + MIXTURE_STD * e;
                }
            }
        }
        DatasetKind::TwoMoons => {
            let jitter = Normal::new(0.0, MOON_NOISE).expect("valid std");
            for (i, &l) in labels.iter().enumerate() {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let (x, y) = if l == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                // centred and scaled to a spread comparable with the mixture
                points[[i, 0]] = 2.0 * (x - 0.5) + jitter.sample(&mut rng);
                points[[i, 1]] = 2.0 * (y - 0.25) + jitter.sample(&mut rng);
            }
        }
    }
    Ok(ToyDataset {
        kind,
        points,
        labels,
        num_components,
    })
}

/// Index of the nearest centre for each row.
pub fn nearest_component(points: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> Vec<usize> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.rows().into_iter().enumerate() {
                let d: f64 = p.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_per_component() {
        let d = gen_dataset(DatasetKind::GaussianMixture, 4, 4, 0).unwrap();
        assert_eq!(d.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_too_few_points() {
        assert!(gen_dataset(DatasetKind::GaussianMixture, 3, 4, 0).is_err());
        assert!(gen_dataset(DatasetKind::TwoMoons, 10, 3, 0).is_err());
    }

    #[test]
    fn seeded() {
        let a = gen_dataset(DatasetKind::TwoMoons, 100, 2, 5).unwrap();
        let b = gen_dataset(DatasetKind::TwoMoons, 100, 2, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_is_well_separated() {
        for k in [2, 4, 8] {
            let m = mixture_means(k);
            for i in 0..k {
                for j in 0..i {
                    let d = ((m[[i, 0]] - m[[j, 0]]).powi(2) + (m[[i, 1]] - m[[j, 1]]).powi(2)).sqrt();
                    assert!(d >= 4.0 * MIXTURE_STD);
                }
            }
        }
    }
}
