//! Distribution-level quality measures on point clouds.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::nearest_component;
use crate::error::{Error, Result};

/// `count` unit directions in `dim` dimensions, drawn uniformly on the
/// sphere from `seed`.
pub fn projection_directions(dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((count, dim));
    for mut row in out.rows_mut() {
        loop {
            row.mapv_inplace(|_: f64| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

/// Exact 2-Wasserstein distance between two empirical 1-D distributions
/// with uniform weights, by integrating the squared gap between quantile
/// functions. Inputs must be sorted.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let gap = a[i] - b[j];
        total += (next - u) * gap * gap;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total.max(0.0).sqrt()
}

fn sorted_projection(points: ArrayView2<'_, f64>, dir: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let mut p: Vec<f64> = points.dot(&dir).to_vec();
    p.sort_by(f64::total_cmp);
    p
}

/// Sliced 2-Wasserstein distance over the given directions (rows of
/// `directions`): the mean of the per-direction 1-D distances.
pub fn sliced_wasserstein_with(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    directions: ArrayView2<'_, f64>,
) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("point sets must be nonempty".into()));
    }
    if a.ncols() != b.ncols() || a.ncols() != directions.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: if a.ncols() != b.ncols() { b.ncols() } else { directions.ncols() },
        });
    }
    if directions.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let total: f64 = directions
        .rows()
        .into_iter()
        .map(|u| wasserstein_1d_sorted(&sorted_projection(a, u), &sorted_projection(b, u)))
        .sum();
    Ok(total / directions.nrows() as f64)
}

pub fn sliced_wasserstein(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    num_projections: usize,
    seed: u64,
) -> Result<f64> {
    let dirs = projection_directions(a.ncols(), num_projections, seed);
    sliced_wasserstein_with(a, b, dirs.view())
}

/// Fraction of seed-paired samples assigned to the same nearest centre.
pub fn mode_agreement(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let ma = nearest_component(a, centers);
    let mb = nearest_component(b, centers);
    let same = ma.iter().zip(&mb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.nrows() as f64)
}

/// Fraction of samples whose nearest centre is the class they were
/// conditioned on.
pub fn condition_accuracy(samples: ArrayView2<'_, f64>, classes: &[usize], centers: ArrayView2<'_, f64>) -> Result<f64> {
    if samples.nrows() != classes.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.nrows(),
            got: classes.len(),
        });
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let hits = nearest_component(samples, centers)
        .iter()
        .zip(classes)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub k: usize,
    pub training_seed: u64,
    /// Sampling seed.
    pub seed: u64,
    pub sliced_wasserstein: f64,
    pub mode_agreement: f64,
    pub condition_accuracy: f64,
    /// Total FLOPs of the trajectory per sample.
    pub flops: f64,
    /// Parameters of the model that finishes the trajectory.
    pub params: usize,
    pub payload_bytes: usize,
}
