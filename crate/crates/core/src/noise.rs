use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Stream reserved for the initial latent `z_T` of a trajectory.
pub const INITIAL_STREAM: u64 = 0;

/// Deterministic Gaussian draws addressed by `(seed, stream)`.
///
/// Every trajectory derives all of its randomness from its seed: stream 0
/// is the starting latent and stream `p + 1` is the noise injected at step
/// position `p`. Any process holding the seed can regenerate the same draws,
/// so a trajectory can resume elsewhere without carrying RNG state.
pub fn gaussian<S: Scalar>(seed: u64, stream: u64, rows: usize, cols: usize) -> Array2<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(&mut rng);
        S::lit(x)
    })
}

pub fn initial_latent<S: Scalar>(seed: u64, rows: usize, dim: usize) -> Array2<S> {
    gaussian(seed, INITIAL_STREAM, rows, dim)
}

pub fn step_noise<S: Scalar>(seed: u64, position: usize, rows: usize, dim: usize) -> Array2<S> {
    gaussian(seed, position as u64 + 1, rows, dim)
}
