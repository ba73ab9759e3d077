//! Affine latent codec standing in for a VAE: data ↔ latent maps fitted by
//! least squares against a reference encoder.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap<S> {
    /// `out × in`
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> AffineMap<S> {
    pub fn apply(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        if x.ncols() != self.weight.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.weight.ncols(),
                got: x.ncols(),
            });
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn flops(&self) -> u64 {
        2 * (self.weight.nrows() * self.weight.ncols()) as u64
    }

    fn cast<T: Scalar>(&self) -> AffineMap<T> {
        AffineMap {
            weight: self.weight.mapv(|v| T::lit(v.as_f64())),
            bias: self.bias.mapv(|v| T::lit(v.as_f64())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CodecMap<S> {
    Identity,
    Affine(AffineMap<S>),
    Unfitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec<S> {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder: CodecMap<S>,
    pub decoder: CodecMap<S>,
}

impl<S: Scalar> LatentCodec<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            data_dim: dim,
            latent_dim: dim,
            encoder: CodecMap::Identity,
            decoder: CodecMap::Identity,
        }
    }

    pub fn unfitted(data_dim: usize, latent_dim: usize) -> Self {
        Self {
            data_dim,
            latent_dim,
            encoder: CodecMap::Unfitted,
            decoder: CodecMap::Unfitted,
        }
    }

    pub fn encode(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        apply_map(&self.encoder, x, self.data_dim)
    }

    pub fn decode(&self, z: ArrayView2<'_, S>) -> Result<Array2<S>> {
        apply_map(&self.decoder, z, self.latent_dim)
    }

    /// Per-row cost of a decode.
    pub fn decode_flops(&self) -> u64 {
        match &self.decoder {
            CodecMap::Affine(m) => m.flops(),
            _ => 0,
        }
    }

    /// Least-squares fit of the encoder to latents produced by a reference
    /// encoder: minimises ‖x·Wᵀ + b − z_ref‖² over the sample.
    pub fn fit_encoder(&mut self, xs: ArrayView2<'_, f64>, z_ref: ArrayView2<'_, f64>) -> Result<()> {
        check_pairs(&xs, &z_ref, self.data_dim, self.latent_dim)?;
        self.encoder = CodecMap::Affine(least_squares(xs, z_ref)?.cast());
        Ok(())
    }

    /// Least-squares fit of the decoder on (latent, data) pairs.
    pub fn fit_decoder(&mut self, zs: ArrayView2<'_, f64>, x_ref: ArrayView2<'_, f64>) -> Result<()> {
        check_pairs(&zs, &x_ref, self.latent_dim, self.data_dim)?;
        self.decoder = CodecMap::Affine(least_squares(zs, x_ref)?.cast());
        Ok(())
    }

    /// Decoder as the Moore–Penrose inverse of the fitted encoder:
    /// x = W⁺(z − b).
    pub fn fit_decoder_pseudo_inverse(&mut self) -> Result<()> {
        let enc = match &self.encoder {
            CodecMap::Affine(m) => m,
            CodecMap::Identity => {
                self.decoder = CodecMap::Identity;
                return Ok(());
            }
            CodecMap::Unfitted => return Err(Error::CodecUnfitted),
        };
        let (rows, cols) = enc.weight.dim();
        let w = DMatrix::from_fn(rows, cols, |i, j| enc.weight[[i, j]].as_f64());
        let pinv = w
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let weight = Array2::from_shape_fn((cols, rows), |(i, j)| S::lit(pinv[(i, j)]));
        let b = Array1::from_shape_fn(rows, |i| enc.bias[i].as_f64());
        let bias = Array1::from_shape_fn(cols, |i| {
            S::lit(-(0..rows).map(|j| pinv[(i, j)] * b[j]).sum::<f64>())
        });
        self.decoder = CodecMap::Affine(AffineMap { weight, bias });
        Ok(())
    }
}

fn apply_map<S: Scalar>(map: &CodecMap<S>, x: ArrayView2<'_, S>, dim: usize) -> Result<Array2<S>> {
    if x.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.ncols(),
        });
    }
    match map {
        CodecMap::Identity => Ok(x.to_owned()),
        CodecMap::Affine(m) => m.apply(x),
        CodecMap::Unfitted => Err(Error::CodecUnfitted),
    }
}

fn check_pairs(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    in_dim: usize,
    out_dim: usize,
) -> Result<()> {
    if a.ncols() != in_dim {
        return Err(Error::DimensionMismatch {
            expected: in_dim,
            got: a.ncols(),
        });
    }
    if b.ncols() != out_dim {
        return Err(Error::DimensionMismatch {
            expected: out_dim,
            got: b.ncols(),
        });
    }
    if a.nrows() != b.nrows() || a.nrows() <= in_dim {
        return Err(Error::InvalidArgument(format!(
            "need matching sample counts above {in_dim}, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

fn least_squares(inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<AffineMap<f64>> {
    let (n, din) = inputs.dim();
    let dout = targets.ncols();
    let a = DMatrix::from_fn(n, din + 1, |i, j| if j < din { inputs[[i, j]] } else { 1.0 });
    let b = DMatrix::from_fn(n, dout, |i, j| targets[[i, j]]);
    let theta = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(AffineMap {
        weight: Array2::from_shape_fn((dout, din), |(i, j)| theta[(j, i)]),
        bias: Array1::from_shape_fn(dout, |i| theta[(din, i)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_round_trip_is_exact() {
        let c = LatentCodec::<f32>::identity(2);
        let x = array![[1.5f32, -0.25], [3.0, 7.0]];
        let z = c.encode(x.view()).unwrap();
        assert_eq!(c.decode(z.view()).unwrap(), x);
    }

    #[test]
    fn unfitted_codec_errors() {
        let c = LatentCodec::<f32>::unfitted(3, 2);
        let x = array![[1.0f32, 2.0, 3.0]];
        assert!(matches!(c.encode(x.view()), Err(Error::CodecUnfitted)));
        let mut c = LatentCodec::<f32>::unfitted(3, 2);
        assert!(c.fit_decoder_pseudo_inverse().is_err());
    }

    fn reference_pairs() -> (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>) {
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let b = array![0.3, -1.2];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = Array2::from_shape_fn((1000, 3), |_| rng.gen_range(-2.0..2.0));
        let zs = xs.dot(&w.t()) + &b;
        (xs, zs, w, b)
    }

    #[test]
    fn encoder_fit_recovers_reference_map() {
        let (xs, zs, w, b) = reference_pairs();
        let mut c = LatentCodec::<f64>::unfitted(3, 2);
        c.fit_encoder(xs.view(), zs.view()).unwrap();
        let CodecMap::Affine(m) = &c.encoder else { panic!() };
        let frob = ((&m.weight - &w).mapv(|v| v * v).sum() + (&m.bias - &b).mapv(|v| v * v).sum()).sqrt();
        assert!(frob < 1e-6, "{frob}");
    }

    #[test]
    fn pseudo_inverse_decoder_round_trips() {
        let w = array![[0.5, -1.0], [1.5, 0.25]];
        let b = array![0.3, -1.2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = Array2::from_shape_fn((200, 2), |_| rng.gen_range(-2.0..2.0));
        let zs = xs.dot(&w.t()) + &b;
        let mut c = LatentCodec::<f64>::unfitted(2, 2);
        c.fit_encoder(xs.view(), zs.view()).unwrap();
        c.fit_decoder_pseudo_inverse().unwrap();
        let back = c.decode(c.encode(xs.view()).unwrap().view()).unwrap();
        let err = (&back - &xs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "{err}");
    }
}
