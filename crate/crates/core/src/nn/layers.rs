use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Option<Array1<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    /// Uniform(±1/√in) weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || S::lit(rng.sample(dist))),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, S>) -> Array2<S> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns ∂L/∂x.
    pub fn backward(&self, x: ArrayView2<'_, S>, dy: ArrayView2<'_, S>, grad: &mut Linear<S>) -> Array2<S> {
        grad.weight += &dy.t().dot(&x);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight)
    }

    /// Same as [`backward`](Self::backward) without the input gradient.
    pub fn backward_params(&self, x: ArrayView2<'_, S>, dy: ArrayView2<'_, S>, grad: &mut Linear<S>) {
        grad.weight += &dy.t().dot(&x);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
    }

    pub fn flops(&self) -> u64 {
        2 * (self.weight.nrows() * self.weight.ncols()) as u64
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, S>)) {
        f(format!("{prefix}.weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b.view().into_dyn());
        }
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'a, S>),
    ) {
        f(format!("{prefix}.weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b.view_mut().into_dyn());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, S>) -> (Array2<S>, LayerNormCache<S>) {
        let n = S::lit(x.ncols() as f64);
        let eps = S::lit(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<S>() / n;
            *inv = S::one() / (var + eps).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<S>, dy: ArrayView2<'_, S>, grad: &mut LayerNorm<S>) -> Array2<S> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = S::lit(dy.ncols() as f64);
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &inv| {
                let sum_g = g.sum();
                let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>();
                Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                    *o = inv / n * (n * gi - sum_g - xi * sum_gx);
                });
            });
        dx
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, S>)) {
        f(format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(format!("{prefix}.beta"), self.beta.view().into_dyn());
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'a, S>),
    ) {
        f(format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(a: S) -> S {
    S::one() / (S::one() + (-a).exp())
}

pub(crate) fn silu<S: Scalar>(a: &Array2<S>) -> Array2<S> {
    a.mapv(|v| v * sigmoid(v))
}

/// dL/da given dL/d(silu(a)).
pub(crate) fn silu_backward<S: Scalar>(a: &Array2<S>, dg: &Array2<S>) -> Array2<S> {
    Zip::from(a).and(dg).map_collect(|&v, &g| {
        let s = sigmoid(v);
        g * s * (S::one() + v * (S::one() - s))
    })
}
