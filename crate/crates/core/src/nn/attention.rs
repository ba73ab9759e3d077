//! Multi-head attention with a single query token per row.
//!
//! Head outputs are concatenated and projected by `out`, so the block output
//! is a sum of per-head contributions. Removing a head is therefore exactly
//! equivalent to zeroing its slice of `out.weight`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention<S> {
    pub norm: LayerNorm<S>,
    /// `inner × model_dim`, no bias
    pub query: Linear<S>,
    /// `inner × kv_dim`, no bias
    pub key: Linear<S>,
    pub value: Linear<S>,
    /// `model_dim × inner`
    pub out: Linear<S>,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    q: Array2<S>,
    k: Array3<S>,
    v: Array3<S>,
    /// `rows × heads × tokens`
    probs: Array3<S>,
    o: Array2<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn init<R: Rng>(model_dim: usize, kv_dim: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let inner = heads * head_dim;
        Self {
            norm: LayerNorm::new(model_dim),
            query: Linear::init(model_dim, inner, false, rng),
            key: Linear::init(kv_dim, inner, false, rng),
            value: Linear::init(kv_dim, inner, false, rng),
            out: Linear::init(inner, model_dim, true, rng),
            heads,
            head_dim,
        }
    }

    pub fn zeros(model_dim: usize, kv_dim: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        Self {
            norm: LayerNorm::zeros(model_dim),
            query: Linear::zeros(model_dim, inner, false),
            key: Linear::zeros(kv_dim, inner, false),
            value: Linear::zeros(kv_dim, inner, false),
            out: Linear::zeros(inner, model_dim, true),
            heads,
            head_dim,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn project_tokens(lin: &Linear<S>, kv: ArrayView3<'_, S>) -> Array3<S> {
        let (rows, tokens, width) = kv.dim();
        let flat = kv
            .to_shape((rows * tokens, width))
            .expect("contiguous token block");
        let projected = lin.forward(flat.view());
        projected
            .into_shape_with_order((rows, tokens, lin.output_dim()))
            .expect("projection shape")
    }

    /// Attends from `xn` (already normalised, `rows × model_dim`) over
    /// `kv` (`rows × tokens × kv_dim`). Returns the block delta before the
    /// residual add.
    pub fn forward(&self, xn: ArrayView2<'_, S>, kv: ArrayView3<'_, S>) -> (Array2<S>, AttentionCache<S>) {
        let rows = xn.nrows();
        let tokens = kv.dim().1;
        let q = self.query.forward(xn);
        let k = Self::project_tokens(&self.key, kv);
        let v = Self::project_tokens(&self.value, kv);
        let scale = S::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut probs = Array3::zeros((rows, self.heads, tokens));
        let mut o = Array2::zeros((rows, self.inner_dim()));
        for b in 0..rows {
            for h in 0..self.heads {
                let span = h * self.head_dim..(h + 1) * self.head_dim;
                let qh = q.slice(s![b, span.clone()]);
                let mut p = probs.slice_mut(s![b, h, ..]);
                for j in 0..tokens {
                    p[j] = qh.dot(&k.slice(s![b, j, span.clone()])) * scale;
                }
                let max = p.fold(S::neg_infinity(), |m, &v| m.max(v));
                p.mapv_inplace(|v| (v - max).exp());
                let total = p.sum();
                p.mapv_inplace(|v| v / total);
                let mut oh = o.slice_mut(s![b, span.clone()]);
                for j in 0..tokens {
                    oh.scaled_add(p[j], &v.slice(s![b, j, span.clone()]));
                }
            }
        }
        let y = self.out.forward(o.view());
        (y, AttentionCache { q, k, v, probs, o })
    }

    /// Returns `(∂L/∂xn, ∂L/∂kv)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        xn: ArrayView2<'_, S>,
        kv: ArrayView3<'_, S>,
        cache: &AttentionCache<S>,
        dy: ArrayView2<'_, S>,
        grad: &mut Attention<S>,
    ) -> (Array2<S>, Array3<S>) {
        let (rows, tokens, width) = kv.dim();
        let d_o = self.out.backward(cache.o.view(), dy, &mut grad.out);
        let scale = S::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array3::zeros(cache.k.raw_dim());
        let mut dv = Array3::zeros(cache.v.raw_dim());
        for b in 0..rows {
            for h in 0..self.heads {
                let span = h * self.head_dim..(h + 1) * self.head_dim;
                let p = cache.probs.slice(s![b, h, ..]);
                let doh = d_o.slice(s![b, span.clone()]);
                let dp: Vec<S> = (0..tokens)
                    .map(|j| doh.dot(&cache.v.slice(s![b, j, span.clone()])))
                    .collect();
                let weighted: S = (0..tokens).map(|j| p[j] * dp[j]).sum();
                for j in 0..tokens {
                    dv.slice_mut(s![b, j, span.clone()]).scaled_add(p[j], &doh);
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    dq.slice_mut(s![b, span.clone()])
                        .scaled_add(ds, &cache.k.slice(s![b, j, span.clone()]));
                    dk.slice_mut(s![b, j, span.clone()])
                        .scaled_add(ds, &cache.q.slice(s![b, span.clone()]));
                }
            }
        }
        let dxn = self.query.backward(xn, dq.view(), &mut grad.query);
        let flat_kv = kv.to_shape((rows * tokens, width)).expect("contiguous token block");
        let inner = self.inner_dim();
        let dk = dk.into_shape_with_order((rows * tokens, inner)).expect("shape");
        let dv = dv.into_shape_with_order((rows * tokens, inner)).expect("shape");
        let mut dkv = self.key.backward(flat_kv.view(), dk.view(), &mut grad.key);
        dkv += &self.value.backward(flat_kv.view(), dv.view(), &mut grad.value);
        let dkv = dkv
            .into_shape_with_order((rows, tokens, width))
            .expect("shape");
        (dxn, dkv)
    }

    /// Multiply-accumulate count for one row attending over `tokens` keys.
    pub fn flops(&self, tokens: usize) -> u64 {
        let inner = self.inner_dim() as u64;
        let t = tokens as u64;
        self.query.flops()
            + t * (self.key.flops() + self.value.flops())
            + 2 * inner * t // scores
            + 2 * inner * t // weighted sum of values
            + self.out.flops()
    }

    /// Columns of `out.weight` and rows of the projections owned by head `h`.
    pub fn head_span(&self, h: usize) -> std::ops::Range<usize> {
        h * self.head_dim..(h + 1) * self.head_dim
    }

    /// Grouped L1 norm of every parameter attached to head `h`.
    pub fn head_l1(&self, h: usize) -> f64 {
        let span = self.head_span(h);
        let rows = |lin: &Linear<S>| {
            lin.weight
                .slice(s![span.clone(), ..])
                .iter()
                .map(|v| v.as_f64().abs())
                .sum::<f64>()
        };
        rows(&self.query)
            + rows(&self.key)
            + rows(&self.value)
            + self
                .out
                .weight
                .slice(s![.., span.clone()])
                .iter()
                .map(|v| v.as_f64().abs())
                .sum::<f64>()
    }

    /// Keeps only the listed heads, in the given order.
    pub fn select_heads(&self, keep: &[usize]) -> Self {
        let rows: Vec<usize> = keep.iter().flat_map(|&h| self.head_span(h)).collect();
        let take_rows = |lin: &Linear<S>| Linear {
            weight: lin.weight.select(Axis(0), &rows),
            bias: lin.bias.as_ref().map(|b| b.select(Axis(0), &rows)),
        };
        Self {
            norm: self.norm.clone(),
            query: take_rows(&self.query),
            key: take_rows(&self.key),
            value: take_rows(&self.value),
            out: Linear {
                weight: self.out.weight.select(Axis(1), &rows),
                bias: self.out.bias.clone(),
            },
            heads: keep.len(),
            head_dim: self.head_dim,
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, S>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'a, S>),
    ) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }
}
