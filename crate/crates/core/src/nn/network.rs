//! The toy ε-predictor and its reverse-mode gradient.
//!
//! ```text
//! temb = fc2(silu(fc1(sinusoid(t/T))))
//! h    = input(z) + temb
//! res:   h += fc2(silu(fc1(LN(h))))
//! self:  h += Attn(LN(h) ; {LN(h), LN(temb)})
//! cross: h += Attn(LN(h) ; condition tokens)
//! eps  = output(LN(h))
//! ```

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::{Attention, AttentionCache};
use super::descriptor::{ArchitectureDescriptor, BlockKind};
use super::layers::{silu, silu_backward, LayerNorm, LayerNormCache, Linear};
use crate::error::{Error, Result};
use crate::sampler::{Conditioning, NoisePredictor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Large,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResBlock<S> {
    pub norm: LayerNorm<S>,
    /// The prunable layer: one row per hidden unit.
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<S> {
    pub time: TimeEmbedding<S>,
    pub input: Linear<S>,
    pub res: Vec<ResBlock<S>>,
    pub self_attn: Attention<S>,
    pub cross_attn: Attention<S>,
    pub out_norm: LayerNorm<S>,
    pub output: Linear<S>,
    /// `(num_classes + 1) × tokens × condition_dim`; the last entry is the
    /// learned null condition used for classifier-free guidance.
    pub cond_embed: Array3<S>,
}

/// Name of the condition-encoder tensor, which sits outside the denoiser
/// proper (it is frozen during distillation and not counted as a denoiser
/// parameter).
pub const COND_EMBED: &str = "cond_embed";

impl<S: Scalar> Weights<S> {
    pub fn zeros(desc: &ArchitectureDescriptor) -> Self {
        let d = desc.model_dim;
        let a = &desc.attention;
        Self {
            time: TimeEmbedding {
                fc1: Linear::zeros(desc.time_embed_dim, d, true),
                fc2: Linear::zeros(d, d, true),
            },
            input: Linear::zeros(desc.latent_dim, d, true),
            res: desc
                .res_widths
                .iter()
                .map(|&w| ResBlock {
                    norm: LayerNorm::zeros(d),
                    fc1: Linear::zeros(d, w, true),
                    fc2: Linear::zeros(w, d, true),
                })
                .collect(),
            self_attn: Attention::zeros(d, d, a.self_heads, a.head_dim()),
            cross_attn: Attention::zeros(d, a.condition_dim, a.cross_heads, a.head_dim()),
            out_norm: LayerNorm::zeros(d),
            output: Linear::zeros(d, desc.latent_dim, true),
            cond_embed: Array3::zeros((desc.num_classes + 1, a.num_condition_tokens, a.condition_dim)),
        }
    }

    pub fn init(desc: &ArchitectureDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = desc.model_dim;
        let a = &desc.attention;
        let time = TimeEmbedding {
            fc1: Linear::init(desc.time_embed_dim, d, true, &mut rng),
            fc2: Linear::init(d, d, true, &mut rng),
        };
        let input = Linear::init(desc.latent_dim, d, true, &mut rng);
        let res = desc
            .res_widths
            .iter()
            .map(|&w| ResBlock {
                norm: LayerNorm::new(d),
                fc1: Linear::init(d, w, true, &mut rng),
                fc2: Linear::init(w, d, true, &mut rng),
            })
            .collect();
        let self_attn = Attention::init(d, d, a.self_heads, a.head_dim(), &mut rng);
        let cross_attn = Attention::init(d, a.condition_dim, a.cross_heads, a.head_dim(), &mut rng);
        let output = Linear::init(d, desc.latent_dim, true, &mut rng);
        let cond_embed = Array3::from_shape_simple_fn(
            (desc.num_classes + 1, a.num_condition_tokens, a.condition_dim),
            || S::lit(rng.sample::<f64, _>(StandardNormal)),
        );
        Self {
            time,
            input,
            res,
            self_attn,
            cross_attn,
            out_norm: LayerNorm::new(d),
            output,
            cond_embed,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, mut t| t.fill(S::zero()));
        z
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, S>)) {
        self.time.fc1.visit("time.fc1", f);
        self.time.fc2.visit("time.fc2", f);
        self.input.visit("input", f);
        for (i, r) in self.res.iter().enumerate() {
            r.norm.visit(&format!("res.{i}.norm"), f);
            r.fc1.visit(&format!("res.{i}.fc1"), f);
            r.fc2.visit(&format!("res.{i}.fc2"), f);
        }
        self.self_attn.visit("self_attn", f);
        self.cross_attn.visit("cross_attn", f);
        self.out_norm.visit("out_norm", f);
        self.output.visit("output", f);
        f(COND_EMBED.to_string(), self.cond_embed.view().into_dyn());
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'a, S>)) {
        self.time.fc1.visit_mut("time.fc1", f);
        self.time.fc2.visit_mut("time.fc2", f);
        self.input.visit_mut("input", f);
        for (i, r) in self.res.iter_mut().enumerate() {
            r.norm.visit_mut(&format!("res.{i}.norm"), f);
            r.fc1.visit_mut(&format!("res.{i}.fc1"), f);
            r.fc2.visit_mut(&format!("res.{i}.fc2"), f);
        }
        self.self_attn.visit_mut("self_attn", f);
        self.cross_attn.visit_mut("cross_attn", f);
        self.out_norm.visit_mut("out_norm", f);
        self.output.visit_mut("output", f);
        f(COND_EMBED.to_string(), self.cond_embed.view_mut().into_dyn());
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, S>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }

    /// `self += k · other`, tensor by tensor.
    pub fn scaled_add(&mut self, k: S, other: &Weights<S>) {
        let others = other.named_tensors();
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(others) {
            a.scaled_add(k, &b);
        }
    }

    pub fn cast<T: Scalar>(&self) -> Weights<T> {
        Weights::<T> {
            time: TimeEmbedding {
                fc1: cast_linear(&self.time.fc1),
                fc2: cast_linear(&self.time.fc2),
            },
            input: cast_linear(&self.input),
            res: self
                .res
                .iter()
                .map(|r| ResBlock {
                    norm: cast_norm(&r.norm),
                    fc1: cast_linear(&r.fc1),
                    fc2: cast_linear(&r.fc2),
                })
                .collect(),
            self_attn: cast_attention(&self.self_attn),
            cross_attn: cast_attention(&self.cross_attn),
            out_norm: cast_norm(&self.out_norm),
            output: cast_linear(&self.output),
            cond_embed: self.cond_embed.mapv(|v| T::lit(v.as_f64())),
        }
    }
}

fn cast_linear<S: Scalar, T: Scalar>(l: &Linear<S>) -> Linear<T> {
    Linear {
        weight: l.weight.mapv(|v| T::lit(v.as_f64())),
        bias: l.bias.as_ref().map(|b| b.mapv(|v| T::lit(v.as_f64()))),
    }
}

fn cast_norm<S: Scalar, T: Scalar>(n: &LayerNorm<S>) -> LayerNorm<T> {
    LayerNorm {
        gamma: n.gamma.mapv(|v| T::lit(v.as_f64())),
        beta: n.beta.mapv(|v| T::lit(v.as_f64())),
    }
}

fn cast_attention<S: Scalar, T: Scalar>(a: &Attention<S>) -> Attention<T> {
    Attention {
        norm: cast_norm(&a.norm),
        query: cast_linear(&a.query),
        key: cast_linear(&a.key),
        value: cast_linear(&a.value),
        out: cast_linear(&a.out),
        heads: a.heads,
        head_dim: a.head_dim,
    }
}

/// Condition input to a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum CondInput<'a, S> {
    /// Look up tokens by class; `None` selects the null condition. Gradients
    /// flow into the embedding table.
    Classes(&'a [Option<usize>]),
    /// Externally supplied tokens (`rows × tokens × condition_dim`).
    Tokens(ArrayView3<'a, S>),
    /// The null condition for every row.
    Null,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    pub eps: Array2<S>,
    /// Residual stream after every block, in block order.
    pub blocks: Vec<Array2<S>>,
}

#[derive(Debug, Clone)]
enum BlockCache<S> {
    Res {
        ln: LayerNormCache<S>,
        u: Array2<S>,
        a: Array2<S>,
        g: Array2<S>,
    },
    SelfAttn {
        ln_x: LayerNormCache<S>,
        ln_t: LayerNormCache<S>,
        xn: Array2<S>,
        kv: Array3<S>,
        attn: AttentionCache<S>,
    },
    CrossAttn {
        ln_x: LayerNormCache<S>,
        xn: Array2<S>,
        attn: AttentionCache<S>,
    },
}

#[derive(Debug, Clone)]
struct ForwardCache<S> {
    features: Array2<S>,
    time_pre: Array2<S>,
    time_act: Array2<S>,
    z: Array2<S>,
    tokens: Array3<S>,
    /// Embedding rows the tokens came from, when looked up by class.
    token_rows: Option<Vec<usize>>,
    blocks: Vec<BlockCache<S>>,
    out_ln: LayerNormCache<S>,
    out_in: Array2<S>,
}

/// Activations recorded by [`DenoiserNetwork::forward_recorded`] for a
/// following [`DenoiserNetwork::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    cache: Option<ForwardCache<S>>,
}

impl<S> Tape<S> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn is_recorded(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNetwork<S> {
    pub descriptor: ArchitectureDescriptor,
    pub weights: Weights<S>,
    pub role: ModelRole,
}

/// Sinusoidal features of `t/T` at angular frequencies π·2^i.
pub fn time_features<S: Scalar>(ts: &[usize], total: usize, dim: usize) -> Array2<S> {
    let half = dim / 2;
    Array2::from_shape_fn((ts.len(), dim), |(r, c)| {
        let x = ts[r] as f64 / total as f64;
        let freq = std::f64::consts::PI * (1u64 << (c % half)) as f64;
        S::lit(if c < half { (freq * x).sin() } else { (freq * x).cos() })
    })
}

impl<S: Scalar> DenoiserNetwork<S> {
    pub fn new(descriptor: ArchitectureDescriptor, role: ModelRole, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let weights = Weights::init(&descriptor, seed);
        Ok(Self {
            descriptor,
            weights,
            role,
        })
    }

    pub fn from_weights(descriptor: ArchitectureDescriptor, weights: Weights<S>, role: ModelRole) -> Result<Self> {
        descriptor.validate()?;
        let net = Self {
            descriptor,
            weights,
            role,
        };
        net.check_shapes()?;
        Ok(net)
    }

    /// Confirms every tensor has the shape the descriptor implies.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Weights::<S>::zeros(&self.descriptor);
        let want = expected.named_tensors();
        let have = self.weights.named_tensors();
        if want.len() != have.len() {
            return Err(Error::DescriptorMismatch(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::DescriptorMismatch(format!(
                    "{hn}: shape {:?}, expected {wn} {:?}",
                    ht.shape(),
                    wt.shape()
                )));
            }
        }
        if self.weights.self_attn.heads != self.descriptor.attention.self_heads
            || self.weights.cross_attn.heads != self.descriptor.attention.cross_heads
        {
            return Err(Error::DescriptorMismatch("head counts".into()));
        }
        Ok(())
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserNetwork<T> {
        DenoiserNetwork {
            descriptor: self.descriptor.clone(),
            weights: self.weights.cast(),
            role: self.role,
        }
    }

    /// Parameters of the denoiser proper, excluding the condition encoder.
    pub fn num_parameters(&self) -> usize {
        self.weights
            .named_tensors()
            .iter()
            .filter(|(n, _)| n != COND_EMBED)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Tokens for each class (`None` = null condition).
    pub fn condition_tokens(&self, classes: &[Option<usize>]) -> Result<Array3<S>> {
        let rows = classes
            .iter()
            .map(|c| self.embedding_row(*c))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.weights.cond_embed.select(Axis(0), &rows))
    }

    fn embedding_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.descriptor.num_classes),
            Some(c) if c < self.descriptor.num_classes => Ok(c),
            Some(c) => Err(Error::InvalidArgument(format!(
                "class {c} outside [0, {})",
                self.descriptor.num_classes
            ))),
        }
    }

    pub fn forward(&self, z: ArrayView2<'_, S>, ts: &[usize], cond: CondInput<'_, S>) -> Result<ForwardOutput<S>> {
        self.run(z, ts, cond, None)
    }

    pub fn forward_recorded(
        &self,
        z: ArrayView2<'_, S>,
        ts: &[usize],
        cond: CondInput<'_, S>,
        tape: &mut Tape<S>,
    ) -> Result<ForwardOutput<S>> {
        self.run(z, ts, cond, Some(tape))
    }

    fn run(
        &self,
        z: ArrayView2<'_, S>,
        ts: &[usize],
        cond: CondInput<'_, S>,
        tape: Option<&mut Tape<S>>,
    ) -> Result<ForwardOutput<S>> {
        let desc = &self.descriptor;
        let w = &self.weights;
        let rows = z.nrows();
        if z.ncols() != desc.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: desc.latent_dim,
                got: z.ncols(),
            });
        }
        if ts.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: ts.len(),
            });
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > desc.num_train_steps) {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: desc.num_train_steps,
            });
        }
        let (tokens, token_rows) = match cond {
            CondInput::Classes(classes) => {
                if classes.len() != rows {
                    return Err(Error::DimensionMismatch {
                        expected: rows,
                        got: classes.len(),
                    });
                }
                let idx = classes
                    .iter()
                    .map(|c| self.embedding_row(*c))
                    .collect::<Result<Vec<_>>>()?;
                (w.cond_embed.select(Axis(0), &idx), Some(idx))
            }
            CondInput::Tokens(t) => {
                let a = &desc.attention;
                if t.dim() != (rows, a.num_condition_tokens, a.condition_dim) {
                    return Err(Error::DimensionMismatch {
                        expected: rows * a.num_condition_tokens * a.condition_dim,
                        got: t.len(),
                    });
                }
                (t.to_owned(), None)
            }
            CondInput::Null => {
                let idx = vec![desc.num_classes; rows];
                (w.cond_embed.select(Axis(0), &idx), None)
            }
        };

        let features = time_features::<S>(ts, desc.num_train_steps, desc.time_embed_dim);
        let time_pre = w.time.fc1.forward(features.view());
        let time_act = silu(&time_pre);
        let temb = w.time.fc2.forward(time_act.view());
        let mut h = w.input.forward(z) + &temb;

        let recording = tape.is_some();
        let mut caches = Vec::new();
        let mut block_outputs = Vec::new();
        for kind in desc.blocks() {
            match kind {
                BlockKind::Res(i) => {
                    let r = &w.res[i];
                    let (u, ln) = r.norm.forward(h.view());
                    let a = r.fc1.forward(u.view());
                    let g = silu(&a);
                    h += &r.fc2.forward(g.view());
                    if recording {
                        caches.push(BlockCache::Res { ln, u, a, g });
                    }
                }
                BlockKind::SelfAttention => {
                    let attn = &w.self_attn;
                    let (xn, ln_x) = attn.norm.forward(h.view());
                    let (tn, ln_t) = attn.norm.forward(temb.view());
                    let mut kv = Array3::zeros((rows, 2, desc.model_dim));
                    kv.slice_mut(s![.., 0, ..]).assign(&xn);
                    kv.slice_mut(s![.., 1, ..]).assign(&tn);
                    let (y, cache) = attn.forward(xn.view(), kv.view());
                    h += &y;
                    if recording {
                        caches.push(BlockCache::SelfAttn {
                            ln_x,
                            ln_t,
                            xn,
                            kv,
                            attn: cache,
                        });
                    }
                }
                BlockKind::CrossAttention => {
                    let attn = &w.cross_attn;
                    let (xn, ln_x) = attn.norm.forward(h.view());
                    let (y, cache) = attn.forward(xn.view(), tokens.view());
                    h += &y;
                    if recording {
                        caches.push(BlockCache::CrossAttn { ln_x, xn, attn: cache });
                    }
                }
            }
            block_outputs.push(h.clone());
        }
        let (out_in, out_ln) = w.out_norm.forward(h.view());
        let eps = w.output.forward(out_in.view());
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network output".into()));
        }
        if let Some(tape) = tape {
            tape.cache = Some(ForwardCache {
                features,
                time_pre,
                time_act,
                z: z.to_owned(),
                tokens,
                token_rows,
                blocks: caches,
                out_ln,
                out_in,
            });
        }
        Ok(ForwardOutput {
            eps,
            blocks: block_outputs,
        })
    }

    /// Gradients of a scalar loss given ∂L/∂ε̂ and, optionally, ∂L/∂(block
    /// output) for each block.
    pub fn backward(
        &self,
        tape: &Tape<S>,
        d_eps: ArrayView2<'_, S>,
        d_blocks: Option<&[Array2<S>]>,
    ) -> Result<Weights<S>> {
        let cache = tape.cache.as_ref().ok_or(Error::MissingForward)?;
        let w = &self.weights;
        let desc = &self.descriptor;
        let kinds = desc.blocks();
        if let Some(db) = d_blocks {
            if db.len() != kinds.len() {
                return Err(Error::DimensionMismatch {
                    expected: kinds.len(),
                    got: db.len(),
                });
            }
        }
        if d_eps.dim() != (cache.z.nrows(), desc.latent_dim) {
            return Err(Error::DimensionMismatch {
                expected: cache.z.nrows() * desc.latent_dim,
                got: d_eps.len(),
            });
        }
        let mut g = w.zeros_like();

        let d_out_in = w.output.backward(cache.out_in.view(), d_eps, &mut g.output);
        let mut dh = w.out_norm.backward(&cache.out_ln, d_out_in.view(), &mut g.out_norm);
        let mut d_temb = Array2::<S>::zeros(dh.raw_dim());

        for (bi, (kind, bc)) in kinds.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(db) = d_blocks {
                dh += &db[bi];
            }
            match (kind, bc) {
                (BlockKind::Res(i), BlockCache::Res { ln, u, a, g: act }) => {
                    let r = &w.res[*i];
                    let gr = &mut g.res[*i];
                    let d_act = r.fc2.backward(act.view(), dh.view(), &mut gr.fc2);
                    let da = silu_backward(a, &d_act);
                    let du = r.fc1.backward(u.view(), da.view(), &mut gr.fc1);
                    dh += &r.norm.backward(ln, du.view(), &mut gr.norm);
                }
                (BlockKind::SelfAttention, BlockCache::SelfAttn { ln_x, ln_t, xn, kv, attn }) => {
                    let a = &w.self_attn;
                    let (mut dxn, dkv) = a.backward(xn.view(), kv.view(), attn, dh.view(), &mut g.self_attn);
                    dxn += &dkv.slice(s![.., 0, ..]);
                    let dtn = dkv.slice(s![.., 1, ..]).to_owned();
                    dh += &a.norm.backward(ln_x, dxn.view(), &mut g.self_attn.norm);
                    d_temb += &a.norm.backward(ln_t, dtn.view(), &mut g.self_attn.norm);
                }
                (BlockKind::CrossAttention, BlockCache::CrossAttn { ln_x, xn, attn }) => {
                    let a = &w.cross_attn;
                    let (dxn, dkv) = a.backward(xn.view(), cache.tokens.view(), attn, dh.view(), &mut g.cross_attn);
                    dh += &a.norm.backward(ln_x, dxn.view(), &mut g.cross_attn.norm);
                    if let Some(rows) = &cache.token_rows {
                        for (r, &e) in rows.iter().enumerate() {
                            let mut dst = g.cond_embed.index_axis_mut(Axis(0), e);
                            dst += &dkv.index_axis(Axis(0), r);
                        }
                    }
                }
                _ => unreachable!("block cache out of order"),
            }
        }

        w.input.backward_params(cache.z.view(), dh.view(), &mut g.input);
        d_temb += &dh;
        let d_act = w.time.fc2.backward(cache.time_act.view(), d_temb.view(), &mut g.time.fc2);
        let d_pre = silu_backward(&cache.time_pre, &d_act);
        w.time.fc1.backward_params(cache.features.view(), d_pre.view(), &mut g.time.fc1);
        Ok(g)
    }
}

impl<S: Scalar> NoisePredictor<S> for DenoiserNetwork<S> {
    fn latent_dim(&self) -> usize {
        self.descriptor.latent_dim
    }

    fn predict_noise(&self, z: ArrayView2<'_, S>, t: usize, cond: Conditioning<'_, S>) -> Result<Array2<S>> {
        let ts = vec![t; z.nrows()];
        let input = match cond {
            Conditioning::Null => CondInput::Null,
            Conditioning::Tokens(t) => CondInput::Tokens(t),
        };
        Ok(self.forward(z, &ts, input)?.eps)
    }
}

/// Mean of squared differences over all elements.
pub fn mse<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> S {
    let n = S::lit(a.len() as f64);
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>() / n
}

/// ∂/∂a of `k · mse(a, b)`.
pub fn mse_grad<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>, k: S) -> Array2<S> {
    let c = S::lit(2.0) * k / S::lit(a.len() as f64);
    (&a - &b).mapv(|v| v * c)
}
