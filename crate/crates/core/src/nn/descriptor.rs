use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDescriptor {
    /// Full (unpruned) inner width shared by all heads.
    pub embed_dim: usize,
    /// Full (unpruned) head count; `embed_dim / num_heads` is the head width.
    pub num_heads: usize,
    /// Heads currently present in the self-attention block.
    pub self_heads: usize,
    /// Heads currently present in the cross-attention block.
    pub cross_heads: usize,
    pub num_condition_tokens: usize,
    pub condition_dim: usize,
}

impl AttentionDescriptor {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Shape of a denoiser. Block order is `res[..position]`, self-attention,
/// cross-attention, `res[position..]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub latent_dim: usize,
    /// Width of the residual stream.
    pub model_dim: usize,
    /// Hidden width of each residual block's first layer.
    pub res_widths: Vec<usize>,
    /// Number of residual blocks before the attention pair.
    pub attention_position: usize,
    /// Number of sinusoidal time features (even).
    pub time_embed_dim: usize,
    pub attention: AttentionDescriptor,
    pub num_classes: usize,
    /// T of the training schedule; the time embedding is a function of t/T.
    pub num_train_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Res(usize),
    SelfAttention,
    CrossAttention,
}

impl ArchitectureDescriptor {
    /// The default large denoiser: four residual blocks of width 128 and a
    /// 64-wide, 4-head attention pair.
    pub fn large(latent_dim: usize, num_classes: usize, num_train_steps: usize) -> Self {
        Self {
            latent_dim,
            model_dim: 64,
            res_widths: vec![128; 4],
            attention_position: 2,
            time_embed_dim: 16,
            attention: AttentionDescriptor {
                embed_dim: 64,
                num_heads: 4,
                self_heads: 4,
                cross_heads: 4,
                num_condition_tokens: 4,
                condition_dim: 64,
            },
            num_classes,
            num_train_steps,
        }
    }

    pub fn num_res_blocks(&self) -> usize {
        self.res_widths.len()
    }

    pub fn blocks(&self) -> Vec<BlockKind> {
        let mut out: Vec<BlockKind> = (0..self.attention_position).map(BlockKind::Res).collect();
        out.push(BlockKind::SelfAttention);
        out.push(BlockKind::CrossAttention);
        out.extend((self.attention_position..self.num_res_blocks()).map(BlockKind::Res));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::DescriptorMismatch(m));
        let a = &self.attention;
        if self.latent_dim == 0 || self.model_dim == 0 || self.num_classes == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.res_widths.iter().any(|&w| w == 0) {
            return fail("residual widths must be positive".into());
        }
        if self.attention_position > self.num_res_blocks() {
            return fail("attention position past the last residual block".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail("time_embed_dim must be positive and even".into());
        }
        if a.num_heads == 0 || a.embed_dim % a.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                a.embed_dim, a.num_heads
            ));
        }
        if a.self_heads == 0 || a.self_heads > a.num_heads || a.cross_heads == 0 || a.cross_heads > a.num_heads {
            return fail("active head counts must be in [1, num_heads]".into());
        }
        if a.num_condition_tokens == 0 || a.condition_dim == 0 {
            return fail("condition tokens must be non-empty".into());
        }
        if self.num_train_steps == 0 {
            return fail("num_train_steps must be positive".into());
        }
        Ok(())
    }
}
