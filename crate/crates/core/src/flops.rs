//! Analytic FLOPs of one denoiser forward pass for a single latent row.
//!
//! Every linear map costs `2·in·out` (bias, norms and activations are not
//! counted). An attention block with inner width `E = heads·head_dim` over
//! `n` key/value tokens of width `k` costs
//!
//! ```text
//! query 2·d·E + keys/values 2·n·(2·k·E) + scores 2·E·n + mixing 2·E·n + out 2·E·d
//! ```
//!
//! Self-attention attends over two tokens (the normalised stream and the
//! normalised time embedding), cross-attention over the condition tokens.

use serde::{Deserialize, Serialize};

use crate::nn::{ArchitectureDescriptor, BlockKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub component: String,
    pub flops: u64,
}

fn linear(input: usize, output: usize) -> u64 {
    2 * (input as u64) * (output as u64)
}

fn attention(model_dim: usize, kv_dim: usize, tokens: usize, inner: usize) -> u64 {
    let n = tokens as u64;
    linear(model_dim, inner) + n * 2 * linear(kv_dim, inner) + 4 * (inner as u64) * n + linear(inner, model_dim)
}

/// Per-component costs in forward order.
pub fn flops_breakdown(desc: &ArchitectureDescriptor) -> Vec<FlopsEntry> {
    let d = desc.model_dim;
    let a = &desc.attention;
    let hd = a.head_dim();
    let mut out = vec![
        FlopsEntry {
            component: "time.fc1".into(),
            flops: linear(desc.time_embed_dim, d),
        },
        FlopsEntry {
            component: "time.fc2".into(),
            flops: linear(d, d),
        },
        FlopsEntry {
            component: "input".into(),
            flops: linear(desc.latent_dim, d),
        },
    ];
    for block in desc.blocks() {
        let (component, flops) = match block {
            BlockKind::Res(i) => {
                let w = desc.res_widths[i];
                (format!("res.{i}"), linear(d, w) + linear(w, d))
            }
            BlockKind::SelfAttention => ("self_attn".to_string(), attention(d, d, 2, a.self_heads * hd)),
            BlockKind::CrossAttention => (
                "cross_attn".to_string(),
                attention(d, a.condition_dim, a.num_condition_tokens, a.cross_heads * hd),
            ),
        };
        out.push(FlopsEntry { component, flops });
    }
    out.push(FlopsEntry {
        component: "output".into(),
        flops: linear(d, desc.latent_dim),
    });
    out
}

/// FLOPs of one forward pass for one latent row.
pub fn flops_count(desc: &ArchitectureDescriptor) -> u64 {
    flops_breakdown(desc).iter().map(|e| e.flops).sum()
}

/// FLOPs of one denoising step: one or two network evaluations depending on
/// whether guidance needs the unconditional branch.
pub fn step_flops(desc: &ArchitectureDescriptor, evals_per_step: usize) -> u64 {
    flops_count(desc) * evals_per_step as u64
}
