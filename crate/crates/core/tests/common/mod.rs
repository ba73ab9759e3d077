#![allow(dead_code)]

use hybridsd::nn::{ArchitectureDescriptor, AttentionDescriptor, DenoiserNetwork, ModelRole};
use hybridsd::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A deliberately uneven little architecture: odd widths, residual blocks
/// on both sides of the attention pair, more condition tokens than heads.
pub fn tiny_descriptor() -> ArchitectureDescriptor {
    ArchitectureDescriptor {
        latent_dim: 2,
        model_dim: 8,
        res_widths: vec![6, 5, 7],
        attention_position: 1,
        time_embed_dim: 4,
        attention: AttentionDescriptor {
            embed_dim: 8,
            num_heads: 2,
            self_heads: 2,
            cross_heads: 2,
            num_condition_tokens: 3,
            condition_dim: 5,
        },
        num_classes: 3,
        num_train_steps: 1000,
    }
}

/// Network whose every parameter (norm gains and biases included) is
/// drawn at random, so no gradient is structurally trivial.
pub fn randomized<S: Scalar>(desc: ArchitectureDescriptor, seed: u64) -> DenoiserNetwork<S> {
    let mut net = DenoiserNetwork::<S>::new(desc, ModelRole::Large, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    net.weights.visit_mut(&mut |_, mut t| {
        t.mapv_inplace(|v| v + S::lit(rng.gen_range(-0.3..0.3)));
    });
    net
}
