#![allow(dead_code)]

use hybridsd::nn::{ArchitectureDescriptor, DenoiserNetwork, ModelRole};
use hybridsd::pruning::{prune, PruningPlan};
use hybridsd::sampler::{SamplerConfig, SamplerKind};
use hybridsd::schedule::{NoiseSchedule, ScheduleConfig};
use hybridsd::{Codec, Denoiser};
use hybridsd_edgecloud::{Condition, GenerateRequest, Server, ServerHandle, ServerState};

pub fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

/// Untrained default-architecture model and a pruned copy.
pub fn models() -> (Denoiser, Denoiser) {
    let large = DenoiserNetwork::<f32>::new(ArchitectureDescriptor::large(2, 4, 1000), ModelRole::Large, 17).unwrap();
    let plan = PruningPlan::from_ratios(&large.descriptor, &[0.5, 0.75, 0.25, 0.5, 0.5, 0.75], 0.3, 0.8).unwrap();
    let small = prune(&large, &plan).unwrap();
    (large, small)
}

pub fn start_server(large: Denoiser) -> ServerHandle {
    let state = ServerState::new(large, schedule(), Codec::identity(2));
    Server::bind("127.0.0.1:0", state).unwrap().spawn().unwrap()
}

pub fn request(seed: u64, k: usize, kind: SamplerKind) -> GenerateRequest {
    GenerateRequest {
        seed,
        cloud_steps: k,
        sampler: SamplerConfig {
            kind,
            num_inference_steps: 25,
            guidance_scale: 7.0,
            eta: if kind == SamplerKind::Ddim { 1.0 } else { 0.0 },
        },
        conditions: vec![Condition::Class(0), Condition::Class(3), Condition::Null, Condition::Class(1)],
        reset_history: false,
        precision: hybridsd::hybrid::Precision::F32,
    }
}
