mod common;

use hybridsd::codec::LatentCodec;
use hybridsd::hybrid::{
    make_handoff, run_cloud_phase, run_edge_phase, run_hybrid, sample, write_trace_jsonl, HandoffPacket, HybridPlan,
    Precision, Start, TraceRecord,
};
use hybridsd::nn::{DenoiserNetwork, ModelRole};
use hybridsd::pruning::{prune, PruningPlan};
use hybridsd::sampler::{LatentState, SamplerConfig, SamplerKind, SolverHistory};
use hybridsd::schedule::{NoiseSchedule, ScheduleConfig};
use hybridsd::Error;
use ndarray::{Array2, Array3};

use common::{randomized, tiny_descriptor};

fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn sampler(kind: SamplerKind, steps: usize) -> SamplerConfig {
    SamplerConfig {
        kind,
        num_inference_steps: steps,
        guidance_scale: 7.0,
        eta: if kind == SamplerKind::Ddim { 0.5 } else { 0.0 },
    }
}

fn pair() -> (DenoiserNetwork<f32>, DenoiserNetwork<f32>) {
    let large = randomized::<f32>(tiny_descriptor(), 1);
    let plan = PruningPlan::from_ratios(&large.descriptor, &[0.5, 0.5, 0.75, 0.25, 0.5], 0.3, 0.8).unwrap();
    let small = prune(&large, &plan).unwrap();
    (large, small)
}

fn tokens(net: &DenoiserNetwork<f32>, rows: usize) -> Array3<f32> {
    let classes: Vec<Option<usize>> = (0..rows).map(|i| Some(i % 3)).collect();
    net.condition_tokens(&classes).unwrap()
}

const KINDS: [SamplerKind; 3] = [SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::Dpm2m];

#[test]
fn identical_models_reproduce_single_model_sampling_for_every_k() {
    let s = schedule();
    let (large, _) = pair();
    let codec = LatentCodec::identity(2);
    let start = Start::Noise { seed: 3, rows: 5 };
    let tok = tokens(&large, 5);
    for kind in KINDS {
        let cfg = sampler(kind, 12);
        let reference = sample(&large, &cfg, &s, &start, Some(&tok)).unwrap();
        for k in 0..=12 {
            let out = run_hybrid(&large, &large, &HybridPlan::new(cfg, k), &s, &start, Some(tok.clone()), &codec).unwrap();
            assert_eq!(out.latent, reference.z, "{kind:?} k={k}");
            assert_eq!(out.sample, reference.z);
        }
    }
}

#[test]
fn all_cloud_split_equals_large_only() {
    let s = schedule();
    let (large, small) = pair();
    let start = Start::Noise { seed: 4, rows: 3 };
    let tok = tokens(&large, 3);
    for kind in KINDS {
        let cfg = sampler(kind, 25);
        let reference = sample(&large, &cfg, &s, &start, Some(&tok)).unwrap();
        let plan = HybridPlan::new(cfg, 25);
        let out = run_hybrid(&large, &small, &plan, &s, &start, Some(tok.clone()), &LatentCodec::identity(2)).unwrap();
        assert_eq!(out.latent, reference.z);
        assert!(out.trace.iter().all(|r| r.role == ModelRole::Large));

        let none = run_hybrid(&large, &small, &HybridPlan::new(cfg, 0), &s, &start, Some(tok.clone()), &LatentCodec::identity(2))
            .unwrap();
        let small_only = sample(&small, &cfg, &s, &start, Some(&tok)).unwrap();
        assert_eq!(none.latent, small_only.z);
    }
}

#[test]
fn serialized_packet_continues_like_memory() {
    let s = schedule();
    let (large, small) = pair();
    let start = Start::Noise { seed: 5, rows: 4 };
    for kind in KINDS {
        for k in [0, 1, 12, 24, 25] {
            let plan = HybridPlan::new(sampler(kind, 25), k);
            let mut trace = Vec::new();
            let packet = run_cloud_phase(&large, &plan, &s, &start, Some(tokens(&large, 4)), &mut trace).unwrap();
            let direct = run_edge_phase(&small, &s, &packet, &mut Vec::new()).unwrap();

            let exact = HandoffPacket::<f32>::decode(&packet.encode(Precision::F32)).unwrap();
            assert_eq!(exact, packet);
            let via_wire = run_edge_phase(&small, &s, &exact, &mut Vec::new()).unwrap();
            assert_eq!(via_wire, direct, "{kind:?} k={k}");

            let narrow = HandoffPacket::<f32>::decode(&packet.encode(Precision::F16)).unwrap();
            let lossy = run_edge_phase(&small, &s, &narrow, &mut Vec::new()).unwrap();
            for (a, b) in lossy.z.iter().zip(direct.z.iter()) {
                assert!((a - b).abs() <= 0.05 * (1.0 + b.abs()), "{kind:?} k={k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn multistep_history_travels_with_the_packet() {
    let s = schedule();
    let (large, small) = pair();
    let start = Start::Noise { seed: 6, rows: 2 };
    let cfg = sampler(SamplerKind::Dpm2m, 25);
    let timesteps = s.inference_timesteps(25).unwrap();

    let empty = run_cloud_phase(&large, &HybridPlan::new(cfg, 0), &s, &start, Some(tokens(&large, 2)), &mut Vec::new()).unwrap();
    assert!(empty.history.is_empty());
    assert_eq!(empty.latent, hybridsd::noise::initial_latent::<f32>(6, 2, 2));
    assert_eq!(empty.t, 1000);

    let plan = HybridPlan::new(cfg, 10);
    let packet = run_cloud_phase(&large, &plan, &s, &start, Some(tokens(&large, 2)), &mut Vec::new()).unwrap();
    assert_eq!(packet.history.prev.as_ref().unwrap().t, timesteps[9]);
    assert_eq!(packet.t, timesteps[10]);
    assert_eq!(packet.remaining, timesteps[10..]);
    let with = packet.encoded_len(Precision::F16);
    let mut bare = packet.clone();
    bare.history = SolverHistory::default();
    assert_eq!(with - bare.encoded_len(Precision::F16), 4 + 2 * 2 * 2);

    let reset = HybridPlan {
        reset_history: true,
        ..plan
    };
    let restarted = run_cloud_phase(&large, &reset, &s, &start, Some(tokens(&large, 2)), &mut Vec::new()).unwrap();
    assert!(restarted.history.is_empty());
    let a = run_edge_phase(&small, &s, &packet, &mut Vec::new()).unwrap();
    let b = run_edge_phase(&small, &s, &restarted, &mut Vec::new()).unwrap();
    assert_ne!(a.z, b.z);
}

#[test]
fn handoff_only_at_the_split_point() {
    let s = schedule();
    let timesteps = s.inference_timesteps(25).unwrap();
    let plan = HybridPlan::new(sampler(SamplerKind::Ddim, 25), 10);
    let state = LatentState::new(Array2::<f32>::zeros((1, 2)), timesteps[5], 0).unwrap();
    assert!(matches!(
        make_handoff(&state, &plan, 5, &timesteps, SolverHistory::default(), None),
        Err(Error::Packet(_))
    ));
    let state = LatentState::new(Array2::<f32>::zeros((1, 2)), timesteps[9], 0).unwrap();
    assert!(make_handoff(&state, &plan, 10, &timesteps, SolverHistory::default(), None).is_err());
    let state = LatentState::new(Array2::<f32>::zeros((1, 2)), timesteps[10], 0).unwrap();
    assert!(make_handoff(&state, &plan, 10, &timesteps, SolverHistory::default(), None).is_ok());
}

#[test]
fn paper_sized_payload() {
    let packet = HandoffPacket::<f32> {
        sampler: SamplerConfig::default(),
        seed: 0,
        step_offset: 10,
        remaining: vec![600; 15],
        latent: Array2::zeros((1, 4 * 64 * 64)),
        t: 600,
        tokens: Some(Array3::zeros((1, 77, 768))),
        history: SolverHistory::default(),
    };
    assert_eq!(packet.tensor_bytes(Precision::F16), 151_040);
    assert_eq!(packet.encoded_len(Precision::F16), 151_040 + packet.header_bytes());
    assert_eq!(packet.encode(Precision::F16).len(), packet.encoded_len(Precision::F16));
}

#[test]
fn trace_records_every_step_and_the_switch() {
    let s = schedule();
    let (large, small) = pair();
    let plan = HybridPlan::new(sampler(SamplerKind::Dpm2m, 25), 10);
    let start = Start::Noise { seed: 7, rows: 2 };
    let out = run_hybrid(&large, &small, &plan, &s, &start, Some(tokens(&large, 2)), &LatentCodec::identity(2)).unwrap();
    assert_eq!(out.trace.len(), 25);
    for (p, r) in out.trace.iter().enumerate() {
        assert_eq!(r.position, p);
        assert_eq!(r.role, if p < 10 { ModelRole::Large } else { ModelRole::Small });
    }
    assert_eq!(out.trace.last().unwrap().t_to, 0);
    let last: Vec<Vec<f64>> = out.latent.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    assert_eq!(out.trace.last().unwrap().latent, last);

    let mut buf = Vec::new();
    write_trace_jsonl(&out.trace, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let parsed: Vec<TraceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.trace);
}

#[test]
fn image_to_image_starts_partway() {
    let s = schedule();
    let (large, small) = pair();
    let x0 = Array2::from_shape_vec((2, 2), vec![3.0f32, 0.0, -3.0, 0.5]).unwrap();
    let start = Start::Latent {
        x0: x0.clone(),
        strength: 0.4,
        seed: 8,
    };
    let cfg = sampler(SamplerKind::Ddim, 25);
    for k in [0, 10, 15, 20, 25] {
        let out = run_hybrid(&large, &small, &HybridPlan::new(cfg, k), &s, &start, Some(tokens(&large, 2)), &LatentCodec::identity(2))
            .unwrap();
        assert_eq!(out.trace.len(), 10);
        assert_eq!(out.trace[0].position, 15);
        for r in &out.trace {
            assert_eq!(r.role, if r.position < k { ModelRole::Large } else { ModelRole::Small });
        }
    }
    let same = run_hybrid(&large, &large, &HybridPlan::new(cfg, 18), &s, &start, Some(tokens(&large, 2)), &LatentCodec::identity(2))
        .unwrap();
    let reference = sample(&large, &cfg, &s, &start, Some(&tokens(&large, 2))).unwrap();
    assert_eq!(same.latent, reference.z);
}

#[test]
fn mismatched_models_are_rejected() {
    let s = schedule();
    let (large, _) = pair();
    let mut d = tiny_descriptor();
    d.latent_dim = 3;
    let other = randomized::<f32>(d, 2);
    let plan = HybridPlan::new(sampler(SamplerKind::Ddim, 25), 5);
    let start = Start::Noise { seed: 0, rows: 1 };
    assert!(run_hybrid(&large, &other, &plan, &s, &start, None, &LatentCodec::identity(2)).is_err());
    let too_far = HybridPlan::new(sampler(SamplerKind::Ddim, 25), 26);
    assert!(run_hybrid(&large, &large, &too_far, &s, &start, None, &LatentCodec::identity(2)).is_err());
}
