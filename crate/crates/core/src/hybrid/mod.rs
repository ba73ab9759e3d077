//! Split-step sampling: a large model runs the first `k` inference steps of
//! a trajectory, then a small model finishes it from a handoff packet.
//!
//! Step positions count from 0 at the noisiest step. The large model owns
//! position `p` iff `p < k`, so `k` is the number of large-model steps.

mod packet;

use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

pub use packet::{HandoffPacket, Precision, PACKET_MAGIC, PACKET_VERSION};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::nn::ModelRole;
use crate::noise;
use crate::sampler::{next_timestep, sampler_step, Guidance, LatentState, NoisePredictor, SamplerConfig, SolverHistory};
use crate::scalar::Scalar;
use crate::schedule::{q_sample, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub sampler: SamplerConfig,
    /// Number of initial steps run by the large model, in `[0, T_inf]`.
    pub cloud_steps: usize,
    /// Drop the multistep solver history at the handoff, so the small model
    /// restarts at first order.
    #[serde(default)]
    pub reset_history: bool,
}

impl HybridPlan {
    pub fn new(sampler: SamplerConfig, cloud_steps: usize) -> Self {
        Self {
            sampler,
            cloud_steps,
            reset_history: false,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.sampler.num_inference_steps
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.sampler.validate(schedule)?;
        if self.cloud_steps > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds {} inference steps",
                self.cloud_steps,
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// Which model runs the step at `position`.
pub fn select_model(position: usize, num_steps: usize, cloud_steps: usize) -> Result<ModelRole> {
    if position >= num_steps {
        return Err(Error::StepOutOfRange {
            t: position,
            lo: 0,
            hi: num_steps.saturating_sub(1),
        });
    }
    Ok(if position < cloud_steps {
        ModelRole::Large
    } else {
        ModelRole::Small
    })
}

/// Where a trajectory begins.
#[derive(Debug, Clone, PartialEq)]
pub enum Start<S> {
    /// Pure noise at the first inference step.
    Noise { seed: u64, rows: usize },
    /// An existing latent noised forward to the step that leaves
    /// `strength·T_inf` steps to run.
    Latent { x0: Array2<S>, strength: f64, seed: u64 },
}

impl<S> Start<S> {
    pub fn seed(&self) -> u64 {
        match self {
            Start::Noise { seed, .. } | Start::Latent { seed, .. } => *seed,
        }
    }
}

/// First step position run for a latent start of the given strength.
pub fn start_position(strength: f64, num_steps: usize) -> Result<usize> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::InvalidArgument(format!("strength {strength} outside (0, 1]")));
    }
    let run = ((strength * num_steps as f64).round() as usize).clamp(1, num_steps);
    Ok(num_steps - run)
}

/// Initial latent state and the position of its first step.
pub fn initial_state<S: Scalar>(
    start: &Start<S>,
    latent_dim: usize,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<(LatentState<S>, usize)> {
    match start {
        Start::Noise { seed, rows } => {
            let z = noise::initial_latent(*seed, *rows, latent_dim);
            Ok((LatentState::new(z, timesteps[0], *seed)?, 0))
        }
        Start::Latent { x0, strength, seed } => {
            if x0.ncols() != latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: latent_dim,
                    got: x0.ncols(),
                });
            }
            let position = start_position(*strength, timesteps.len())?;
            let t = timesteps[position];
            let eps = noise::initial_latent::<S>(*seed, x0.nrows(), latent_dim);
            let z = q_sample(x0.view(), t, eps.view(), schedule)?;
            Ok((LatentState::new(z, t, *seed)?, position))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub position: usize,
    pub t_from: usize,
    pub t_to: usize,
    pub role: ModelRole,
    /// Latent after the step, one inner vector per row.
    pub latent: Vec<Vec<f64>>,
}

pub fn write_trace_jsonl<W: Write>(trace: &[TraceRecord], mut out: W) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn rows_of<S: Scalar>(z: ArrayView2<'_, S>) -> Vec<Vec<f64>> {
    z.rows().into_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Runs positions `[from, to)` of the inference schedule with one model.
#[allow(clippy::too_many_arguments)]
pub fn run_steps<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    role: ModelRole,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    tokens: Option<&Array3<S>>,
    mut state: LatentState<S>,
    history: &mut SolverHistory<S>,
    positions: std::ops::Range<usize>,
    trace: &mut Vec<TraceRecord>,
) -> Result<LatentState<S>> {
    let guide = Guidance {
        tokens: tokens.map(|t| t.view()),
        scale: sampler.guidance_scale,
    };
    for p in positions {
        if timesteps.get(p) != Some(&state.t) {
            return Err(Error::InvalidArgument(format!(
                "latent at t={} does not match step position {p}",
                state.t
            )));
        }
        let to = next_timestep(timesteps, p);
        let from = state.t;
        state = sampler_step(model, sampler, schedule, &state, to, &guide, history, p)?;
        trace.push(TraceRecord {
            position: p,
            t_from: from,
            t_to: to,
            role,
            latent: rows_of(state.z.view()),
        });
    }
    Ok(state)
}

fn check_tokens<S>(tokens: Option<&Array3<S>>, rows: usize) -> Result<()> {
    if let Some(t) = tokens {
        if t.dim().0 != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: t.dim().0,
            });
        }
    }
    Ok(())
}

/// Packages the state at the split point.
pub fn make_handoff<S: Scalar>(
    state: &LatentState<S>,
    plan: &HybridPlan,
    position: usize,
    timesteps: &[usize],
    history: SolverHistory<S>,
    tokens: Option<Array3<S>>,
) -> Result<HandoffPacket<S>> {
    let expected_t = timesteps.get(position).copied().unwrap_or(0);
    if position < plan.cloud_steps || state.t != expected_t {
        return Err(Error::Packet(format!(
            "handoff requested at position {position} (t={}), split is at position {}",
            state.t, plan.cloud_steps
        )));
    }
    check_tokens(tokens.as_ref(), state.z.nrows())?;
    let history = if plan.reset_history {
        SolverHistory::default()
    } else {
        history
    };
    Ok(HandoffPacket {
        sampler: plan.sampler,
        seed: state.seed,
        step_offset: position,
        remaining: timesteps[position.min(timesteps.len())..].to_vec(),
        latent: state.z.clone(),
        t: state.t,
        tokens,
        history,
    })
}

/// Phase one: runs the large model from `start` up to the split point and
/// returns the handoff packet.
pub fn run_cloud_phase<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    large: &M,
    plan: &HybridPlan,
    schedule: &NoiseSchedule,
    start: &Start<S>,
    tokens: Option<Array3<S>>,
    trace: &mut Vec<TraceRecord>,
) -> Result<HandoffPacket<S>> {
    plan.validate(schedule)?;
    let timesteps = schedule.inference_timesteps(plan.num_steps())?;
    let (state, first) = initial_state(start, large.latent_dim(), &timesteps, schedule)?;
    check_tokens(tokens.as_ref(), state.z.nrows())?;
    let split = plan.cloud_steps.max(first);
    let mut history = SolverHistory::default();
    let state = run_steps(
        large,
        ModelRole::Large,
        &plan.sampler,
        schedule,
        &timesteps,
        tokens.as_ref(),
        state,
        &mut history,
        first..split,
        trace,
    )?;
    make_handoff(&state, plan, split, &timesteps, history, tokens)
}

/// Phase two: finishes the trajectory described by `packet` with the small
/// model. Returns the final latent at t = 0.
pub fn run_edge_phase<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    small: &M,
    schedule: &NoiseSchedule,
    packet: &HandoffPacket<S>,
    trace: &mut Vec<TraceRecord>,
) -> Result<LatentState<S>> {
    packet.validate()?;
    if small.latent_dim() != packet.latent.ncols() {
        return Err(Error::DimensionMismatch {
            expected: small.latent_dim(),
            got: packet.latent.ncols(),
        });
    }
    let timesteps = schedule.inference_timesteps(packet.sampler.num_inference_steps)?;
    if timesteps[packet.step_offset.min(timesteps.len())..] != packet.remaining[..] {
        return Err(Error::Packet("remaining steps disagree with the local schedule".into()));
    }
    let state = LatentState::new(packet.latent.clone(), packet.t, packet.seed)?;
    let mut history = packet.history.clone();
    run_steps(
        small,
        ModelRole::Small,
        &packet.sampler,
        schedule,
        &timesteps,
        packet.tokens.as_ref(),
        state,
        &mut history,
        packet.step_offset..timesteps.len(),
        trace,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput<S> {
    /// Final latent.
    pub latent: Array2<S>,
    /// Decoded data-space sample.
    pub sample: Array2<S>,
    pub trace: Vec<TraceRecord>,
    /// Size of the packet had it been serialized at 16-bit precision.
    pub packet_bytes: usize,
}

/// Both phases in one process, with the packet passed in memory.
#[allow(clippy::too_many_arguments)]
pub fn run_hybrid<S: Scalar, L: NoisePredictor<S> + ?Sized, M: NoisePredictor<S> + ?Sized>(
    large: &L,
    small: &M,
    plan: &HybridPlan,
    schedule: &NoiseSchedule,
    start: &Start<S>,
    tokens: Option<Array3<S>>,
    codec: &LatentCodec<S>,
) -> Result<HybridOutput<S>> {
    if large.latent_dim() != small.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: large.latent_dim(),
            got: small.latent_dim(),
        });
    }
    let mut trace = Vec::new();
    let packet = run_cloud_phase(large, plan, schedule, start, tokens, &mut trace)?;
    let packet_bytes = packet.encoded_len(Precision::F16);
    let state = run_edge_phase(small, schedule, &packet, &mut trace)?;
    let sample = codec.decode(state.z.view())?;
    Ok(HybridOutput {
        latent: state.z,
        sample,
        trace,
        packet_bytes,
    })
}

/// Whole trajectory with a single model.
pub fn sample<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    start: &Start<S>,
    tokens: Option<&Array3<S>>,
) -> Result<LatentState<S>> {
    sampler.validate(schedule)?;
    let timesteps = schedule.inference_timesteps(sampler.num_inference_steps)?;
    let (state, first) = initial_state(start, model.latent_dim(), &timesteps, schedule)?;
    check_tokens(tokens, state.z.nrows())?;
    let mut history = SolverHistory::default();
    let mut trace = Vec::new();
    run_steps(
        model,
        ModelRole::Large,
        sampler,
        schedule,
        &timesteps,
        tokens,
        state,
        &mut history,
        first..timesteps.len(),
        &mut trace,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_boundaries() {
        for p in 0..25 {
            assert_eq!(select_model(p, 25, 0).unwrap(), ModelRole::Small);
            assert_eq!(select_model(p, 25, 25).unwrap(), ModelRole::Large);
            let want = if p < 10 { ModelRole::Large } else { ModelRole::Small };
            assert_eq!(select_model(p, 25, 10).unwrap(), want);
        }
        assert!(select_model(25, 25, 10).is_err());
    }

    #[test]
    fn start_positions() {
        assert_eq!(start_position(1.0, 25).unwrap(), 0);
        assert_eq!(start_position(0.4, 25).unwrap(), 15);
        assert_eq!(start_position(0.001, 25).unwrap(), 24);
        assert!(start_position(0.0, 25).is_err());
        assert!(start_position(1.5, 25).is_err());
    }
}
