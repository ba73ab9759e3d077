//! Significance-scored structured pruning.
//!
//! Prunable units are the first layer of every residual block (one row per
//! hidden unit) and the self- and cross-attention blocks (one group per
//! head). Each unit is scored by how far pruning half of it moves the
//! statistics of fully generated latents; low scorers are pruned hardest.

use std::cmp::Reverse;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::flops_count;
use crate::hybrid::run_steps;
use crate::nn::{
    distill, Attention, ArchitectureDescriptor, BlockKind, DenoiserNetwork, DistillConfig, DistillLog, LabeledPoints,
    Linear, ModelRole, ResBlock,
};
use crate::noise;
use crate::sampler::{LatentState, SamplerConfig, SamplerKind, SolverHistory};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

pub const MILD_RATIO: f64 = 0.25;
pub const DEFAULT_RATIO: f64 = 0.50;
pub const AGGRESSIVE_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ResFirstLayer,
    SelfAttnHeads,
    CrossAttnHeads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableUnit {
    pub name: String,
    pub kind: UnitKind,
    /// Hidden units or heads currently present.
    pub width: usize,
}

/// Units in forward order.
pub fn prunable_units(desc: &ArchitectureDescriptor) -> Vec<PrunableUnit> {
    desc.blocks()
        .into_iter()
        .map(|b| match b {
            BlockKind::Res(i) => PrunableUnit {
                name: format!("res.{i}"),
                kind: UnitKind::ResFirstLayer,
                width: desc.res_widths[i],
            },
            BlockKind::SelfAttention => PrunableUnit {
                name: "self_attn".into(),
                kind: UnitKind::SelfAttnHeads,
                width: desc.attention.self_heads,
            },
            BlockKind::CrossAttention => PrunableUnit {
                name: "cross_attn".into(),
                kind: UnitKind::CrossAttnHeads,
                width: desc.attention.cross_heads,
            },
        })
        .collect()
}

/// Survivors of pruning `width` units at `ratio`: `round((1−ratio)·width)`
/// rounded half away from zero, never below one.
pub fn surviving_width(width: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * width as f64).round() as usize).max(1)
}

/// Indices of the `keep` largest scores, ties to the lower index, returned
/// in ascending index order.
pub fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// L1 norm of each row of a layer's weight matrix.
pub fn row_l1<S: Scalar>(layer: &Linear<S>) -> Vec<f64> {
    layer
        .weight
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.as_f64().abs()).sum())
        .collect()
}

pub fn head_l1<S: Scalar>(attn: &Attention<S>) -> Vec<f64> {
    (0..attn.heads).map(|h| attn.head_l1(h)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedUnit {
    pub name: String,
    pub kind: UnitKind,
    pub width: usize,
    pub ratio: f64,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Rank-quantile thresholds.
    pub a: f64,
    pub b: f64,
    pub units: Vec<PlannedUnit>,
    pub source: ArchitectureDescriptor,
    pub result: ArchitectureDescriptor,
}

impl PruningPlan {
    /// Plan with an explicit ratio per unit (in forward order).
    pub fn from_ratios(source: &ArchitectureDescriptor, ratios: &[f64], a: f64, b: f64) -> Result<Self> {
        let units = prunable_units(source);
        if ratios.len() != units.len() {
            return Err(Error::DimensionMismatch {
                expected: units.len(),
                got: ratios.len(),
            });
        }
        if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("ratio {r} outside [0, 1)")));
        }
        let planned: Vec<PlannedUnit> = units
            .into_iter()
            .zip(ratios)
            .map(|(u, &ratio)| PlannedUnit {
                kept: surviving_width(u.width, ratio),
                name: u.name,
                kind: u.kind,
                width: u.width,
                ratio,
            })
            .collect();
        let mut result = source.clone();
        for u in &planned {
            match u.kind {
                UnitKind::ResFirstLayer => {
                    let i: usize = u.name["res.".len()..].parse().expect("unit name");
                    result.res_widths[i] = u.kept;
                }
                UnitKind::SelfAttnHeads => result.attention.self_heads = u.kept,
                UnitKind::CrossAttnHeads => result.attention.cross_heads = u.kept,
            }
        }
        Ok(Self {
            a,
            b,
            units: planned,
            source: source.clone(),
            result,
        })
    }

    /// Prunes only `unit`, at `ratio`.
    pub fn single(source: &ArchitectureDescriptor, unit: &str, ratio: f64) -> Result<Self> {
        let units = prunable_units(source);
        let idx = units
            .iter()
            .position(|u| u.name == unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        let mut ratios = vec![0.0; units.len()];
        ratios[idx] = ratio;
        Self::from_ratios(source, &ratios, 0.0, 1.0)
    }
}

/// Removes the lowest-L1 units named by `plan`.
pub fn prune<S: Scalar>(net: &DenoiserNetwork<S>, plan: &PruningPlan) -> Result<DenoiserNetwork<S>> {
    if net.descriptor != plan.source {
        return Err(Error::DescriptorMismatch(
            "plan was built for a different architecture".into(),
        ));
    }
    let mut w = net.weights.clone();
    for u in &plan.units {
        if u.kept == u.width {
            continue;
        }
        match u.kind {
            UnitKind::ResFirstLayer => {
                let i: usize = u.name["res.".len()..].parse().expect("unit name");
                let block = &net.weights.res[i];
                let keep = top_indices(&row_l1(&block.fc1), u.kept);
                w.res[i] = ResBlock {
                    norm: block.norm.clone(),
                    fc1: Linear {
                        weight: block.fc1.weight.select(Axis(0), &keep),
                        bias: block.fc1.bias.as_ref().map(|b| b.select(Axis(0), &keep)),
                    },
                    fc2: Linear {
                        weight: block.fc2.weight.select(Axis(1), &keep),
                        bias: block.fc2.bias.clone(),
                    },
                };
            }
            UnitKind::SelfAttnHeads => {
                let keep = top_indices(&head_l1(&net.weights.self_attn), u.kept);
                w.self_attn = net.weights.self_attn.select_heads(&keep);
            }
            UnitKind::CrossAttnHeads => {
                let keep = top_indices(&head_l1(&net.weights.cross_attn), u.kept);
                w.cross_attn = net.weights.cross_attn.select_heads(&keep);
            }
        }
    }
    let role = if plan.units.iter().all(|u| u.kept == u.width) {
        net.role
    } else {
        ModelRole::Small
    };
    DenoiserNetwork::from_weights(plan.result.clone(), w, role)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub num_prompts: usize,
    pub probe_ratio: f64,
    pub sampler: SamplerConfig,
    /// Prompt `i` uses class `i mod num_classes` and seed `seed + i`.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_prompts: 50,
            probe_ratio: 0.5,
            sampler: SamplerConfig {
                kind: SamplerKind::Ddim,
                num_inference_steps: 25,
                guidance_scale: 7.0,
                eta: 0.0,
            },
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn prompts(&self, num_classes: usize) -> Vec<(Option<usize>, u64)> {
        (0..self.num_prompts)
            .map(|i| (Some(i % num_classes), self.seed + i as u64))
            .collect()
    }
}

/// Final latents of every prompt, one row each.
pub fn generate_prompts<S: Scalar>(
    net: &DenoiserNetwork<S>,
    prompts: &[(Option<usize>, u64)],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Array2<S>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no probe prompts".into()));
    }
    if sampler.kind != SamplerKind::Ddim || sampler.eta != 0.0 {
        return Err(Error::InvalidArgument("probe sampling must be deterministic DDIM".into()));
    }
    sampler.validate(schedule)?;
    let dim = net.descriptor.latent_dim;
    let timesteps = schedule.inference_timesteps(sampler.num_inference_steps)?;
    // Deterministic DDIM draws no noise after the start, so every prompt's
    // trajectory is fixed by its initial latent and can share one batch.
    let mut z = Array2::zeros((prompts.len(), dim));
    for (row, &(_, seed)) in prompts.iter().enumerate() {
        z.row_mut(row).assign(&noise::initial_latent::<S>(seed, 1, dim).row(0));
    }
    let classes: Vec<Option<usize>> = prompts.iter().map(|p| p.0).collect();
    let tokens: Array3<S> = net.condition_tokens(&classes)?;
    let state = LatentState::new(z, timesteps[0], 0)?;
    let mut history = SolverHistory::default();
    let mut trace = Vec::new();
    let out = run_steps(
        net,
        net.role,
        sampler,
        schedule,
        &timesteps,
        Some(&tokens),
        state,
        &mut history,
        0..timesteps.len(),
        &mut trace,
    )?;
    Ok(out.z)
}

fn column_stats(z: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = z.mean_axis(Axis(0)).expect("nonempty");
    let std = z.std_axis(Axis(0), 0.0);
    (mean, std)
}

/// `‖avg(z0) − avg(z0′)‖₂ + ‖std(z0) − std(z0′)‖₂` with per-coordinate
/// statistics over the prompt batch.
pub fn score_from_latents(z0: ArrayView2<'_, f64>, z0_mod: ArrayView2<'_, f64>) -> Result<f64> {
    if z0.dim() != z0_mod.dim() || z0.nrows() == 0 {
        return Err(Error::DimensionMismatch {
            expected: z0.len(),
            got: z0_mod.len(),
        });
    }
    let (m0, s0) = column_stats(z0);
    let (m1, s1) = column_stats(z0_mod);
    let norm = |a: &Array1<f64>, b: &Array1<f64>| (a - b).mapv(|v| v * v).sum().sqrt();
    Ok(norm(&m0, &m1) + norm(&s0, &s1))
}

/// Latents of the unmodified model and of the model with `unit` pruned at
/// `ratio`.
pub fn probe_latents<S: Scalar>(
    net: &DenoiserNetwork<S>,
    unit: &str,
    ratio: f64,
    probe: &ProbeConfig,
    schedule: &NoiseSchedule,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let plan = PruningPlan::single(&net.descriptor, unit, ratio)?;
    let modified = prune(net, &plan)?;
    let prompts = probe.prompts(net.descriptor.num_classes);
    let z0 = generate_prompts(net, &prompts, &probe.sampler, schedule)?;
    let z1 = generate_prompts(&modified, &prompts, &probe.sampler, schedule)?;
    Ok((z0.mapv(|v| v.as_f64()), z1.mapv(|v| v.as_f64())))
}

pub fn probe_score<S: Scalar>(
    net: &DenoiserNetwork<S>,
    unit: &str,
    ratio: f64,
    probe: &ProbeConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (z0, z1) = probe_latents(net, unit, ratio, probe, schedule)?;
    score_from_latents(z0.view(), z1.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub name: String,
    pub kind: UnitKind,
    pub width: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub probe: ProbeConfig,
    /// Forward order.
    pub scores: Vec<UnitScore>,
}

/// Scores every prunable unit. Units are probed concurrently; the baseline
/// latents are generated once.
pub fn score_units<S: Scalar>(net: &DenoiserNetwork<S>, probe: &ProbeConfig, schedule: &NoiseSchedule) -> Result<ScoreTable> {
    if !(probe.probe_ratio > 0.0 && probe.probe_ratio < 1.0) {
        return Err(Error::InvalidArgument("probe ratio must be in (0, 1)".into()));
    }
    let prompts = probe.prompts(net.descriptor.num_classes);
    let base = generate_prompts(net, &prompts, &probe.sampler, schedule)?.mapv(|v| v.as_f64());
    let scores = prunable_units(&net.descriptor)
        .into_par_iter()
        .map(|u| {
            let plan = PruningPlan::single(&net.descriptor, &u.name, probe.probe_ratio)?;
            let modified = prune(net, &plan)?;
            let z = generate_prompts(&modified, &prompts, &probe.sampler, schedule)?.mapv(|v| v.as_f64());
            Ok(UnitScore {
                score: score_from_latents(base.view(), z.view())?,
                name: u.name,
                kind: u.kind,
                width: u.width,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { probe: *probe, scores })
}

/// Ratio for a unit at rank quantile `q`.
fn ratio_for_quantile(q: f64, a: f64, b: f64) -> f64 {
    if q < a {
        AGGRESSIVE_RATIO
    } else if q >= b {
        MILD_RATIO
    } else {
        DEFAULT_RATIO
    }
}

/// Ranks units by ascending score (equal scores rank the earlier layer
/// higher); a unit at rank `r` of `n` sits at quantile `r/n`.
pub fn assign_ratios(table: &ScoreTable, source: &ArchitectureDescriptor, a: f64, b: f64) -> Result<PruningPlan> {
    if !(0.0 <= a && a < b && b <= 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 <= a < b <= 1, got a={a}, b={b}")));
    }
    let units = prunable_units(source);
    if table.scores.len() != units.len() || table.scores.iter().zip(&units).any(|(s, u)| s.name != u.name) {
        return Err(Error::DescriptorMismatch("score table does not match the model's units".into()));
    }
    if let Some(s) = table.scores.iter().find(|s| !(s.score >= 0.0)) {
        return Err(Error::InvalidArgument(format!("score of {} is {}", s.name, s.score)));
    }
    let n = units.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        table.scores[i]
            .score
            .total_cmp(&table.scores[j].score)
            .then(Reverse(i).cmp(&Reverse(j)))
    });
    let mut ratios = vec![0.0; n];
    for (rank, &unit) in order.iter().enumerate() {
        ratios[unit] = ratio_for_quantile(rank as f64 / n as f64, a, b);
    }
    PruningPlan::from_ratios(source, &ratios, a, b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub probe: ProbeConfig,
    pub a: f64,
    pub b: f64,
    pub distill: DistillConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            a: 0.3,
            b: 0.8,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildReport {
    pub scores: ScoreTable,
    pub plan: PruningPlan,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub distill: DistillLog,
}

impl BuildReport {
    pub fn param_reduction(&self) -> f64 {
        1.0 - self.params_after as f64 / self.params_before as f64
    }
}

/// Score, assign, prune, distill.
pub fn build_small_model<S: Scalar>(
    teacher: &DenoiserNetwork<S>,
    data: &LabeledPoints<'_>,
    schedule: &NoiseSchedule,
    config: &BuildConfig,
) -> Result<(DenoiserNetwork<S>, BuildReport)> {
    let scores = score_units(teacher, &config.probe, schedule)?;
    let plan = assign_ratios(&scores, &teacher.descriptor, config.a, config.b)?;
    let mut small = prune(teacher, &plan)?;
    let log = distill(&mut small, teacher, data, schedule, &config.distill)?;
    let report = BuildReport {
        params_before: teacher.num_parameters(),
        params_after: small.num_parameters(),
        flops_before: flops_count(&teacher.descriptor),
        flops_after: flops_count(&small.descriptor),
        scores,
        plan,
        distill: log,
    };
    Ok((small, report))
}
