//! Train, prune and distill per training seed, then sample every split
//! point and score the samples.

use std::path::Path;

use hybridsd::data::{gen_dataset, ToyDataset};
use hybridsd::flops::flops_count;
use hybridsd::hybrid::{run_hybrid, HybridPlan, Start};
use hybridsd::metrics::{condition_accuracy, mode_agreement, sliced_wasserstein, MetricsRecord};
use hybridsd::nn::{checkpoint, train_task, DenoiserNetwork, ModelRole, TrainingLog};
use hybridsd::pruning::{build_small_model, BuildConfig, BuildReport, PruningPlan};
use hybridsd::schedule::NoiseSchedule;
use hybridsd::{Codec, Denoiser};
use hybridsd_edgecloud::{split_cost, CostModel};
use log::info;
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::svg::scatter_svg;

pub const RESULTS_VERSION: u32 = 1;

pub fn training_data(cfg: &ExperimentConfig, training_seed: u64) -> Result<ToyDataset> {
    let d = &cfg.dataset;
    Ok(gen_dataset(d.kind, d.n, d.components, d.seed + training_seed)?)
}

pub fn held_out_data(cfg: &ExperimentConfig) -> Result<ToyDataset> {
    let d = &cfg.dataset;
    Ok(gen_dataset(d.kind, d.held_out_n, d.components, d.held_out_seed)?)
}

pub fn train_large(
    cfg: &ExperimentConfig,
    training_seed: u64,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
) -> Result<(Denoiser, TrainingLog)> {
    let mut net = DenoiserNetwork::new(cfg.descriptor(), ModelRole::Large, training_seed)?;
    let train = hybridsd::nn::TrainConfig {
        seed: training_seed,
        ..cfg.train
    };
    let log = train_task(&mut net, &data.as_labeled(), schedule, &train)?;
    Ok((net, log))
}

pub fn build_config(cfg: &ExperimentConfig, training_seed: u64) -> BuildConfig {
    let mut build = cfg.build.clone();
    build.distill.seed = training_seed;
    build
}

pub struct TrainedModels {
    pub large: Denoiser,
    pub small: Denoiser,
    pub train_log: Option<TrainingLog>,
    pub build: Option<BuildReport>,
}

/// Loads the configured checkpoints, or trains what is missing.
pub fn prepare_models(
    cfg: &ExperimentConfig,
    training_seed: u64,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
) -> Result<TrainedModels> {
    let (large, train_log) = match &cfg.checkpoints.large {
        Some(p) => (checkpoint::load(p)?, None),
        None => {
            let (net, log) = train_large(cfg, training_seed, data, schedule)?;
            (net, Some(log))
        }
    };
    let (small, build) = match &cfg.checkpoints.small {
        Some(p) => (checkpoint::load(p)?, None),
        None => {
            let (small, report) =
                build_small_model(&large, &data.as_labeled(), schedule, &build_config(cfg, training_seed))?;
            (small, Some(report))
        }
    };
    Ok(TrainedModels {
        large,
        small,
        train_log,
        build,
    })
}

pub fn method_name(k: usize, steps: usize) -> &'static str {
    match k {
        0 => "small_only",
        k if k == steps => "large_only",
        _ => "hybrid",
    }
}

/// Class of every row generated for one sampling seed.
pub fn row_classes(rows: usize, components: usize) -> Vec<usize> {
    (0..rows).map(|i| i % components).collect()
}

pub struct Generated {
    pub samples: Array2<f64>,
    pub payload_bytes: usize,
}

/// Samples for one (k, seed) cell.
pub fn generate(
    models: &TrainedModels,
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<Generated> {
    let classes: Vec<Option<usize>> = row_classes(cfg.sweep.rows_per_seed, cfg.dataset.components)
        .into_iter()
        .map(Some)
        .collect();
    let tokens = models.large.condition_tokens(&classes)?;
    let start = Start::Noise {
        seed,
        rows: classes.len(),
    };
    let out = run_hybrid(
        &models.large,
        &models.small,
        &HybridPlan::new(cfg.sampler, k),
        schedule,
        &start,
        Some(tokens),
        &Codec::identity(2),
    )?;
    Ok(Generated {
        samples: out.sample.mapv(f64::from),
        payload_bytes: out.packet_bytes,
    })
}

/// FLOPs of one sample's trajectory at split `k`.
pub fn trajectory_flops(large: &Denoiser, small: &Denoiser, cfg: &ExperimentConfig, k: usize) -> Result<f64> {
    let evals = cfg.sampler.evals_per_step() as f64;
    let model = CostModel {
        large_step: evals * flops_count(&large.descriptor) as f64,
        small_step: evals * flops_count(&small.descriptor) as f64,
        decoder: Codec::identity(2).decode_flops() as f64,
        light_decoder: None,
        steps: cfg.sampler.num_inference_steps,
        cloud_steps: k,
    };
    Ok(split_cost(&model)?.total_flops)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub training_seed: u64,
    pub method: String,
    pub k: usize,
    /// Distance of all sampling seeds' samples, pooled, to the held-out set.
    pub sliced_wasserstein: f64,
    pub mode_agreement: f64,
    pub condition_accuracy: f64,
    pub flops: f64,
    pub params: usize,
    pub payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub training_seed: u64,
    pub large_params: usize,
    pub small_params: usize,
    pub large_flops: u64,
    pub small_flops: u64,
    pub final_train_loss: Option<f64>,
    pub plan: Option<PruningPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub format_version: u32,
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryCell>,
    pub builds: Vec<BuildSummary>,
}

/// All records for one training seed, plus pooled samples per k.
pub fn evaluate(
    models: &TrainedModels,
    cfg: &ExperimentConfig,
    training_seed: u64,
    schedule: &NoiseSchedule,
    held_out: &ToyDataset,
) -> Result<(Vec<MetricsRecord>, Vec<SummaryCell>, Vec<Array2<f64>>)> {
    let steps = cfg.sampler.num_inference_steps;
    let seeds: Vec<u64> = (0..cfg.sweep.sampling_seeds).collect();
    let classes = row_classes(cfg.sweep.rows_per_seed, cfg.dataset.components);
    let centers = held_out.centers();
    let m = &cfg.metrics;
    let references: Vec<Array2<f64>> = seeds
        .par_iter()
        .map(|&seed| generate(models, cfg, schedule, steps, seed).map(|g| g.samples))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut summary = Vec::new();
    let mut pooled_per_k = Vec::new();
    for &k in &cfg.sweep.k {
        let flops = trajectory_flops(&models.large, &models.small, cfg, k)?;
        let params = if k == steps { &models.large } else { &models.small }.num_parameters();
        let cells: Vec<(MetricsRecord, Array2<f64>)> = seeds
            .par_iter()
            .map(|&seed| {
                let g = generate(models, cfg, schedule, k, seed)?;
                let record = MetricsRecord {
                    method: method_name(k, steps).to_string(),
                    k,
                    training_seed,
                    seed,
                    sliced_wasserstein: sliced_wasserstein(
                        g.samples.view(),
                        held_out.points.view(),
                        m.projections,
                        m.projection_seed,
                    )?,
                    mode_agreement: mode_agreement(g.samples.view(), references[seed as usize].view(), centers.view())?,
                    condition_accuracy: condition_accuracy(g.samples.view(), &classes, centers.view())?,
                    flops,
                    params,
                    payload_bytes: g.payload_bytes,
                };
                Ok((record, g.samples))
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = cells.iter().map(|(_, s)| s.view()).collect();
        let pooled = concatenate(Axis(0), &views).expect("equal widths");
        let n = cells.len() as f64;
        summary.push(SummaryCell {
            training_seed,
            method: method_name(k, steps).to_string(),
            k,
            sliced_wasserstein: sliced_wasserstein(pooled.view(), held_out.points.view(), m.projections, m.projection_seed)?,
            mode_agreement: cells.iter().map(|(r, _)| r.mode_agreement).sum::<f64>() / n,
            condition_accuracy: cells.iter().map(|(r, _)| r.condition_accuracy).sum::<f64>() / n,
            flops,
            params,
            payload_bytes: cells[0].0.payload_bytes,
        });
        records.extend(cells.into_iter().map(|(r, _)| r));
        pooled_per_k.push(pooled);
    }
    Ok((records, summary, pooled_per_k))
}

/// Runs the whole sweep and writes CSV, JSON and SVG files into `out_dir`.
/// Nothing is written unless every cell succeeds.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let held_out = held_out_data(cfg)?;
    let mut output = ExperimentOutput {
        format_version: RESULTS_VERSION,
        records: Vec::new(),
        summary: Vec::new(),
        builds: Vec::new(),
    };
    let mut plots = Vec::new();
    for (i, &training_seed) in cfg.sweep.training_seeds.iter().enumerate() {
        info!("training seed {training_seed}");
        let data = training_data(cfg, training_seed)?;
        let models = prepare_models(cfg, training_seed, &data, &schedule)?;
        let (records, summary, pooled) = evaluate(&models, cfg, training_seed, &schedule, &held_out)?;
        output.builds.push(BuildSummary {
            training_seed,
            large_params: models.large.num_parameters(),
            small_params: models.small.num_parameters(),
            large_flops: flops_count(&models.large.descriptor),
            small_flops: flops_count(&models.small.descriptor),
            final_train_loss: models.train_log.as_ref().map(|l| l.final_validation),
            plan: models.build.as_ref().map(|b| b.plan.clone()),
        });
        output.records.extend(records);
        output.summary.extend(summary);
        if i == 0 {
            for (&k, samples) in cfg.sweep.k.iter().zip(&pooled) {
                let title = format!("{} k={k}, training seed {training_seed}", method_name(k, cfg.sampler.num_inference_steps));
                plots.push((k, scatter_svg(held_out.points.view(), samples.view(), &title)));
            }
        }
    }
    write_outputs(out_dir, cfg, &output, &plots)?;
    Ok(output)
}

fn write_outputs(out_dir: &Path, cfg: &ExperimentConfig, output: &ExperimentOutput, plots: &[(usize, String)]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut csv = csv::Writer::from_path(out_dir.join("records.csv"))?;
    for r in &output.records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    std::fs::write(out_dir.join("results.json"), serde_json::to_string_pretty(output)?)?;
    for (k, svg) in plots {
        std::fs::write(out_dir.join(format!("scatter_k{k}.svg")), svg)?;
    }
    Ok(())
}

pub fn load_results(dir: &Path) -> Result<ExperimentOutput> {
    let out: ExperimentOutput = serde_json::from_str(&std::fs::read_to_string(dir.join("results.json"))?)?;
    if out.format_version != RESULTS_VERSION {
        return Err(Error::FormatVersion {
            what: "results",
            found: out.format_version,
        });
    }
    Ok(out)
}
