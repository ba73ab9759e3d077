use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use hybridsd::hybrid::{run_hybrid, write_trace_jsonl, HybridPlan, Precision, Start};
use hybridsd::nn::{checkpoint, distill};
use hybridsd::pruning::{assign_ratios, prune, score_units, ScoreTable};
use hybridsd::{Codec, Denoiser};
use hybridsd_edgecloud::{edge_run, ChannelModel, Condition, EdgeConfig, GenerateRequest, Request, Server, ServerState};
use hybridsd_harness::experiment::{build_config, held_out_data, load_results, train_large, training_data};
use hybridsd_harness::report::{render_table, summarize};
use hybridsd_harness::{run_experiment, Error, ExperimentConfig, Result};
use log::info;
use ndarray::Array2;

const OUT_DIR_ENV: &str = "HYBRIDSD_OUT_DIR";
const THREADS_ENV: &str = "HYBRIDSD_THREADS";

#[derive(Parser)]
#[command(name = "hybridsd", version, about = "Hybrid large/small diffusion sampling on toy data")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [env: HYBRIDSD_OUT_DIR] [default: out]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WirePrecision {
    F16,
    F32,
}

#[derive(Subcommand)]
enum Command {
    /// Train the large model.
    Train {
        #[arg(long, default_value_t = 0)]
        training_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every prunable unit of a model.
    Score {
        #[arg(long)]
        large: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign ratios from scores and prune.
    Prune {
        #[arg(long)]
        large: PathBuf,
        /// Scores from `score`; computed when omitted.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill a pruned model against its teacher.
    Distill {
        #[arg(long)]
        large: PathBuf,
        #[arg(long)]
        small: PathBuf,
        #[arg(long, default_value_t = 0)]
        training_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample in-process with a split at k.
    Sample {
        #[arg(long)]
        large: PathBuf,
        /// Finishing model; the large model is used when omitted.
        #[arg(long)]
        small: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        rows: usize,
        /// Condition every row on this class; rows cycle through classes otherwise.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the cloud side.
    Serve {
        #[arg(long)]
        large: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Run the edge side against a server.
    Client {
        #[arg(long)]
        small: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        server: String,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        rows: usize,
        #[arg(long)]
        class: Option<usize>,
        /// Megabits per second.
        #[arg(long, default_value_t = 18.88)]
        bandwidth: f64,
        /// Seconds.
        #[arg(long, default_value_t = 0.0)]
        latency: f64,
        #[arg(long, value_enum, default_value_t = WirePrecision::F16)]
        precision: WirePrecision,
        /// Sleep for the modelled transfer time.
        #[arg(long)]
        simulate_delay: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cost: Option<PathBuf>,
    },
    /// Run the full sweep described by the config.
    Experiment,
    /// Print the summary table of an experiment directory.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn output_path(dir: &Path, explicit: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| dir.join(default));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn classes(rows: usize, class: Option<usize>, num_classes: usize) -> Vec<usize> {
    (0..rows).map(|i| class.unwrap_or(i % num_classes)).collect()
}

fn write_samples(path: &Path, samples: &Array2<f32>, classes: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "class"])?;
    for (row, c) in samples.rows().into_iter().zip(classes) {
        w.write_record([row[0].to_string(), row[1].to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Denoiser> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(checkpoint::load(path)?)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let dir = out_dir(&cli);
    let schedule = cfg.schedule.build()?;
    match &cli.command {
        Command::Train { training_seed, out } => {
            let data = training_data(&cfg, *training_seed)?;
            let (net, log) = train_large(&cfg, *training_seed, &data, &schedule)?;
            let path = output_path(&dir, out, "large.ckpt")?;
            checkpoint::save(&net, &path)?;
            write_json(&path.with_extension("log.json"), &log)?;
            info!("validation loss {:.4} -> {:.4}", log.initial_validation, log.final_validation);
            println!("{}", path.display());
        }
        Command::Score { large, out } => {
            let net = load(large)?;
            let table = score_units(&net, &cfg.build.probe, &schedule)?;
            let path = output_path(&dir, out, "scores.json")?;
            write_json(&path, &table)?;
            for s in &table.scores {
                println!("{:<12} {:.6}", s.name, s.score);
            }
        }
        Command::Prune { large, scores, out } => {
            let net = load(large)?;
            let table: ScoreTable = match scores {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => score_units(&net, &cfg.build.probe, &schedule)?,
            };
            let plan = assign_ratios(&table, &net.descriptor, cfg.build.a, cfg.build.b)?;
            let small = prune(&net, &plan)?;
            let path = output_path(&dir, out, "pruned.ckpt")?;
            checkpoint::save(&small, &path)?;
            write_json(&path.with_extension("plan.json"), &plan)?;
            println!(
                "{} parameters -> {} ({:.1}% fewer)",
                net.num_parameters(),
                small.num_parameters(),
                100.0 * (1.0 - small.num_parameters() as f64 / net.num_parameters() as f64)
            );
        }
        Command::Distill {
            large,
            small,
            training_seed,
            out,
        } => {
            let teacher = load(large)?;
            let mut student = load(small)?;
            let data = training_data(&cfg, *training_seed)?;
            let log = distill(
                &mut student,
                &teacher,
                &data.as_labeled(),
                &schedule,
                &build_config(&cfg, *training_seed).distill,
            )?;
            let path = output_path(&dir, out, "small.ckpt")?;
            checkpoint::save(&student, &path)?;
            write_json(&path.with_extension("log.json"), &log)?;
            println!("{}", path.display());
        }
        Command::Sample {
            large,
            small,
            k,
            seed,
            rows,
            class,
            out,
            trace,
        } => {
            let large = load(large)?;
            let small = match small {
                Some(p) => load(p)?,
                None => large.clone(),
            };
            let cls = classes(*rows, *class, large.descriptor.num_classes);
            let tokens = large.condition_tokens(&cls.iter().map(|&c| Some(c)).collect::<Vec<_>>())?;
            let start = Start::Noise {
                seed: *seed,
                rows: *rows,
            };
            let result = run_hybrid(
                &large,
                &small,
                &HybridPlan::new(cfg.sampler, *k),
                &schedule,
                &start,
                Some(tokens),
                &Codec::identity(2),
            )?;
            let path = output_path(&dir, out, "samples.csv")?;
            write_samples(&path, &result.sample, &cls)?;
            if let Some(t) = trace {
                write_trace_jsonl(&result.trace, std::fs::File::create(t)?)?;
            }
            let held_out = held_out_data(&cfg)?;
            let sw = hybridsd::metrics::sliced_wasserstein(
                result.sample.mapv(f64::from).view(),
                held_out.points.view(),
                cfg.metrics.projections,
                cfg.metrics.projection_seed,
            )?;
            println!("{} samples, sliced Wasserstein {sw:.4}, handoff {} bytes", rows, result.packet_bytes);
        }
        Command::Serve { large, bind } => {
            let state = ServerState::new(load(large)?, schedule, Codec::identity(2));
            let server = Server::bind(bind.as_str(), state)?;
            println!("listening on {}", server.local_addr()?);
            server.run(Default::default())?;
        }
        Command::Client {
            small,
            server,
            k,
            seed,
            rows,
            class,
            bandwidth,
            latency,
            precision,
            simulate_delay,
            out,
            cost,
        } => {
            let small = load(small)?;
            let cls = classes(*rows, *class, small.descriptor.num_classes);
            let request = Request::Generate(GenerateRequest {
                seed: *seed,
                cloud_steps: *k,
                sampler: cfg.sampler,
                conditions: cls.iter().map(|&c| Condition::Class(c)).collect(),
                reset_history: false,
                precision: match precision {
                    WirePrecision::F16 => Precision::F16,
                    WirePrecision::F32 => Precision::F32,
                },
            });
            let edge = EdgeConfig {
                channel: ChannelModel {
                    latency_s: *latency,
                    ..ChannelModel::mbps(*bandwidth)
                },
                simulate_delay: *simulate_delay,
                timeout: Some(Duration::from_secs(300)),
            };
            let outcome = edge_run(server.as_str(), &request, &small, &Codec::identity(2), &schedule, &edge)?;
            let path = output_path(&dir, out, "samples.csv")?;
            write_samples(&path, &outcome.sample, &cls)?;
            let cost_path = output_path(&dir, cost, "cost.json")?;
            write_json(&cost_path, &outcome.cost)?;
            println!("{}", serde_json::to_string_pretty(&outcome.cost)?);
        }
        Command::Experiment => {
            let output = run_experiment(&cfg, &dir)?;
            print!("{}", render_table(&summarize(&output.summary)));
            println!("results in {}", dir.display());
        }
        Command::Report { results } => {
            let output = load_results(results.as_deref().unwrap_or(&dir))?;
            print!("{}", render_table(&summarize(&output.summary)));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
