use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use nestune::dataset::{generate_matmul_dataset, parse_dataset, Split, DEFAULT_SEED};
use nestune::dqn::{self, metrics_csv, QPolicy, TrainConfig};
use nestune::env::Env;
use nestune::eval::{BackendConfig, BackendKind, Evaluator};
use nestune::report::{load_records, record_file_name, Report, RunRecord, ORIGINAL};
use nestune::search::{search, EvalCache, SearchConfig};
use nestune::{lower, ContractionSpec};

/// Loop-nest autotuner for tensor contractions.
///
/// Backend timing parameters come from NESTUNE_BACKEND, NESTUNE_WARMUP_ITERS,
/// NESTUNE_TIMED_ITERS and NESTUNE_MIN_SAMPLE_MS.
#[derive(Parser)]
#[command(name = "nestune", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the 2197-benchmark matmul dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Tune every benchmark of a split with one method.
    Tune {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// greedy1, greedy2, beam2dfs, beam2bfs, beam4dfs, beam4bfs, random or policy.
        #[arg(long)]
        method: String,
        /// Seconds per benchmark.
        #[arg(long, default_value_t = 60.0)]
        budget: f64,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: PathBuf,
        /// Steps per search.
        #[arg(long, default_value_t = 10)]
        depth: usize,
        /// Seed for random search.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cap on random-search samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Policy checkpoint, required for `--method policy`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Tune only the first N benchmarks of the split.
        #[arg(long)]
        limit: Option<usize>,
        /// Worker threads (cost model only).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train a Q-network policy on the training split.
    Train {
        #[arg(long)]
        bench: PathBuf,
        /// TOML file of training settings; defaults when omitted.
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained policy over a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Aggregate a results directory into profile and speedup CSVs.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = ORIGINAL)]
        baseline: String,
        /// Where to write the CSVs; defaults to `--dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Gen { out, seed } => gen(&out, seed),
        Cmd::Tune {
            bench,
            split,
            method,
            budget,
            backend,
            out,
            depth,
            seed,
            samples,
            ckpt,
            limit,
            jobs,
        } => {
            let benches = load_split(&bench, split, limit)?;
            let backend = backend_for(backend)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            if method == "policy" {
                let ckpt = ckpt.context("--method policy needs --ckpt")?;
                return rollouts(&ckpt, &benches, backend, &out);
            }
            let mut cfg = SearchConfig::preset(&method).with_context(|| format!("unknown method `{method}`"))?;
            cfg = cfg.with_depth(depth).with_budget(budget).with_seed(seed);
            if let Some(n) = samples {
                cfg = cfg.with_max_samples(n);
            }
            cfg.validate()?;
            tune(&benches, &method, &cfg, backend, &out, jobs)
        }
        Cmd::Train {
            bench,
            cfg,
            backend,
            out,
        } => train(&bench, cfg.as_deref(), backend, &out),
        Cmd::Eval {
            ckpt,
            bench,
            split,
            backend,
            out,
            limit,
        } => {
            let benches = load_split(&bench, split, limit)?;
            let backend = backend_for(backend)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            rollouts(&ckpt, &benches, backend, &out)
        }
        Cmd::Report { dir, baseline, out } => report(&dir, &baseline, out.as_deref().unwrap_or(&dir)),
    }
}

fn backend_for(kind: Option<BackendKind>) -> Result<Arc<dyn Evaluator>> {
    let mut cfg = BackendConfig::from_env()?;
    if let Some(k) = kind {
        cfg.backend = k;
    }
    info!("backend {:?}", cfg);
    Ok(cfg.build())
}

fn load_split(path: &Path, split: Split, limit: Option<usize>) -> Result<Vec<ContractionSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ds = parse_dataset(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut benches = ds.split(split);
    if let Some(n) = limit {
        benches.truncate(n);
    }
    if benches.is_empty() {
        bail!("no benchmarks in split `{split}` of {}", path.display());
    }
    Ok(benches)
}

fn gen(out: &Path, seed: u64) -> Result<()> {
    let ds = generate_matmul_dataset(seed);
    std::fs::write(out, ds.to_text()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} benchmarks ({} train, {} test) to {}", ds.len(), ds.train.len(), ds.test.len(), out.display());
    Ok(())
}

fn write_original_if_missing(spec: &ContractionSpec, backend: &dyn Evaluator, out: &Path) -> Result<()> {
    if !out.join(record_file_name(spec.name(), ORIGINAL)).exists() {
        RunRecord::original(spec, backend)?.write_to(out)?;
    }
    Ok(())
}

fn tune(
    benches: &[ContractionSpec],
    method: &str,
    cfg: &SearchConfig,
    backend: Arc<dyn Evaluator>,
    out: &Path,
    jobs: Option<usize>,
) -> Result<()> {
    let workers = match backend.kind() {
        // Timed runs must not overlap.
        BackendKind::Timed => 1,
        BackendKind::CostModel => jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .clamp(1, benches.len()),
    };
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    let run_one = |spec: &ContractionSpec| -> Result<()> {
        let result = search(&lower(spec), cfg, backend.as_ref(), &EvalCache::new())?;
        info!("{} {method}: {:.4} GFLOPS", spec.name(), result.best_gflops);
        let record = RunRecord::new(spec, method, result);
        record.write_to(out)?;
        let trace = out.join(format!("{}__{method}.trace.csv", spec.name()));
        std::fs::write(&trace, record.result.trace_csv()).with_context(|| format!("writing {}", trace.display()))?;
        write_original_if_missing(spec, backend.as_ref(), out)
    };
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= benches.len() || first_error.lock().unwrap().is_some() {
                    break;
                }
                if let Err(e) = run_one(&benches[i]) {
                    first_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    println!("tuned {} benchmarks with {method} into {}", benches.len(), out.display());
    Ok(())
}

fn rollouts(ckpt: &Path, benches: &[ContractionSpec], backend: Arc<dyn Evaluator>, out: &Path) -> Result<()> {
    let mut policy = QPolicy::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut env = Env::new(Arc::clone(&backend));
    for spec in benches {
        let result = env.rollout(&mut policy, spec)?;
        info!("{} policy: {:.4} GFLOPS", spec.name(), result.best_gflops);
        RunRecord::new(spec, "policy", result).write_to(out)?;
        write_original_if_missing(spec, backend.as_ref(), out)?;
    }
    println!("evaluated policy on {} benchmarks into {}", benches.len(), out.display());
    Ok(())
}

fn train(bench: &Path, cfg_path: Option<&Path>, backend: Option<BackendKind>, out: &Path) -> Result<()> {
    let cfg = match cfg_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let benches = load_split(bench, cfg.split, cfg.max_benchmarks)?;
    let backend = backend_for(backend)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let iterations = cfg.iterations;
    let outcome = dqn::train(benches, cfg, backend, |m| {
        info!(
            "iteration {}/{iterations}: reward {:.4}, epsilon {:.3}",
            m.iteration + 1,
            m.episode_reward_mean,
            m.epsilon
        );
    })?;
    outcome.policy.save(&out.join("policy.ckpt"))?;
    outcome.best.save(&out.join("best.ckpt"))?;
    let metrics = out.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(&outcome.metrics)).with_context(|| format!("writing {}", metrics.display()))?;
    println!("trained {iterations} iterations; checkpoints and metrics in {}", out.display());
    Ok(())
}

fn report(dir: &Path, baseline: &str, out: &Path) -> Result<()> {
    let records = load_records(dir)?;
    let report = Report::from_records(&records)?;
    let speedups = report.speedup_csv(baseline)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("profile.csv"), report.profile_csv())?;
    std::fs::write(out.join("speedup.csv"), speedups)?;
    println!("{:<12} {:>10} {:>12}", "method", "mean norm", "geo speedup");
    for m in &report.methods {
        let n = report.benchmarks.len() as f64;
        let norm: f64 = report.benchmarks.iter().map(|b| report.normalized(m, b)).sum::<f64>() / n;
        let geo = (report
            .benchmarks
            .iter()
            .map(|b| (report.gflops[m][b] / report.gflops[baseline][b]).ln())
            .sum::<f64>()
            / n)
            .exp();
        println!("{m:<12} {norm:>10.4} {geo:>12.4}");
    }
    println!("wrote profile.csv and speedup.csv to {}", out.display());
    Ok(())
}
