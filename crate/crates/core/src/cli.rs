//! Command-line surface. Every command reads its inputs from, and writes its
//! outputs to, the run directory unless a path is given explicitly.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::curation::{stats_csv, Benchmark, CountingSet};
use crate::encoder::load_params;
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, retrieval_count_precision, retrieval_csv, zero_shot_count};
use crate::io::{
    load_checkpoint, parse_id_list, read_curated, read_records, read_to_string, rejection_log_csv, save_checkpoint,
    write_atomic, write_records, Split,
};
use crate::pipeline::{self, curated_records};
use crate::training::{TrainState, METRICS_HEADER};

pub const POOL_FILE: &str = "pool.jsonl";
pub const MODES_FILE: &str = "modes.csv";
pub const COUNTING_FILE: &str = "counting.jsonl";
pub const GENERAL_FILE: &str = "general.jsonl";
pub const REJECTIONS_FILE: &str = "rejections.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const BENCH_STATS_FILE: &str = "bench_stats.csv";
pub const MODEL_FILE: &str = "model.params";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const RETRIEVAL_FILE: &str = "retrieval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "countlab", version, about = "Counting-contrastive training lab for a tiny dual encoder")]
pub struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a pool of synthetic scenes with true and distractor captions.
    Generate {
        /// Overrides `generate.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Filter the train split of a pool and balance it into a counting set.
    Curate {
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Build a benchmark with a fixed quota per number from the holdout split.
    Bench {
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Record file whose ids must not appear in the benchmark.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Ids to drop before sampling, one per line.
        #[arg(long)]
        drop: Option<PathBuf>,
    },
    /// Train the dual encoder.
    Train(TrainArgs),
    /// Zero-shot counting evaluation on a benchmark.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Rank pool images against a caption.
    Retrieve {
        #[arg(long)]
        caption: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Which records of the pool to rank.
        #[arg(long, value_enum, default_value_t = SplitFilter::Holdout)]
        split: SplitFilter,
    },
    /// Train and evaluate one model per (p, lambda) grid cell.
    Sweep {
        #[arg(long)]
        counting: Option<PathBuf>,
        #[arg(long)]
        general: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Overrides `sweep.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// generate, curate, bench, train and eval in one go.
    Run,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub counting: Option<PathBuf>,
    #[arg(long)]
    pub general: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Benchmark used by the periodic evaluation (`eval.eval_every`).
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitFilter {
    Train,
    Holdout,
    All,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cfg.out_dir.clone();
    let or_out = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    match &cli.command {
        Command::Generate { n } => {
            let mut cfg = cfg.clone();
            if let Some(n) = n {
                cfg.generate.n = *n;
            }
            cmd_generate(&cfg)
        }
        Command::Curate { pool } => cmd_curate(&cfg, &or_out(pool, POOL_FILE)),
        Command::Bench { pool, exclude, drop } => cmd_bench(
            &cfg,
            &or_out(pool, POOL_FILE),
            &or_out(exclude, COUNTING_FILE),
            drop.as_deref().or(cfg.bench.drop_file.as_deref()),
        ),
        Command::Train(a) => {
            let mut cfg = cfg.clone();
            if let Some(l) = a.lambda {
                cfg.train.lambda = l;
            }
            if let Some(p) = a.fraction {
                cfg.train.counting_fraction = p;
            }
            if let Some(t) = a.steps {
                cfg.train.total_steps = t;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(t);
            }
            cfg.validate()?;
            cmd_train(
                &cfg,
                &or_out(&a.counting, COUNTING_FILE),
                &or_out(&a.general, GENERAL_FILE),
                a.resume.as_deref(),
                &or_out(&a.benchmark, BENCHMARK_FILE),
            )
        }
        Command::Eval { checkpoint, benchmark } => cmd_eval(
            &cfg,
            &or_out(checkpoint, MODEL_FILE),
            &or_out(benchmark, BENCHMARK_FILE),
        ),
        Command::Retrieve {
            caption,
            k,
            checkpoint,
            pool,
            split,
        } => cmd_retrieve(
            &cfg,
            &or_out(checkpoint, MODEL_FILE),
            &or_out(pool, POOL_FILE),
            *split,
            caption,
            k.unwrap_or(cfg.eval.k),
        ),
        Command::Sweep {
            counting,
            general,
            benchmark,
            steps,
        } => {
            let mut cfg = cfg.clone();
            if steps.is_some() {
                cfg.sweep.total_steps = *steps;
            }
            cmd_sweep(
                &cfg,
                &or_out(counting, COUNTING_FILE),
                &or_out(general, GENERAL_FILE),
                &or_out(benchmark, BENCHMARK_FILE),
            )
        }
        Command::Run => cmd_run(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let out = pipeline::generate(cfg)?;
    for (m, c) in &out.mode_counts {
        log::info!("generated {c} {} captions", m.name());
    }
    write_records(&cfg.out_dir.join(POOL_FILE), &out.records)?;
    write_atomic(
        &cfg.out_dir.join(MODES_FILE),
        pipeline::mode_counts_csv(&out.mode_counts).as_bytes(),
    )
}

pub fn cmd_curate(cfg: &RunConfig, pool_path: &Path) -> Result<()> {
    let pool = read_records(pool_path)?;
    let out = pipeline::curate(cfg, &pool.records)?;
    let lines: Vec<usize> = out.positions.iter().map(|&i| pool.lines[i]).collect();
    let dir = &cfg.out_dir;
    write_records(&dir.join(COUNTING_FILE), &curated_records(&out.counting.records, Split::Train))?;
    write_records(&dir.join(GENERAL_FILE), &out.general)?;
    write_atomic(
        &dir.join(REJECTIONS_FILE),
        rejection_log_csv(&out.decisions, &lines).as_bytes(),
    )?;
    write_atomic(&dir.join(STATS_FILE), stats_csv(&out.available, &out.selected).as_bytes())?;
    log::info!(
        "accepted {} of {} train records, counting set holds {}",
        out.available.total(),
        out.decisions.len(),
        out.selected.total()
    );
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, pool_path: &Path, exclude: &Path, drop: Option<&Path>) -> Result<()> {
    let pool = read_records(pool_path)?;
    let exclusion: HashSet<String> = if exclude.exists() {
        read_records(exclude)?.records.into_iter().map(|r| r.id).collect()
    } else {
        log::warn!("exclusion file {} not found; excluding nothing", exclude.display());
        HashSet::new()
    };
    let dropped = match drop {
        Some(p) => parse_id_list(&read_to_string(p)?),
        None => HashSet::new(),
    };
    let (b, available) = pipeline::bench(cfg, &pool.records, &exclusion, &dropped)?;
    write_records(&cfg.out_dir.join(BENCHMARK_FILE), &curated_records(&b.records, Split::Holdout))?;
    write_atomic(
        &cfg.out_dir.join(BENCH_STATS_FILE),
        stats_csv(&available, &b.histogram()).as_bytes(),
    )?;
    log::info!("benchmark: {} records, {} per number", b.records.len(), b.quota);
    Ok(())
}

fn load_benchmark(path: &Path, quota: usize) -> Result<Benchmark> {
    Ok(Benchmark {
        records: read_curated(path)?,
        quota,
    })
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:07}.params")
}

/// Metrics rows of an earlier run that precede `step`.
fn metrics_prefix(path: &Path, step: usize) -> Result<Vec<String>> {
    if step == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s < step)
        })
        .map(str::to_string)
        .collect())
}

pub fn cmd_train(
    cfg: &RunConfig,
    counting_path: &Path,
    general_path: &Path,
    resume: Option<&Path>,
    benchmark_path: &Path,
) -> Result<()> {
    let counting = CountingSet::from_records(read_curated(counting_path)?);
    let general = pipeline::general_pairs(&read_records(general_path)?.records);
    let vocab = cfg.vocabulary();
    let state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::fresh(pipeline::initial_params(cfg, &vocab)?),
    };
    if state.step > cfg.train.total_steps {
        return Err(Error::usage(format!(
            "checkpoint is at step {}, past total_steps {}",
            state.step, cfg.train.total_steps
        )));
    }
    let dir = cfg.out_dir.clone();
    let metrics_path = dir.join(METRICS_FILE);
    let mut rows = metrics_prefix(&metrics_path, state.step)?;
    let benchmark = if cfg.eval.eval_every > 0 && benchmark_path.exists() {
        Some(load_benchmark(benchmark_path, cfg.bench.quota)?)
    } else {
        None
    };
    let mut eval_rows = Vec::new();
    let every = cfg.eval.checkpoint_every;
    let tcfg = pipeline::train_config(cfg);
    let (state, log) = pipeline::train(cfg, &tcfg, state, &counting, &general, |st, entry| {
        if st.step % 500 == 0 {
            log::info!("step {} l_total {:.6}", st.step, entry.report.l_total);
        }
        if every > 0 && st.step % every == 0 {
            save_checkpoint(st, &dir.join("checkpoints").join(checkpoint_name(st.step)))?;
        }
        if let Some(b) = &benchmark {
            if st.step % cfg.eval.eval_every == 0 {
                let r = zero_shot_count(&st.params, &vocab, b)?;
                eval_rows.push(format!("{},{},{}", st.step, r.accuracy, r.mean_deviation));
            }
        }
        Ok(())
    })?;
    rows.extend(log.iter().map(|l| l.csv_row()));
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(&metrics_path, text.as_bytes())?;
    if !eval_rows.is_empty() {
        let mut t = String::from("step,accuracy,mean_deviation\n");
        for r in &eval_rows {
            t.push_str(r);
            t.push('\n');
        }
        write_atomic(&dir.join(EVAL_LOG_FILE), t.as_bytes())?;
    }
    save_checkpoint(&state, &dir.join(MODEL_FILE))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, benchmark_path: &Path) -> Result<()> {
    let params = load_params(checkpoint)?;
    let b = load_benchmark(benchmark_path, cfg.bench.quota)?;
    let report = pipeline::evaluate(cfg, &params, &b)?;
    log::info!(
        "accuracy {:.2}% mean deviation {:.4} over {} records",
        report.accuracy,
        report.mean_deviation,
        report.n_records
    );
    emit_report(&report, &cfg.out_dir)
}

pub fn cmd_retrieve(
    cfg: &RunConfig,
    checkpoint: &Path,
    pool_path: &Path,
    split: SplitFilter,
    caption: &str,
    k: usize,
) -> Result<()> {
    let params = load_params(checkpoint)?;
    let pool: Vec<_> = read_records(pool_path)?
        .records
        .into_iter()
        .filter(|r| match split {
            SplitFilter::All => true,
            SplitFilter::Train => r.split == Split::Train,
            SplitFilter::Holdout => r.split == Split::Holdout,
        })
        .collect();
    let result = pipeline::retrieve(cfg, &params, &pool, caption, k)?;
    let counts: std::collections::HashMap<&str, u32> = pool
        .iter()
        .map(|r| (r.id.as_str(), r.scene.dominant().map_or(0, |d| d.1)))
        .collect();
    let count_of = |id: &str| counts.get(id).copied();
    if let Ok(p) = retrieval_count_precision(&result, count_of) {
        log::info!("count precision at {}: {:.3}", result.ranked.len(), p);
    }
    write_atomic(
        &cfg.out_dir.join(RETRIEVAL_FILE),
        retrieval_csv(&result, count_of).as_bytes(),
    )
}

pub fn cmd_sweep(cfg: &RunConfig, counting_path: &Path, general_path: &Path, benchmark_path: &Path) -> Result<()> {
    let counting = CountingSet::from_records(read_curated(counting_path)?);
    let general = pipeline::general_pairs(&read_records(general_path)?.records);
    let b = load_benchmark(benchmark_path, cfg.bench.quota)?;
    let rows = pipeline::sweep(cfg, &counting, &general, &b, |row, _| {
        log::info!(
            "p={} lambda={} accuracy {:.2}% mean deviation {:.4}",
            row.fraction,
            row.lambda,
            row.report.accuracy,
            row.report.mean_deviation
        );
        Ok(())
    })?;
    write_atomic(&cfg.out_dir.join(SWEEP_FILE), pipeline::sweep_csv(&rows).as_bytes())
}

/// The whole pipeline from one configuration.
pub fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.out_dir;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    cmd_generate(cfg)?;
    cmd_curate(cfg, &dir.join(POOL_FILE))?;
    cmd_bench(
        cfg,
        &dir.join(POOL_FILE),
        &dir.join(COUNTING_FILE),
        cfg.bench.drop_file.as_deref(),
    )?;
    cmd_train(
        cfg,
        &dir.join(COUNTING_FILE),
        &dir.join(GENERAL_FILE),
        None,
        &dir.join(BENCHMARK_FILE),
    )?;
    cmd_eval(cfg, &dir.join(MODEL_FILE), &dir.join(BENCHMARK_FILE))
}
