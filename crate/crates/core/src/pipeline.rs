//! Pipeline stages over in-memory records: generate, curate, bench, train,
//! evaluate, retrieve and sweep. The command layer wraps these with file I/O.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::config::RunConfig;
use crate::curation::{
    balance, build_benchmark, dataset_stats, filter_pool, Benchmark, CountingSet, CuratedRecord, CurationDecision,
    Histogram,
};
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::evaluation::{retrieve_topk, zero_shot_count, EvalReport, RetrievalResult};
use crate::io::{DatasetRecord, Split};
use crate::par;
use crate::scene::{caption_for_scene, render, CaptionMode};
use crate::seed;
use crate::training::{ImageText, StepLog, TrainConfig, TrainState, Trainer};
use crate::vocab::Vocabulary;

/// Generated pool plus per-mode caption counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateOutput {
    pub records: Vec<DatasetRecord>,
    pub mode_counts: BTreeMap<CaptionMode, usize>,
}

pub fn record_id(i: usize) -> String {
    format!("s{i:07}")
}

/// Generates `cfg.generate.n` records; record `i` depends only on
/// `(seed, i)`.
pub fn generate(cfg: &RunConfig) -> Result<GenerateOutput> {
    let g = &cfg.generate;
    g.sampler.validate()?;
    let stage = seed::stage_seed(cfg.seed, "generate");
    let modes = WeightedIndex::new(g.modes.as_array()).map_err(|e| Error::config("generate.modes", e.to_string()))?;
    let records = par::map_range(g.n, |i| -> Result<DatasetRecord> {
        let mut rng = seed::rng(seed::mix(stage, i as u64));
        let id = record_id(i);
        let scene = g.sampler.sample(id.clone(), rng.gen())?;
        let split = if rng.gen_bool(g.holdout_fraction) {
            Split::Holdout
        } else {
            Split::Train
        };
        let mode = CaptionMode::ALL[modes.sample(&mut rng)];
        let caption = caption_for_scene(&scene, &g.templates, &g.class_names, &mut rng, mode)?;
        Ok(DatasetRecord {
            id,
            split,
            caption,
            scene,
            mode: Some(mode),
            number: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut mode_counts: BTreeMap<CaptionMode, usize> = CaptionMode::ALL.iter().map(|&m| (m, 0)).collect();
    for r in &records {
        if let Some(m) = r.mode {
            *mode_counts.entry(m).or_default() += 1;
        }
    }
    Ok(GenerateOutput { records, mode_counts })
}

pub fn mode_counts_csv(counts: &BTreeMap<CaptionMode, usize>) -> String {
    let mut s = String::from("mode,count\n");
    for (m, c) in counts {
        s.push_str(&format!("{},{c}\n", m.name()));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurateOutput {
    /// Decisions for the train split, in pool order.
    pub decisions: Vec<CurationDecision>,
    /// Pool positions of the decided records.
    pub positions: Vec<usize>,
    pub counting: CountingSet,
    /// Train-split records outside the counting set, in pool order.
    pub general: Vec<DatasetRecord>,
    pub available: Histogram,
    pub selected: Histogram,
}

/// Filters the train split and balances the accepted records.
pub fn curate(cfg: &RunConfig, pool: &[DatasetRecord]) -> Result<CurateOutput> {
    cfg.curate.noise.validate()?;
    let positions: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].split == Split::Train).collect();
    let train: Vec<DatasetRecord> = positions.iter().map(|&i| pool[i].clone()).collect();
    let (decisions, accepted) = filter_pool(&train, &cfg.curate.noise, &cfg.curate.rules);
    let available = dataset_stats(&accepted);
    let mut rng = seed::rng(seed::stage_seed(cfg.seed, "curate"));
    let counting = balance(accepted, cfg.curate.cap_low, &mut rng);
    let selected = dataset_stats(&counting.records);
    let ids = counting.ids();
    let general = train.iter().filter(|r| !ids.contains(r.id.as_str())).cloned().collect();
    Ok(CurateOutput {
        decisions,
        positions,
        counting,
        general,
        available,
        selected,
    })
}

/// Filters the holdout split, drops `drop_ids`, and samples the benchmark
/// disjoint from `exclusion_ids`.
pub fn bench(
    cfg: &RunConfig,
    pool: &[DatasetRecord],
    exclusion_ids: &HashSet<String>,
    drop_ids: &HashSet<String>,
) -> Result<(Benchmark, Histogram)> {
    let holdout: Vec<DatasetRecord> = pool
        .iter()
        .filter(|r| r.split == Split::Holdout && !drop_ids.contains(&r.id))
        .cloned()
        .collect();
    let (_, accepted) = filter_pool(&holdout, &cfg.curate.noise, &cfg.curate.rules);
    let available = dataset_stats(&accepted);
    let mut rng = seed::rng(seed::stage_seed(cfg.seed, "bench"));
    let b = build_benchmark(accepted, cfg.bench.quota, exclusion_ids, &mut rng)?;
    Ok((b, available))
}

pub fn general_pairs(records: &[DatasetRecord]) -> Vec<ImageText> {
    records
        .iter()
        .map(|r| ImageText {
            id: r.id.clone(),
            scene: r.scene.clone(),
            caption: r.caption.clone(),
        })
        .collect()
}

/// Training seed: the `train.seed` field mixed into the global stream.
pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = seed::mix(seed::stage_seed(cfg.seed, "train"), cfg.train.seed);
    t
}

pub fn initial_params(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Params> {
    Params::init(cfg.dims(vocab), seed::stage_seed(cfg.seed, "init"))
}

/// Runs (or continues) training; `hook` sees the state after every step.
pub fn train<F>(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    state: TrainState,
    counting: &CountingSet,
    general: &[ImageText],
    hook: F,
) -> Result<(TrainState, Vec<StepLog>)>
where
    F: FnMut(&TrainState, &StepLog) -> Result<()>,
{
    let vocab = cfg.vocabulary();
    let mut trainer = Trainer::new(train_cfg.clone(), state, &vocab, general, counting)?;
    let log = trainer.run(hook)?;
    Ok((trainer.into_state(), log))
}

pub fn evaluate(cfg: &RunConfig, params: &Params, benchmark: &Benchmark) -> Result<EvalReport> {
    check_params(cfg, params)?;
    zero_shot_count(params, &cfg.vocabulary(), benchmark)
}

pub fn retrieve(
    cfg: &RunConfig,
    params: &Params,
    pool: &[DatasetRecord],
    caption: &str,
    k: usize,
) -> Result<RetrievalResult> {
    check_params(cfg, params)?;
    let images: Vec<(String, _)> = par::map(pool, |r| (r.id.clone(), render(&r.scene)));
    retrieve_topk(params, &cfg.vocabulary(), &images, caption, k)
}

fn check_params(cfg: &RunConfig, params: &Params) -> Result<()> {
    let want = cfg.dims(&cfg.vocabulary());
    if params.dims() != want {
        return Err(Error::data(format!(
            "checkpoint dimensions {:?} do not match the configuration {:?}",
            params.dims(),
            want
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub lambda: f64,
    pub report: EvalReport,
}

pub const SWEEP_HEADER: &str = "p,lambda,accuracy,mean_deviation,n_records";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.fraction, r.lambda, r.report.accuracy, r.report.mean_deviation, r.report.n_records
        ));
    }
    s
}

/// Trains one model per (p, λ) cell from the same initial parameters and
/// evaluates each on the benchmark. `on_cell` receives each finished cell.
pub fn sweep<F>(
    cfg: &RunConfig,
    counting: &CountingSet,
    general: &[ImageText],
    benchmark: &Benchmark,
    mut on_cell: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&SweepRow, &Params) -> Result<()>,
{
    let vocab = cfg.vocabulary();
    let init = initial_params(cfg, &vocab)?;
    let mut rows = Vec::new();
    for &p in &cfg.sweep.fractions {
        for &lambda in &cfg.sweep.lambdas {
            let mut t = train_config(cfg);
            t.counting_fraction = p;
            t.lambda = lambda;
            if let Some(steps) = cfg.sweep.total_steps {
                t.total_steps = steps;
                t.warmup_steps = t.warmup_steps.min(steps);
            }
            t.validate()?;
            log::info!("sweep cell p={p} lambda={lambda}");
            let (state, _) = train(cfg, &t, TrainState::fresh(init.clone()), counting, general, |_, _| Ok(()))?;
            let report = evaluate(cfg, &state.params, benchmark)?;
            let row = SweepRow {
                fraction: p,
                lambda,
                report,
            };
            on_cell(&row, &state.params)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Curated records back to file records with their split tag.
pub fn curated_records(records: &[CuratedRecord], split: Split) -> Vec<DatasetRecord> {
    records.iter().map(|r| DatasetRecord::from_curated(r, split)).collect()
}
