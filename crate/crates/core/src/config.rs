//! Run configuration: one TOML file drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::Dims;
use crate::error::{Error, Result};
use crate::numbers::CandidateRules;
use crate::scene::{default_class_names, CaptionMode, ClassName, DetectorNoise, SceneSampler, TemplatePool};
use crate::training::TrainConfig;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub generate: GenerateConfig,
    pub curate: CurateConfig,
    pub bench: BenchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            generate: GenerateConfig::default(),
            curate: CurateConfig::default(),
            bench: BenchConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Relative frequency of each caption mode in a generated pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeWeights {
    pub true_count: f64,
    pub wrong_count: f64,
    pub digit_distractor: f64,
    pub non_count_number: f64,
    pub amount_modifier: f64,
    pub no_number: f64,
}

impl Default for ModeWeights {
    fn default() -> Self {
        ModeWeights {
            true_count: 0.5,
            wrong_count: 0.1,
            digit_distractor: 0.1,
            non_count_number: 0.1,
            amount_modifier: 0.1,
            no_number: 0.1,
        }
    }
}

impl ModeWeights {
    /// Weights in `CaptionMode::ALL` order.
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.true_count,
            self.wrong_count,
            self.digit_distractor,
            self.non_count_number,
            self.amount_modifier,
            self.no_number,
        ]
    }

    pub fn weight(&self, mode: CaptionMode) -> f64 {
        let i = CaptionMode::ALL.iter().position(|&m| m == mode).expect("listed mode");
        self.as_array()[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n: usize,
    /// Share of records tagged `holdout`; the benchmark is drawn from them.
    pub holdout_fraction: f64,
    pub modes: ModeWeights,
    pub sampler: SceneSampler,
    pub templates: TemplatePool,
    pub class_names: Vec<ClassName>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n: 20_000,
            holdout_fraction: 0.1,
            modes: ModeWeights::default(),
            sampler: SceneSampler {
                count_decay: 0.9,
                ..SceneSampler::default()
            },
            templates: TemplatePool::default(),
            class_names: default_class_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    /// Per-number cap for "two" to "six".
    pub cap_low: usize,
    pub noise: DetectorNoise,
    pub rules: CandidateRules,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            cap_low: 2000,
            noise: DetectorNoise::none(),
            rules: CandidateRules::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub quota: usize,
    /// Ids removed before quota sampling, one per line.
    pub drop_file: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            quota: 5,
            drop_file: None,
        }
    }
}

/// Tower widths; vocabulary size and raster shape are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub hidden: usize,
    pub d_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_tok: 32,
            hidden: 64,
            d_embed: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Benchmark evaluation cadence during training; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint cadence during training; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Default `k` for retrieval.
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_every: 0,
            checkpoint_every: 0,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Overrides `train.total_steps` (and clamps the warm-up) for each cell.
    pub total_steps: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![1.0 / 32.0, 1.0 / 8.0, 1.0 / 4.0],
            lambdas: vec![0.1, 1.0, 5.0, 10.0],
            total_steps: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| {
                text.get(s).unwrap_or_default().trim().to_string()
            });
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generate;
        if !(0.0..1.0).contains(&g.holdout_fraction) {
            return Err(Error::config("generate.holdout_fraction", "must lie in [0, 1)"));
        }
        let w = g.modes.as_array();
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "generate.modes",
                "weights must be non-negative with a positive sum",
            ));
        }
        g.sampler
            .validate()
            .map_err(|e| prefix_field(e, "generate.sampler"))?;
        if let Some(&c) = g.sampler.class_pool.iter().max() {
            if c >= g.class_names.len() {
                return Err(Error::config(
                    "generate.class_names",
                    format!("class {c} is sampled but only {} names are given", g.class_names.len()),
                ));
            }
        }
        self.curate
            .noise
            .validate()
            .map_err(|e| prefix_field(e, "curate.noise"))?;
        if self.bench.quota == 0 {
            return Err(Error::config("bench.quota", "must be at least 1"));
        }
        let m = &self.model;
        if m.d_tok == 0 || m.hidden == 0 || m.d_embed == 0 {
            return Err(Error::config("model", "dimensions must be positive"));
        }
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::config("eval.k", "must be at least 1"));
        }
        if self.sweep.fractions.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::config("sweep.fractions", "each fraction must lie in (0, 1)"));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("sweep.lambdas", "each weight must be non-negative"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(&self.generate.class_names, &self.generate.templates)
    }

    pub fn dims(&self, vocab: &Vocabulary) -> Dims {
        Dims {
            vocab: vocab.len(),
            d_tok: self.model.d_tok,
            hidden: self.model.hidden,
            d_embed: self.model.d_embed,
            height: self.generate.sampler.height as usize,
            width: self.generate.sampler.width as usize,
        }
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}
