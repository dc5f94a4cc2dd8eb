//! Combined objective `L = L_CLIP + λ·L_count`, batch composition and the
//! optimization loop.
//!
//! Each step draws `m = round(p·B)` counting records (at least one) and
//! `B - m` general pairs. `L_CLIP` runs over all `B` (image, caption) pairs;
//! `L_count` runs over the `m` counting triplets only, and the counterfactual
//! captions never enter the `L_CLIP` batch. λ ramps linearly from 0 over the
//! first `warmup_steps` steps.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::CountingSet;
use crate::encoder::{image_backward, image_forward, text_backward, text_forward, Params, TowerCache};
use crate::error::{Error, Result};
use crate::loss::{clip_loss_grad, count_loss_grad, TripletEmbeddings};
use crate::numbers::{make_counterfactual, CaptionRecord};
use crate::par;
use crate::scene::{render, Raster, SceneSpec};
use crate::seed;
use crate::vocab::Vocabulary;

/// An (image, caption) pair from the general pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageText {
    pub id: String,
    pub scene: SceneSpec,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingTriplet {
    pub scene_id: String,
    pub raster: Raster,
    pub caption_tokens: Vec<usize>,
    pub counterfactual_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralPair {
    pub raster: Raster,
    pub tokens: Vec<usize>,
}

/// A materialized training batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub general: Vec<GeneralPair>,
    pub counting: Vec<CountingTriplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_clip: f64,
    pub l_count: f64,
    pub l_total: f64,
    pub effective_lambda: f64,
}

/// `λ·min(1, step/W)`, or `λ` when `W = 0`.
pub fn effective_lambda(step: usize, lambda: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        lambda
    } else {
        lambda * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Number of counting records per batch: `round_half_up(p·B)`, at least 1.
pub fn counting_batch_size(batch_size: usize, fraction: f64) -> usize {
    ((fraction * batch_size as f64 + 0.5).floor() as usize).max(1)
}

/// Reported loss and exact analytic gradient of `l_total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub report: LossReport,
    pub grad: Vec<f64>,
}

/// One encoder pass whose gradient is needed.
enum Job<'a> {
    Image(&'a Raster),
    Text(&'a [usize]),
}

const REDUCE_CHUNK: usize = 32;

/// Evaluates the combined loss on a batch and its gradient with respect to
/// every parameter.
pub fn combined_loss(params: &Params, batch: &Batch, lambda_eff: f64, step: usize) -> Result<LossAndGrad> {
    if batch.counting.is_empty() && lambda_eff > 0.0 {
        return Err(Error::usage("counting batch is empty but the counting loss weight is positive"));
    }
    let n_gen = batch.general.len();
    let m = batch.counting.len();
    let n = n_gen + m;
    if n == 0 {
        return Err(Error::usage("empty batch"));
    }

    // Jobs: N images, N captions, then m counterfactuals.
    let mut jobs: Vec<Job<'_>> = Vec::with_capacity(2 * n + m);
    jobs.extend(batch.general.iter().map(|g| Job::Image(&g.raster)));
    jobs.extend(batch.counting.iter().map(|c| Job::Image(&c.raster)));
    jobs.extend(batch.general.iter().map(|g| Job::Text(&g.tokens)));
    jobs.extend(batch.counting.iter().map(|c| Job::Text(&c.caption_tokens)));
    jobs.extend(batch.counting.iter().map(|c| Job::Text(&c.counterfactual_tokens)));

    let caches: Vec<TowerCache> = par::map(&jobs, |j| match j {
        Job::Image(r) => image_forward(params, r),
        Job::Text(t) => text_forward(params, t),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let emb = |i: usize| caches[i].embedding();
    let images: Vec<_> = (0..n).map(|i| emb(i).clone()).collect();
    let texts: Vec<_> = (n..2 * n).map(|i| emb(i).clone()).collect();

    let clip = clip_loss_grad(&images, &texts, params.log_scale())?;
    let mut d_out: Vec<Vec<f64>> = clip.d_images.into_iter().chain(clip.d_texts).collect();
    d_out.extend((0..m).map(|_| Vec::new()));

    let l_count = if m > 0 {
        let triplets: Vec<_> = (0..m)
            .map(|k| TripletEmbeddings {
                image: emb(n_gen + k),
                caption: emb(n + n_gen + k),
                counterfactual: emb(2 * n + k),
            })
            .collect();
        let count = count_loss_grad(&triplets)?;
        if lambda_eff != 0.0 {
            for k in 0..m {
                add_scaled(&mut d_out[n_gen + k], &count.d_images[k], lambda_eff);
                add_scaled(&mut d_out[n + n_gen + k], &count.d_captions[k], lambda_eff);
                d_out[2 * n + k] = count.d_counterfactuals[k].iter().map(|x| lambda_eff * x).collect();
            }
        }
        count.value
    } else {
        0.0
    };

    let len = params.theta().len();
    let mut grad = par::chunked_reduce(
        jobs.len(),
        REDUCE_CHUNK,
        || vec![0.0; len],
        |g, i| {
            if d_out[i].is_empty() {
                return;
            }
            match jobs[i] {
                Job::Image(_) => image_backward(params, &caches[i], &d_out[i], g),
                Job::Text(t) => text_backward(params, t, &caches[i], &d_out[i], g),
            }
        },
        |acc, part| {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        },
    );
    grad[params.dims().layout().log_scale] += clip.d_log_scale;

    let l_total = clip.value + lambda_eff * l_count;
    Ok(LossAndGrad {
        report: LossReport {
            step,
            l_clip: clip.value,
            l_count,
            l_total,
            effective_lambda: lambda_eff,
        },
        grad,
    })
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Indices chosen for one batch, plus the counterfactual text per counting
/// record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub general: Vec<usize>,
    pub counting: Vec<(usize, String)>,
}

/// Draws `B - m` general pairs and `m` counting records without replacement
/// and a fresh counterfactual for each counting record.
pub fn compose_batch<R: Rng + ?Sized>(
    general_pool: &[ImageText],
    counting_set: &CountingSet,
    batch_size: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<BatchPlan> {
    let m = counting_batch_size(batch_size, fraction);
    if m > batch_size {
        return Err(Error::usage(format!("counting share {m} exceeds batch size {batch_size}")));
    }
    let g = batch_size - m;
    if counting_set.records.len() < m {
        return Err(Error::InsufficientPool(format!(
            "counting set has {} records, batch needs {m}",
            counting_set.records.len()
        )));
    }
    if general_pool.len() < g {
        return Err(Error::InsufficientPool(format!(
            "general pool has {} records, batch needs {g}",
            general_pool.len()
        )));
    }
    let general = rand::seq::index::sample(rng, general_pool.len(), g).into_vec();
    let picks = rand::seq::index::sample(rng, counting_set.records.len(), m).into_vec();
    let mut counting = Vec::with_capacity(m);
    for i in picks {
        let r = &counting_set.records[i];
        let cf = make_counterfactual(&CaptionRecord::new(r.id.clone(), r.caption.clone()), rng)?;
        counting.push((i, cf.text));
    }
    Ok(BatchPlan { general, counting })
}

/// Renders and tokenizes a batch plan.
pub fn materialize(
    plan: &BatchPlan,
    vocab: &Vocabulary,
    general_pool: &[ImageText],
    counting_set: &CountingSet,
) -> Batch {
    let general = par::map(&plan.general, |&i| {
        let r = &general_pool[i];
        GeneralPair {
            raster: render(&r.scene),
            tokens: vocab.encode(&r.caption),
        }
    });
    let counting = par::map(&plan.counting, |(i, cf)| {
        let r = &counting_set.records[*i];
        CountingTriplet {
            scene_id: r.scene.id.clone(),
            raster: render(&r.scene),
            caption_tokens: vocab.encode(&r.caption),
            counterfactual_tokens: vocab.encode(cf),
        }
    });
    Batch { general, counting }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub counting_fraction: f64,
    pub lambda: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            counting_fraction: 1.0 / 8.0,
            lambda: 1.0,
            warmup_steps: 1000,
            total_steps: 5000,
            base_lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if !(self.counting_fraction > 0.0 && self.counting_fraction < 1.0) {
            return Err(Error::config("train.counting_fraction", "must lie in (0, 1)"));
        }
        if counting_batch_size(self.batch_size, self.counting_fraction) >= self.batch_size {
            return Err(Error::config(
                "train.counting_fraction",
                "leaves no room for general pairs in the batch",
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be non-negative"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("train.warmup_steps", "must not exceed total_steps"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        match self.optimizer {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::config("train.optimizer", "adam needs betas in [0, 1) and eps > 0"));
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("train.optimizer", "momentum must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// `base·½(1 + cos(π·t/T))` under the cosine schedule.
    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine => {
                if self.total_steps == 0 {
                    self.base_lr
                } else {
                    self.base_lr * 0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos())
                }
            }
        }
    }
}

/// Optimizer moments; `first` doubles as the SGD velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub updates: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            first: vec![0.0; len],
            second: vec![0.0; len],
            updates: 0,
        }
    }

    pub fn apply(&mut self, cfg: &OptimizerConfig, lr: f64, theta: &mut [f64], grad: &[f64]) {
        self.updates += 1;
        match *cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.updates as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                for i in 0..theta.len() {
                    self.first[i] = momentum * self.first[i] + grad[i];
                    theta[i] -= lr * self.first[i];
                }
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub optimizer: OptimizerState,
    /// Index of the next step to run.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(params: Params) -> Self {
        let len = params.theta().len();
        TrainState {
            params,
            optimizer: OptimizerState::new(len),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub report: LossReport,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,l_clip,l_count,l_total,effective_lambda,lr";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{}",
            r.step, r.l_clip, r.l_count, r.l_total, r.effective_lambda, self.lr
        )
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    vocab: &'a Vocabulary,
    general: &'a [ImageText],
    counting: &'a CountingSet,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        state: TrainState,
        vocab: &'a Vocabulary,
        general: &'a [ImageText],
        counting: &'a CountingSet,
    ) -> Result<Self> {
        cfg.validate()?;
        if state.params.dims().vocab != vocab.len() {
            return Err(Error::data(format!(
                "parameters expect a vocabulary of {}, configuration yields {}",
                state.params.dims().vocab,
                vocab.len()
            )));
        }
        Ok(Trainer {
            cfg,
            vocab,
            general,
            counting,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    /// Batch for step `t`; its random stream depends only on (seed, t).
    pub fn batch_for_step(&self, t: usize) -> Result<Batch> {
        let mut rng = seed::rng(seed::mix(self.cfg.seed, t as u64));
        let plan = compose_batch(
            self.general,
            self.counting,
            self.cfg.batch_size,
            self.cfg.counting_fraction,
            &mut rng,
        )?;
        Ok(materialize(&plan, self.vocab, self.general, self.counting))
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let t = self.state.step;
        let batch = self.batch_for_step(t)?;
        let lambda = effective_lambda(t, self.cfg.lambda, self.cfg.warmup_steps);
        let out = combined_loss(&self.state.params, &batch, lambda, t)?;
        if !out.report.l_total.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: t,
                message: format!("non-finite loss {}", out.report.l_total),
            });
        }
        let lr = self.cfg.learning_rate(t);
        self.state
            .optimizer
            .apply(&self.cfg.optimizer, lr, self.state.params.theta_mut(), &out.grad);
        if !self.state.params.is_finite() {
            return Err(Error::Divergence {
                step: t,
                message: "parameters became non-finite".into(),
            });
        }
        self.state.step += 1;
        Ok(StepLog { report: out.report, lr })
    }

    /// Runs to `total_steps`, calling `hook` after every step.
    pub fn run<F>(&mut self, mut hook: F) -> Result<Vec<StepLog>>
    where
        F: FnMut(&TrainState, &StepLog) -> Result<()>,
    {
        let mut log = Vec::with_capacity(self.cfg.total_steps.saturating_sub(self.state.step));
        while !self.is_done() {
            let entry = self.step()?;
            hook(&self.state, &entry)?;
            log.push(entry);
        }
        Ok(log)
    }
}

/// Trains from `init` for `cfg.total_steps` steps. `eval_hook` is called
/// every `eval_every` steps (and never when `eval_every` is 0).
pub fn train<F>(
    cfg: &TrainConfig,
    init: Params,
    vocab: &Vocabulary,
    general: &[ImageText],
    counting: &CountingSet,
    eval_every: usize,
    mut eval_hook: F,
) -> Result<(Params, Vec<StepLog>)>
where
    F: FnMut(usize, &Params) -> Result<()>,
{
    let mut trainer = Trainer::new(cfg.clone(), TrainState::fresh(init), vocab, general, counting)?;
    let log = trainer.run(|state, _| {
        if eval_every > 0 && state.step % eval_every == 0 {
            eval_hook(state.step, &state.params)?;
        }
        Ok(())
    })?;
    Ok((trainer.into_state().params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{CountingSet, CuratedRecord};
    use crate::encoder::{grad_check, random_probes, stratified_probes, Dims, GradCheckConfig};
    use crate::numbers::NumberWord;
    use crate::scene::{default_class_names, SceneSampler, TemplatePool};

    fn vocab() -> Vocabulary {
        Vocabulary::build(&default_class_names(), &TemplatePool::default())
    }

    fn small_sampler() -> SceneSampler {
        SceneSampler {
            height: 18,
            width: 18,
            glyph_size: 3,
            ..SceneSampler::default()
        }
    }

    fn dims(v: &Vocabulary) -> Dims {
        Dims {
            vocab: v.len(),
            d_tok: 6,
            hidden: 10,
            d_embed: 8,
            height: 18,
            width: 18,
        }
    }

    fn counting_set(n: usize, sampler: &SceneSampler) -> CountingSet {
        let names = default_class_names();
        CountingSet::from_records(
            (0..n)
                .map(|i| {
                    let sc = sampler.sample(format!("c{i:04}"), seed::mix(1, i as u64)).unwrap();
                    let (cls, cnt) = sc.dominant().unwrap();
                    let number = NumberWord::from_value(cnt).unwrap();
                    CuratedRecord {
                        id: sc.id.clone(),
                        caption: format!("a photo of {} {}", number, names[cls].plural),
                        number,
                        scene: sc,
                    }
                })
                .collect(),
        )
    }

    fn general_pool(n: usize, sampler: &SceneSampler) -> Vec<ImageText> {
        let names = default_class_names();
        (0..n)
            .map(|i| {
                let sc = sampler.sample(format!("g{i:04}"), seed::mix(2, i as u64)).unwrap();
                let cls = sc.dominant().unwrap().0;
                ImageText {
                    id: sc.id.clone(),
                    caption: format!("a picture of some {}", names[cls].plural),
                    scene: sc,
                }
            })
            .collect()
    }

    #[test]
    fn warmup_ramp() {
        assert_eq!(effective_lambda(0, 1.0, 100), 0.0);
        assert_eq!(effective_lambda(100, 1.0, 100), 1.0);
        assert_eq!(effective_lambda(50, 1.0, 100), 0.5);
        assert_eq!(effective_lambda(500, 2.0, 100), 2.0);
        assert_eq!(effective_lambda(0, 3.0, 0), 3.0);
        let mut prev = 0.0;
        for s in 0..300 {
            let l = effective_lambda(s, 1.5, 200);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn counting_share_rounding() {
        assert_eq!(counting_batch_size(32, 1.0 / 32.0), 1);
        assert_eq!(counting_batch_size(64, 1.0 / 8.0), 8);
        assert_eq!(counting_batch_size(4, 0.01), 1);
        assert_eq!(counting_batch_size(4, 0.125), 1); // 0.5 rounds up
        assert_eq!(counting_batch_size(64, 0.25), 16);
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig {
            base_lr: 2.0,
            total_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 2.0);
        assert!((cfg.learning_rate(5) - 1.0).abs() < 1e-15);
        assert!(cfg.learning_rate(10).abs() < 1e-15);
    }

    #[test]
    fn compose_batch_sizes_and_determinism() {
        let s = small_sampler();
        let c = counting_set(20, &s);
        let g = general_pool(80, &s);
        let a = compose_batch(&g, &c, 64, 0.125, &mut seed::rng(3)).unwrap();
        assert_eq!(a.general.len(), 56);
        assert_eq!(a.counting.len(), 8);
        let mut uniq = a.general.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 56);
        let b = compose_batch(&g, &c, 64, 0.125, &mut seed::rng(3)).unwrap();
        assert_eq!(a, b);
        for (i, cf) in &a.counting {
            let orig = crate::numbers::extract_spelled_numbers(&c.records[*i].caption)[0].0;
            let new = crate::numbers::extract_spelled_numbers(cf)[0].0;
            assert_ne!(orig, new);
        }
    }

    #[test]
    fn compose_batch_insufficient_pool() {
        let s = small_sampler();
        let c = counting_set(3, &s);
        let g = general_pool(10, &s);
        assert!(matches!(
            compose_batch(&g, &c, 64, 0.125, &mut seed::rng(3)),
            Err(Error::InsufficientPool(_))
        ));
    }

    #[test]
    fn compose_batch_uniform_usage() {
        let s = small_sampler();
        let c = counting_set(40, &s);
        let g = general_pool(60, &s);
        let mut hits = vec![0usize; 40];
        let mut rng = seed::rng(77);
        for _ in 0..1000 {
            for (i, _) in compose_batch(&g, &c, 64, 0.125, &mut rng).unwrap().counting {
                hits[i] += 1;
            }
        }
        let expect = 1000.0 * 8.0 / 40.0;
        for h in hits {
            assert!((h as f64 - expect).abs() <= 0.2 * expect, "{h} vs {expect}");
        }
    }

    fn sample_batch(v: &Vocabulary, n_general: usize, m: usize) -> Batch {
        let s = small_sampler();
        let c = counting_set(m.max(1) * 2, &s);
        let g = general_pool(n_general + 4, &s);
        let plan = compose_batch(&g, &c, n_general + m.max(1), m.max(1) as f64 / (n_general + m.max(1)) as f64, &mut seed::rng(9)).unwrap();
        let mut b = materialize(&plan, v, &g, &c);
        if m == 0 {
            b.counting.clear();
        }
        b
    }

    #[test]
    fn report_is_additive_and_non_negative() {
        let v = vocab();
        let p = Params::init(dims(&v), 4).unwrap();
        let b = sample_batch(&v, 5, 3);
        for lam in [0.0, 0.3, 1.0, 5.0] {
            let r = combined_loss(&p, &b, lam, 0).unwrap().report;
            assert!(r.l_clip >= 0.0 && r.l_count >= 0.0);
            assert!((r.l_total - (r.l_clip + lam * r.l_count)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_equals_clip_only() {
        let v = vocab();
        let p = Params::init(dims(&v), 4).unwrap();
        let b = sample_batch(&v, 5, 3);
        let with = combined_loss(&p, &b, 0.0, 0).unwrap();
        // same (image, caption) pairs as a plain general batch
        let clip_only = Batch {
            general: b
                .general
                .iter()
                .cloned()
                .chain(b.counting.iter().map(|c| GeneralPair {
                    raster: c.raster.clone(),
                    tokens: c.caption_tokens.clone(),
                }))
                .collect(),
            counting: Vec::new(),
        };
        let plain = combined_loss(&p, &clip_only, 0.0, 0).unwrap();
        assert_eq!(with.report.l_total, with.report.l_clip);
        assert_eq!(with.report.l_clip, plain.report.l_clip);
        assert_eq!(with.grad, plain.grad);
    }

    #[test]
    fn empty_counting_batch_with_positive_weight_is_usage_error() {
        let v = vocab();
        let p = Params::init(dims(&v), 4).unwrap();
        let b = sample_batch(&v, 5, 0);
        assert!(matches!(combined_loss(&p, &b, 1.0, 0), Err(Error::Usage(_))));
        assert!(combined_loss(&p, &b, 0.0, 0).is_ok());
    }

    #[test]
    fn combined_gradient_passes_grad_check() {
        let v = vocab();
        let d = dims(&v);
        let p = Params::init(d, 12).unwrap();
        let b = sample_batch(&v, 2, 2);
        for lam in [0.0, 0.5, 1.0] {
            let out = combined_loss(&p, &b, lam, 0).unwrap();
            let loss = |t: &[f64]| {
                let q = Params::from_theta(d, t.to_vec()).unwrap();
                combined_loss(&q, &b, lam, 0).unwrap().report.l_total
            };
            let mut probes = random_probes(d.param_count(), 60, 5);
            probes.extend(stratified_probes(&d, 8, 6));
            let rep = grad_check(p.theta(), &out.grad, loss, &probes, GradCheckConfig::default());
            assert!(rep.passed(), "λ={lam}: max rel err {} {:?}", rep.max_relative_error, rep.failures().next());
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let v = vocab();
        let s = small_sampler();
        let p = Params::init(dims(&v), 1).unwrap();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (out, log) = train(&cfg, p.clone(), &v, &general_pool(20, &s), &counting_set(5, &s), 0, |_, _| Ok(())).unwrap();
        assert_eq!(out, p);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let v = vocab();
        let s = small_sampler();
        let g = general_pool(40, &s);
        let c = counting_set(10, &s);
        let cfg = TrainConfig {
            total_steps: 12,
            warmup_steps: 4,
            batch_size: 8,
            counting_fraction: 0.25,
            seed: 5,
            ..TrainConfig::default()
        };
        let p = Params::init(dims(&v), 1).unwrap();
        let mut evals = Vec::new();
        let (a, log_a) = train(&cfg, p.clone(), &v, &g, &c, 4, |s, _| {
            evals.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(evals, vec![4, 8, 12]);
        let (b, log_b) = train(&cfg, p.clone(), &v, &g, &c, 0, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 12);
        assert_ne!(a, p);

        let mut first = Trainer::new(cfg.clone(), TrainState::fresh(p), &v, &g, &c).unwrap();
        for _ in 0..7 {
            first.step().unwrap();
        }
        let mid = first.into_state();
        let mut resumed = Trainer::new(cfg.clone(), mid, &v, &g, &c).unwrap();
        let next = resumed.step().unwrap();
        assert_eq!(next, log_a[7]);
        resumed.run(|_, _| Ok(())).unwrap();
        assert_eq!(resumed.into_state().params, a);
    }

    #[test]
    fn divergence_is_reported() {
        let v = vocab();
        let s = small_sampler();
        let mut p = Params::init(dims(&v), 1).unwrap();
        let ls = p.dims().layout().log_scale;
        p.theta_mut()[ls] = f64::NAN;
        let cfg = TrainConfig {
            total_steps: 3,
            warmup_steps: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err = train(&cfg, p, &v, &general_pool(20, &s), &counting_set(5, &s), 0, |_, _| Ok(())).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut st = OptimizerState::new(2);
        let mut theta = vec![1.0, -1.0];
        st.apply(&OptimizerConfig::Sgd { momentum: 0.0 }, 0.1, &mut theta, &[2.0, -4.0]);
        assert!((theta[0] - 0.8).abs() < 1e-15);
        assert!((theta[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut st = OptimizerState::new(2);
        let mut theta = vec![0.0, 0.0];
        st.apply(&OptimizerConfig::default(), 0.01, &mut theta, &[3.0, -0.5]);
        assert!((theta[0] + 0.01).abs() < 1e-9);
        assert!((theta[1] - 0.01).abs() < 1e-9);
    }
}
