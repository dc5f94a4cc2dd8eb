#![allow(dead_code)]

use countlab::config::RunConfig;
use countlab::encoder::{Dims, Params};
use countlab::numbers::NumberWord;
use countlab::scene::{render, Layout, Placement, SceneSpec};

/// A small but complete configuration for end-to-end tests.
pub fn small_config(out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig {
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.generate.n = 3000;
    cfg.generate.holdout_fraction = 0.2;
    cfg.model.d_tok = 8;
    cfg.model.hidden = 12;
    cfg.model.d_embed = 8;
    cfg.train.batch_size = 16;
    cfg.train.counting_fraction = 0.25;
    cfg.train.total_steps = 40;
    cfg.train.warmup_steps = 10;
    cfg.bench.quota = 2;
    cfg
}

/// One class, no distractors, a single count template: the setting in which
/// `oracle_params` counts perfectly.
pub fn oracle_config(out: &std::path::Path) -> RunConfig {
    let mut cfg = small_config(out);
    cfg.generate.sampler.class_pool = vec![0];
    cfg.generate.sampler.distractor_prob = 0.0;
    cfg.generate.templates.count = vec!["a photo of {n} {objs}".into()];
    cfg.model.d_tok = 1;
    cfg.model.hidden = 8;
    cfg.model.d_embed = 8;
    cfg
}

/// Pixel mass of one glyph of class 0 at the configured size.
pub fn glyph_mass(cfg: &RunConfig) -> f64 {
    let s = &cfg.generate.sampler;
    let scene = SceneSpec {
        id: "probe".into(),
        counts: [(0, 1)].into_iter().collect(),
        layout: Layout::Grid,
        height: s.height,
        width: s.width,
        placements: vec![Placement {
            class: 0,
            cx: s.width / 2,
            cy: s.height / 2,
            size: s.glyph_size,
        }],
        seed: 0,
    };
    render(&scene).pixels.iter().sum()
}

/// Hand-built parameters that encode both a scene's object count and a
/// caption's number word as the same 8-step thermometer code.
///
/// Hidden unit `k` fires (+1) when the count is at least `k + 3`. The text
/// tower reads the number from a one-dimensional token table in which only
/// number words are nonzero; captions are assumed to have five tokens
/// ("a photo of N objs"). The image tower reads the total pixel mass.
pub fn oracle_params(cfg: &RunConfig) -> Params {
    let vocab = cfg.vocabulary();
    let dims: Dims = cfg.dims(&vocab);
    assert_eq!((dims.d_tok, dims.hidden, dims.d_embed), (1, 8, 8));
    let l = dims.layout();
    let mut p = Params::zeros(dims).unwrap();
    let th = p.theta_mut();
    for n in NumberWord::ALL {
        th[l.tok_embed.start + vocab.number_index(n)] = n.value() as f64;
    }
    let g = 200.0;
    let mass = glyph_mass(cfg);
    for k in 0..8 {
        let threshold = k as f64 + 2.5;
        th[l.text_w1.start + k] = g;
        th[l.text_b1.start + k] = -g * threshold / 5.0;
        for px in 0..dims.pixels() {
            th[l.img_w1.start + px * 8 + k] = g / mass;
        }
        th[l.img_b1.start + k] = -g * threshold;
        th[l.text_w2.start + k * 8 + k] = 1.0;
        th[l.img_w2.start + k * 8 + k] = 1.0;
    }
    p
}

/// Neumaier-compensated sum.
pub fn ksum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn files_in(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
