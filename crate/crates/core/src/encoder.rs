//! Tiny dual encoder: two one-hidden-layer tanh MLP towers producing
//! unit-norm embeddings, with hand-derived gradients.
//!
//! All weights live in one flat `Vec<f64>` in this order:
//!
//! | segment      | shape          | layout                        |
//! |--------------|----------------|-------------------------------|
//! | `tok_embed`  | V x d_tok      | row per token                 |
//! | `text_w1`    | d_tok x h      | input-major: `w[i*h + j]`     |
//! | `text_b1`    | h              |                               |
//! | `text_w2`    | h x d_e        | input-major: `w[j*d_e + k]`   |
//! | `text_b2`    | d_e            |                               |
//! | `img_w1`     | (H*W) x h      | input-major, pixels row-major |
//! | `img_b1`     | h              |                               |
//! | `img_w2`     | h x d_e        | input-major                   |
//! | `img_b2`     | d_e            |                               |
//! | `log_scale`  | 1              | temperature τ, scale = exp(τ) |

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Raster;
use crate::seed;

/// Pre-normalization vectors shorter than this are mapped to e_0.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_tok: usize,
    pub hidden: usize,
    pub d_embed: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (v, t, h, e, p) = (self.vocab, self.d_tok, self.hidden, self.d_embed, self.pixels());
        Layout {
            tok_embed: take(v * t),
            text_w1: take(t * h),
            text_b1: take(h),
            text_w2: take(h * e),
            text_b2: take(e),
            img_w1: take(p * h),
            img_b1: take(h),
            img_w2: take(h * e),
            img_b2: take(e),
            log_scale: take(1).start,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().log_scale + 1
    }

    fn validate(&self) -> Result<()> {
        let all = [self.vocab, self.d_tok, self.hidden, self.d_embed, self.height, self.width];
        if all.contains(&0) {
            return Err(Error::config("model", format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_embed: Range<usize>,
    pub text_w1: Range<usize>,
    pub text_b1: Range<usize>,
    pub text_w2: Range<usize>,
    pub text_b2: Range<usize>,
    pub img_w1: Range<usize>,
    pub img_b1: Range<usize>,
    pub img_w2: Range<usize>,
    pub img_b2: Range<usize>,
    pub log_scale: usize,
}

impl Layout {
    /// Named segments in storage order.
    pub fn segments(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("tok_embed", self.tok_embed.clone()),
            ("text_w1", self.text_w1.clone()),
            ("text_b1", self.text_b1.clone()),
            ("text_w2", self.text_w2.clone()),
            ("text_b2", self.text_b2.clone()),
            ("img_w1", self.img_w1.clone()),
            ("img_b1", self.img_b1.clone()),
            ("img_w2", self.img_w2.clone()),
            ("img_b2", self.img_b2.clone()),
            ("log_scale", self.log_scale..self.log_scale + 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    dims: Dims,
    theta: Vec<f64>,
}

impl Params {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        Ok(Params {
            theta: vec![0.0; dims.param_count()],
            dims,
        })
    }

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), embedding rows ~ U(-1, 1)
    /// (one-hot fan-in), biases zero, τ = ln(1/0.07).
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        let mut p = Params::zeros(dims)?;
        let l = dims.layout();
        let mut rng = seed::rng(seed);
        let mut fill = |theta: &mut [f64], r: Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in &mut theta[r] {
                *x = rng.gen_range(-a..a);
            }
        };
        fill(&mut p.theta, l.tok_embed, 1);
        fill(&mut p.theta, l.text_w1, dims.d_tok);
        fill(&mut p.theta, l.text_w2, dims.hidden);
        fill(&mut p.theta, l.img_w1, dims.pixels());
        fill(&mut p.theta, l.img_w2, dims.hidden);
        p.theta[l.log_scale] = (1.0f64 / 0.07).ln();
        Ok(p)
    }

    pub fn from_theta(dims: Dims, theta: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if theta.len() != dims.param_count() {
            return Err(Error::data(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                theta.len()
            )));
        }
        Ok(Params { dims, theta })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn log_scale(&self) -> f64 {
        self.theta[self.dims.layout().log_scale]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    fn text_tower(&self) -> Tower<'_> {
        let l = self.dims.layout();
        Tower {
            w1: &self.theta[l.text_w1],
            b1: &self.theta[l.text_b1],
            w2: &self.theta[l.text_w2],
            b2: &self.theta[l.text_b2],
        }
    }

    fn image_tower(&self) -> Tower<'_> {
        let l = self.dims.layout();
        Tower {
            w1: &self.theta[l.img_w1],
            b1: &self.theta[l.img_b1],
            w2: &self.theta[l.img_w2],
            b2: &self.theta[l.img_b2],
        }
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalizes `v`, mapping near-zero vectors to e_0.
    pub fn normalize(mut v: Vec<f64>) -> Self {
        let norm = l2(&v);
        if norm < NORM_EPS {
            v.iter_mut().for_each(|x| *x = 0.0);
            if let Some(x) = v.first_mut() {
                *x = 1.0;
            }
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(v)
    }

    /// Unnormalized wrapper for finite-difference tests on free vectors.
    #[cfg(test)]
    pub(crate) fn from_raw_for_test(v: Vec<f64>) -> Self {
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity of unit vectors.
pub fn similarity(u: &Embedding, v: &Embedding) -> f64 {
    dot(&u.0, &v.0)
}

struct Tower<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TowerCache {
    /// Sparse input as (coordinate, value).
    input: Vec<(usize, f64)>,
    hidden: Vec<f64>,
    norm: f64,
    out: Embedding,
}

impl TowerCache {
    pub fn embedding(&self) -> &Embedding {
        &self.out
    }
}

impl Tower<'_> {
    fn forward(&self, input: Vec<(usize, f64)>) -> TowerCache {
        let h = self.b1.len();
        let e = self.b2.len();
        let mut pre = self.b1.to_vec();
        for &(i, x) in &input {
            let row = &self.w1[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += w * x;
            }
        }
        let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
        let mut z = self.b2.to_vec();
        for (j, &a) in hidden.iter().enumerate() {
            let row = &self.w2[j * e..(j + 1) * e];
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += w * a;
            }
        }
        let norm = l2(&z);
        TowerCache {
            input,
            hidden,
            norm,
            out: Embedding::normalize(z),
        }
    }

    /// Accumulates parameter gradients into the `g_*` slices and, when
    /// `want_input` is set, returns the input gradient for the coordinates
    /// present in the cached input (the text tower passes a dense input).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        cache: &TowerCache,
        d_out: &[f64],
        g_w1: &mut [f64],
        g_b1: &mut [f64],
        g_w2: &mut [f64],
        g_b2: &mut [f64],
        want_input: bool,
    ) -> Vec<f64> {
        let h = self.b1.len();
        let e = self.b2.len();
        if cache.norm < NORM_EPS {
            // the guard output is constant
            return if want_input { vec![0.0; self.w1.len() / h] } else { Vec::new() };
        }
        let y = cache.out.as_slice();
        let proj = dot(y, d_out);
        let dz: Vec<f64> = y
            .iter()
            .zip(d_out)
            .map(|(yk, dk)| (dk - yk * proj) / cache.norm)
            .collect();
        for (g, d) in g_b2.iter_mut().zip(&dz) {
            *g += d;
        }
        let mut da = vec![0.0; h];
        for (j, &a) in cache.hidden.iter().enumerate() {
            let w_row = &self.w2[j * e..(j + 1) * e];
            let g_row = &mut g_w2[j * e..(j + 1) * e];
            let mut acc = 0.0;
            for k in 0..e {
                g_row[k] += a * dz[k];
                acc += w_row[k] * dz[k];
            }
            da[j] = acc * (1.0 - a * a);
        }
        for (g, d) in g_b1.iter_mut().zip(&da) {
            *g += d;
        }
        let mut dx = if want_input { vec![0.0; self.w1.len() / h] } else { Vec::new() };
        for &(i, x) in &cache.input {
            let g_row = &mut g_w1[i * h..(i + 1) * h];
            for (g, d) in g_row.iter_mut().zip(&da) {
                *g += x * d;
            }
            if want_input {
                dx[i] = dot(&self.w1[i * h..(i + 1) * h], &da);
            }
        }
        dx
    }
}

/// Forward pass of the text tower with mean pooling over token embeddings.
pub fn text_forward(params: &Params, tokens: &[usize]) -> Result<TowerCache> {
    if tokens.is_empty() {
        return Err(Error::usage("cannot encode an empty token list"));
    }
    let d = params.dims;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= d.vocab) {
        return Err(Error::usage(format!("token index {bad} outside vocabulary of {}", d.vocab)));
    }
    let table = &params.theta[d.layout().tok_embed];
    let mut pooled = vec![0.0; d.d_tok];
    for &t in tokens {
        for (p, x) in pooled.iter_mut().zip(&table[t * d.d_tok..(t + 1) * d.d_tok]) {
            *p += x;
        }
    }
    let n = tokens.len() as f64;
    let input = pooled.into_iter().map(|p| p / n).enumerate().collect();
    Ok(params.text_tower().forward(input))
}

pub fn image_forward(params: &Params, raster: &Raster) -> Result<TowerCache> {
    let d = params.dims;
    if raster.height != d.height || raster.width != d.width || raster.pixels.len() != d.pixels() {
        return Err(Error::usage(format!(
            "raster is {}x{}, encoder expects {}x{}",
            raster.height, raster.width, d.height, d.width
        )));
    }
    let input = raster
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(i, &p)| (i, p))
        .collect();
    Ok(params.image_tower().forward(input))
}

pub fn encode_text(params: &Params, tokens: &[usize]) -> Result<Embedding> {
    Ok(text_forward(params, tokens)?.out)
}

pub fn encode_image(params: &Params, raster: &Raster) -> Result<Embedding> {
    Ok(image_forward(params, raster)?.out)
}

/// Adds d(loss)/d(theta) to `grad` given d(loss)/d(embedding) for a text
/// encoded from `tokens`.
pub fn text_backward(params: &Params, tokens: &[usize], cache: &TowerCache, d_out: &[f64], grad: &mut [f64]) {
    let d = params.dims;
    let l = d.layout();
    let (g_embed, rest) = grad.split_at_mut(l.text_w1.start);
    let (g_w1, rest) = rest.split_at_mut(l.text_w1.len());
    let (g_b1, rest) = rest.split_at_mut(l.text_b1.len());
    let (g_w2, rest) = rest.split_at_mut(l.text_w2.len());
    let g_b2 = &mut rest[..l.text_b2.len()];
    let dx = params
        .text_tower()
        .backward(cache, d_out, g_w1, g_b1, g_w2, g_b2, true);
    let n = tokens.len() as f64;
    for &t in tokens {
        let row = &mut g_embed[t * d.d_tok..(t + 1) * d.d_tok];
        for (g, x) in row.iter_mut().zip(&dx) {
            *g += x / n;
        }
    }
}

pub fn image_backward(params: &Params, cache: &TowerCache, d_out: &[f64], grad: &mut [f64]) {
    let l = params.dims.layout();
    let g = &mut grad[l.img_w1.start..l.img_b2.end];
    let (g_w1, rest) = g.split_at_mut(l.img_w1.len());
    let (g_b1, rest) = rest.split_at_mut(l.img_b1.len());
    let (g_w2, g_b2) = rest.split_at_mut(l.img_w2.len());
    params
        .image_tower()
        .backward(cache, d_out, g_w1, g_b1, g_w2, g_b2, false);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.pass)
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// `probe_count` distinct coordinates drawn uniformly from `0..len`.
pub fn random_probes(len: usize, probe_count: usize, seed: u64) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(&mut seed::rng(seed), len, probe_count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Random probes spread over every parameter segment: `per_segment`
/// coordinates from each (fewer for tiny segments).
pub fn stratified_probes(dims: &Dims, per_segment: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, (_, r)) in dims.layout().segments().into_iter().enumerate() {
        let picks = random_probes(r.len(), per_segment, seed::mix(seed, k as u64));
        out.extend(picks.into_iter().map(|i| r.start + i));
    }
    out
}

/// Compares `analytic` against central differences of `loss` at the given
/// coordinates of `theta`.
pub fn grad_check<F>(theta: &[f64], analytic: &[f64], loss: F, probes: &[usize], cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let probes: Vec<Probe> = probes
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + cfg.step;
            let up = loss(&work);
            work[i] = orig - cfg.step;
            let down = loss(&work);
            work[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let relative_error = relative_error(analytic[i], numeric);
            Probe {
                index: i,
                analytic: analytic[i],
                numeric,
                relative_error,
                pass: relative_error < cfg.tol,
            }
        })
        .collect();
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    GradCheckReport {
        probes,
        max_relative_error,
    }
}

const MAGIC: &[u8; 8] = b"CNTLABP\0";
const VERSION: u32 = 1;

/// Binary parameter file: 8-byte magic, u32 version, six u64 dimensions
/// (vocab, d_tok, hidden, d_embed, height, width), u64 coordinate count, then
/// the coordinates as little-endian f64 in storage order.
pub fn params_to_bytes(params: &Params) -> Vec<u8> {
    let d = params.dims;
    let mut out = Vec::with_capacity(8 + 4 + 7 * 8 + params.theta.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.vocab, d.d_tok, d.hidden, d.d_embed, d.height, d.width, params.theta.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for x in &params.theta {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Params> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::data("parameter file truncated in header"))?;
    if &magic != MAGIC {
        return Err(Error::data("not a parameter file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::data("parameter file truncated in header"))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::data(format!("unsupported parameter file version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in fields.iter_mut() {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| Error::data("parameter file truncated in header"))?;
        *f = u64::from_le_bytes(b8) as usize;
    }
    let dims = Dims {
        vocab: fields[0],
        d_tok: fields[1],
        hidden: fields[2],
        d_embed: fields[3],
        height: fields[4],
        width: fields[5],
    };
    dims.validate().map_err(|e| Error::data(e.to_string()))?;
    if fields[6] != dims.param_count() {
        return Err(Error::data(format!(
            "header declares {} coordinates, dimensions imply {}",
            fields[6],
            dims.param_count()
        )));
    }
    if r.len() != fields[6] * 8 {
        return Err(Error::data(format!(
            "expected {} payload bytes, found {}",
            fields[6] * 8,
            r.len()
        )));
    }
    let theta = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Params::from_theta(dims, theta)
}

pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &params_to_bytes(params))
}

pub fn load_params(path: &Path) -> Result<Params> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render, SceneSampler};

    pub(crate) fn small_dims() -> Dims {
        Dims {
            vocab: 20,
            d_tok: 6,
            hidden: 7,
            d_embed: 5,
            height: 6,
            width: 6,
        }
    }

    fn random_raster(dims: &Dims, seed: u64) -> Raster {
        let mut rng = seed::rng(seed);
        Raster {
            height: dims.height,
            width: dims.width,
            pixels: (0..dims.pixels())
                .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.1..1.0) } else { 0.0 })
                .collect(),
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let d = small_dims();
        let segs = d.layout().segments();
        let mut at = 0;
        for (_, r) in &segs {
            assert_eq!(r.start, at);
            at = r.end;
        }
        assert_eq!(at, d.param_count());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let d = small_dims();
        for s in 0..50 {
            let p = Params::init(d, s).unwrap();
            let t = encode_text(&p, &[1, 4, 9, (s % 20) as usize]).unwrap();
            assert!((t.norm() - 1.0).abs() < 1e-9);
            let i = encode_image(&p, &random_raster(&d, s)).unwrap();
            assert!((i.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn text_pooling_is_order_invariant() {
        let p = Params::init(small_dims(), 1).unwrap();
        let a = encode_text(&p, &[3, 7, 11, 2]).unwrap();
        let b = encode_text(&p, &[11, 2, 7, 3]).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn number_rows_change_text_embedding() {
        let d = small_dims();
        let p = Params::init(d, 5).unwrap();
        let l = d.layout();
        let row = |t: usize| p.theta()[l.tok_embed.start + t * d.d_tok..l.tok_embed.start + (t + 1) * d.d_tok].to_vec();
        assert_ne!(row(2), row(3));
        let a = encode_text(&p, &[12, 13, 2, 14]).unwrap();
        let b = encode_text(&p, &[12, 13, 3, 14]).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn empty_tokens_and_bad_dims_are_usage_errors() {
        let d = small_dims();
        let p = Params::init(d, 5).unwrap();
        assert!(matches!(encode_text(&p, &[]), Err(Error::Usage(_))));
        assert!(matches!(encode_text(&p, &[99]), Err(Error::Usage(_))));
        assert!(matches!(encode_image(&p, &Raster::zeros(5, 6)), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_vector_guard() {
        let d = small_dims();
        let mut p = Params::init(d, 5).unwrap();
        let l = d.layout();
        for x in &mut p.theta_mut()[l.img_b1.clone()] {
            *x = 0.0;
        }
        for x in &mut p.theta_mut()[l.img_b2.clone()] {
            *x = 0.0;
        }
        let e = encode_image(&p, &Raster::zeros(6, 6)).unwrap();
        let mut want = vec![0.0; d.d_embed];
        want[0] = 1.0;
        assert_eq!(e.as_slice(), want.as_slice());
    }

    #[test]
    fn one_glyph_changes_image_embedding() {
        let sampler = SceneSampler::default();
        let dims = Dims {
            vocab: 10,
            d_tok: 4,
            hidden: 16,
            d_embed: 8,
            height: 32,
            width: 32,
        };
        for t in 0..100 {
            let p = Params::init(dims, 1000 + t).unwrap();
            let sc = sampler.sample("x", t).unwrap();
            let mut fewer = sc.clone();
            fewer.placements.pop();
            let a = encode_image(&p, &render(&sc)).unwrap();
            let b = encode_image(&p, &render(&fewer)).unwrap();
            assert!(a != b, "trial {t}");
        }
    }

    #[test]
    fn similarity_extremes() {
        let u = Embedding::normalize(vec![0.3, -0.4, 1.2]);
        let neg = Embedding::normalize(u.as_slice().iter().map(|x| -x).collect());
        assert!((similarity(&u, &u) - 1.0).abs() < 1e-15);
        assert!((similarity(&u, &neg) + 1.0).abs() < 1e-15);
        let e0 = Embedding::normalize(vec![1.0, 0.0, 0.0]);
        let e1 = Embedding::normalize(vec![0.0, 1.0, 0.0]);
        assert_eq!(similarity(&e0, &e1), 0.0);
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let theta: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |t: &[f64]| 0.5 * t.iter().map(|x| x * x).sum::<f64>();
        let probes = random_probes(theta.len(), 20, 1);
        let rep = grad_check(&theta, &theta, loss, &probes, GradCheckConfig::default());
        assert!(rep.passed());
        assert!(rep.max_relative_error < 1e-8, "{}", rep.max_relative_error);
    }

    #[test]
    fn grad_check_flags_corruption() {
        let theta: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
        let mut analytic = theta.clone();
        analytic[4] *= 2.0;
        let loss = |t: &[f64]| 0.5 * t.iter().map(|x| x * x).sum::<f64>();
        let rep = grad_check(&theta, &analytic, loss, &(0..10).collect::<Vec<_>>(), GradCheckConfig::default());
        assert!(!rep.passed());
        let bad: Vec<usize> = rep.failures().map(|p| p.index).collect();
        assert_eq!(bad, vec![4]);
    }

    /// Random linear functional of one embedding, checked through both towers.
    #[test]
    fn tower_gradients_match_finite_differences() {
        let d = small_dims();
        let p = Params::init(d, 21).unwrap();
        let raster = random_raster(&d, 4);
        let tokens = vec![3usize, 5, 5, 17];
        let c: Vec<f64> = (0..d.d_embed).map(|k| (k as f64 + 0.5).cos()).collect();
        let loss = |t: &[f64]| {
            let q = Params::from_theta(d, t.to_vec()).unwrap();
            dot(encode_text(&q, &tokens).unwrap().as_slice(), &c)
                + 0.7 * dot(encode_image(&q, &raster).unwrap().as_slice(), &c)
        };
        let mut grad = vec![0.0; d.param_count()];
        let tc = text_forward(&p, &tokens).unwrap();
        text_backward(&p, &tokens, &tc, &c, &mut grad);
        let ic = image_forward(&p, &raster).unwrap();
        let scaled: Vec<f64> = c.iter().map(|x| 0.7 * x).collect();
        image_backward(&p, &ic, &scaled, &mut grad);
        let probes: Vec<usize> = (0..d.param_count()).collect();
        let rep = grad_check(p.theta(), &grad, loss, &probes, GradCheckConfig::default());
        assert!(rep.passed(), "max rel err {}", rep.max_relative_error);
    }

    #[test]
    fn params_binary_round_trip() {
        let p = Params::init(small_dims(), 3).unwrap();
        let bytes = params_to_bytes(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 56 + 8 * p.theta().len());
        let q = params_from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert!(params_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(params_from_bytes(&bad).is_err());
    }
}
