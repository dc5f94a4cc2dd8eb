//! Contrastive objectives over unit-norm embeddings, with gradients.
//!
//! `clip_loss` is the symmetric image/text InfoNCE over a batch with logits
//! `exp(τ)·(ei_i · et_j)`. `count_loss` is the two-way softmax between an
//! image's similarity to its true caption and to a counterfactual caption,
//! on raw dot products (no temperature).

use crate::encoder::{dot, Embedding};
use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipGrad {
    pub value: f64,
    pub d_images: Vec<Vec<f64>>,
    pub d_texts: Vec<Vec<f64>>,
    pub d_log_scale: f64,
}

fn logits(images: &[Embedding], texts: &[Embedding], log_scale: f64) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::usage("contrastive loss needs at least one pair"));
    }
    if images.len() != texts.len() {
        return Err(Error::usage(format!(
            "{} images but {} texts",
            images.len(),
            texts.len()
        )));
    }
    let scale = log_scale.exp();
    Ok(images
        .iter()
        .map(|i| texts.iter().map(|t| scale * dot(i.as_slice(), t.as_slice())).collect())
        .collect())
}

pub fn clip_loss(images: &[Embedding], texts: &[Embedding], log_scale: f64) -> Result<f64> {
    Ok(clip_loss_grad(images, texts, log_scale)?.value)
}

/// Symmetric InfoNCE: ½ [mean_i CE(row_i, i) + mean_j CE(col_j, j)].
pub fn clip_loss_grad(images: &[Embedding], texts: &[Embedding], log_scale: f64) -> Result<ClipGrad> {
    let s = logits(images, texts, log_scale)?;
    let n = s.len();
    let nf = n as f64;
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(s[i].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(|i| s[i][j]))).collect();
    let mut row_ce = 0.0;
    let mut col_ce = 0.0;
    for k in 0..n {
        row_ce += row_lse[k] - s[k][k];
        col_ce += col_lse[k] - s[k][k];
    }
    let value = 0.5 * (row_ce / nf + col_ce / nf);

    // dL/dS_ij = (P_ij + Q_ij - 2δ_ij) / 2N with P row-softmax, Q column-softmax.
    let scale = log_scale.exp();
    let d_dim = images[0].as_slice().len();
    let mut d_images = vec![vec![0.0; d_dim]; n];
    let mut d_texts = vec![vec![0.0; d_dim]; n];
    let mut d_log_scale = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = (s[i][j] - row_lse[i]).exp();
            let q = (s[i][j] - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            let g = (p + q - delta) / (2.0 * nf);
            d_log_scale += g * s[i][j];
            let gs = g * scale;
            let (ei, et) = (images[i].as_slice(), texts[j].as_slice());
            for k in 0..d_dim {
                d_images[i][k] += gs * et[k];
                d_texts[j][k] += gs * ei[k];
            }
        }
    }
    Ok(ClipGrad {
        value,
        d_images,
        d_texts,
        d_log_scale,
    })
}

/// Embeddings of one counting triplet: image, true caption, counterfactual.
#[derive(Debug, Clone, Copy)]
pub struct TripletEmbeddings<'a> {
    pub image: &'a Embedding,
    pub caption: &'a Embedding,
    pub counterfactual: &'a Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountGrad {
    pub value: f64,
    pub d_images: Vec<Vec<f64>>,
    pub d_captions: Vec<Vec<f64>>,
    pub d_counterfactuals: Vec<Vec<f64>>,
}

pub fn count_loss(triplets: &[TripletEmbeddings<'_>]) -> Result<f64> {
    Ok(count_loss_grad(triplets)?.value)
}

/// `-(1/N) Σ log[exp(ei·et) / (exp(ei·et) + exp(ei·et_cf))]`, evaluated per
/// term as `softplus(s_cf - s_pos)`.
pub fn count_loss_grad(triplets: &[TripletEmbeddings<'_>]) -> Result<CountGrad> {
    if triplets.is_empty() {
        return Err(Error::usage("counting loss needs at least one triplet"));
    }
    let nf = triplets.len() as f64;
    let mut value = 0.0;
    let mut d_images = Vec::with_capacity(triplets.len());
    let mut d_captions = Vec::with_capacity(triplets.len());
    let mut d_counterfactuals = Vec::with_capacity(triplets.len());
    for t in triplets {
        let (ei, et, ecf) = (t.image.as_slice(), t.caption.as_slice(), t.counterfactual.as_slice());
        let margin = dot(ei, ecf) - dot(ei, et);
        value += softplus(margin);
        // d/d(s_cf) = σ(margin), d/d(s_pos) = -σ(margin)
        let w = sigmoid(margin) / nf;
        d_images.push(ecf.iter().zip(et).map(|(c, p)| w * (c - p)).collect());
        d_captions.push(ei.iter().map(|x| -w * x).collect());
        d_counterfactuals.push(ei.iter().map(|x| w * x).collect());
    }
    Ok(CountGrad {
        value: value / nf,
        d_images,
        d_captions,
        d_counterfactuals,
    })
}
