//! Nine-way zero-shot count classification and count-aware retrieval.

use std::cmp::Ordering;
use std::path::Path;

use crate::curation::{Benchmark, CuratedRecord};
use crate::encoder::{encode_image, encode_text, similarity, Embedding, Params};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numbers::{enumerate_caption_variants, extract_spelled_numbers, CaptionRecord, NumberWord};
use crate::par;
use crate::scene::{render, Raster};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub mean_deviation: f64,
    /// `confusion[true - 2][pred - 2]`.
    pub confusion: [[u64; 9]; 9],
    /// `None` for numbers without records.
    pub per_number_accuracy: [Option<f64>; 9],
    pub n_records: usize,
}

/// Index of the highest score; ties go to the lowest number.
pub fn predict(scores: &[f64; 9]) -> NumberWord {
    let mut best = 0;
    for i in 1..9 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    NumberWord::ALL[best]
}

/// Aggregates (true, predicted) pairs.
pub fn aggregate(pairs: &[(NumberWord, NumberWord)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::data("cannot evaluate an empty benchmark"));
    }
    let mut confusion = [[0u64; 9]; 9];
    let mut abs_dev = 0u64;
    for &(t, p) in pairs {
        confusion[t.index()][p.index()] += 1;
        abs_dev += t.value().abs_diff(p.value()) as u64;
    }
    let total = pairs.len() as f64;
    let correct: u64 = (0..9).map(|i| confusion[i][i]).sum();
    let mut per_number_accuracy = [None; 9];
    for (i, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n > 0 {
            per_number_accuracy[i] = Some(100.0 * row[i] as f64 / n as f64);
        }
    }
    Ok(EvalReport {
        accuracy: 100.0 * correct as f64 / total,
        mean_deviation: abs_dev as f64 / total,
        confusion,
        per_number_accuracy,
        n_records: pairs.len(),
    })
}

/// Scores the nine caption variants of one record against its image.
pub fn variant_scores(params: &Params, vocab: &Vocabulary, image: &Embedding, caption: &CaptionRecord) -> Result<[f64; 9]> {
    let variants = enumerate_caption_variants(caption)?;
    let mut scores = [0.0; 9];
    for (s, v) in scores.iter_mut().zip(&variants) {
        let tokens = vocab.encode(v);
        *s = similarity(image, &encode_text(params, &tokens)?);
    }
    Ok(scores)
}

/// Zero-shot counting: the predicted number is the variant caption most
/// similar to the image.
pub fn zero_shot_count(params: &Params, vocab: &Vocabulary, benchmark: &Benchmark) -> Result<EvalReport> {
    let pairs = par::map(&benchmark.records, |r| classify_record(params, vocab, r));
    let pairs: Vec<_> = pairs.into_iter().collect::<Result<_>>()?;
    aggregate(&pairs)
}

fn classify_record(params: &Params, vocab: &Vocabulary, r: &CuratedRecord) -> Result<(NumberWord, NumberWord)> {
    let caption = CaptionRecord::new(r.id.clone(), r.caption.clone());
    let truth = match caption.occurrences.as_slice() {
        [(n, _)] => *n,
        _ => return Err(Error::data(format!("benchmark record {} is not a counting caption: `{}`", r.id, r.caption))),
    };
    let image = encode_image(params, &render(&r.scene))?;
    let scores = variant_scores(params, vocab, &image, &caption)
        .map_err(|_| Error::data(format!("benchmark record {} is not a counting caption: `{}`", r.id, r.caption)))?;
    Ok((truth, predict(&scores)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub caption: String,
    /// (scene id, similarity), similarity descending, ties by ascending id.
    pub ranked: Vec<(String, f64)>,
    pub k: usize,
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Top `min(k, n)` of scored items.
pub fn rank_topk(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    let k = k.min(scored.len());
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored.truncate(k);
    scored
}

pub fn retrieve_topk(
    params: &Params,
    vocab: &Vocabulary,
    image_pool: &[(String, Raster)],
    caption: &str,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    if image_pool.is_empty() {
        return Err(Error::usage("retrieval pool is empty"));
    }
    let tokens = vocab.encode(caption);
    let text = encode_text(params, &tokens)?;
    let scored = par::map(image_pool, |(id, r)| {
        encode_image(params, r).map(|e| (id.clone(), similarity(&text, &e)))
    });
    let scored: Vec<_> = scored.into_iter().collect::<Result<_>>()?;
    Ok(RetrievalResult {
        caption: caption.to_string(),
        ranked: rank_topk(scored, k),
        k,
    })
}

/// Fraction of retrieved scenes whose dominant count equals the caption's
/// number. `count_of` maps a scene id to its dominant count.
pub fn retrieval_count_precision<F>(result: &RetrievalResult, count_of: F) -> Result<f64>
where
    F: Fn(&str) -> Option<u32>,
{
    let occ = extract_spelled_numbers(&result.caption);
    let want = match occ.as_slice() {
        [(n, _)] => n.value(),
        _ => return Err(Error::usage(format!("`{}` is not a counting caption", result.caption))),
    };
    if result.ranked.is_empty() {
        return Err(Error::usage("empty retrieval result"));
    }
    let hits = result
        .ranked
        .iter()
        .filter(|(id, _)| count_of(id) == Some(want))
        .count();
    Ok(hits as f64 / result.ranked.len() as f64)
}

pub fn summary_csv(report: &EvalReport) -> String {
    format!(
        "accuracy,mean_deviation,n_records\n{},{},{}\n",
        report.accuracy, report.mean_deviation, report.n_records
    )
}

pub fn confusion_csv(report: &EvalReport) -> String {
    let mut s = String::from("true\\pred");
    for n in NumberWord::ALL {
        s.push_str(&format!(",{}", n.value()));
    }
    s.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        s.push_str(&NumberWord::ALL[i].value().to_string());
        for c in row {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}

pub fn per_number_csv(report: &EvalReport) -> String {
    let mut s = String::from("number,n_records,correct,accuracy\n");
    for (i, row) in report.confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        let acc = report.per_number_accuracy[i].map_or(String::new(), |a| a.to_string());
        s.push_str(&format!("{},{},{},{}\n", NumberWord::ALL[i].value(), n, row[i], acc));
    }
    s
}

pub fn retrieval_csv<F>(result: &RetrievalResult, count_of: F) -> String
where
    F: Fn(&str) -> Option<u32>,
{
    let mut s = String::from("rank,scene_id,similarity,count\n");
    for (rank, (id, sim)) in result.ranked.iter().enumerate() {
        let count = count_of(id).map_or(String::new(), |c| c.to_string());
        s.push_str(&format!("{},{},{},{}\n", rank + 1, id, sim, count));
    }
    s
}

/// Writes `summary.csv`, `confusion.csv` and `per_number.csv` into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    if report.n_records == 0 {
        return Err(Error::data("refusing to write a report over zero records"));
    }
    write_atomic(&out_dir.join("summary.csv"), summary_csv(report).as_bytes())?;
    write_atomic(&out_dir.join("confusion.csv"), confusion_csv(report).as_bytes())?;
    write_atomic(&out_dir.join("per_number.csv"), per_number_csv(report).as_bytes())
}
