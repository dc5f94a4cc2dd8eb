//! Counting-set curation: spelled-number filter, detector count
//! verification, number balancing and held-out benchmark construction.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numbers::{CandidateRejection, CandidateRules, CaptionRecord, NumberWord};
use crate::par;
use crate::scene::{detect, DetectorNoise, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoSpelledNumber,
    MultipleNumbers,
    AmountModifier,
    CountMismatch,
}

impl RejectReason {
    pub fn name(self) -> &'static str {
        match self {
            RejectReason::NoSpelledNumber => "no_spelled_number",
            RejectReason::MultipleNumbers => "multiple_numbers",
            RejectReason::AmountModifier => "amount_modifier",
            RejectReason::CountMismatch => "count_mismatch",
        }
    }
}

impl From<CandidateRejection> for RejectReason {
    fn from(r: CandidateRejection) -> Self {
        match r {
            CandidateRejection::NoSpelledNumber => RejectReason::NoSpelledNumber,
            CandidateRejection::MultipleNumbers => RejectReason::MultipleNumbers,
            CandidateRejection::AmountModifier => RejectReason::AmountModifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accepted(NumberWord),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationDecision {
    pub record_id: String,
    pub outcome: Outcome,
}

impl CurationDecision {
    pub fn number(&self) -> Option<NumberWord> {
        match self.outcome {
            Outcome::Accepted(n) => Some(n),
            Outcome::Rejected(_) => None,
        }
    }

    pub fn reject_reason(&self) -> Option<RejectReason> {
        match self.outcome {
            Outcome::Accepted(_) => None,
            Outcome::Rejected(r) => Some(r),
        }
    }
}

/// Accepts a caption iff it holds exactly one spelled number (with no amount
/// modifier nearby) and that number equals the count of the maximally
/// detected class. The reject reason is the first failing stage.
pub fn filter_record(
    record_id: &str,
    scene: &SceneSpec,
    caption: &str,
    noise: &DetectorNoise,
    rules: &CandidateRules,
) -> CurationDecision {
    let record = CaptionRecord::new(record_id, caption);
    let outcome = match rules.check(&record) {
        Err(r) => Outcome::Rejected(r.into()),
        Ok(number) => {
            if detect(scene, noise).max_count == number.value() {
                Outcome::Accepted(number)
            } else {
                Outcome::Rejected(RejectReason::CountMismatch)
            }
        }
    };
    CurationDecision {
        record_id: record_id.to_string(),
        outcome,
    }
}

/// A record that passed the filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CuratedRecord {
    pub id: String,
    pub caption: String,
    pub number: NumberWord,
    pub scene: SceneSpec,
}

/// Something that can be fed to the filter.
pub trait FilterInput: Sync {
    fn id(&self) -> &str;
    fn scene(&self) -> &SceneSpec;
    fn caption(&self) -> &str;
}

/// Filters every record (in parallel when enabled) and returns decisions in
/// input order together with the accepted records sorted by id.
pub fn filter_pool<T: FilterInput>(
    pool: &[T],
    noise: &DetectorNoise,
    rules: &CandidateRules,
) -> (Vec<CurationDecision>, Vec<CuratedRecord>) {
    let decisions = par::map(pool, |r| filter_record(r.id(), r.scene(), r.caption(), noise, rules));
    let mut accepted: Vec<CuratedRecord> = pool
        .iter()
        .zip(&decisions)
        .filter_map(|(r, d)| {
            d.number().map(|number| CuratedRecord {
                id: r.id().to_string(),
                caption: r.caption().to_string(),
                number,
                scene: r.scene().clone(),
            })
        })
        .collect();
    accepted.sort_by(|a, b| a.id.cmp(&b.id));
    (decisions, accepted)
}

/// Per-number record counts, indexed by `value - 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: [usize; 9],
}

impl Histogram {
    pub fn of<'a>(numbers: impl IntoIterator<Item = &'a NumberWord>) -> Self {
        let mut h = Histogram::default();
        for n in numbers {
            h.counts[n.index()] += 1;
        }
        h
    }

    pub fn get(&self, n: NumberWord) -> usize {
        self.counts[n.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn as_map(&self) -> BTreeMap<u32, usize> {
        NumberWord::ALL.iter().map(|n| (n.value(), self.get(*n))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingSet {
    pub records: Vec<CuratedRecord>,
    pub per_number_counts: Histogram,
}

impl CountingSet {
    pub fn from_records(mut records: Vec<CuratedRecord>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let per_number_counts = Histogram::of(records.iter().map(|r| &r.number));
        CountingSet {
            records,
            per_number_counts,
        }
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }
}

/// Numbers whose records are capped during balancing; the rest are kept in
/// full.
pub fn is_capped(n: NumberWord) -> bool {
    n.value() <= 6
}

fn group_by_number(records: Vec<CuratedRecord>) -> [Vec<CuratedRecord>; 9] {
    let mut groups: [Vec<CuratedRecord>; 9] = Default::default();
    for r in records {
        groups[r.number.index()].push(r);
    }
    for g in groups.iter_mut() {
        g.sort_by(|a, b| a.id.cmp(&b.id));
    }
    groups
}

fn sample_group<R: Rng + ?Sized>(
    group: Vec<CuratedRecord>,
    k: usize,
    rng: &mut R,
) -> Vec<CuratedRecord> {
    if k >= group.len() {
        return group;
    }
    let mut picked = rand::seq::index::sample(rng, group.len(), k).into_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<CuratedRecord>> = group.into_iter().map(Some).collect();
    picked.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Caps "two" to "six" at `cap_low` records each, sampled uniformly without
/// replacement, and keeps every "seven" to "ten" record.
pub fn balance<R: Rng + ?Sized>(
    accepted: Vec<CuratedRecord>,
    cap_low: usize,
    rng: &mut R,
) -> CountingSet {
    let mut out = Vec::new();
    for (i, group) in group_by_number(accepted).into_iter().enumerate() {
        if is_capped(NumberWord::ALL[i]) {
            out.extend(sample_group(group, cap_low, rng));
        } else {
            out.extend(group);
        }
    }
    CountingSet::from_records(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub records: Vec<CuratedRecord>,
    pub quota: usize,
}

impl Benchmark {
    pub fn histogram(&self) -> Histogram {
        Histogram::of(self.records.iter().map(|r| &r.number))
    }
}

/// Samples exactly `quota` records per number from `pool` minus
/// `exclusion_ids`.
pub fn build_benchmark<R: Rng + ?Sized>(
    pool: Vec<CuratedRecord>,
    quota: usize,
    exclusion_ids: &HashSet<String>,
    rng: &mut R,
) -> Result<Benchmark> {
    if quota == 0 {
        return Err(Error::usage("benchmark quota must be at least 1"));
    }
    let eligible: Vec<CuratedRecord> = pool
        .into_iter()
        .filter(|r| !exclusion_ids.contains(&r.id))
        .collect();
    let groups = group_by_number(eligible);
    let deficits: Vec<String> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() < quota)
        .map(|(i, g)| format!("{} ({} of {})", NumberWord::ALL[i], g.len(), quota))
        .collect();
    if !deficits.is_empty() {
        return Err(Error::InsufficientPool(format!(
            "not enough records for {}",
            deficits.join(", ")
        )));
    }
    let mut records = Vec::with_capacity(quota * 9);
    for g in groups {
        records.extend(sample_group(g, quota, rng));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Benchmark { records, quota })
}

/// Exact per-number counts of any collection of curated records.
pub fn dataset_stats<'a>(records: impl IntoIterator<Item = &'a CuratedRecord>) -> Histogram {
    Histogram::of(records.into_iter().map(|r| &r.number))
}

/// One CSV row per number: `number,available,selected`.
pub fn stats_csv(available: &Histogram, selected: &Histogram) -> String {
    let mut s = String::from("number,available,selected\n");
    for n in NumberWord::ALL {
        s.push_str(&format!("{},{},{}\n", n.value(), available.get(n), selected.get(n)));
    }
    s.push_str(&format!("total,{},{}\n", available.total(), selected.total()));
    s
}
