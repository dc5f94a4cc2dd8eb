//! Spelled-number parsing and caption rewriting.
//!
//! Only the nine words "two" through "ten" count as spelled numbers. Digit
//! numerals and larger numbers are never matched: in captions they mostly
//! denote dates, versions, sizes or addresses rather than object counts.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberWord {
    Two,
    Three,
    Four,
    Five,
    Six,
    Seven,
    Eight,
    Nine,
    Ten,
}

impl NumberWord {
    pub const ALL: [NumberWord; 9] = [
        NumberWord::Two,
        NumberWord::Three,
        NumberWord::Four,
        NumberWord::Five,
        NumberWord::Six,
        NumberWord::Seven,
        NumberWord::Eight,
        NumberWord::Nine,
        NumberWord::Ten,
    ];

    pub const MIN: u32 = 2;
    pub const MAX: u32 = 10;

    pub fn value(self) -> u32 {
        self.index() as u32 + Self::MIN
    }

    /// Position in [`NumberWord::ALL`], i.e. `value - 2`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_value(value: u32) -> Option<Self> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Some(Self::ALL[(value - Self::MIN) as usize])
        } else {
            None
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            NumberWord::Two => "two",
            NumberWord::Three => "three",
            NumberWord::Four => "four",
            NumberWord::Five => "five",
            NumberWord::Six => "six",
            NumberWord::Seven => "seven",
            NumberWord::Eight => "eight",
            NumberWord::Nine => "nine",
            NumberWord::Ten => "ten",
        }
    }

    /// Case-insensitive lookup of a bare word.
    pub fn parse_word(word: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.word().eq_ignore_ascii_case(word))
    }
}

impl fmt::Display for NumberWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// A whitespace-delimited token with leading/trailing punctuation stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    /// Whitespace-token position within the caption.
    pub index: usize,
    /// The stripped text; may be empty for pure-punctuation tokens.
    pub core: &'a str,
    /// Byte range of `core` within the caption.
    pub span: Range<usize>,
}

/// Splits on whitespace and trims non-alphanumeric characters from both ends
/// of every piece.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(s..i);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let raw = &text[r.clone()];
            let lead = raw.len() - raw.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
            let core = raw[lead..].trim_end_matches(|c: char| !c.is_alphanumeric());
            let span = r.start + lead..r.start + lead + core.len();
            Token {
                index,
                core: &text[span.clone()],
                span,
            }
        })
        .collect()
}

/// Every whole-token, case-insensitive spelled number in `text`, in order.
pub fn extract_spelled_numbers(text: &str) -> Vec<(NumberWord, usize)> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| NumberWord::parse_word(t.core).map(|n| (n, t.index)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub text: String,
    pub occurrences: Vec<(NumberWord, usize)>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let occurrences = extract_spelled_numbers(&text);
        CaptionRecord {
            id: id.into(),
            text,
            occurrences,
        }
    }
}

/// Why a caption is not a counting candidate, in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRejection {
    NoSpelledNumber,
    MultipleNumbers,
    AmountModifier,
}

/// Words that turn a spelled number into a vague amount ("a couple of two").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateRules {
    pub modifiers: Vec<String>,
    /// How many tokens on each side of the number are inspected.
    pub window: usize,
}

impl Default for CandidateRules {
    fn default() -> Self {
        CandidateRules {
            modifiers: ["couple", "couples", "pair", "pairs", "dozen", "dozens", "few"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            window: 2,
        }
    }
}

impl CandidateRules {
    pub fn check(&self, record: &CaptionRecord) -> std::result::Result<NumberWord, CandidateRejection> {
        let (number, index) = match record.occurrences.as_slice() {
            [] => return Err(CandidateRejection::NoSpelledNumber),
            [one] => *one,
            _ => return Err(CandidateRejection::MultipleNumbers),
        };
        let tokens = tokenize(&record.text);
        let lo = index.saturating_sub(self.window);
        let hi = (index + self.window).min(tokens.len().saturating_sub(1));
        let near_modifier = (lo..=hi).filter(|&i| i != index).any(|i| {
            self.modifiers
                .iter()
                .any(|m| m.eq_ignore_ascii_case(tokens[i].core))
        });
        if near_modifier {
            Err(CandidateRejection::AmountModifier)
        } else {
            Ok(number)
        }
    }
}

/// True iff the caption holds exactly one spelled number with no amount
/// modifier nearby, under the default rules.
pub fn is_counting_candidate(record: &CaptionRecord) -> bool {
    CandidateRules::default().check(record).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualCaption {
    pub text: String,
    pub original_number: NumberWord,
    pub swapped_number: NumberWord,
}

fn match_case(template: &str, word: &str) -> String {
    let letters: Vec<char> = template.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        word.to_uppercase()
    } else if letters.first().is_some_and(|c| c.is_uppercase()) {
        let mut cs = word.chars();
        match cs.next() {
            Some(f) => f.to_uppercase().chain(cs).collect(),
            None => String::new(),
        }
    } else {
        word.to_string()
    }
}

fn single_number(record: &CaptionRecord) -> Result<(NumberWord, Range<usize>)> {
    if !is_counting_candidate(record) {
        return Err(Error::usage(format!(
            "caption `{}` ({}) is not a counting candidate",
            record.text, record.id
        )));
    }
    let (number, index) = record.occurrences[0];
    let span = tokenize(&record.text)[index].span.clone();
    Ok((number, span))
}

/// `text` with the number token at `span` replaced by `number`, keeping the
/// original token's casing.
fn replace_number(text: &str, span: &Range<usize>, number: NumberWord) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push_str(&text[..span.start]);
    out.push_str(&match_case(&text[span.clone()], number.word()));
    out.push_str(&text[span.end..]);
    out
}

/// Replaces the single spelled number with one drawn uniformly from the other
/// eight.
pub fn make_counterfactual<R: Rng + ?Sized>(
    record: &CaptionRecord,
    rng: &mut R,
) -> Result<CounterfactualCaption> {
    let (original, span) = single_number(record)?;
    let mut pick = rng.gen_range(0..NumberWord::ALL.len() - 1);
    if pick >= original.index() {
        pick += 1;
    }
    let swapped = NumberWord::ALL[pick];
    Ok(CounterfactualCaption {
        text: replace_number(&record.text, &span, swapped),
        original_number: original,
        swapped_number: swapped,
    })
}

/// The nine captions obtained by substituting each number word, ascending
/// by value; the original caption sits at index `value - 2`.
pub fn enumerate_caption_variants(record: &CaptionRecord) -> Result<Vec<String>> {
    let (_, span) = single_number(record)?;
    Ok(NumberWord::ALL
        .iter()
        .map(|&n| replace_number(&record.text, &span, n))
        .collect())
}
