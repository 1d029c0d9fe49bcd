//! IOB tags, span decoding and span-level precision / recall / F1.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of IOB labels: `O` plus `B-`/`I-` for each entity class.
pub const NUM_LABELS: usize = 1 + 2 * EntityClass::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityClass {
    Problem,
    Treatment,
    Test,
}

impl EntityClass {
    pub const ALL: [EntityClass; 3] = [
        EntityClass::Problem,
        EntityClass::Treatment,
        EntityClass::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityClass::Problem => "problem",
            EntityClass::Treatment => "treatment",
            EntityClass::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(EntityClass),
    I(EntityClass),
}

impl Tag {
    /// Dense label id: `O` = 0, then `B-x`, `I-x` per class.
    pub fn id(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(c) => 1 + 2 * c.index(),
            Tag::I(c) => 2 + 2 * c.index(),
        }
    }

    pub fn from_id(id: usize) -> Option<Tag> {
        match id {
            0 => Some(Tag::O),
            _ if id < NUM_LABELS => {
                let class = EntityClass::ALL[(id - 1) / 2];
                Some(if id % 2 == 1 {
                    Tag::B(class)
                } else {
                    Tag::I(class)
                })
            }
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Tag> {
        (0..NUM_LABELS).filter_map(Tag::from_id)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(c) => write!(f, "B-{}", c.name()),
            Tag::I(c) => write!(f, "I-{}", c.name()),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    /// Accepts `O` (or `Null`) and `B-x` / `I-x` for the known classes.
    fn from_str(s: &str) -> Result<Tag> {
        if s == "O" || s == "Null" {
            return Ok(Tag::O);
        }
        let (prefix, class) = s
            .split_once('-')
            .ok_or_else(|| Error::Format(format!("unknown IOB label {s:?}")))?;
        let class = EntityClass::ALL
            .into_iter()
            .find(|c| c.name() == class)
            .ok_or_else(|| Error::Format(format!("unknown entity class in label {s:?}")))?;
        match prefix {
            "B" => Ok(Tag::B(class)),
            "I" => Ok(Tag::I(class)),
            _ => Err(Error::Format(format!("unknown IOB prefix in label {s:?}"))),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An entity mention covering tokens `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub class: EntityClass,
    pub start: usize,
    pub end: usize,
}

/// Decodes IOB tags into spans. An `I-x` that does not continue an open
/// span of class `x` opens a new one.
pub fn decode_iob(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::I(c) if open.is_some_and(|s| s.class == c) => {
                if let Some(s) = open.as_mut() {
                    s.end = i;
                }
            }
            Tag::B(c) | Tag::I(c) => {
                spans.extend(open.take());
                open = Some(Span {
                    class: c,
                    start: i,
                    end: i,
                });
            }
            Tag::O => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

/// [`decode_iob`] over label strings.
pub fn decode_iob_labels<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Span>> {
    let tags = labels
        .iter()
        .map(|l| l.as_ref().parse())
        .collect::<Result<Vec<Tag>>>()?;
    Ok(decode_iob(&tags))
}

/// Tags a sequence of `len` tokens with non-overlapping spans.
pub fn encode_iob(spans: &[Span], len: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Contract(format!(
                "span {}..={} invalid for {len} tokens",
                s.start, s.end
            )));
        }
        if taken[s.start..=s.end].iter().any(|&t| t) {
            return Err(Error::Contract(format!(
                "span {}..={} overlaps another span",
                s.start, s.end
            )));
        }
        taken[s.start..=s.end].iter_mut().for_each(|t| *t = true);
        tags[s.start] = Tag::B(s.class);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = Tag::I(s.class);
        }
    }
    Ok(tags)
}

/// True when every `I-x` continues a `B-x` or `I-x` of the same class.
pub fn is_well_formed(tags: &[Tag]) -> bool {
    let mut prev = Tag::O;
    for &t in tags {
        if let Tag::I(c) = t {
            if prev != Tag::B(c) && prev != Tag::I(c) {
                return false;
            }
        }
        prev = t;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact-match span scores, micro-averaged over all sequences and classes.
/// Empty denominators give 0.
pub fn prf1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<Scores> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut n_gold, mut n_pred) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&Span> = g.iter().collect();
        let p: BTreeSet<&Span> = p.iter().collect();
        tp += g.intersection(&p).count();
        n_gold += g.len();
        n_pred += p.len();
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Scores {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: n_pred - tp,
        false_negatives: n_gold - tp,
    })
}

/// Fraction of tokens whose predicted tag equals the gold tag.
pub fn token_accuracy(gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> Result<f64> {
    let mut total = 0;
    let mut correct = 0;
    if gold.len() != pred.len() {
        return Err(Error::Contract(
            "token accuracy over unequal sequence counts".into(),
        ));
    }
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "sequence of {} gold tags vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        total += g.len();
        correct += g.iter().zip(p).filter(|(a, b)| a == b).count();
    }
    Ok(ratio(correct, total))
}
