//! Ranked lists and Reciprocal Rank Fusion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which retrieval stage produced a list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Scores are negated L2 distances.
    Vector,
    Bm25,
    Rrf,
    Rerank,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Vector => "vector",
            Source::Bm25 => "bm25",
            Source::Rrf => "rrf",
            Source::Rerank => "rerank",
        }
    }

    pub fn score_convention(self) -> &'static str {
        match self {
            Source::Vector => "negative L2 distance",
            Source::Bm25 => "Okapi BM25",
            Source::Rrf => "sum of 1/(rank + k)",
            Source::Rerank => "aggregated pair-scorer chunk score",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Source::Vector),
            "bm25" => Ok(Source::Bm25),
            "rrf" => Ok(Source::Rrf),
            "rerank" => Ok(Source::Rerank),
            _ => Err(Error::Config(format!("unknown list source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    /// 1-based.
    pub rank: usize,
    pub score: f64,
}

/// One query's ranking from one stage. Ranks run 1..=n without gaps, doc_ids
/// are unique and scores never increase with rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub source: Source,
    pub entries: Vec<RankedEntry>,
}

fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    pub fn empty(query_id: impl Into<String>, source: Source) -> Self {
        RankedList {
            query_id: query_id.into(),
            source,
            entries: Vec::new(),
        }
    }

    /// Sorts by descending score, ties by ascending doc_id, and assigns ranks.
    pub fn from_scores(
        query_id: impl Into<String>,
        source: Source,
        mut scored: Vec<(String, f64)>,
    ) -> Self {
        scored.sort_by(by_score_then_id);
        Self::from_ordered(query_id, source, scored)
    }

    /// Assigns ranks in the given order. The caller guarantees the ordering
    /// invariants.
    pub fn from_ordered(
        query_id: impl Into<String>,
        source: Source,
        ordered: Vec<(String, f64)>,
    ) -> Self {
        RankedList {
            query_id: query_id.into(),
            source,
            entries: ordered
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| RankedEntry {
                    doc_id,
                    rank: i + 1,
                    score,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.entries.iter().any(|e| e.doc_id == doc_id)
    }

    pub fn truncate(&mut self, depth: usize) {
        self.entries.truncate(depth);
    }

    /// Drops `doc_id` if present and closes the rank gap.
    pub fn remove_doc(&mut self, doc_id: &str) {
        let before = self.entries.len();
        self.entries.retain(|e| e.doc_id != doc_id);
        if self.entries.len() != before {
            for (i, e) in self.entries.iter_mut().enumerate() {
                e.rank = i + 1;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Precondition(format!(
                    "query {}: entry {} has rank {}",
                    self.query_id, i, e.rank
                )));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::Precondition(format!(
                    "query {}: duplicate doc {}",
                    self.query_id, e.doc_id
                )));
            }
            if e.score.is_nan() {
                return Err(Error::Precondition(format!(
                    "query {}: NaN score for {}",
                    self.query_id, e.doc_id
                )));
            }
        }
        if let Some(w) = self.entries.windows(2).find(|w| w[1].score > w[0].score) {
            return Err(Error::Precondition(format!(
                "query {}: score increases from rank {} to {}",
                self.query_id, w[0].rank, w[1].rank
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrfConfig {
    pub k_const: f64,
}

impl Default for RrfConfig {
    fn default() -> Self {
        RrfConfig { k_const: 60.0 }
    }
}

/// Reciprocal Rank Fusion: each document scores Σ 1/(rank + k) over the
/// lists that contain it. Output is sorted by descending fused score, ties
/// by ascending doc_id. Input scores are ignored.
pub fn rrf_fuse(lists: &[RankedList], config: &RrfConfig) -> Result<RankedList> {
    let first = lists
        .first()
        .ok_or_else(|| Error::Precondition("rrf_fuse needs at least one list".into()))?;
    if !(config.k_const.is_finite() && config.k_const > 0.0) {
        return Err(Error::Config(format!(
            "rrf k_const must be > 0, got {}",
            config.k_const
        )));
    }
    if let Some(other) = lists.iter().find(|l| l.query_id != first.query_id) {
        return Err(Error::Precondition(format!(
            "rrf_fuse query mismatch: {:?} vs {:?}",
            first.query_id, other.query_id
        )));
    }

    let mut ranks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for list in lists {
        for e in &list.entries {
            ranks.entry(e.doc_id.as_str()).or_default().push(e.rank);
        }
    }

    // Summing contributions in a canonical order keeps the fused scores
    // independent of the order the lists were supplied in.
    let scored = ranks
        .into_iter()
        .map(|(doc, mut rs)| {
            rs.sort_unstable();
            let score = rs
                .iter()
                .rev()
                .map(|&r| 1.0 / (r as f64 + config.k_const))
                .sum::<f64>();
            (doc.to_owned(), score)
        })
        .collect();

    Ok(RankedList::from_scores(
        first.query_id.clone(),
        Source::Rrf,
        scored,
    ))
}
