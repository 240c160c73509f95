//! Pair-scorer re-ranking of fused candidates.
//!
//! Candidates are split into overlapping character chunks, each chunk is
//! scored against the query, and the chunk scores are aggregated into one
//! document score.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{RankedList, Source};
use crate::lexical::{tokenize, Bm25Config};
use crate::segmenter::RoleQuery;
use crate::vector::truncate_chars;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean weighted by chunk character length.
    #[default]
    WeightedMean,
    Max,
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_mean" => Ok(Aggregation::WeightedMean),
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    pub aggregation: Aggregation,
    /// Number of fused candidates to re-score.
    pub rerank_depth: usize,
    /// Attempts per scorer call on transport failure.
    pub max_retries: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            max_chars: 2000,
            overlap_chars: 200,
            aggregation: Aggregation::WeightedMean,
            rerank_depth: 100,
            max_retries: 3,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_chars == 0 || self.overlap_chars >= self.max_chars {
            return Err(Error::Config(format!(
                "chunking needs 0 <= overlap_chars < max_chars, got {} / {}",
                self.overlap_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    /// Offset of the first character, in characters.
    pub offset: usize,
    pub text: String,
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Splits text into windows of `max_chars` characters starting every
/// `max_chars - overlap_chars` characters. The last window may be shorter.
pub fn chunk_document(text: &str, config: &ChunkingConfig) -> Result<Vec<Chunk>> {
    config.validate()?;
    let boundaries: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let n = boundaries.len() - 1;
    let step = config.max_chars - config.overlap_chars;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + config.max_chars).min(n);
        chunks.push(Chunk {
            offset: start,
            text: text[boundaries[start]..boundaries[end]].to_owned(),
        });
        if end == n {
            break;
        }
        start += step;
    }
    Ok(chunks)
}

/// Combines `(score, chunk_length)` pairs into one score.
pub fn aggregate_scores(chunk_scores: &[(f64, usize)], mode: Aggregation) -> Result<f64> {
    if chunk_scores.is_empty() {
        return Err(Error::Precondition("cannot aggregate zero chunk scores".into()));
    }
    let n = chunk_scores.len() as f64;
    let score = match mode {
        Aggregation::Max => chunk_scores
            .iter()
            .map(|&(s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => chunk_scores.iter().map(|&(s, _)| s).sum::<f64>() / n,
        Aggregation::WeightedMean => {
            let total: usize = chunk_scores.iter().map(|&(_, l)| l).sum();
            if total == 0 {
                chunk_scores.iter().map(|&(s, _)| s).sum::<f64>() / n
            } else {
                chunk_scores.iter().map(|&(s, l)| s * l as f64).sum::<f64>() / total as f64
            }
        }
    };
    Ok(score)
}

/// Scores (query, passage) pairs jointly.
pub trait PairScorer: Send + Sync {
    /// One score per pair, in input order.
    fn score_pairs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>>;

    /// Longest pair the scorer accepts, in characters, if it has a limit.
    fn max_pair_chars(&self) -> Option<usize> {
        None
    }
}

/// Token-set Jaccard similarity under the lexical tokenizer. Scores are in
/// [0, 1]; two empty token sets score 0.
#[derive(Debug, Clone, Default)]
pub struct JaccardScorer {
    tokenizer: Bm25Config,
}

impl JaccardScorer {
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let a: HashSet<String> = tokenize(a, &self.tokenizer).into_iter().collect();
        let b: HashSet<String> = tokenize(b, &self.tokenizer).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

impl PairScorer for JaccardScorer {
    fn score_pairs(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        Ok(pairs.iter().map(|(q, d)| self.similarity(q, d)).collect())
    }
}

impl fmt::Debug for dyn PairScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PairScorer")
    }
}

fn score_with_retry(
    scorer: &dyn PairScorer,
    pairs: &[(String, String)],
    attempts: usize,
) -> Result<Vec<f64>> {
    let mut last = None;
    for _ in 0..attempts.max(1) {
        match scorer.score_pairs(pairs) {
            Ok(scores) => {
                if scores.len() != pairs.len() {
                    return Err(Error::Protocol(format!(
                        "scorer returned {} scores for {} pairs",
                        scores.len(),
                        pairs.len()
                    )));
                }
                if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
                    return Err(Error::Protocol(format!("scorer returned non-finite score at {i}")));
                }
                return Ok(scores);
            }
            Err(e) if e.is_retryable() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Scores one document against the query; an empty document scores 0.
pub fn score_document(
    query: &str,
    text: &str,
    scorer: &dyn PairScorer,
    config: &ChunkingConfig,
) -> Result<f64> {
    let mut chunking = config.clone();
    if let Some(limit) = scorer.max_pair_chars() {
        let room = limit.saturating_sub(query.chars().count()).max(1);
        if room < chunking.max_chars {
            chunking.max_chars = room;
            chunking.overlap_chars = chunking.overlap_chars.min(room - 1);
        }
    }
    let chunks = chunk_document(text, &chunking)?;
    if chunks.is_empty() {
        return Ok(0.0);
    }
    let pairs: Vec<(String, String)> = chunks
        .iter()
        .map(|c| (query.to_owned(), c.text.clone()))
        .collect();
    let scores = score_with_retry(scorer, &pairs, config.max_retries)?;
    let weighted: Vec<(f64, usize)> = scores
        .into_iter()
        .zip(&chunks)
        .map(|(s, c)| (s, c.char_len()))
        .collect();
    aggregate_scores(&weighted, config.aggregation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub list: RankedList,
    /// The query was cut to `max_chars` before pairing.
    pub query_truncated: bool,
}

/// Re-scores the top `rerank_depth` fused entries and sorts them by
/// aggregated score (ties by doc_id). Deeper entries follow in fused order;
/// their scores are capped at the lowest re-scored value so the list stays
/// non-increasing.
pub fn rerank<F>(
    query: &RoleQuery,
    fused: &RankedList,
    doc_text: F,
    scorer: &dyn PairScorer,
    config: &ChunkingConfig,
) -> Result<Reranked>
where
    F: Fn(&str) -> Option<String> + Sync,
{
    config.validate()?;
    let query_text = truncate_chars(&query.text, config.max_chars);
    let query_truncated = query_text.len() < query.text.len();
    let depth = config.rerank_depth.min(fused.len());

    let mut head = Vec::with_capacity(depth);
    for entry in &fused.entries[..depth] {
        let text = doc_text(&entry.doc_id).ok_or_else(|| Error::UnknownDoc(entry.doc_id.clone()))?;
        let score = score_document(query_text, &text, scorer, config)?;
        head.push((entry.doc_id.clone(), score));
    }
    let mut ordered = RankedList::from_scores(fused.query_id.clone(), Source::Rerank, head).entries;
    let floor = ordered.last().map_or(f64::INFINITY, |e| e.score);

    let mut entries: Vec<(String, f64)> = ordered
        .drain(..)
        .map(|e| (e.doc_id, e.score))
        .collect();
    entries.extend(
        fused.entries[depth..]
            .iter()
            .map(|e| (e.doc_id.clone(), e.score.min(floor))),
    );
    Ok(Reranked {
        list: RankedList::from_ordered(fused.query_id.clone(), Source::Rerank, entries),
        query_truncated,
    })
}
