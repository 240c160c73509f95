//! Tokenisation, inverted index and Okapi BM25.
//!
//! Collection statistics (N, df, avgdl) always come from the whole indexed
//! corpus, so scoring a candidate subset only changes which documents are
//! ranked, never their scores.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ distinct(q)} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·dl/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::fusion::{RankedList, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    pub lowercase: bool,
    pub stopwords: Option<BTreeSet<String>>,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Bm25Config {
            k1: 1.2,
            b: 0.75,
            lowercase: true,
            stopwords: None,
        }
    }
}

impl Bm25Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(Error::Config(format!("bm25 k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("bm25 b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the sorted stopword list; empty string when unset.
    pub fn stopword_hash(&self) -> String {
        match &self.stopwords {
            None => String::new(),
            Some(words) => {
                let mut hasher = Sha256::new();
                for w in words {
                    hasher.update(w.as_bytes());
                    hasher.update(b"\n");
                }
                hex::encode(hasher.finalize())
            }
        }
    }
}

/// Maximal runs of alphanumeric characters, optionally lowercased, with
/// stopwords removed.
pub fn tokenize(text: &str, config: &Bm25Config) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if config.lowercase {
                t.to_lowercase()
            } else {
                t.to_owned()
            }
        })
        .filter(|t| {
            config
                .stopwords
                .as_ref()
                .is_none_or(|stop| !stop.contains(t))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the document in [`InvertedIndex::doc_ids`].
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// Indexed doc_ids in ascending order; postings refer to positions here.
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    #[serde(skip)]
    positions: HashMap<String, u32>,
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.position(doc_id).map(|p| self.doc_lengths[p as usize])
    }

    pub fn postings(&self, token: &str) -> &[Posting] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    pub fn document_frequency(&self, token: &str) -> usize {
        self.postings(token).len()
    }

    fn position(&self, doc_id: &str) -> Option<u32> {
        self.positions.get(doc_id).copied()
    }

    fn rebuild_positions(&mut self) {
        self.positions = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
    }

    pub fn idf(&self, token: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.document_frequency(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: u32, config: &Bm25Config) -> f64 {
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_lengths[doc as usize]);
        let norm = if self.avg_doc_length > 0.0 {
            1.0 - config.b + config.b * dl / self.avg_doc_length
        } else {
            1.0
        };
        idf * tf * (config.k1 + 1.0) / (tf + config.k1 * norm)
    }
}

/// Indexes each document's [`body`](crate::corpus::Document::body).
pub fn build_index(corpus: &Corpus, config: &Bm25Config) -> InvertedIndex {
    let mut docs: Vec<(&str, String)> = corpus
        .iter()
        .map(|d| (d.doc_id.as_str(), d.body()))
        .collect();
    docs.sort_by(|a, b| a.0.cmp(b.0));
    build_index_from_texts(docs.iter().map(|(id, text)| (*id, text.as_str())), config)
}

/// Indexes `(doc_id, text)` pairs. Pairs must have distinct ids.
pub fn build_index_from_texts<'a, I>(docs: I, config: &Bm25Config) -> InvertedIndex
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut docs: Vec<(&str, &str)> = docs.into_iter().collect();
    docs.sort_by(|a, b| a.0.cmp(b.0));

    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut doc_lengths = Vec::with_capacity(docs.len());

    for (pos, (id, text)) in docs.into_iter().enumerate() {
        let tokens = tokenize(text, config);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *counts.entry(t.clone()).or_default() += 1;
        }
        for (token, tf) in counts {
            postings.entry(token).or_default().push(Posting {
                doc: pos as u32,
                tf,
            });
        }
        doc_ids.push(id.to_owned());
        doc_lengths.push(tokens.len() as u32);
    }

    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    let avg_doc_length = if doc_ids.is_empty() {
        0.0
    } else {
        total as f64 / doc_ids.len() as f64
    };

    let mut index = InvertedIndex {
        doc_ids,
        doc_lengths,
        postings,
        avg_doc_length,
        positions: HashMap::new(),
    };
    index.rebuild_positions();
    index
}

fn distinct_terms(query: &[String]) -> Vec<&str> {
    let set: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    set.into_iter().collect()
}

/// BM25 score of one document. Terms are visited in sorted order so the
/// floating-point sum matches [`score_candidates`] bit for bit.
pub fn bm25_score(
    query: &[String],
    doc_id: &str,
    index: &InvertedIndex,
    config: &Bm25Config,
) -> Result<f64> {
    let doc = index
        .position(doc_id)
        .ok_or_else(|| Error::UnknownDoc(doc_id.to_owned()))?;
    let mut score = 0.0;
    for term in distinct_terms(query) {
        let postings = index.postings(term);
        if let Ok(i) = postings.binary_search_by_key(&doc, |p| p.doc) {
            score += index.term_weight(index.idf(term), postings[i].tf, doc, config);
        }
    }
    Ok(score)
}

fn accumulate(
    query: &[String],
    index: &InvertedIndex,
    config: &Bm25Config,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let mut scores = vec![0.0; index.n_docs()];
    for term in distinct_terms(query) {
        let idf = index.idf(term);
        for p in index.postings(term) {
            if mask.is_none_or(|m| m[p.doc as usize]) {
                scores[p.doc as usize] += index.term_weight(idf, p.tf, p.doc, config);
            }
        }
    }
    scores
}

fn ranked_from_positions(
    query_id: &str,
    index: &InvertedIndex,
    scores: &[f64],
    positions: impl Iterator<Item = u32>,
) -> RankedList {
    let scored = positions
        .map(|p| (index.doc_ids[p as usize].clone(), scores[p as usize]))
        .collect();
    RankedList::from_scores(query_id, Source::Bm25, scored)
}

/// Ranks exactly the candidate set by BM25, descending, ties by doc_id.
pub fn score_candidates(
    query_id: &str,
    query: &[String],
    candidates: &BTreeSet<String>,
    index: &InvertedIndex,
    config: &Bm25Config,
) -> Result<RankedList> {
    let mut mask = vec![false; index.n_docs()];
    let mut positions = Vec::with_capacity(candidates.len());
    for id in candidates {
        let p = index
            .position(id)
            .ok_or_else(|| Error::UnknownDoc(id.clone()))?;
        mask[p as usize] = true;
        positions.push(p);
    }
    let scores = accumulate(query, index, config, Some(&mask));
    Ok(ranked_from_positions(
        query_id,
        index,
        &scores,
        positions.into_iter(),
    ))
}

/// Ranks the whole index, keeping the top `depth` entries.
pub fn search_full(
    query_id: &str,
    query: &[String],
    index: &InvertedIndex,
    config: &Bm25Config,
    depth: usize,
) -> RankedList {
    let scores = accumulate(query, index, config, None);
    let mut list = ranked_from_positions(query_id, index, &scores, 0..index.n_docs() as u32);
    list.truncate(depth);
    list
}

const INDEX_FORMAT: &str = "precedent-bm25-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    k1: f64,
    b: f64,
    lowercase: bool,
    stopword_hash: String,
}

impl IndexHeader {
    fn for_config(config: &Bm25Config) -> Self {
        IndexHeader {
            format: INDEX_FORMAT.to_owned(),
            version: INDEX_VERSION,
            k1: config.k1,
            b: config.b,
            lowercase: config.lowercase,
            stopword_hash: config.stopword_hash(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    header: IndexHeader,
    index: InvertedIndex,
}

pub fn save_index(index: &InvertedIndex, config: &Bm25Config, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let body = IndexFile {
        header: IndexHeader::for_config(config),
        index: index.clone(),
    };
    serde_json::to_writer(BufWriter::new(file), &body)?;
    Ok(())
}

/// Loads an index, failing if it was built under a different configuration.
pub fn load_index(path: impl AsRef<Path>, config: &Bm25Config) -> Result<InvertedIndex> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let body: IndexFile = serde_json::from_reader(BufReader::new(file))?;
    if body.header.format != INDEX_FORMAT || body.header.version != INDEX_VERSION {
        return Err(Error::StaleIndex(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            body.header.format,
            body.header.version
        )));
    }
    let expected = IndexHeader::for_config(config);
    if body.header != expected {
        return Err(Error::StaleIndex(format!(
            "{}: built with k1={} b={} lowercase={} stopwords={:?}, requested k1={} b={} lowercase={} stopwords={:?}",
            path.display(),
            body.header.k1,
            body.header.b,
            body.header.lowercase,
            body.header.stopword_hash,
            expected.k1,
            expected.b,
            expected.lowercase,
            expected.stopword_hash,
        )));
    }
    let mut index = body.index;
    index.rebuild_positions();
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn worked() -> InvertedIndex {
        build_index_from_texts([("d1", "a b a"), ("d2", "b c"), ("d3", "c c c")], &Bm25Config::default())
    }

    #[test]
    fn tokenizes_on_non_alphanumerics() {
        let c = Bm25Config::default();
        assert_eq!(tokenize("The Court, 1998!", &c), toks(&["the", "court", "1998"]));
        assert!(tokenize("", &c).is_empty());
        assert_eq!(tokenize("a-b", &c), toks(&["a", "b"]));
    }

    #[test]
    fn tokenizer_respects_case_and_stopwords() {
        let c = Bm25Config {
            lowercase: false,
            stopwords: Some(["The".to_string()].into()),
            ..Bm25Config::default()
        };
        assert_eq!(tokenize("The Court", &c), toks(&["Court"]));
    }

    #[test]
    fn single_document_index() {
        let index = build_index_from_texts([("d", "a a b")], &Bm25Config::default());
        assert_eq!(index.postings("a"), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(index.postings("b"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(index.avg_doc_length(), 3.0);
        assert_eq!(index.n_docs(), 1);
    }

    #[test]
    fn empty_corpus_index() {
        let index = build_index(&Corpus::default(), &Bm25Config::default());
        assert_eq!(index.n_docs(), 0);
        assert_eq!(index.avg_doc_length(), 0.0);
    }

    #[test]
    fn identical_documents_get_identical_postings() {
        let index = build_index_from_texts([("x", "p q p"), ("y", "p q p")], &Bm25Config::default());
        let p = index.postings("p");
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].tf, p[1].tf);
    }

    #[test]
    fn worked_example_score() {
        let index = worked();
        let c = Bm25Config::default();
        // idf(a) = ln(1 + 2.5/1.5); tf = 2; dl = 3; avgdl = 8/3
        let score = bm25_score(&toks(&["a"]), "d1", &index, &c).unwrap();
        let idf = (1.0f64 + 2.5 / 1.5).ln();
        let expected = idf * 2.0 * 2.2 / (2.0 + 1.2 * (0.25 + 0.75 * 3.0 / (8.0 / 3.0)));
        assert!((score - expected).abs() < 1e-12, "{score}");
        assert!((score - 1.3028).abs() < 5e-5);
        assert_eq!(bm25_score(&toks(&["zz"]), "d1", &index, &c).unwrap(), 0.0);
        assert!(matches!(
            bm25_score(&toks(&["a"]), "nope", &index, &c),
            Err(Error::UnknownDoc(_))
        ));
    }

    #[test]
    fn candidate_list_contains_exactly_the_candidates() {
        let index = worked();
        let c = Bm25Config::default();
        let q = toks(&["b"]);
        let only = score_candidates("q", &q, &["d2".to_string()].into(), &index, &c).unwrap();
        assert_eq!(only.doc_ids(), vec!["d2"]);
        let all: BTreeSet<String> = index.doc_ids().iter().cloned().collect();
        let restricted = score_candidates("q", &q, &all, &index, &c).unwrap();
        assert_eq!(restricted, search_full("q", &q, &index, &c, usize::MAX));
        assert!(matches!(
            score_candidates("q", &q, &["zz".to_string()].into(), &index, &c),
            Err(Error::UnknownDoc(_))
        ));
    }

    #[test]
    fn persistence_rejects_stale_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bm25.json");
        let c = Bm25Config::default();
        let index = worked();
        save_index(&index, &c, &path).unwrap();
        let loaded = load_index(&path, &c).unwrap();
        assert_eq!(loaded, index);
        assert_eq!(
            bm25_score(&toks(&["a"]), "d1", &loaded, &c).unwrap(),
            bm25_score(&toks(&["a"]), "d1", &index, &c).unwrap()
        );
        let other = Bm25Config { k1: 0.9, ..c.clone() };
        assert!(matches!(load_index(&path, &other), Err(Error::StaleIndex(_))));
        let stop = Bm25Config { stopwords: Some(["a".to_string()].into()), ..c };
        assert!(matches!(load_index(&path, &stop), Err(Error::StaleIndex(_))));
    }

    fn small_corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
                .prop_map(|w| w.join(" ")),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn index_invariants_hold(texts in small_corpus()) {
            let docs: Vec<Document> = texts.iter().enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), t.clone())).collect();
            let corpus = Corpus::new(docs).unwrap();
            let index = build_index(&corpus, &Bm25Config::default());
            let mut per_doc = vec![0u32; index.n_docs()];
            for (_, postings) in index.terms() {
                for w in postings.windows(2) {
                    prop_assert!(w[0].doc < w[1].doc);
                }
                for p in postings {
                    per_doc[p.doc as usize] += p.tf;
                }
            }
            for (i, id) in index.doc_ids().iter().enumerate() {
                prop_assert_eq!(per_doc[i], index.doc_length(id).unwrap());
            }
            let mean = index.doc_ids().iter().map(|id| index.doc_length(id).unwrap() as f64).sum::<f64>() / index.n_docs() as f64;
            prop_assert!((mean - index.avg_doc_length()).abs() < 1e-12);
        }

        #[test]
        fn idf_is_non_negative(texts in small_corpus(), term in "[a-f]") {
            let ids: Vec<String> = (0..texts.len()).map(|i| format!("d{i}")).collect();
            let index = build_index_from_texts(
                ids.iter().map(String::as_str).zip(texts.iter().map(String::as_str)),
                &Bm25Config::default(),
            );
            prop_assert!(index.idf(&term) >= 0.0);
        }

        #[test]
        fn score_monotone_in_tf(base in "[a-c ]{0,12}", extra in 1usize..5) {
            let c = Bm25Config::default();
            let q = toks(&["a"]);
            let other = "b c b";
            // Holding the document length fixed: swap a filler token for the query term.
            let before = format!("{base} a{}", " z".repeat(extra));
            let after = format!("{base} a{}", " a".repeat(extra));
            let i1 = build_index_from_texts([("x", before.as_str()), ("y", other)], &c);
            let i2 = build_index_from_texts([("x", after.as_str()), ("y", other)], &c);
            let s1 = bm25_score(&q, "x", &i1, &c).unwrap();
            let s2 = bm25_score(&q, "x", &i2, &c).unwrap();
            prop_assert!(s2 >= s1, "{} < {}", s2, s1);
        }

        #[test]
        fn ties_break_by_doc_id(n in 1usize..6) {
            let texts: Vec<(String, &str)> = (0..n).map(|i| (format!("d{}", n - i), "a b")).collect();
            let index = build_index_from_texts(texts.iter().map(|(i, t)| (i.as_str(), *t)), &Bm25Config::default());
            let list = search_full("q", &toks(&["a"]), &index, &Bm25Config::default(), usize::MAX);
            let ids = list.doc_ids();
            let mut sorted = ids.clone();
            sorted.sort();
            prop_assert_eq!(ids, sorted);
        }
    }
}
