//! Retrieval metrics against citation-derived relevance judgments.
//!
//! Precision, recall and F1 are computed per query at a cut-off `k` and then
//! averaged over queries. MAP and MRR use the full returned ranking and do
//! not depend on `k`. Queries without any relevant document are left out of
//! every average and counted separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::fusion::{RankedList, Source};

/// Relevant documents per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a query with no relevant documents yet.
    pub fn add_query(&mut self, query_id: impl Into<String>) {
        self.judgments.entry(query_id.into()).or_default();
    }

    /// Adds a relevant document. A query is never relevant to itself, so
    /// self-judgments are ignored.
    pub fn add(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>) {
        let query_id = query_id.into();
        let doc_id = doc_id.into();
        let set = self.judgments.entry(query_id.clone()).or_default();
        if doc_id != query_id {
            set.insert(doc_id);
        }
    }

    /// One query per document with citations; its citations are relevant.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut qrels = Qrels::new();
        for doc in corpus.query_documents() {
            for cited in &doc.cited_doc_ids {
                qrels.add(doc.doc_id.clone(), cited.clone());
            }
        }
        qrels
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.judgments.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Parses `query_id 0 doc_id relevance` lines (relevance 0 or 1).
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<qrels>", e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let malformed = |message: String| Error::Malformed {
                line: i + 1,
                message,
            };
            if fields.len() != 4 {
                return Err(malformed(format!("expected 4 columns, got {}", fields.len())));
            }
            match fields[3] {
                "1" => qrels.add(fields[0], fields[2]),
                "0" => qrels.add_query(fields[0]),
                other => return Err(malformed(format!("relevance must be 0 or 1, got {other:?}"))),
            }
        }
        Ok(qrels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for (q, docs) in &self.judgments {
            for d in docs {
                writeln!(writer, "{q} 0 {d} 1").map_err(|e| Error::io("<qrels>", e))?;
            }
        }
        Ok(())
    }
}

fn hits_in_top(ranking: &[&str], relevant: &BTreeSet<String>, k: usize) -> usize {
    ranking
        .iter()
        .take(k)
        .filter(|d| relevant.contains(**d))
        .count()
}

/// |relevant ∩ top-k| / k; missing slots count as non-relevant.
pub fn precision_at_k(ranking: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    hits_in_top(ranking, relevant, k) as f64 / k as f64
}

/// |relevant ∩ top-k| / |relevant|; 0 when nothing is relevant.
pub fn recall_at_k(ranking: &[&str], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits_in_top(ranking, relevant, k) as f64 / relevant.len() as f64
}

pub fn f1_at_k(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean of precision@r over the ranks r holding a relevant document,
/// divided by |relevant| so unretrieved relevant documents count as 0.
pub fn average_precision(ranking: &[&str], relevant: &BTreeSet<String>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if relevant.contains(*d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

pub fn reciprocal_rank(ranking: &[&str], relevant: &BTreeSet<String>) -> f64 {
    ranking
        .iter()
        .position(|d| relevant.contains(*d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over `(ranking, relevant)` pairs; 0 for no queries.
pub fn mrr(queries: &[(Vec<&str>, &BTreeSet<String>)]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries
        .iter()
        .map(|(ranking, relevant)| reciprocal_rank(ranking, relevant))
        .sum::<f64>()
        / queries.len() as f64
}

/// All final rankings for one (role configuration, method) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: String,
    pub method: String,
    pub lists: Vec<RankedList>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config: String,
    pub method: String,
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub mrr: f64,
    /// Queries that contributed to the averages.
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per (config, method, k).
    pub rows: Vec<MetricRow>,
    /// Highest-F1 row per (config, method); ties go to the smaller k.
    pub best: Vec<MetricRow>,
    /// Queries skipped because no relevant document exists, per config/method.
    pub excluded_queries: BTreeMap<String, Vec<String>>,
    pub k_min: usize,
    pub k_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["Precision@k", "Recall@k", "F1-score@k", "MAP", "MRR", "k"];

struct QueryEval<'a> {
    ranking: Vec<&'a str>,
    relevant: &'a BTreeSet<String>,
}

/// Metric that picks the reported k for each run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestK {
    #[default]
    F1,
    Precision,
    Recall,
}

impl BestK {
    fn value(self, row: &MetricRow) -> f64 {
        match self {
            BestK::F1 => row.f1,
            BestK::Precision => row.precision,
            BestK::Recall => row.recall,
        }
    }
}

impl std::str::FromStr for BestK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(BestK::F1),
            "precision" => Ok(BestK::Precision),
            "recall" => Ok(BestK::Recall),
            _ => Err(Error::Config(format!("unknown best-k metric {s:?}"))),
        }
    }
}

/// Sweeps `k` over every run and picks the best k per run by F1.
pub fn sweep_and_report(
    runs: &[RunOutput],
    qrels: &Qrels,
    k_range: RangeInclusive<usize>,
) -> Result<EvalReport> {
    sweep_and_report_by(runs, qrels, k_range, BestK::F1)
}

/// As [`sweep_and_report`], choosing k by `criterion` (ties to smaller k).
pub fn sweep_and_report_by(
    runs: &[RunOutput],
    qrels: &Qrels,
    k_range: RangeInclusive<usize>,
    criterion: BestK,
) -> Result<EvalReport> {
    let (k_min, k_max) = (*k_range.start(), *k_range.end());
    if k_min == 0 || k_min > k_max {
        return Err(Error::Config(format!("invalid k range {k_min}..={k_max}")));
    }

    let mut rows = Vec::new();
    let mut best = Vec::new();
    let mut excluded_queries = BTreeMap::new();

    for run in runs {
        let mut evals = Vec::with_capacity(run.lists.len());
        let mut excluded = Vec::new();
        let mut seen = BTreeSet::new();
        for list in &run.lists {
            let relevant = qrels
                .relevant(&list.query_id)
                .ok_or_else(|| Error::UnknownQuery(list.query_id.clone()))?;
            if !seen.insert(list.query_id.as_str()) {
                return Err(Error::Precondition(format!(
                    "run {}/{} ranks query {:?} twice",
                    run.config, run.method, list.query_id
                )));
            }
            if relevant.is_empty() {
                excluded.push(list.query_id.clone());
                continue;
            }
            let ranking = list
                .entries
                .iter()
                .map(|e| e.doc_id.as_str())
                .filter(|d| *d != list.query_id)
                .collect();
            evals.push(QueryEval { ranking, relevant });
        }
        if !excluded.is_empty() {
            excluded_queries.insert(format!("{}/{}", run.config, run.method), excluded);
        }

        let n = evals.len();
        let mean = |f: &dyn Fn(&QueryEval) -> f64| {
            if n == 0 {
                0.0
            } else {
                evals.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let map = mean(&|q| average_precision(&q.ranking, q.relevant));
        let mrr = mean(&|q| reciprocal_rank(&q.ranking, q.relevant));

        let run_rows: Vec<MetricRow> = (k_min..=k_max)
            .map(|k| MetricRow {
                config: run.config.clone(),
                method: run.method.clone(),
                k,
                precision: mean(&|q| precision_at_k(&q.ranking, q.relevant, k)),
                recall: mean(&|q| recall_at_k(&q.ranking, q.relevant, k)),
                f1: mean(&|q| {
                    f1_at_k(
                        precision_at_k(&q.ranking, q.relevant, k),
                        recall_at_k(&q.ranking, q.relevant, k),
                    )
                }),
                map,
                mrr,
                n_queries: n,
            })
            .collect();

        let top = run_rows
            .iter()
            .fold(None::<&MetricRow>, |acc, row| match acc {
                Some(b) if criterion.value(b) >= criterion.value(row) => Some(b),
                _ => Some(row),
            })
            .expect("k range is non-empty")
            .clone();
        best.push(top);
        rows.extend(run_rows);
    }

    Ok(EvalReport {
        rows,
        best,
        excluded_queries,
        k_min,
        k_max,
        manifest: None,
    })
}

impl EvalReport {
    /// Aligned plain-text table of the best-k rows.
    pub fn render_table(&self) -> String {
        let header = ["Query", "Model"]
            .into_iter()
            .chain(REPORT_COLUMNS)
            .map(str::to_owned)
            .collect::<Vec<_>>();
        let body: Vec<Vec<String>> = self
            .best
            .iter()
            .map(|r| {
                vec![
                    r.config.clone(),
                    r.method.clone(),
                    format!("{:.4}", r.precision),
                    format!("{:.4}", r.recall),
                    format!("{:.4}", r.f1),
                    format!("{:.4}", r.map),
                    format!("{:.4}", r.mrr),
                    r.k.to_string(),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|row| row[c].len())
                    .chain(std::iter::once(header[c].len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();

        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let rendered: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", rendered.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule);
        for row in &body {
            line(&mut out, row);
        }
        out
    }

    /// Per-row CSV with the report column names.
    pub fn to_csv(&self, best_only: bool) -> String {
        let mut out = String::from("query,model,");
        out.push_str(&REPORT_COLUMNS.join(","));
        out.push('\n');
        let rows = if best_only { &self.best } else { &self.rows };
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.config, r.method, r.precision, r.recall, r.f1, r.map, r.mrr, r.k
            );
        }
        out
    }
}

/// Writes `query_id doc_id rank score method` lines.
pub fn write_run<W: Write>(lists: &[RankedList], method: &str, mut writer: W) -> Result<()> {
    for list in lists {
        for e in &list.entries {
            writeln!(
                writer,
                "{} {} {} {} {}",
                list.query_id, e.doc_id, e.rank, e.score, method
            )
            .map_err(|e| Error::io("<run>", e))?;
        }
    }
    Ok(())
}

/// Parses a run file into per-method lists, ordered by query_id then rank.
pub fn read_run<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<RankedList>>> {
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<(usize, String, f64)>>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<run>", e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            line: i + 1,
            message,
        };
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 columns, got {}", fields.len())));
        }
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad rank {:?}", fields[2])))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| malformed(format!("bad score {:?}", fields[3])))?;
        grouped
            .entry(fields[4].to_owned())
            .or_default()
            .entry(fields[0].to_owned())
            .or_default()
            .push((rank, fields[1].to_owned(), score));
    }

    let mut out = BTreeMap::new();
    for (method, queries) in grouped {
        let lists = queries
            .into_iter()
            .map(|(q, mut entries)| {
                entries.sort_by_key(|e| e.0);
                let list = RankedList::from_ordered(
                    q,
                    Source::Rerank,
                    entries.into_iter().map(|(_, d, s)| (d, s)).collect(),
                );
                list.validate()?;
                Ok(list)
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(method, lists);
    }
    Ok(out)
}
