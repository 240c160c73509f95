//! Sentence segmentation, rhetorical-role annotation and role-filtered
//! query construction.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Corpus, Document, RhetoricalRole};
use crate::error::{Error, Result};

/// A sentence as a byte range into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }
}

const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "s", "ss", "sec", "secs", "art", "arts", "no", "nos", "v", "vs", "mr", "mrs", "ms", "dr",
    "hon", "ld", "ltd", "co", "corp", "inc", "pvt", "bros", "st", "i.e", "e.g", "viz", "cf",
    "para", "paras", "p", "pp", "cl", "ch", "govt", "dept", "sr", "jr", "smt", "sh", "shri", "j",
    "jj", "cr", "crl", "ors", "anr", "r/w", "u/s",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{2019}' | '\u{201d}')
}

/// Rule-based sentence splitter.
///
/// A sentence ends at `.`, `?` or `!` (plus any trailing terminators and
/// closing quotes or brackets) followed by whitespace or end of text, unless
/// the period closes a known abbreviation such as `s.` or `v.`.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter {
            abbreviations: DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Segmenter {
    /// Abbreviations are given without their final period, case-insensitive.
    pub fn with_abbreviations<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Segmenter {
            abbreviations: abbreviations
                .into_iter()
                .map(|s| s.as_ref().trim_end_matches('.').to_lowercase())
                .collect(),
        }
    }

    fn ends_with_abbreviation(&self, text: &str, dot: usize) -> bool {
        let word_start = text[..dot]
            .rfind(char::is_whitespace)
            .map_or(0, |i| i + text[i..].chars().next().map_or(1, char::len_utf8));
        let word = text[word_start..dot].trim_start_matches(|c: char| !c.is_alphanumeric());
        !word.is_empty() && self.abbreviations.contains(&word.to_lowercase())
    }

    pub fn segment(&self, text: &str) -> Vec<Span> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        let mut last_end = 0;
        let mut i = 0;

        while i < chars.len() {
            let (pos, c) = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start.get_or_insert(pos);
            last_end = pos + c.len_utf8();

            if is_terminator(c) {
                let mut j = i + 1;
                while j < chars.len() && (is_terminator(chars[j].1) || is_closer(chars[j].1)) {
                    j += 1;
                }
                let at_break = j == chars.len() || chars[j].1.is_whitespace();
                let single_period = c == '.' && j == i + 1;
                if at_break && !(single_period && self.ends_with_abbreviation(text, pos)) {
                    let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
                    spans.push(Span {
                        start: start.take().expect("span started"),
                        end,
                    });
                    last_end = end;
                }
                i = j;
                continue;
            }
            i += 1;
        }
        if let Some(s) = start {
            spans.push(Span {
                start: s,
                end: last_end,
            });
        }
        spans
    }
}

pub fn segment_sentences(text: &str) -> Vec<Span> {
    Segmenter::default().segment(text)
}

/// One cue-phrase rule: a lower-cased substring that implies a role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueRule {
    pub role: RhetoricalRole,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueTable {
    rules: Vec<CueRule>,
}

const DEFAULT_CUES: &str = include_str!("../data/cues.tsv");

impl Default for CueTable {
    fn default() -> Self {
        CueTable::parse(DEFAULT_CUES).expect("shipped cue table parses")
    }
}

impl CueTable {
    /// Parses `ROLE <tab> phrase` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(input: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (role, phrase) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                line: i + 1,
                message: "expected ROLE<tab>phrase".into(),
            })?;
            let role = role.parse().map_err(|e: Error| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            let phrase = phrase.trim().to_lowercase();
            if phrase.is_empty() {
                return Err(Error::Malformed {
                    line: i + 1,
                    message: "empty cue phrase".into(),
                });
            }
            rules.push(CueRule { role, phrase });
        }
        Ok(CueTable { rules })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn rules(&self) -> &[CueRule] {
        &self.rules
    }

    /// First rule whose phrase occurs in the sentence.
    pub fn classify(&self, sentence: &str) -> Option<RhetoricalRole> {
        let lower = sentence.to_lowercase();
        self.rules
            .iter()
            .find(|r| lower.contains(&r.phrase))
            .map(|r| r.role)
    }
}

/// Labels a document's sentences, in order.
pub trait RoleAnnotator: Send + Sync {
    fn annotate(&self, sentences: &[String]) -> Result<Vec<RhetoricalRole>>;
}

/// Cue-phrase classifier with a positional fallback: unmatched sentences in
/// the opening fifth of the document are Facts, in the closing tenth are
/// Decision, anything else is Other.
#[derive(Debug, Clone, Default)]
pub struct HeuristicAnnotator {
    table: CueTable,
}

impl HeuristicAnnotator {
    pub fn new(table: CueTable) -> Self {
        HeuristicAnnotator { table }
    }

    fn positional(index: usize, n: usize) -> RhetoricalRole {
        let early = ((n as f64) * 0.2).ceil().max(1.0) as usize;
        let late = ((n as f64) * 0.1).floor().max(1.0) as usize;
        if index < early {
            RhetoricalRole::Facts
        } else if index + late >= n {
            RhetoricalRole::Decision
        } else {
            RhetoricalRole::Other
        }
    }
}

impl RoleAnnotator for HeuristicAnnotator {
    fn annotate(&self, sentences: &[String]) -> Result<Vec<RhetoricalRole>> {
        let n = sentences.len();
        Ok(sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self.table
                    .classify(s)
                    .unwrap_or_else(|| Self::positional(i, n))
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorStrategy {
    /// Use the annotations shipped with the corpus.
    #[default]
    File,
    Heuristic,
    External,
}

impl fmt::Display for AnnotatorStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotatorStrategy::File => "file",
            AnnotatorStrategy::Heuristic => "heuristic",
            AnnotatorStrategy::External => "external",
        })
    }
}

impl FromStr for AnnotatorStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(AnnotatorStrategy::File),
            "heuristic" => Ok(AnnotatorStrategy::Heuristic),
            "external" => Ok(AnnotatorStrategy::External),
            _ => Err(Error::Config(format!("unknown annotator strategy {s:?}"))),
        }
    }
}

/// The active annotator for a run.
#[derive(Clone)]
pub enum Annotator {
    File,
    Heuristic(HeuristicAnnotator),
    External(Arc<dyn RoleAnnotator>),
}

impl Annotator {
    pub fn strategy(&self) -> AnnotatorStrategy {
        match self {
            Annotator::File => AnnotatorStrategy::File,
            Annotator::Heuristic(_) => AnnotatorStrategy::Heuristic,
            Annotator::External(_) => AnnotatorStrategy::External,
        }
    }
}

impl fmt::Debug for Annotator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Annotator({})", self.strategy())
    }
}

/// Labels every sentence with `annotator`, checking it returned one label per
/// sentence.
pub fn assign_roles(
    sentences: &[String],
    annotator: &dyn RoleAnnotator,
) -> Result<Vec<AnnotatedSentence>> {
    let roles = annotator.annotate(sentences)?;
    if roles.len() != sentences.len() {
        return Err(Error::Protocol(format!(
            "annotator returned {} roles for {} sentences",
            roles.len(),
            sentences.len()
        )));
    }
    Ok(sentences
        .iter()
        .zip(roles)
        .enumerate()
        .map(|(index, (text, role))| AnnotatedSentence {
            index,
            text: text.clone(),
            role,
        })
        .collect())
}

/// Annotates one document. Existing sentence boundaries are kept; an
/// unsegmented document is split with the default [`Segmenter`] first.
pub fn annotate_document(doc: &Document, annotator: &Annotator) -> Result<Document> {
    let model: &dyn RoleAnnotator = match annotator {
        Annotator::File => {
            if !doc.is_annotated() && !doc.raw_text.trim().is_empty() {
                return Err(Error::Precondition(format!(
                    "document {:?} has no role annotations in the corpus file",
                    doc.doc_id
                )));
            }
            return Ok(doc.clone());
        }
        Annotator::Heuristic(h) => h,
        Annotator::External(e) => e.as_ref(),
    };
    let sentences: Vec<String> = if doc.is_annotated() {
        doc.sentences.iter().map(|s| s.text.clone()).collect()
    } else {
        segment_sentences(&doc.raw_text)
            .iter()
            .map(|s| s.text(&doc.raw_text).to_owned())
            .collect()
    };
    let mut out = doc.clone();
    out.sentences = assign_roles(&sentences, model)?;
    Ok(out)
}

pub fn annotate_corpus(corpus: &Corpus, annotator: &Annotator) -> Result<Corpus> {
    corpus.map_documents(|d| annotate_document(d, annotator))
}

/// Named role combinations used as query configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolePreset {
    Full,
    Facts,
    FactsIssue,
    FactsIssueArguments,
    FactsIssueReasoning,
    FactsIssueDecision,
}

impl RolePreset {
    pub const ALL: [RolePreset; 6] = [
        RolePreset::Full,
        RolePreset::Facts,
        RolePreset::FactsIssue,
        RolePreset::FactsIssueArguments,
        RolePreset::FactsIssueReasoning,
        RolePreset::FactsIssueDecision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RolePreset::Full => "full",
            RolePreset::Facts => "facts",
            RolePreset::FactsIssue => "facts_issue",
            RolePreset::FactsIssueArguments => "facts_issue_arguments",
            RolePreset::FactsIssueReasoning => "facts_issue_reasoning",
            RolePreset::FactsIssueDecision => "facts_issue_decision",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            RolePreset::Full => "Full Query",
            RolePreset::Facts => "Facts",
            RolePreset::FactsIssue => "Facts+Issue",
            RolePreset::FactsIssueArguments => "Facts+Issue+Arguments",
            RolePreset::FactsIssueReasoning => "Facts+Issue+Reasoning",
            RolePreset::FactsIssueDecision => "Facts+Issue+Decision",
        }
    }

    pub fn roles(self) -> BTreeSet<RhetoricalRole> {
        use RhetoricalRole::*;
        let roles: &[RhetoricalRole] = match self {
            RolePreset::Full => &RhetoricalRole::ALL,
            RolePreset::Facts => &[Facts],
            RolePreset::FactsIssue => &[Facts, Issue],
            RolePreset::FactsIssueArguments => &[Facts, Issue, Argument],
            RolePreset::FactsIssueReasoning => &[Facts, Issue, Reasoning],
            RolePreset::FactsIssueDecision => &[Facts, Issue, Decision],
        };
        roles.iter().copied().collect()
    }
}

impl FromStr for RolePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RolePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown role preset {s:?}")))
    }
}

/// Which sentences of a query document make up its query text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub name: String,
    pub label: String,
    pub included_roles: BTreeSet<RhetoricalRole>,
}

impl RoleConfig {
    pub fn preset(preset: RolePreset) -> Self {
        RoleConfig {
            name: preset.name().to_owned(),
            label: preset.label().to_owned(),
            included_roles: preset.roles(),
        }
    }

    pub fn custom(name: impl Into<String>, roles: impl IntoIterator<Item = RhetoricalRole>) -> Self {
        let included_roles: BTreeSet<_> = roles.into_iter().collect();
        let label = included_roles
            .iter()
            .map(|r| r.as_str())
            .collect::<Vec<_>>()
            .join("+");
        RoleConfig {
            name: name.into(),
            label,
            included_roles,
        }
    }

    /// A preset name, or `custom:Role,Role,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(list) = spec.strip_prefix("custom:") {
            let roles = list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<RhetoricalRole>>>()?;
            if roles.is_empty() {
                return Err(Error::Config(format!("custom role config {spec:?} names no roles")));
            }
            let name = format!(
                "custom_{}",
                roles.iter().map(|r| r.as_str().to_lowercase()).collect::<Vec<_>>().join("_")
            );
            return Ok(RoleConfig::custom(name, roles));
        }
        spec.parse::<RolePreset>().map(RoleConfig::preset)
    }

    pub fn includes(&self, role: RhetoricalRole) -> bool {
        self.included_roles.contains(&role)
    }
}

/// Role-filtered query text for one query document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleQuery {
    pub query_id: String,
    pub config: String,
    pub text: String,
    pub n_sentences: usize,
}

impl RoleQuery {
    /// No sentence carried a selected role.
    pub fn is_empty(&self) -> bool {
        self.n_sentences == 0
    }
}

/// Joins, in order and with single spaces, the sentences whose role is in
/// the configuration.
pub fn build_role_query(document: &Document, config: &RoleConfig) -> Result<RoleQuery> {
    if !document.is_annotated() {
        return Err(Error::Precondition(format!(
            "document {:?} has no role annotations",
            document.doc_id
        )));
    }
    let selected: Vec<&str> = document
        .sentences
        .iter()
        .filter(|s| config.includes(s.role))
        .map(|s| s.text.as_str())
        .collect();
    Ok(RoleQuery {
        query_id: document.doc_id.clone(),
        config: config.name.clone(),
        n_sentences: selected.len(),
        text: selected.join(" "),
    })
}
