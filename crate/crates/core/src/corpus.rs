//! Legal document corpora: loading, citation preprocessing, statistics and
//! query splits.
//!
//! The on-disk format is one JSON object per line:
//!
//! ```text
//! {"doc_id": "C12", "text": "...", "sentences": [{"text": "...", "role": "Facts"}], "citations": ["C3"]}
//! ```
//!
//! `sentences` and `citations` are optional. Documents with a non-empty
//! citation set are query documents; their citations are the gold relevant
//! priors.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexical::{tokenize, Bm25Config};

/// Replacement token for masked case citations.
pub const CITATION_TOKEN: &str = "<CITATION>";

/// Sentence-level functional label in a judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RhetoricalRole {
    Facts,
    Issue,
    Argument,
    Reasoning,
    Decision,
    /// Sentences the annotator could not classify.
    Other,
}

impl RhetoricalRole {
    pub const ALL: [RhetoricalRole; 6] = [
        RhetoricalRole::Facts,
        RhetoricalRole::Issue,
        RhetoricalRole::Argument,
        RhetoricalRole::Reasoning,
        RhetoricalRole::Decision,
        RhetoricalRole::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RhetoricalRole::Facts => "Facts",
            RhetoricalRole::Issue => "Issue",
            RhetoricalRole::Argument => "Argument",
            RhetoricalRole::Reasoning => "Reasoning",
            RhetoricalRole::Decision => "Decision",
            RhetoricalRole::Other => "Other",
        }
    }
}

impl fmt::Display for RhetoricalRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RhetoricalRole {
    type Err = Error;

    /// Case-insensitive; accepts plural and common annotation-scheme aliases
    /// (`Issues`, `Arguments`, `Ratio`, `RPC`, `None`).
    fn from_str(s: &str) -> Result<Self> {
        let role = match s.trim().to_ascii_lowercase().as_str() {
            "facts" | "fact" | "fac" => RhetoricalRole::Facts,
            "issue" | "issues" | "iss" => RhetoricalRole::Issue,
            "argument" | "arguments" | "arg" => RhetoricalRole::Argument,
            "reasoning" | "ratio" | "ratio of the decision" | "reason" => {
                RhetoricalRole::Reasoning
            }
            "decision" | "rpc" | "ruling" => RhetoricalRole::Decision,
            "other" | "none" => RhetoricalRole::Other,
            _ => return Err(Error::Config(format!("unknown rhetorical role {s:?}"))),
        };
        Ok(role)
    }
}

impl Serialize for RhetoricalRole {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RhetoricalRole {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub index: usize,
    pub text: String,
    pub role: RhetoricalRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub raw_text: String,
    pub sentences: Vec<AnnotatedSentence>,
    pub cited_doc_ids: BTreeSet<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            raw_text: raw_text.into(),
            sentences: Vec::new(),
            cited_doc_ids: BTreeSet::new(),
        }
    }

    /// Replaces the sentence sequence, assigning contiguous indices.
    pub fn with_sentences<I, S>(mut self, sentences: I) -> Self
    where
        I: IntoIterator<Item = (S, RhetoricalRole)>,
        S: Into<String>,
    {
        self.sentences = sentences
            .into_iter()
            .enumerate()
            .map(|(index, (text, role))| AnnotatedSentence {
                index,
                text: text.into(),
                role,
            })
            .collect();
        self
    }

    pub fn with_citations<I, S>(mut self, cited: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.cited_doc_ids = cited.into_iter().map(Into::into).collect();
        self.cited_doc_ids.remove(&self.doc_id);
        self
    }

    pub fn is_annotated(&self) -> bool {
        !self.sentences.is_empty()
    }

    pub fn is_query(&self) -> bool {
        !self.cited_doc_ids.is_empty()
    }

    /// The text retrieval operates on: the annotated sentences joined by
    /// single spaces, or the raw text when the document is unsegmented.
    pub fn body(&self) -> String {
        if self.sentences.is_empty() {
            self.raw_text.clone()
        } else {
            self.sentences
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One JSON record per line.
    #[default]
    JsonLines,
    /// A directory of `*.txt` files; the file stem is the doc_id. No
    /// annotations or citations.
    TextDir,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadWarning {
    /// A citation that points outside the corpus. Kept in the document.
    UnknownCitation { doc_id: String, cited: String },
    /// A document listed itself as cited; the self-link was dropped.
    SelfCitation { doc_id: String },
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadWarning::UnknownCitation { doc_id, cited } => {
                write!(f, "{doc_id}: cites {cited:?} which is not in the corpus")
            }
            LoadWarning::SelfCitation { doc_id } => {
                write!(f, "{doc_id}: self-citation dropped")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub warnings: Vec<LoadWarning>,
}

/// An immutable, id-indexed collection of documents in load order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateDocId(doc.doc_id.clone()));
            }
            if doc.cited_doc_ids.contains(&doc.doc_id) {
                return Err(Error::Precondition(format!(
                    "document {:?} cites itself",
                    doc.doc_id
                )));
            }
        }
        Ok(Corpus { documents, by_id })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter()
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    /// Query documents (non-empty citation set), in load order.
    pub fn query_documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(|d| d.is_query())
    }

    /// Builds a new corpus by transforming every document.
    pub fn map_documents<F>(&self, mut f: F) -> Result<Corpus>
    where
        F: FnMut(&Document) -> Result<Document>,
    {
        let docs = self.documents.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Corpus::new(docs)
    }

    /// SHA-256 over the canonical JSON-lines rendering.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for doc in &self.documents {
            let line = serde_json::to_string(&Record::from(doc)).expect("record serializes");
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceRecord {
    text: String,
    role: RhetoricalRole,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    doc_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    sentences: Vec<SentenceRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    citations: Vec<String>,
}

impl From<&Document> for Record {
    fn from(doc: &Document) -> Self {
        Record {
            doc_id: doc.doc_id.clone(),
            text: doc.raw_text.clone(),
            sentences: doc
                .sentences
                .iter()
                .map(|s| SentenceRecord {
                    text: s.text.clone(),
                    role: s.role,
                })
                .collect(),
            citations: doc.cited_doc_ids.iter().cloned().collect(),
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<(Corpus, LoadReport)> {
    let path = path.as_ref();
    match format {
        CorpusFormat::JsonLines => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_json_lines(BufReader::new(file)).map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
        }
        CorpusFormat::TextDir => load_text_dir(path),
    }
}

/// Parses the JSON-lines corpus format from any reader. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn read_json_lines<R: BufRead>(reader: R) -> Result<(Corpus, LoadReport)> {
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    let mut report = LoadReport::default();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.doc_id.is_empty() {
            return Err(Error::Malformed {
                line: line_no,
                message: "empty doc_id".into(),
            });
        }
        if let Some(pos) = record.sentences.iter().position(|s| s.text.trim().is_empty()) {
            return Err(Error::Malformed {
                line: line_no,
                message: format!("sentence {pos} has empty text"),
            });
        }
        if !seen.insert(record.doc_id.clone()) {
            return Err(Error::DuplicateDocId(record.doc_id));
        }
        if record.citations.contains(&record.doc_id) {
            report.warnings.push(LoadWarning::SelfCitation {
                doc_id: record.doc_id.clone(),
            });
        }
        let doc = Document::new(record.doc_id, record.text)
            .with_sentences(record.sentences.into_iter().map(|s| (s.text, s.role)))
            .with_citations(record.citations);
        documents.push(doc);
    }

    for doc in &documents {
        for cited in &doc.cited_doc_ids {
            if !seen.contains(cited) {
                report.warnings.push(LoadWarning::UnknownCitation {
                    doc_id: doc.doc_id.clone(),
                    cited: cited.clone(),
                });
            }
        }
    }

    Ok((Corpus::new(documents)?, report))
}

fn load_text_dir(dir: &Path) -> Result<(Corpus, LoadReport)> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect::<Vec<_>>();
    paths.sort();

    let mut documents = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        documents.push(Document::new(id, text));
    }
    Ok((Corpus::new(documents)?, LoadReport::default()))
}

pub fn write_json_lines<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    for doc in corpus.iter() {
        serde_json::to_writer(&mut writer, &Record::from(doc))?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_json_lines(corpus, &mut writer)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

// Party name: a capitalised word, or a corporate/honorific abbreviation with
// its trailing period. Parties may contain lower-case connectors.
const NAME: &str = r"(?:(?:Ltd|Co|Corp|Inc|Bros|Pvt|Mr|Mrs|Dr|St)\.|[A-Z][\w&'-]*)";

fn default_citation_pattern() -> String {
    let party = format!(r"{NAME}(?:\s+(?:(?:of|and|the|&)\s+)*{NAME})*");
    format!(
        r"(?s)<CITATION>|(?i:<a\b[^>]*>.*?</a\s*>)|{party}(?:\s+(?:vs?\.?|versus)\s+{party})+"
    )
}

/// Finds case-citation spans and replaces them with [`CITATION_TOKEN`].
///
/// The default pattern matches existing `<CITATION>` tokens, `<a ...>...</a>`
/// hyperlink spans and `Party v. Party` case names. Statute references are
/// left alone.
#[derive(Debug, Clone)]
pub struct CitationMasker {
    pattern: Regex,
}

impl Default for CitationMasker {
    fn default() -> Self {
        static DEFAULT: OnceLock<Regex> = OnceLock::new();
        let pattern = DEFAULT
            .get_or_init(|| Regex::new(&default_citation_pattern()).expect("default pattern"))
            .clone();
        CitationMasker { pattern }
    }
}

impl CitationMasker {
    /// A masker using a caller-supplied pattern. The pattern should also
    /// match the literal `<CITATION>` token if masking is to stay idempotent.
    pub fn with_pattern(pattern: &str) -> Result<Self> {
        let pattern = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("citation pattern: {e}")))?;
        Ok(CitationMasker { pattern })
    }

    pub fn pattern(&self) -> &str {
        self.pattern.as_str()
    }

    pub fn mask(&self, text: &str) -> String {
        self.pattern.replace_all(text, CITATION_TOKEN).into_owned()
    }

    pub fn contains_citation(&self, text: &str) -> bool {
        text.contains(CITATION_TOKEN) || self.pattern.is_match(text)
    }
}

/// Masks case citations with the default pattern.
pub fn mask_citations(text: &str) -> String {
    CitationMasker::default().mask(text)
}

#[derive(Debug, Clone)]
pub struct DroppedSentences {
    pub document: Document,
    pub removed: usize,
}

impl DroppedSentences {
    /// Every sentence cited something and the document is now empty.
    pub fn is_emptied(&self) -> bool {
        self.removed > 0 && self.document.sentences.is_empty()
    }
}

/// Removes every sentence containing a citation, re-indexing the rest.
pub fn drop_citation_sentences(
    document: &Document,
    masker: &CitationMasker,
) -> Result<DroppedSentences> {
    if !document.is_annotated() {
        return Err(Error::Precondition(format!(
            "document {:?} has no sentence segmentation",
            document.doc_id
        )));
    }
    let kept = document
        .sentences
        .iter()
        .filter(|s| !masker.contains_citation(&s.text))
        .map(|s| (s.text.clone(), s.role))
        .collect::<Vec<_>>();
    let removed = document.sentences.len() - kept.len();
    let document = Document {
        doc_id: document.doc_id.clone(),
        raw_text: document.raw_text.clone(),
        sentences: Vec::new(),
        cited_doc_ids: document.cited_doc_ids.clone(),
    }
    .with_sentences(kept);
    Ok(DroppedSentences { document, removed })
}

/// Optional entity-normalisation step run before citation masking.
pub trait TextTransform: Send + Sync {
    fn apply(&self, text: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl TextTransform for Identity {
    fn apply(&self, text: &str) -> String {
        text.to_owned()
    }
}

/// Ordered regex rewrites, e.g. mapping party-name variants to a canonical form.
#[derive(Debug, Clone, Default)]
pub struct RegexRewrite {
    rules: Vec<(Regex, String)>,
}

impl RegexRewrite {
    pub fn new<I, P, R>(rules: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, R)>,
        P: AsRef<str>,
        R: Into<String>,
    {
        let rules = rules
            .into_iter()
            .map(|(p, r)| {
                Regex::new(p.as_ref())
                    .map(|re| (re, r.into()))
                    .map_err(|e| Error::Config(format!("rewrite pattern: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegexRewrite { rules })
    }
}

impl TextTransform for RegexRewrite {
    fn apply(&self, text: &str) -> String {
        let mut out = text.to_owned();
        for (re, replacement) in &self.rules {
            out = re.replace_all(&out, replacement.as_str()).into_owned();
        }
        out
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PreprocessReport {
    /// Sentences removed by citation-sentence dropping, summed over documents.
    pub sentences_removed: usize,
    /// Documents whose every sentence was dropped.
    pub emptied_documents: Vec<String>,
}

/// Applies entity normalisation, citation masking and (optionally)
/// citation-sentence removal to every document.
pub fn preprocess(
    corpus: &Corpus,
    normalizer: &dyn TextTransform,
    masker: Option<&CitationMasker>,
    drop_sentences: bool,
) -> Result<(Corpus, PreprocessReport)> {
    let mut report = PreprocessReport::default();
    let default_masker = CitationMasker::default();
    let out = corpus.map_documents(|doc| {
        let transform = |text: &str| {
            let normalized = normalizer.apply(text);
            match masker {
                Some(m) => m.mask(&normalized),
                None => normalized,
            }
        };
        let mut next = Document {
            doc_id: doc.doc_id.clone(),
            raw_text: transform(&doc.raw_text),
            sentences: Vec::new(),
            cited_doc_ids: doc.cited_doc_ids.clone(),
        }
        .with_sentences(doc.sentences.iter().map(|s| (transform(&s.text), s.role)));

        if drop_sentences && next.is_annotated() {
            let dropped = drop_citation_sentences(&next, masker.unwrap_or(&default_masker))?;
            report.sentences_removed += dropped.removed;
            if dropped.is_emptied() {
                report.emptied_documents.push(doc.doc_id.clone());
            }
            next = dropped.document;
        }
        Ok(next)
    })?;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_documents: usize,
    /// Mean character count of the raw text.
    pub avg_document_size: f64,
    pub n_query_documents: usize,
    pub total_citation_links: usize,
    pub avg_citations_per_query: f64,
    pub vocabulary_size: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let n_documents = corpus.len();
    let total_chars: usize = corpus.iter().map(|d| d.raw_text.chars().count()).sum();
    let n_query_documents = corpus.query_documents().count();
    let total_citation_links: usize = corpus.iter().map(|d| d.cited_doc_ids.len()).sum();
    let tokenizer_config = Bm25Config::default();
    let vocabulary: HashSet<String> = corpus
        .iter()
        .flat_map(|d| tokenize(&d.raw_text, &tokenizer_config))
        .collect();

    CorpusStats {
        n_documents,
        avg_document_size: if n_documents == 0 {
            0.0
        } else {
            total_chars as f64 / n_documents as f64
        },
        n_query_documents,
        total_citation_links,
        avg_citations_per_query: if n_query_documents == 0 {
            0.0
        } else {
            total_citation_links as f64 / n_query_documents as f64
        },
        vocabulary_size: vocabulary.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            validation_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.train_fraction,
            self.validation_fraction,
            self.test_fraction,
        ];
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be non-negative, got {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Partitions the query documents. Validation and test sizes are the
/// rounded fractions of the query count; train takes the remainder.
pub fn split_queries(corpus: &Corpus, spec: &SplitSpec) -> Result<QuerySplit> {
    spec.validate()?;
    let mut ids: Vec<String> = corpus.query_documents().map(|d| d.doc_id.clone()).collect();
    ids.sort();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let n_val = ((n as f64) * spec.validation_fraction).round() as usize;
    let n_val = n_val.min(n);
    let n_test = (((n as f64) * spec.test_fraction).round() as usize).min(n - n_val);

    let mut iter = ids.into_iter();
    let validation = iter.by_ref().take(n_val).collect();
    let test = iter.by_ref().take(n_test).collect();
    let train = iter.collect();
    Ok(QuerySplit {
        train,
        validation,
        test,
    })
}
