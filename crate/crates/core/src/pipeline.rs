//! Experiment configuration, index building, per-method retrieval and full
//! runs with run files, report and manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, preprocess, CitationMasker, Corpus, CorpusFormat, Identity};
use crate::error::{Error, Result};
use crate::eval::{sweep_and_report_by, write_run, BestK, EvalReport, Qrels, RunOutput};
use crate::fusion::{rrf_fuse, RankedList, RrfConfig, Source};
use crate::lexical::{
    build_index, load_index, save_index, score_candidates, search_full, tokenize, Bm25Config,
    InvertedIndex,
};
use crate::protocol::{ClientConfig, SidecarClient};
use crate::rerank::{rerank, ChunkingConfig, JaccardScorer, PairScorer};
use crate::segmenter::{
    annotate_document, build_role_query, Annotator, AnnotatorStrategy, CueTable,
    HeuristicAnnotator, RoleConfig, RolePreset, RoleQuery,
};
use crate::vector::{
    build_flat, build_ivf, embed_texts, load_vector_index, save_vector_index, truncate_chars,
    Embedder, Embedding, HashingEmbedder, IvfParams, SearchParams, VectorIndex,
    DEFAULT_CHAR_CAP, DEFAULT_DIMENSION,
};

/// Overrides `[scorer] endpoint` when set.
pub const SCORER_ENDPOINT_ENV: &str = "PRECEDENT_SCORER_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// BM25 over the whole corpus.
    Bm25Full,
    /// BM25 over the vector candidate set.
    Bm25Candidates,
    /// Vector search alone.
    Vector,
    /// Pair-scorer re-rank of the vector candidates, no fusion.
    CrossEncoder,
    /// Vector and candidate BM25 fused by RRF, then re-ranked.
    TraceFull,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Bm25Full,
        Method::Bm25Candidates,
        Method::Vector,
        Method::CrossEncoder,
        Method::TraceFull,
    ];

    /// The three methods compared in the standard report.
    pub const REPORTED: [Method; 3] = [Method::Bm25Candidates, Method::Vector, Method::TraceFull];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bm25Full => "bm25_full",
            Method::Bm25Candidates => "bm25_candidates",
            Method::Vector => "vector",
            Method::CrossEncoder => "cross_encoder",
            Method::TraceFull => "trace_full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Bm25Full => "BM25 (full corpus)",
            Method::Bm25Candidates => "BM25",
            Method::Vector => "Vector DB",
            Method::CrossEncoder => "Cross-encoder (vector only)",
            Method::TraceFull => "Cross-encoder",
        }
    }

    pub fn uses_vector(self) -> bool {
        self != Method::Bm25Full
    }

    pub fn uses_lexical(self) -> bool {
        matches!(self, Method::Bm25Full | Method::Bm25Candidates | Method::TraceFull)
    }

    pub fn uses_scorer(self) -> bool {
        matches!(self, Method::CrossEncoder | Method::TraceFull)
    }

    fn source(self) -> Source {
        match self {
            Method::Bm25Full | Method::Bm25Candidates => Source::Bm25,
            Method::Vector => Source::Vector,
            Method::CrossEncoder | Method::TraceFull => Source::Rerank,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Ivf,
    Flat,
}

/// Where a model-backed stage gets its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Deterministic in-process implementation.
    #[default]
    Stub,
    /// The external model service at `[scorer] endpoint`.
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub mask_citations: bool,
    pub drop_citation_sentences: bool,
    /// Replaces the built-in citation pattern.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub citation_pattern: Option<String>,
    /// Documents are cut to this many characters before embedding and
    /// re-ranking.
    pub max_doc_chars: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            mask_citations: true,
            drop_citation_sentences: false,
            citation_pattern: None,
            max_doc_chars: DEFAULT_CHAR_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorConfig {
    pub index: IndexKind,
    pub embedder: ModelSource,
    /// Dimension of the stub embedder; a sidecar advertises its own.
    pub dimension: usize,
    /// Defaults to `min(2048, ceil(sqrt(n)))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlist: Option<usize>,
    pub kmeans_iters: usize,
    /// Defaults to `ceil(nlist / 16)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
}

impl Default for VectorConfig {
    fn default() -> Self {
        VectorConfig {
            index: IndexKind::Ivf,
            embedder: ModelSource::Stub,
            dimension: DEFAULT_DIMENSION,
            nlist: None,
            kmeans_iters: 20,
            nprobe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub source: ModelSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            source: ModelSource::Stub,
            endpoint: None,
            batch_size: 64,
            timeout_secs: 300,
        }
    }
}

/// Everything a run needs. Every field has a default, so an empty file plus
/// a corpus path is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub output_dir: PathBuf,
    /// Preset names or `custom:Role,Role`.
    pub presets: Vec<String>,
    pub methods: Vec<Method>,
    pub annotator: AnnotatorStrategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cue_table: Option<PathBuf>,
    pub seed: u64,
    /// Vector candidates passed to later stages.
    pub k_vec: usize,
    /// Length of the final lists; defaults to `k_vec`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_depth: Option<usize>,
    pub k_range: [usize; 2],
    pub best_k: BestK,
    pub preprocess: PreprocessConfig,
    pub bm25: Bm25Config,
    pub vector: VectorConfig,
    pub rrf: RrfConfig,
    pub rerank: ChunkingConfig,
    pub scorer: ScorerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            corpus_format: CorpusFormat::JsonLines,
            output_dir: PathBuf::from("runs"),
            presets: RolePreset::ALL.iter().map(|p| p.name().to_owned()).collect(),
            methods: Method::REPORTED.to_vec(),
            annotator: AnnotatorStrategy::File,
            cue_table: None,
            seed: 0,
            k_vec: 1000,
            report_depth: None,
            k_range: [1, 20],
            best_k: BestK::F1,
            preprocess: PreprocessConfig::default(),
            bm25: Bm25Config::default(),
            vector: VectorConfig::default(),
            rrf: RrfConfig::default(),
            rerank: ChunkingConfig::default(),
            scorer: ScorerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory. The scorer endpoint environment override applies.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.corpus, &mut config.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = config.cue_table.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        config.apply_env();
        Ok(config)
    }

    pub fn apply_env(&mut self) {
        if let Ok(endpoint) = std::env::var(SCORER_ENDPOINT_ENV) {
            if !endpoint.trim().is_empty() {
                self.scorer.endpoint = Some(endpoint.trim().to_owned());
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.bm25.validate()?;
        self.rerank.validate()?;
        self.role_configs()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.k_vec == 0 {
            return Err(Error::Config("k_vec must be positive".into()));
        }
        if self.report_depth == Some(0) {
            return Err(Error::Config("report_depth must be positive".into()));
        }
        let [lo, hi] = self.k_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid k_range [{lo}, {hi}]")));
        }
        if !(self.rrf.k_const.is_finite() && self.rrf.k_const > 0.0) {
            return Err(Error::Config(format!("rrf k_const must be positive, got {}", self.rrf.k_const)));
        }
        if self.preprocess.max_doc_chars == 0 {
            return Err(Error::Config("max_doc_chars must be positive".into()));
        }
        if self.vector.dimension == 0 || self.vector.kmeans_iters == 0 {
            return Err(Error::Config("vector dimension and kmeans_iters must be positive".into()));
        }
        if self.vector.nlist == Some(0) || self.vector.nprobe == Some(0) {
            return Err(Error::Config("nlist and nprobe must be positive".into()));
        }
        if self.scorer.batch_size == 0 {
            return Err(Error::Config("scorer batch_size must be positive".into()));
        }
        if self.needs_sidecar() && self.scorer.endpoint.is_none() {
            return Err(Error::Config(format!(
                "a sidecar model is selected but no endpoint is set (config or {SCORER_ENDPOINT_ENV})"
            )));
        }
        if let Some(pattern) = &self.preprocess.citation_pattern {
            CitationMasker::with_pattern(pattern)?;
        }
        Ok(())
    }

    pub fn needs_sidecar(&self) -> bool {
        self.scorer.source == ModelSource::Sidecar
            || self.vector.embedder == ModelSource::Sidecar
            || self.annotator == AnnotatorStrategy::External
    }

    pub fn role_configs(&self) -> Result<Vec<RoleConfig>> {
        if self.presets.is_empty() {
            return Err(Error::Config("no role presets selected".into()));
        }
        let configs = self
            .presets
            .iter()
            .map(|p| RoleConfig::parse(p))
            .collect::<Result<Vec<_>>>()?;
        let mut seen = BTreeSet::new();
        for c in &configs {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("role preset {:?} listed twice", c.name)));
            }
        }
        Ok(configs)
    }

    pub fn k_range(&self) -> RangeInclusive<usize> {
        self.k_range[0]..=self.k_range[1]
    }

    pub fn report_depth(&self) -> usize {
        self.report_depth.unwrap_or(self.k_vec)
    }
}

/// The models behind the embedding, scoring and annotation stages.
#[derive(Clone)]
pub struct Models {
    pub embedder: Arc<dyn Embedder>,
    pub scorer: Arc<dyn PairScorer>,
    pub annotator: Annotator,
    /// Short description for the manifest.
    pub description: BTreeMap<String, String>,
}

impl fmt::Debug for Models {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Models").field("description", &self.description).finish()
    }
}

impl Models {
    /// Hashing embedder, Jaccard scorer and the given annotator.
    pub fn stub(dimension: usize, annotator: Annotator) -> Self {
        let description = [
            ("embedder", format!("hashing/{dimension}")),
            ("scorer", "jaccard".to_owned()),
            ("annotator", annotator.strategy().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        Models {
            embedder: Arc::new(HashingEmbedder::new(dimension)),
            scorer: Arc::new(JaccardScorer::default()),
            annotator,
            description,
        }
    }

    /// Resolves the configured models, connecting to the sidecar if any
    /// stage needs it.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let heuristic = || -> Result<HeuristicAnnotator> {
            Ok(HeuristicAnnotator::new(match &config.cue_table {
                Some(path) => CueTable::load(path)?,
                None => CueTable::default(),
            }))
        };
        let client = if config.needs_sidecar() {
            let endpoint = config.scorer.endpoint.as_deref().ok_or_else(|| {
                Error::Config("sidecar selected without an endpoint".into())
            })?;
            Some(Arc::new(SidecarClient::connect_with(
                endpoint,
                ClientConfig {
                    batch_size: config.scorer.batch_size,
                    read_timeout: Some(Duration::from_secs(config.scorer.timeout_secs)),
                    ..ClientConfig::default()
                },
            )?))
        } else {
            None
        };
        let annotator = match config.annotator {
            AnnotatorStrategy::File => Annotator::File,
            AnnotatorStrategy::Heuristic => Annotator::Heuristic(heuristic()?),
            AnnotatorStrategy::External => {
                Annotator::External(client.clone().expect("sidecar connected"))
            }
        };
        let mut models = Models::stub(config.vector.dimension, annotator);
        if let Some(client) = client {
            let name = format!("sidecar@{}", client.endpoint());
            if config.vector.embedder == ModelSource::Sidecar {
                models.embedder = client.clone();
                models.description.insert("embedder".into(), name.clone());
            }
            if config.scorer.source == ModelSource::Sidecar {
                models.scorer = client.clone();
                models.description.insert("scorer".into(), name.clone());
            }
            if config.annotator == AnnotatorStrategy::External {
                models.description.insert("annotator".into(), name);
            }
        }
        Ok(models)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Indexes {
    pub lexical: Option<InvertedIndex>,
    pub vector: Option<VectorIndex>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub requested_nlist: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlist: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    pub truncated_documents: usize,
    /// When the embedding character cap was applied, relative to citation
    /// masking and sentence dropping.
    #[serde(default)]
    pub char_cap_applied: String,
    pub zero_vectors: usize,
    pub warnings: Vec<String>,
}

/// Builds the indexes the given methods need.
pub fn build_indexes(
    corpus: &Corpus,
    config: &ExperimentConfig,
    embedder: &dyn Embedder,
    methods: &[Method],
) -> Result<(Indexes, IndexReport)> {
    let mut indexes = Indexes::default();
    let mut report = IndexReport::default();
    if methods.iter().any(|m| m.uses_lexical()) {
        indexes.lexical = Some(build_index(corpus, &config.bm25));
    }
    if methods.iter().any(|m| m.uses_vector()) {
        let texts: Vec<String> = corpus.iter().map(|d| d.body()).collect();
        let embedded = embed_texts(&texts, embedder, config.preprocess.max_doc_chars)?;
        report.truncated_documents = embedded.truncated.len();
        report.char_cap_applied = "after_preprocessing".into();
        report.zero_vectors = embedded.zero.len();
        if !embedded.truncated.is_empty() {
            report.warnings.push(format!(
                "{} documents cut to {} characters before embedding",
                embedded.truncated.len(),
                config.preprocess.max_doc_chars
            ));
        }
        if !embedded.zero.is_empty() {
            report
                .warnings
                .push(format!("{} documents embedded to the zero vector", embedded.zero.len()));
        }
        let entries = corpus
            .iter()
            .map(|d| d.doc_id.clone())
            .zip(embedded.vectors);
        let index = match config.vector.index {
            IndexKind::Flat => VectorIndex::Flat(build_flat(entries)?),
            IndexKind::Ivf => {
                let requested = config
                    .vector
                    .nlist
                    .unwrap_or_else(|| IvfParams::auto_nlist(corpus.len()));
                let ivf = build_ivf(
                    entries,
                    &IvfParams {
                        nlist: requested,
                        kmeans_iters: config.vector.kmeans_iters,
                        seed: config.seed,
                    },
                )?;
                if ivf.was_clamped() {
                    report.warnings.push(format!(
                        "nlist {requested} clamped to {} (corpus size)",
                        ivf.nlist()
                    ));
                }
                let wanted = config
                    .vector
                    .nprobe
                    .unwrap_or_else(|| SearchParams::default_nprobe(ivf.nlist()));
                let nprobe = wanted.min(ivf.nlist());
                if nprobe != wanted {
                    report
                        .warnings
                        .push(format!("nprobe {wanted} clamped to nlist {}", ivf.nlist()));
                }
                report.requested_nlist = Some(requested);
                report.nlist = Some(ivf.nlist());
                report.nprobe = Some(nprobe);
                VectorIndex::Ivf { index: ivf, nprobe }
            }
        };
        indexes.vector = Some(index);
    }
    Ok((indexes, report))
}

const INDEX_MANIFEST: &str = "indexes.json";

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    corpus_hash: String,
    lexical: bool,
    vector: bool,
}

/// Writes the built indexes to `dir`, tagged with the corpus hash.
pub fn save_indexes(indexes: &Indexes, corpus: &Corpus, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(lexical) = &indexes.lexical {
        save_index(lexical, &config.bm25, dir.join("lexical.json"))?;
    }
    if let Some(vector) = &indexes.vector {
        save_vector_index(vector, dir.join("vector.json"))?;
    }
    let manifest = IndexManifest {
        corpus_hash: corpus.content_hash(),
        lexical: indexes.lexical.is_some(),
        vector: indexes.vector.is_some(),
    };
    let path = dir.join(INDEX_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Loads indexes saved by [`save_indexes`], refusing ones built from a
/// different corpus or BM25 configuration.
pub fn load_indexes(dir: &Path, corpus: &Corpus, config: &ExperimentConfig) -> Result<Indexes> {
    let path = dir.join(INDEX_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: IndexManifest = serde_json::from_str(&text)?;
    let hash = corpus.content_hash();
    if manifest.corpus_hash != hash {
        return Err(Error::StaleIndex(format!(
            "indexes in {} were built from corpus {}, current corpus is {hash}",
            dir.display(),
            manifest.corpus_hash
        )));
    }
    Ok(Indexes {
        lexical: if manifest.lexical {
            Some(load_index(dir.join("lexical.json"), &config.bm25)?)
        } else {
            None
        },
        vector: if manifest.vector {
            Some(load_vector_index(dir.join("vector.json"))?)
        } else {
            None
        },
    })
}

/// Intermediate and final lists for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    /// Vector candidates (self removed, at most `k_vec`).
    pub vector: Option<RankedList>,
    /// BM25 over the candidates, or over the corpus for `bm25_full`.
    pub bm25: Option<RankedList>,
    pub fused: Option<RankedList>,
    pub final_list: RankedList,
    pub query_truncated: bool,
}

/// Read-only view of everything retrieval needs; safe to share across
/// threads.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub corpus: &'a Corpus,
    pub indexes: &'a Indexes,
    pub embedder: &'a dyn Embedder,
    pub scorer: &'a dyn PairScorer,
    pub config: &'a ExperimentConfig,
}

impl<'a> Retriever<'a> {
    pub fn new(corpus: &'a Corpus, indexes: &'a Indexes, models: &'a Models, config: &'a ExperimentConfig) -> Self {
        Retriever {
            corpus,
            indexes,
            embedder: models.embedder.as_ref(),
            scorer: models.scorer.as_ref(),
            config,
        }
    }

    /// Embeds query texts in one batch, cut to the document character cap.
    pub fn embed_queries(&self, queries: &[RoleQuery]) -> Result<Vec<Embedding>> {
        let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
        Ok(embed_texts(&texts, self.embedder, self.config.preprocess.max_doc_chars)?.vectors)
    }

    /// Final ranking for one query under `method`.
    pub fn retrieve(&self, query: &RoleQuery, method: Method) -> Result<RankedList> {
        Ok(self.retrieve_stages(query, None, method)?.final_list)
    }

    fn doc_text(&self, doc_id: &str) -> Option<String> {
        self.corpus
            .get(doc_id)
            .map(|d| truncate_chars(&d.body(), self.config.preprocess.max_doc_chars).to_owned())
    }

    /// Runs `method` for one query, keeping every intermediate list. Pass a
    /// precomputed query embedding to skip embedding here.
    pub fn retrieve_stages(
        &self,
        query: &RoleQuery,
        embedding: Option<&Embedding>,
        method: Method,
    ) -> Result<Stages> {
        let qid = query.query_id.as_str();
        let depth = self.config.report_depth();
        let k_vec = self.config.k_vec;
        let mut stages = Stages {
            vector: None,
            bm25: None,
            fused: None,
            final_list: RankedList::empty(qid, method.source()),
            query_truncated: false,
        };
        if method.uses_lexical() && self.indexes.lexical.is_none() {
            return Err(Error::MissingIndex { stage: "bm25" });
        }
        if method.uses_vector() && self.indexes.vector.is_none() {
            return Err(Error::MissingIndex { stage: "vector" });
        }
        if query.is_empty() {
            return Ok(stages);
        }

        let tokens = || tokenize(&query.text, &self.config.bm25);
        let vector = if method.uses_vector() {
            let index = self.indexes.vector.as_ref().expect("checked above");
            let owned;
            let emb = match embedding {
                Some(e) => e,
                None => {
                    owned = self.embed_queries(std::slice::from_ref(query))?.remove(0);
                    &owned
                }
            };
            let mut list = index.search(qid, emb, k_vec.saturating_add(1))?;
            list.remove_doc(qid);
            list.truncate(k_vec);
            Some(list)
        } else {
            None
        };
        let candidates = |list: &RankedList| -> BTreeSet<String> {
            list.entries.iter().map(|e| e.doc_id.clone()).collect()
        };
        let lexical = || self.indexes.lexical.as_ref().expect("checked above");

        let mut final_list = match method {
            Method::Bm25Full => {
                let mut list = search_full(qid, &tokens(), lexical(), &self.config.bm25, depth.saturating_add(1));
                list.remove_doc(qid);
                stages.bm25 = Some(list.clone());
                list
            }
            Method::Bm25Candidates => {
                let cands = candidates(vector.as_ref().expect("vector stage ran"));
                let list = score_candidates(qid, &tokens(), &cands, lexical(), &self.config.bm25)?;
                stages.bm25 = Some(list.clone());
                list
            }
            Method::Vector => vector.clone().expect("vector stage ran"),
            Method::CrossEncoder => {
                let vlist = vector.as_ref().expect("vector stage ran");
                let out = rerank(query, vlist, |id| self.doc_text(id), self.scorer, &self.config.rerank)?;
                stages.query_truncated = out.query_truncated;
                out.list
            }
            Method::TraceFull => {
                let vlist = vector.as_ref().expect("vector stage ran");
                let blist = score_candidates(qid, &tokens(), &candidates(vlist), lexical(), &self.config.bm25)?;
                let fused = rrf_fuse(&[vlist.clone(), blist.clone()], &self.config.rrf)?;
                let out = rerank(query, &fused, |id| self.doc_text(id), self.scorer, &self.config.rerank)?;
                stages.bm25 = Some(blist);
                stages.fused = Some(fused);
                stages.query_truncated = out.query_truncated;
                out.list
            }
        };
        final_list.truncate(depth);
        stages.vector = vector;
        stages.final_list = final_list;
        Ok(stages)
    }
}

/// Builds an ad-hoc query from free text.
pub fn text_query(query_id: &str, text: &str) -> RoleQuery {
    RoleQuery {
        query_id: query_id.to_owned(),
        config: "text".to_owned(),
        n_sentences: usize::from(!text.trim().is_empty()),
        text: text.to_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub engine_version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    #[serde(default)]
    pub corpus_hash: Option<String>,
    pub models: BTreeMap<String, String>,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
    pub stage_timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
    pub n_queries: usize,
    pub run_files: Vec<String>,
    #[serde(default)]
    pub index: Option<IndexReport>,
}

impl RunManifest {
    fn new(config: &ExperimentConfig, models: &Models) -> Self {
        RunManifest {
            status: RunStatus::Running,
            error: None,
            engine_version: env!("CARGO_PKG_VERSION").to_owned(),
            config: config.clone(),
            seed: config.seed,
            corpus_hash: None,
            models: models.description.clone(),
            started_at: now(),
            finished_at: None,
            stage_timings: Vec::new(),
            warnings: Vec::new(),
            n_queries: 0,
            run_files: Vec::new(),
            index: None,
        }
    }

    fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.stage_timings.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: EvalReport,
    pub manifest: RunManifest,
    pub output_dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const RUNS_DIR: &str = "runs";

/// Run file name for one role configuration and method.
pub fn run_file_name(config: &RoleConfig, method: Method) -> String {
    format!("{}.{}.run", config.name, method.name())
}

/// Loads the corpus, applies the configured annotator to query documents and
/// preprocessing to everything.
pub fn prepare_corpus(config: &ExperimentConfig, models: &Models, warnings: &mut Vec<String>) -> Result<Corpus> {
    let (corpus, load) = load_corpus(&config.corpus, config.corpus_format)?;
    warnings.extend(load.warnings.iter().map(|w| w.to_string()));
    let corpus = corpus.map_documents(|d| {
        if d.is_query() {
            annotate_document(d, &models.annotator)
        } else {
            Ok(d.clone())
        }
    })?;
    let masker = match (&config.preprocess.citation_pattern, config.preprocess.mask_citations) {
        (_, false) => None,
        (Some(p), true) => Some(CitationMasker::with_pattern(p)?),
        (None, true) => Some(CitationMasker::default()),
    };
    let (corpus, report) = preprocess(
        &corpus,
        &Identity,
        masker.as_ref(),
        config.preprocess.drop_citation_sentences,
    )?;
    if report.sentences_removed > 0 {
        warnings.push(format!("{} citation sentences dropped", report.sentences_removed));
    }
    for id in report.emptied_documents {
        warnings.push(format!("document {id:?} lost every sentence to citation dropping"));
    }
    Ok(corpus)
}

/// Runs every role configuration × method over every query document,
/// writing run files, qrels, report and manifest under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let models = Models::from_config(config)?;
    run_experiment_with(config, &models)
}

/// As [`run_experiment`] with caller-supplied models.
///
/// On failure the manifest is still written, marked failed, and any run
/// files already produced are left in place.
pub fn run_experiment_with(config: &ExperimentConfig, models: &Models) -> Result<RunArtifacts> {
    config.validate()?;
    let out = config.output_dir.clone();
    let runs_dir = out.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;

    let mut manifest = RunManifest::new(config, models);
    let result = run_stages(config, models, &out, &mut manifest);
    manifest.finished_at = Some(now());
    match &result {
        Ok(_) => manifest.status = RunStatus::Succeeded,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let report = result?;
    Ok(RunArtifacts {
        report,
        manifest,
        output_dir: out,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_stages(
    config: &ExperimentConfig,
    models: &Models,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<EvalReport> {
    let role_configs = config.role_configs()?;
    let corpus = manifest.time("load", |m| prepare_corpus(config, models, &mut m.warnings))?;
    manifest.corpus_hash = Some(corpus.content_hash());

    let qrels = Qrels::from_corpus(&corpus);
    let mut buf = Vec::new();
    qrels.write(&mut buf)?;
    write_file(&out.join(QRELS_FILE), &buf)?;

    let mut query_docs: Vec<_> = corpus.query_documents().collect();
    query_docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    manifest.n_queries = query_docs.len();
    if query_docs.is_empty() {
        manifest.warnings.push("corpus has no query documents (none cite another)".into());
    }

    let (indexes, index_report) = manifest.time("index", |_| {
        build_indexes(&corpus, config, models.embedder.as_ref(), &config.methods)
    })?;
    manifest.warnings.extend(index_report.warnings.iter().cloned());
    manifest.index = Some(index_report);

    let retriever = Retriever::new(&corpus, &indexes, models, config);
    let needs_vector = config.methods.iter().any(|m| m.uses_vector());
    let mut runs = Vec::new();

    for role in &role_configs {
        let queries = query_docs
            .iter()
            .map(|d| build_role_query(d, role))
            .collect::<Result<Vec<_>>>()?;
        let empty: Vec<&str> = queries.iter().filter(|q| q.is_empty()).map(|q| q.query_id.as_str()).collect();
        if !empty.is_empty() {
            manifest.warnings.push(format!(
                "{}: {} queries have no sentences with the selected roles: {}",
                role.name,
                empty.len(),
                empty.join(", ")
            ));
        }
        let embeddings = if needs_vector {
            manifest.time(format!("embed_queries:{}", role.name), |_| retriever.embed_queries(&queries))?
        } else {
            Vec::new()
        };

        for &method in &config.methods {
            let stages = manifest.time(format!("retrieve:{}:{}", role.name, method.name()), |_| {
                queries
                    .par_iter()
                    .enumerate()
                    .map(|(i, q)| retriever.retrieve_stages(q, embeddings.get(i), method))
                    .collect::<Result<Vec<_>>>()
            })?;
            let truncated = stages.iter().filter(|s| s.query_truncated).count();
            if truncated > 0 {
                manifest.warnings.push(format!(
                    "{}:{}: {truncated} queries cut to {} characters for re-ranking",
                    role.name,
                    method.name(),
                    config.rerank.max_chars
                ));
            }
            let lists: Vec<RankedList> = stages.into_iter().map(|s| s.final_list).collect();
            let name = run_file_name(role, method);
            let mut buf = Vec::new();
            write_run(&lists, method.name(), &mut buf)?;
            write_file(&out.join(RUNS_DIR).join(&name), &buf)?;
            manifest.run_files.push(format!("{RUNS_DIR}/{name}"));
            runs.push(RunOutput {
                config: role.label.clone(),
                method: method.label().to_owned(),
                lists,
            });
        }
    }

    let mut report = manifest.time("evaluate", |_| {
        sweep_and_report_by(&runs, &qrels, config.k_range(), config.best_k)
    })?;
    report.manifest = Some(MANIFEST_FILE.to_owned());
    write_file(&out.join(REPORT_JSON), &serde_json::to_vec_pretty(&report)?)?;
    write_file(&out.join(REPORT_TEXT), report.render_table().as_bytes())?;
    write_file(&out.join(REPORT_CSV), report.to_csv(false).as_bytes())?;
    Ok(report)
}
