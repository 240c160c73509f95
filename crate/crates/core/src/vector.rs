//! Dense embeddings and L2 nearest-neighbour search.
//!
//! [`FlatIndex`] is exact brute force. [`IvfFlatIndex`] partitions vectors
//! into `nlist` k-means cells and scans only the `nprobe` cells whose
//! centroids are nearest the query; with `nprobe == nlist` it returns exactly
//! what the flat index returns.
//!
//! Result lists use `score = -distance` so every ranked list in the engine is
//! sorted by descending score.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{RankedList, Source};
use crate::lexical::{tokenize, Bm25Config};

pub const DEFAULT_DIMENSION: usize = 768;
pub const DEFAULT_CHAR_CAP: usize = 60_000;
pub const MAX_NLIST: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn zeros(dimension: usize) -> Self {
        Embedding(vec![0.0; dimension])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Euclidean distance, accumulated in f64.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn l2_distance_f64(a: &[f32], centroid: &[f64]) -> f64 {
    a.iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Turns text into fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// One vector per input, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

/// Feature-hashes token counts into `dimension` buckets (signed by a hash
/// bit) and L2-normalises. Empty input gives the zero vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    tokenizer: Bm25Config,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder {
            dimension,
            tokenizer: Bm25Config::default(),
        }
    }

    pub fn embed(&self, text: &str) -> Embedding {
        let mut acc = vec![0.0f64; self.dimension];
        for token in tokenize(text, &self.tokenizer) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut acc {
                *v /= norm;
            }
        }
        Embedding(acc.into_iter().map(|v| v as f32).collect())
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.par_iter().map(|t| self.embed(t)).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Truncates to at most `cap` characters.
pub fn truncate_chars(text: &str, cap: usize) -> &str {
    match text.char_indices().nth(cap) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddedTexts {
    pub vectors: Vec<Embedding>,
    /// Input positions that were cut to the character cap.
    pub truncated: Vec<usize>,
    /// Input positions that produced a zero vector.
    pub zero: Vec<usize>,
}

/// Embeds texts after cutting each to `char_cap` characters, checking the
/// embedder honoured the length and dimension contract.
pub fn embed_texts(
    texts: &[String],
    embedder: &dyn Embedder,
    char_cap: usize,
) -> Result<EmbeddedTexts> {
    let mut truncated = Vec::new();
    let inputs: Vec<String> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let cut = truncate_chars(t, char_cap);
            if cut.len() < t.len() {
                truncated.push(i);
            }
            cut.to_owned()
        })
        .collect();
    let vectors = embedder.embed_batch(&inputs)?;
    if vectors.len() != inputs.len() {
        return Err(Error::Protocol(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            inputs.len()
        )));
    }
    let dim = embedder.dimension();
    let mut zero = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::Protocol(format!(
                "embedder returned dimension {} for text {i}, advertised {dim}",
                v.dim()
            )));
        }
        if !v.is_finite() {
            return Err(Error::Protocol(format!(
                "embedder returned non-finite values for text {i}"
            )));
        }
        if v.norm() == 0.0 {
            zero.push(i);
        }
    }
    Ok(EmbeddedTexts {
        vectors,
        truncated,
        zero,
    })
}

fn collect_entries<I>(embeddings: I) -> Result<(usize, Vec<String>, Vec<Embedding>)>
where
    I: IntoIterator<Item = (String, Embedding)>,
{
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (id, v) in embeddings {
        let expected = *dim.get_or_insert(v.dim());
        if v.dim() != expected {
            return Err(Error::Dimension {
                id,
                expected,
                actual: v.dim(),
            });
        }
        if !v.is_finite() {
            return Err(Error::Precondition(format!(
                "embedding for {id:?} has non-finite values"
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateDocId(id));
        }
        ids.push(id);
        vectors.push(v);
    }
    Ok((dim.unwrap_or(0), ids, vectors))
}

fn check_query(dim: usize, query: &Embedding) -> Result<()> {
    if query.dim() != dim {
        return Err(Error::Dimension {
            id: "<query>".into(),
            expected: dim,
            actual: query.dim(),
        });
    }
    Ok(())
}

fn by_distance_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

fn ranked_by_distance(query_id: &str, mut hits: Vec<(f64, &str)>, top_k: usize) -> RankedList {
    hits.sort_by(by_distance_then_id);
    hits.truncate(top_k);
    RankedList::from_ordered(
        query_id,
        Source::Vector,
        hits.into_iter().map(|(d, id)| (id.to_owned(), -d)).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
}

pub fn build_flat<I>(embeddings: I) -> Result<FlatIndex>
where
    I: IntoIterator<Item = (String, Embedding)>,
{
    let (dim, ids, vectors) = collect_entries(embeddings)?;
    Ok(FlatIndex { dim, ids, vectors })
}

impl FlatIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Exact top-k by ascending L2 distance, ties by doc_id.
    pub fn search(&self, query_id: &str, query: &Embedding, top_k: usize) -> Result<RankedList> {
        if self.is_empty() {
            return Ok(RankedList::empty(query_id, Source::Vector));
        }
        check_query(self.dim, query)?;
        let hits = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (l2_distance(query.values(), v.values()), id.as_str()))
            .collect();
        Ok(ranked_by_distance(query_id, hits, top_k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfParams {
    pub nlist: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl IvfParams {
    /// `min(2048, ceil(sqrt(n)))`, at least 1.
    pub fn auto_nlist(n_vectors: usize) -> usize {
        ((n_vectors as f64).sqrt().ceil() as usize).clamp(1, MAX_NLIST)
    }

    pub fn for_size(n_vectors: usize, seed: u64) -> Self {
        IvfParams {
            nlist: Self::auto_nlist(n_vectors),
            kmeans_iters: 20,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub nprobe: usize,
    pub top_k: usize,
}

impl SearchParams {
    /// `ceil(nlist / 16)` probes.
    pub fn default_nprobe(nlist: usize) -> usize {
        nlist.div_ceil(16).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvfFlatIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    centroids: Vec<Vec<f64>>,
    /// Member positions per cell, ascending.
    cells: Vec<Vec<u32>>,
    params: IvfParams,
    requested_nlist: usize,
}

fn nearest_centroid(v: &[f32], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = l2_distance_f64(v, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn assign_all(vectors: &[Embedding], centroids: &[Vec<f64>]) -> Vec<usize> {
    vectors
        .par_iter()
        .map(|v| nearest_centroid(v.values(), centroids))
        .collect()
}

fn recompute_centroids(vectors: &[Embedding], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = centroids.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (v, &c) in vectors.iter().zip(assignment) {
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(v.values()) {
            *s += f64::from(x);
        }
    }
    for (c, centroid) in centroids.iter_mut().enumerate() {
        if counts[c] > 0 {
            for (dst, s) in centroid.iter_mut().zip(&sums[c]) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

/// Moves the farthest member of the largest cell into each empty cell.
fn reseed_empty_cells(
    vectors: &[Embedding],
    assignment: &mut [usize],
    centroids: &mut [Vec<f64>],
) {
    let nlist = centroids.len();
    loop {
        let mut counts = vec![0usize; nlist];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        // Largest cell; lowest index on ties.
        let (largest, &size) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .expect("nlist >= 1");
        if size < 2 {
            return;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, v) in vectors.iter().enumerate() {
            if assignment[i] == largest {
                let d = l2_distance_f64(v.values(), &centroids[largest]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let far = far.expect("largest cell is non-empty");
        assignment[far] = empty;
        centroids[empty] = vectors[far].values().iter().map(|&x| f64::from(x)).collect();
    }
}

/// Seeded Lloyd's k-means partition. `nlist` is clamped to the number of
/// vectors.
pub fn build_ivf<I>(embeddings: I, params: &IvfParams) -> Result<IvfFlatIndex>
where
    I: IntoIterator<Item = (String, Embedding)>,
{
    let (dim, ids, vectors) = collect_entries(embeddings)?;
    if vectors.is_empty() {
        return Err(Error::Precondition(
            "cannot build an IVF index over zero vectors".into(),
        ));
    }
    if params.nlist == 0 || params.kmeans_iters == 0 {
        return Err(Error::Config(format!(
            "ivf nlist and kmeans_iters must be >= 1, got {params:?}"
        )));
    }
    let nlist = params.nlist.min(vectors.len());

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut seeds = rand::seq::index::sample(&mut rng, vectors.len(), nlist).into_vec();
    seeds.sort_unstable();
    let mut centroids: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&i| vectors[i].values().iter().map(|&x| f64::from(x)).collect())
        .collect();

    let mut assignment = assign_all(&vectors, &centroids);
    for _ in 0..params.kmeans_iters {
        reseed_empty_cells(&vectors, &mut assignment, &mut centroids);
        recompute_centroids(&vectors, &assignment, &mut centroids);
        let next = assign_all(&vectors, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let mut cells = vec![Vec::new(); nlist];
    for (i, &c) in assignment.iter().enumerate() {
        cells[c].push(i as u32);
    }

    Ok(IvfFlatIndex {
        dim,
        ids,
        vectors,
        centroids,
        cells,
        params: IvfParams { nlist, ..*params },
        requested_nlist: params.nlist,
    })
}

impl IvfFlatIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Effective partition count after clamping.
    pub fn nlist(&self) -> usize {
        self.centroids.len()
    }

    pub fn params(&self) -> &IvfParams {
        &self.params
    }

    /// True when the requested nlist exceeded the vector count.
    pub fn was_clamped(&self) -> bool {
        self.requested_nlist != self.params.nlist
    }

    pub fn requested_nlist(&self) -> usize {
        self.requested_nlist
    }

    /// Doc ids per cell.
    pub fn cell_members(&self) -> Vec<Vec<&str>> {
        self.cells
            .iter()
            .map(|cell| cell.iter().map(|&i| self.ids[i as usize].as_str()).collect())
            .collect()
    }

    /// The `nprobe` cells nearest the query, nearest first.
    pub fn probe_order(&self, query: &Embedding, nprobe: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(c, centroid)| (l2_distance_f64(query.values(), centroid), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        order.into_iter().take(nprobe).map(|(_, c)| c).collect()
    }

    pub fn search(
        &self,
        query_id: &str,
        query: &Embedding,
        params: &SearchParams,
    ) -> Result<RankedList> {
        if params.nprobe == 0 || params.nprobe > self.nlist() {
            return Err(Error::Config(format!(
                "nprobe must be in 1..={}, got {}",
                self.nlist(),
                params.nprobe
            )));
        }
        check_query(self.dim, query)?;
        let hits = self
            .probe_order(query, params.nprobe)
            .into_iter()
            .flat_map(|c| self.cells[c].iter())
            .map(|&i| {
                let i = i as usize;
                (
                    l2_distance(query.values(), self.vectors[i].values()),
                    self.ids[i].as_str(),
                )
            })
            .collect();
        Ok(ranked_by_distance(query_id, hits, params.top_k))
    }
}

/// A built vector index plus the probe depth to search it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorIndex {
    Flat(FlatIndex),
    Ivf { index: IvfFlatIndex, nprobe: usize },
}

impl VectorIndex {
    pub fn search(&self, query_id: &str, query: &Embedding, top_k: usize) -> Result<RankedList> {
        match self {
            VectorIndex::Flat(flat) => flat.search(query_id, query, top_k),
            VectorIndex::Ivf { index, nprobe } => index.search(
                query_id,
                query,
                &SearchParams {
                    nprobe: *nprobe,
                    top_k,
                },
            ),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            VectorIndex::Flat(f) => f.dimension(),
            VectorIndex::Ivf { index, .. } => index.dimension(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VectorIndex::Flat(f) => f.len(),
            VectorIndex::Ivf { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const VECTOR_FORMAT: &str = "precedent-vector-index";
const VECTOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct VectorFile {
    format: String,
    version: u32,
    dimension: usize,
    index: VectorIndex,
}

pub fn save_vector_index(index: &VectorIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(
        BufWriter::new(file),
        &VectorFile {
            format: VECTOR_FORMAT.into(),
            version: VECTOR_VERSION,
            dimension: index.dimension(),
            index: index.clone(),
        },
    )?;
    Ok(())
}

pub fn load_vector_index(path: impl AsRef<Path>) -> Result<VectorIndex> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let body: VectorFile = serde_json::from_reader(BufReader::new(file))?;
    if body.format != VECTOR_FORMAT || body.version != VECTOR_VERSION {
        return Err(Error::StaleIndex(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            body.format,
            body.version
        )));
    }
    if body.dimension != body.index.dimension() {
        return Err(Error::StaleIndex(format!(
            "{}: header dimension {} disagrees with stored vectors ({})",
            path.display(),
            body.dimension,
            body.index.dimension()
        )));
    }
    Ok(body.index)
}
