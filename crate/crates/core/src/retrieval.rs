//! Embedding, exhaustive top-k cosine search over the knowledge-graph
//! item catalog, per-block query aggregation, and batch retrieval with
//! retrieval-call accounting.
//!
//! The index is an exhaustive scan by contract: results are exact,
//! including tie order (descending cosine, ties by ascending item id).

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocking::Block;
use crate::datamodel::{serialize_pair_query, Dataset};
use crate::{Error, Result};

/// Default embedding dimension for the deterministic local embedder.
pub const DEFAULT_DIMENSION: usize = 256;
/// Default character cap for aggregated block queries. The limit is
/// explicit and observable: oversized aggregates are truncated and
/// flagged.
pub const DEFAULT_QUERY_CHAR_CAP: usize = 8_000;

/// Text-to-vector contract. Implementations must be safe for concurrent
/// calls.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    fn dimension(&self) -> usize;
}

/// Deterministic local embedder: lowercase the text, hash character
/// 3-grams with FNV-1a-64 into `d` buckets, accumulate counts,
/// L2-normalize. Empty (or sub-3-gram) text maps to the zero vector.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 1, "embedding dimension must be >= 1");
        MockEmbedder { dimension }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder::new(DEFAULT_DIMENSION)
    }
}

fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Embedder for MockEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut buckets = vec![0.0f64; self.dimension];
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        for window in chars.windows(3) {
            let gram: String = window.iter().collect();
            let bucket = (fnv1a_64(gram.as_bytes()) % self.dimension as u64) as usize;
            buckets[bucket] += 1.0;
        }
        let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in buckets.iter_mut() {
                *v /= norm;
            }
        }
        Ok(buckets.into_iter().map(|v| v as f32).collect())
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Remote embedding endpoint: `POST {url}` with `{"texts": [...]}`
/// returning `{"vectors": [[...], ...]}`. Endpoint and key come from the
/// `BLOCKRAG_EMBEDDER_URL` / `BLOCKRAG_EMBEDDER_KEY` environment
/// variables unless set explicitly.
pub struct RemoteEmbedder {
    client: crate::httputil::RetryClient,
    url: String,
    api_key: Option<String>,
    dimension: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl RemoteEmbedder {
    pub fn new(url: String, api_key: Option<String>, dimension: usize) -> Result<Self> {
        Ok(RemoteEmbedder {
            client: crate::httputil::RetryClient::new()?,
            url,
            api_key,
            dimension,
        })
    }

    pub fn from_env(dimension: usize) -> Result<Self> {
        let url = std::env::var("BLOCKRAG_EMBEDDER_URL")
            .map_err(|_| Error::Config("BLOCKRAG_EMBEDDER_URL is not set".into()))?;
        let api_key = std::env::var("BLOCKRAG_EMBEDDER_KEY").ok();
        Self::new(url, api_key, dimension)
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let body = serde_json::to_value(EmbedRequest { texts: vec![text] })?;
        let response: EmbedResponse =
            self.client.post_json(&self.url, self.api_key.as_deref(), &body)?;
        let vector = response
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| Error::Http("embedder returned no vectors".into()))?;
        if vector.len() != self.dimension {
            return Err(Error::Index(format!(
                "embedder returned dimension {}, index expects {}",
                vector.len(),
                self.dimension
            )));
        }
        Ok(vector)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Kind of a knowledge-graph item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Entity,
    Predicate,
}

/// One line of the KG item catalog (JSON Lines on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub kind: ItemKind,
    pub label: String,
    #[serde(default)]
    pub description: String,
}

/// Read a JSON Lines catalog file.
pub fn load_catalog(path: &Path) -> Result<Vec<CatalogItem>> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: CatalogItem = serde_json::from_str(line).map_err(|e| Error::Load {
            file: path.display().to_string(),
            line: (i + 1) as u64,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexedItem {
    pub id: String,
    pub kind: ItemKind,
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub vector: Vec<f32>,
}

/// Immutable exhaustive-scan vector index over KG entities and
/// predicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorIndex {
    pub dimension: usize,
    pub items: Vec<IndexedItem>,
}

/// Cosine similarity with the zero-vector convention: either side having
/// zero norm yields 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

impl VectorIndex {
    /// Embed a catalog. Item text is the label, falling back to the bare
    /// id for unlabeled items.
    pub fn build(catalog: &[CatalogItem], embedder: &dyn Embedder) -> Result<Self> {
        let mut items = Vec::with_capacity(catalog.len());
        let mut seen = std::collections::HashSet::new();
        for entry in catalog {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Integrity(format!(
                    "duplicate catalog item id: {}",
                    entry.id
                )));
            }
            let text = if entry.label.is_empty() { &entry.id } else { &entry.label };
            items.push(IndexedItem {
                id: entry.id.clone(),
                kind: entry.kind,
                label: entry.label.clone(),
                description: entry.description.clone(),
                vector: embedder.embed(text)?,
            });
        }
        Ok(VectorIndex {
            dimension: embedder.dimension(),
            items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: VectorIndex = serde_json::from_slice(&fs::read(path)?)?;
        for item in &index.items {
            if item.vector.len() != index.dimension {
                return Err(Error::Index(format!(
                    "item {} has dimension {}, index expects {}",
                    item.id,
                    item.vector.len(),
                    index.dimension
                )));
            }
        }
        Ok(index)
    }

    /// Exhaustive top-k scan: items of the requested kind sorted by
    /// descending cosine similarity, ties broken by ascending item id.
    /// Returns `min(k, candidates)` items.
    pub fn topk(
        &self,
        query: &[f32],
        k: usize,
        kind_filter: Option<ItemKind>,
    ) -> Result<Vec<(String, f64)>> {
        if query.len() != self.dimension {
            return Err(Error::Index(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let mut scored: Vec<(&str, f64)> = self
            .items
            .iter()
            .filter(|item| kind_filter.map_or(true, |kind| item.kind == kind))
            .map(|item| (item.id.as_str(), cosine(query, &item.vector)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(b.0))
        });
        scored.truncate(k);
        Ok(scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }

    pub fn item(&self, id: &str) -> Option<&IndexedItem> {
        self.items.iter().find(|item| item.id == id)
    }
}

/// Retrieval settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Top-k items per retrieval call, >= 1.
    pub k: usize,
    pub granularity: Granularity,
    pub dimension: usize,
    /// Character cap for aggregated block queries.
    pub query_char_cap: usize,
    /// Bounded parallelism for concurrent block retrievals.
    pub parallelism: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 2,
            granularity: Granularity::Entity,
            dimension: DEFAULT_DIMENSION,
            query_char_cap: DEFAULT_QUERY_CHAR_CAP,
            parallelism: 4,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("retrieval k must be >= 1".into()));
        }
        Ok(())
    }

    /// Item kind searched for this granularity. Triple-granularity runs
    /// seed the graph search from retrieved entities.
    pub fn kind_filter(&self) -> ItemKind {
        match self.granularity {
            Granularity::Predicate => ItemKind::Predicate,
            Granularity::Entity | Granularity::Triple => ItemKind::Entity,
        }
    }
}

/// Granularity of retrieved context: entity/predicate nodes, or KG
/// triples expanded from entity seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Entity,
    Predicate,
    Triple,
}

/// Aggregated query for one block: pair queries joined by `\n`, truncated
/// at `char_cap` characters with the truncation flagged.
pub fn aggregate_block_query(
    block: &Block,
    dataset: &Dataset,
    char_cap: usize,
) -> Result<(String, bool)> {
    if block.pairs.is_empty() {
        return Err(Error::Usage(format!(
            "block {} has no pairs to aggregate",
            block.ordinal
        )));
    }
    let mut parts = Vec::with_capacity(block.pairs.len());
    for pair in &block.pairs {
        parts.push(serialize_pair_query(pair, dataset)?);
    }
    let joined = parts.join("\n");
    if joined.chars().count() > char_cap {
        Ok((joined.chars().take(char_cap).collect(), true))
    } else {
        Ok((joined, false))
    }
}

/// A ranked retrieval seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seed {
    pub id: String,
    pub score: f64,
}

/// Retrieval outcome for one block (batch mode) with per-block flags. A
/// failed block carries empty seeds and the error text; it does not abort
/// the run.
#[derive(Debug, Clone)]
pub struct BlockSeeds {
    pub ordinal: usize,
    pub seeds: Vec<Seed>,
    pub truncated: bool,
    pub error: Option<String>,
}

/// Per-pair retrieval outcome for one block (per-query mode).
#[derive(Debug, Clone)]
pub struct BlockPairSeeds {
    pub ordinal: usize,
    pub per_pair: Vec<BlockSeeds>,
}

fn run_with_pool<T: Send>(parallelism: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

fn retrieve_one(
    text: &str,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
    rac: &AtomicUsize,
) -> Result<Vec<Seed>> {
    rac.fetch_add(1, Ordering::Relaxed);
    let query = embedder.embed(text)?;
    let ranked = index.topk(&query, config.k, Some(config.kind_filter()))?;
    Ok(ranked.into_iter().map(|(id, score)| Seed { id, score }).collect())
}

/// Batch retrieval: exactly one embed+topk invocation per (sub-)block;
/// `rac_count` equals the number of blocks.
pub fn batch_retrieve(
    blocks: &[Block],
    dataset: &Dataset,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<(Vec<BlockSeeds>, usize)> {
    config.validate()?;
    let rac = AtomicUsize::new(0);
    let results: Vec<BlockSeeds> = run_with_pool(config.parallelism, || {
        blocks
            .par_iter()
            .map(|block| match aggregate_block_query(block, dataset, config.query_char_cap) {
                Ok((text, truncated)) => {
                    match retrieve_one(&text, index, embedder, config, &rac) {
                        Ok(seeds) => BlockSeeds {
                            ordinal: block.ordinal,
                            seeds,
                            truncated,
                            error: None,
                        },
                        Err(e) => BlockSeeds {
                            ordinal: block.ordinal,
                            seeds: Vec::new(),
                            truncated,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Err(e) => BlockSeeds {
                    ordinal: block.ordinal,
                    seeds: Vec::new(),
                    truncated: false,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    })?;
    Ok((results, rac.load(Ordering::Relaxed)))
}

/// Per-query retrieval (vanilla-RAG baseline): one embed+topk call per
/// pair; `rac_count` equals the pair count.
pub fn per_query_retrieve(
    blocks: &[Block],
    dataset: &Dataset,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<(Vec<BlockPairSeeds>, usize)> {
    config.validate()?;
    let rac = AtomicUsize::new(0);
    let results: Vec<BlockPairSeeds> = run_with_pool(config.parallelism, || {
        blocks
            .par_iter()
            .map(|block| {
                let per_pair = block
                    .pairs
                    .iter()
                    .map(|pair| match serialize_pair_query(pair, dataset) {
                        Ok(text) => match retrieve_one(&text, index, embedder, config, &rac) {
                            Ok(seeds) => BlockSeeds {
                                ordinal: block.ordinal,
                                seeds,
                                truncated: false,
                                error: None,
                            },
                            Err(e) => BlockSeeds {
                                ordinal: block.ordinal,
                                seeds: Vec::new(),
                                truncated: false,
                                error: Some(e.to_string()),
                            },
                        },
                        Err(e) => BlockSeeds {
                            ordinal: block.ordinal,
                            seeds: Vec::new(),
                            truncated: false,
                            error: Some(e.to_string()),
                        },
                    })
                    .collect();
                BlockPairSeeds {
                    ordinal: block.ordinal,
                    per_pair,
                }
            })
            .collect()
    })?;
    Ok((results, rac.load(Ordering::Relaxed)))
}
