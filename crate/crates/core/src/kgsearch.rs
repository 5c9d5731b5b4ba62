//! Triple search over the knowledge graph from retrieved seeds (bounded
//! BFS between seed pairs, one-hop neighborhood expansion), enrichment of
//! identifiers into `ID (description)` text, and ranking-based refinement
//! to Top-k context.
//!
//! BFS traverses edges undirected by default (a config switch restores
//! directed traversal) but always reports triples in their stored
//! orientation. It emits one shortest path per seed pair, the first found
//! under the deterministic visit order (neighbors ascending by
//! `(predicate_id, neighbor_id)`).

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::retrieval::{CatalogItem, ItemKind};
use crate::{Error, Result};

/// A directed typed edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub predicate: String,
    pub tail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ItemInfo {
    pub label: String,
    pub description: String,
}

/// Entity and predicate catalogs plus directed typed edges, with
/// adjacency precomputed in both directions. Immutable after load.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    pub entities: HashMap<String, ItemInfo>,
    pub predicates: HashMap<String, ItemInfo>,
    pub edges: Vec<Triple>,
    /// node -> sorted [(predicate_id, other_endpoint, edge index)] over
    /// out-edges.
    out_adjacency: HashMap<String, Vec<(String, String, usize)>>,
    /// Same over in-edges (other endpoint is the head).
    in_adjacency: HashMap<String, Vec<(String, String, usize)>>,
}

impl KnowledgeGraph {
    pub fn new(catalog: Vec<CatalogItem>, edges: Vec<Triple>) -> Result<Self> {
        let mut kg = KnowledgeGraph::default();
        for item in catalog {
            let info = ItemInfo {
                label: item.label,
                description: item.description,
            };
            let map = match item.kind {
                ItemKind::Entity => &mut kg.entities,
                ItemKind::Predicate => &mut kg.predicates,
            };
            if map.insert(item.id.clone(), info).is_some() {
                return Err(Error::Integrity(format!("duplicate catalog id: {}", item.id)));
            }
        }
        let mut seen = HashSet::new();
        for edge in &edges {
            if !kg.entities.contains_key(&edge.head) {
                return Err(Error::Integrity(format!(
                    "edge head {} is not in the entity catalog",
                    edge.head
                )));
            }
            if !kg.entities.contains_key(&edge.tail) {
                return Err(Error::Integrity(format!(
                    "edge tail {} is not in the entity catalog",
                    edge.tail
                )));
            }
            if !kg.predicates.contains_key(&edge.predicate) {
                return Err(Error::Integrity(format!(
                    "edge predicate {} is not in the predicate catalog",
                    edge.predicate
                )));
            }
            if !seen.insert(edge.clone()) {
                return Err(Error::Integrity(format!(
                    "duplicate edge <{}, {}, {}>",
                    edge.head, edge.predicate, edge.tail
                )));
            }
        }
        kg.edges = edges;
        for (i, edge) in kg.edges.iter().enumerate() {
            kg.out_adjacency
                .entry(edge.head.clone())
                .or_default()
                .push((edge.predicate.clone(), edge.tail.clone(), i));
            kg.in_adjacency
                .entry(edge.tail.clone())
                .or_default()
                .push((edge.predicate.clone(), edge.head.clone(), i));
        }
        for list in kg.out_adjacency.values_mut().chain(kg.in_adjacency.values_mut()) {
            list.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        }
        Ok(kg)
    }

    /// Load from a JSON Lines item catalog and a TSV edges file
    /// (`head<TAB>predicate<TAB>tail`).
    pub fn load(catalog_path: &Path, edges_path: &Path) -> Result<Self> {
        let catalog = crate::retrieval::load_catalog(catalog_path)?;
        let text = std::fs::read_to_string(edges_path)?;
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Load {
                    file: edges_path.display().to_string(),
                    line: (i + 1) as u64,
                    message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            edges.push(Triple {
                head: fields[0].to_string(),
                predicate: fields[1].to_string(),
                tail: fields[2].to_string(),
            });
        }
        KnowledgeGraph::new(catalog, edges)
    }

    pub fn contains_entity(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    /// Traversal neighbors of `node`, ascending by `(predicate_id,
    /// neighbor_id)`. Undirected traversal merges both edge directions.
    fn neighbors(&self, node: &str, directed: bool) -> Vec<(&str, &str, usize)> {
        let mut all: Vec<(&str, &str, usize)> = match self.out_adjacency.get(node) {
            Some(out) => out.iter().map(|(p, o, i)| (p.as_str(), o.as_str(), *i)).collect(),
            None => Vec::new(),
        };
        if directed {
            return all;
        }
        if let Some(inn) = self.in_adjacency.get(node) {
            all.extend(inn.iter().map(|(p, o, i)| (p.as_str(), o.as_str(), *i)));
        }
        all.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        all
    }

    /// Incident edges of `node` in both orientations, ascending by
    /// `(predicate_id, other_endpoint)`; edge indices into [`Self::edges`].
    pub fn incident_edges(&self, node: &str) -> Vec<usize> {
        let mut incident: Vec<(&str, &str, usize)> = Vec::new();
        if let Some(out) = self.out_adjacency.get(node) {
            incident.extend(out.iter().map(|(p, o, i)| (p.as_str(), o.as_str(), *i)));
        }
        if let Some(inn) = self.in_adjacency.get(node) {
            incident.extend(inn.iter().map(|(p, o, i)| (p.as_str(), o.as_str(), *i)));
        }
        incident.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        incident.into_iter().map(|(_, _, i)| i).collect()
    }
}

/// Triple search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// BFS depth bound, >= 1.
    pub d_max: usize,
    /// One-hop triples kept per seed under EXP.
    pub exp_neighbor_cap: usize,
    /// Triples kept after refinement.
    pub triple_top_k: usize,
    /// Traverse edges directed instead of undirected.
    pub directed: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            d_max: 3,
            exp_neighbor_cap: 20,
            triple_top_k: 2,
            directed: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_max < 1 {
            return Err(Error::Config("d_max must be >= 1".into()));
        }
        if self.exp_neighbor_cap < 1 || self.triple_top_k < 1 {
            return Err(Error::Config("search caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// A triple with its refinement-ordering metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedTriple {
    pub triple: Triple,
    /// 1-based rank of the seed that produced the triple (0 for BFS,
    /// where emission order is the key).
    pub seed_rank: usize,
    /// Emission index within the search output.
    pub seq: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOutput {
    pub triples: Vec<RankedTriple>,
    /// Seeds absent from the graph, skipped with a warning.
    pub warnings: Vec<String>,
    /// Nodes dequeued/visited, for traversal cost comparison.
    pub visited_nodes: usize,
}

/// First shortest undirected (or directed) path of length <= `d_max`
/// between two nodes, as edge indices in traversal order. Neighbor visit
/// order is ascending `(predicate_id, neighbor_id)`, FIFO queue.
pub fn bfs_path(
    kg: &KnowledgeGraph,
    src: &str,
    dst: &str,
    config: &SearchConfig,
) -> (Option<Vec<usize>>, usize) {
    let mut visited: HashSet<&str> = HashSet::new();
    let mut parent: HashMap<&str, (&str, usize)> = HashMap::new();
    let mut queue: VecDeque<(&str, usize)> = VecDeque::new();
    let mut dequeued = 0usize;
    visited.insert(src);
    queue.push_back((src, 0));
    let mut found = false;
    'outer: while let Some((node, depth)) = queue.pop_front() {
        dequeued += 1;
        if depth >= config.d_max {
            continue;
        }
        for (_, neighbor, edge_idx) in kg.neighbors(node, config.directed) {
            if visited.contains(neighbor) {
                continue;
            }
            visited.insert(neighbor);
            parent.insert(neighbor, (node, edge_idx));
            if neighbor == dst {
                found = true;
                break 'outer;
            }
            queue.push_back((neighbor, depth + 1));
        }
    }
    if !found {
        return (None, dequeued);
    }
    let mut path = Vec::new();
    let mut node = dst;
    while node != src {
        let (prev, edge_idx) = parent[node];
        path.push(edge_idx);
        node = prev;
    }
    path.reverse();
    (Some(path), dequeued)
}

/// BFS triple search: for each unordered seed pair `(i < j)` in rank
/// order, emit the connecting path's triples (stored orientation, source
/// to destination), concatenated in pair order with duplicate triples
/// dropped at first occurrence.
pub fn bfs_triples(kg: &KnowledgeGraph, seeds: &[String], config: &SearchConfig) -> SearchOutput {
    let mut output = SearchOutput::default();
    let mut present: Vec<&String> = Vec::new();
    let mut seen_seed = HashSet::new();
    for seed in seeds {
        if !seen_seed.insert(seed) {
            continue;
        }
        if kg.contains_entity(seed) {
            present.push(seed);
        } else {
            output.warnings.push(format!("seed {seed} is not in the knowledge graph"));
        }
    }
    let mut emitted = HashSet::new();
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let (path, visited) = bfs_path(kg, present[i], present[j], config);
            output.visited_nodes += visited;
            if let Some(edge_indices) = path {
                for edge_idx in edge_indices {
                    let triple = &kg.edges[edge_idx];
                    if emitted.insert(triple.clone()) {
                        output.triples.push(RankedTriple {
                            triple: triple.clone(),
                            seed_rank: 0,
                            seq: output.triples.len(),
                        });
                    }
                }
            }
        }
    }
    output
}

/// One-hop neighborhood expansion: for each seed in rank order, emit its
/// incident edges in both orientations sorted ascending by
/// `(predicate_id, other_endpoint)`, capped per seed, duplicates across
/// seeds dropped at first occurrence. Output order mirrors seed rank;
/// that ordering is the refinement key.
pub fn exp_triples(kg: &KnowledgeGraph, seeds: &[String], config: &SearchConfig) -> SearchOutput {
    let mut output = SearchOutput::default();
    let mut emitted = HashSet::new();
    let mut seen_seed = HashSet::new();
    let mut rank = 0usize;
    for seed in seeds {
        if !seen_seed.insert(seed.clone()) {
            continue;
        }
        if !kg.contains_entity(seed) {
            output.warnings.push(format!("seed {seed} is not in the knowledge graph"));
            continue;
        }
        rank += 1;
        output.visited_nodes += 1;
        let mut kept = 0usize;
        for edge_idx in kg.incident_edges(seed) {
            if kept >= config.exp_neighbor_cap {
                break;
            }
            kept += 1;
            let triple = &kg.edges[edge_idx];
            if emitted.insert(triple.clone()) {
                output.triples.push(RankedTriple {
                    triple: triple.clone(),
                    seed_rank: rank,
                    seq: output.triples.len(),
                });
            }
        }
    }
    output
}

// ---------------------------------------------------------------------------
// Enrichment
// ---------------------------------------------------------------------------

/// Descriptive text lookup for a KG identifier. `describe` returns the
/// best available text (description, falling back to label) or `None`.
pub trait DescriptionProvider: Send + Sync {
    fn describe(&self, id: &str) -> Option<String>;
    /// Remote lookups that failed and fell back.
    fn miss_count(&self) -> usize {
        0
    }
}

/// Offline provider backed by the local entity/predicate catalogs. The
/// default: tests never touch the network.
pub struct CatalogProvider<'a> {
    kg: &'a KnowledgeGraph,
}

impl<'a> CatalogProvider<'a> {
    pub fn new(kg: &'a KnowledgeGraph) -> Self {
        CatalogProvider { kg }
    }
}

fn info_text(info: &ItemInfo) -> Option<String> {
    if !info.description.is_empty() {
        Some(info.description.clone())
    } else if !info.label.is_empty() {
        Some(info.label.clone())
    } else {
        None
    }
}

impl DescriptionProvider for CatalogProvider<'_> {
    fn describe(&self, id: &str) -> Option<String> {
        self.kg
            .entities
            .get(id)
            .or_else(|| self.kg.predicates.get(id))
            .and_then(info_text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedDescription {
    found: bool,
    #[serde(default)]
    text: String,
}

/// Remote REST lookup with a persistent JSON cache: `GET {base}/{id}`
/// returning `{"label": ..., "description": ...}`. Local catalog entries
/// win; remote failures fall back and bump the miss counter, never abort.
pub struct RemoteDescriptionProvider<'a> {
    local: CatalogProvider<'a>,
    client: crate::httputil::RetryClient,
    base_url: String,
    cache_path: std::path::PathBuf,
    cache: Mutex<HashMap<String, CachedDescription>>,
    misses: AtomicUsize,
}

#[derive(Deserialize)]
struct RemoteItem {
    #[serde(default)]
    label: String,
    #[serde(default)]
    description: String,
}

impl<'a> RemoteDescriptionProvider<'a> {
    pub fn new(kg: &'a KnowledgeGraph, base_url: String, cache_path: &Path) -> Result<Self> {
        let cache = if cache_path.exists() {
            serde_json::from_slice(&std::fs::read(cache_path)?)?
        } else {
            HashMap::new()
        };
        Ok(RemoteDescriptionProvider {
            local: CatalogProvider::new(kg),
            client: crate::httputil::RetryClient::new()?,
            base_url,
            cache_path: cache_path.to_path_buf(),
            cache: Mutex::new(cache),
            misses: AtomicUsize::new(0),
        })
    }

    fn persist(&self, cache: &HashMap<String, CachedDescription>) {
        if let Ok(bytes) = serde_json::to_vec(cache) {
            let _ = std::fs::write(&self.cache_path, bytes);
        }
    }
}

impl DescriptionProvider for RemoteDescriptionProvider<'_> {
    fn describe(&self, id: &str) -> Option<String> {
        if let Some(text) = self.local.describe(id) {
            return Some(text);
        }
        {
            let cache = self.cache.lock().unwrap();
            if let Some(entry) = cache.get(id) {
                return entry.found.then(|| entry.text.clone());
            }
        }
        let url = format!("{}/{}", self.base_url.trim_end_matches('/'), id);
        let fetched: Result<RemoteItem> = self.client.get_json(&url, None);
        let entry = match fetched {
            Ok(item) => {
                let text = if !item.description.is_empty() {
                    item.description
                } else {
                    item.label
                };
                CachedDescription {
                    found: !text.is_empty(),
                    text,
                }
            }
            Err(_) => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                CachedDescription {
                    found: false,
                    text: String::new(),
                }
            }
        };
        let result = entry.found.then(|| entry.text.clone());
        let mut cache = self.cache.lock().unwrap();
        cache.insert(id.to_string(), entry);
        self.persist(&cache);
        result
    }

    fn miss_count(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

/// `ID (description)`, falling back to the bare `ID` when no description
/// or label is known.
pub fn enrich_node(id: &str, provider: &dyn DescriptionProvider) -> String {
    match provider.describe(id) {
        Some(text) => format!("{id} ({text})"),
        None => id.to_string(),
    }
}

/// `<H (dh), P (dp), T (dt)>`, each component with the node fallback
/// chain.
pub fn enrich_triple(triple: &Triple, provider: &dyn DescriptionProvider) -> String {
    format!(
        "<{}, {}, {}>",
        enrich_node(&triple.head, provider),
        enrich_node(&triple.predicate, provider),
        enrich_node(&triple.tail, provider)
    )
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

/// Where a context item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    Vector,
    Exp,
    Bfs,
}

/// An enriched candidate carrying its source ordering metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextCandidate {
    pub text: String,
    pub source: ContextSource,
    /// Seed rank for EXP triples; 0 for vector nodes and BFS triples.
    pub seed_rank: usize,
    /// Position in the source ordering (retrieval rank or emission
    /// index).
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextItem {
    /// Contiguous from 1.
    pub rank: usize,
    pub text: String,
    pub source: ContextSource,
    pub seed_rank: usize,
}

/// Refined, enriched knowledge attached to a (sub-)block before
/// generation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextBundle {
    pub block: usize,
    pub items: Vec<ContextItem>,
}

impl ContextBundle {
    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|item| item.text.clone()).collect()
    }
}

/// Keep the first `top_k` candidates in their defined ordering
/// (`(seed_rank, seq)`: retrieval-score order for nodes, seed-rank then
/// sort order for EXP, emission order for BFS) and renumber ranks from 1.
/// A shuffled input with intact metadata refines identically.
pub fn refine(block: usize, mut candidates: Vec<ContextCandidate>, top_k: usize) -> ContextBundle {
    candidates.sort_by_key(|c| (c.seed_rank, c.seq));
    candidates.truncate(top_k);
    ContextBundle {
        block,
        items: candidates
            .into_iter()
            .enumerate()
            .map(|(i, c)| ContextItem {
                rank: i + 1,
                text: c.text,
                source: c.source,
                seed_rank: c.seed_rank,
            })
            .collect(),
    }
}
