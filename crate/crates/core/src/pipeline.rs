//! Orchestration of the eight run variants: stage gating, per-stage
//! timing, decision/report emission, and parameter sweeps.
//!
//! Stage boundaries are module entry/exit on a monotonic clock, so
//! `seconds_total` decomposes exactly into the five stage columns.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::blocking::{self, Block, BlockingMethod};
use crate::config::{BackendKind, RunConfig, Traversal};
use crate::datamodel::{serialize_pair_query, Dataset, MatchDecision, Provenance};
use crate::evaluation::{self, CsvRow, Report, RunMetrics, StageSeconds};
use crate::generation::{
    self, CompletionBackend, MockBackend, ParseStatus, ParsedDecision, RemoteBackend,
};
use crate::kgsearch::{
    enrich_node, enrich_triple, refine, CatalogProvider, ContextCandidate, ContextSource,
    DescriptionProvider, KnowledgeGraph, SearchOutput,
};
use crate::retrieval::{
    self, Embedder, Granularity, MockEmbedder, RemoteEmbedder, Seed, VectorIndex,
};
use crate::{Error, Result};

/// Inputs shared across runs: dataset, vector index, graph, and the
/// pluggable backends. Built once per run or once per sweep.
pub struct Prepared {
    pub dataset: Dataset,
    pub index: Option<VectorIndex>,
    pub kg: Option<KnowledgeGraph>,
    pub embedder: Box<dyn Embedder>,
    pub backend: Box<dyn CompletionBackend>,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let dataset = evaluation::load_dataset(&config.run.dataset)?;
    let embedder: Box<dyn Embedder> = match config.embedder.kind {
        BackendKind::Mock => Box::new(MockEmbedder::new(config.retrieval.dimension)),
        BackendKind::Remote => Box::new(RemoteEmbedder::from_env(config.retrieval.dimension)?),
    };
    let backend: Box<dyn CompletionBackend> = match config.backend.kind {
        BackendKind::Mock => Box::new(MockBackend {
            jaccard_threshold: config.backend.jaccard_threshold,
        }),
        BackendKind::Remote => Box::new(RemoteBackend::from_env()?),
    };
    let variant = config.run.variant;
    let index = if variant.uses_retrieval() {
        Some(match (&config.kg.index, &config.kg.catalog) {
            (Some(path), _) => VectorIndex::load(path)?,
            (None, Some(catalog)) => {
                VectorIndex::build(&retrieval::load_catalog(catalog)?, embedder.as_ref())?
            }
            (None, None) => {
                return Err(Error::Config(
                    "retrieval variants require kg.catalog or kg.index".into(),
                ))
            }
        })
    } else {
        None
    };
    let kg = if variant.uses_kg() {
        let catalog = config
            .kg
            .catalog
            .as_ref()
            .ok_or_else(|| Error::Config("KG variants require kg.catalog".into()))?;
        let edges = config
            .kg
            .edges
            .as_ref()
            .ok_or_else(|| Error::Config("KG variants require kg.edges".into()))?;
        Some(KnowledgeGraph::load(catalog, edges)?)
    } else {
        None
    };
    Ok(Prepared {
        dataset,
        index,
        kg,
        embedder,
        backend,
    })
}

/// Blocking stage: build, pair, dedup, optional restriction to labeled
/// pairs, decompose. Restriction happens before decomposition so sub-
/// block sizes (and thus RAC counts) reflect the pairs actually matched.
pub fn blocking_stage(dataset: &Dataset, config: &RunConfig) -> Result<Vec<Block>> {
    config.blocking.validate()?;
    let mut blocks = blocking::build_blocks(dataset.scan_records(), &config.blocking);
    blocking::generate_all_pairs(&mut blocks);
    let mut blocks = blocking::deduplicate(blocks);
    if config.run.restrict_to_labeled {
        let labeled: HashSet<(&str, &str)> = dataset
            .labeled_pairs
            .iter()
            .map(|p| (p.source_id.as_str(), p.target_id.as_str()))
            .collect();
        for block in &mut blocks {
            block
                .pairs
                .retain(|p| labeled.contains(&(p.source_id.as_str(), p.target_id.as_str())));
        }
        blocks.retain(|b| !b.pairs.is_empty());
    }
    blocking::decompose(blocks, config.blocking.max_bs)
}

enum Seeds {
    None,
    PerBlock(Vec<retrieval::BlockSeeds>),
    PerPair(Vec<retrieval::BlockPairSeeds>),
}

enum Expanded {
    None,
    PerBlock(Vec<SearchOutput>),
    PerPair(Vec<Vec<SearchOutput>>),
}

/// Context for one (sub-)block: a shared list for batch prompts, plus
/// per-pair lists when retrieval ran per query.
struct BlockContext {
    shared: Vec<String>,
    per_pair: Option<Vec<Vec<String>>>,
}

impl BlockContext {
    fn empty() -> Self {
        BlockContext {
            shared: Vec::new(),
            per_pair: None,
        }
    }

    fn for_pair(&self, i: usize) -> &[String] {
        match &self.per_pair {
            Some(lists) => &lists[i],
            None => &self.shared,
        }
    }
}

/// First-occurrence concatenation of per-pair context lists, used as the
/// shared section of a batch prompt when retrieval ran per query.
fn dedup_concat(lists: &[Vec<String>]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for list in lists {
        for text in list {
            if seen.insert(text.clone()) {
                out.push(text.clone());
            }
        }
    }
    out
}

struct IndexProvider<'a> {
    index: &'a VectorIndex,
}

impl DescriptionProvider for IndexProvider<'_> {
    fn describe(&self, id: &str) -> Option<String> {
        let item = self.index.item(id)?;
        if !item.description.is_empty() {
            Some(item.description.clone())
        } else if !item.label.is_empty() {
            Some(item.label.clone())
        } else {
            None
        }
    }
}

fn expand_seeds(
    seeds: &[Seed],
    kg: &KnowledgeGraph,
    config: &RunConfig,
    traversal: Traversal,
) -> SearchOutput {
    let ids: Vec<String> = seeds.iter().map(|s| s.id.clone()).collect();
    match traversal {
        Traversal::Bfs => crate::kgsearch::bfs_triples(kg, &ids, &config.search.config),
        Traversal::Exp => crate::kgsearch::exp_triples(kg, &ids, &config.search.config),
    }
}

fn node_context(
    seeds: &[Seed],
    provider: &dyn DescriptionProvider,
    block: usize,
    top_k: usize,
) -> Vec<String> {
    let candidates = seeds
        .iter()
        .enumerate()
        .map(|(i, seed)| ContextCandidate {
            text: enrich_node(&seed.id, provider),
            source: ContextSource::Vector,
            seed_rank: 0,
            seq: i,
        })
        .collect();
    refine(block, candidates, top_k).texts()
}

fn triple_context(
    output: &SearchOutput,
    provider: &dyn DescriptionProvider,
    block: usize,
    traversal: Traversal,
    top_k: usize,
) -> Vec<String> {
    let source = match traversal {
        Traversal::Bfs => ContextSource::Bfs,
        Traversal::Exp => ContextSource::Exp,
    };
    let candidates = output
        .triples
        .iter()
        .map(|ranked| ContextCandidate {
            text: enrich_triple(&ranked.triple, provider),
            source,
            seed_rank: ranked.seed_rank,
            seq: ranked.seq,
        })
        .collect();
    refine(block, candidates, top_k).texts()
}

/// Execute the variant's stages and return metrics plus per-pair
/// decisions. No files are written; see [`run`] for emission.
pub fn execute(config: &RunConfig, env: &Prepared) -> Result<(RunMetrics, Vec<MatchDecision>)> {
    let variant = config.run.variant;
    let mut metrics = RunMetrics::default();
    let mut stage = StageSeconds::default();

    let timer = Instant::now();
    let blocks = blocking_stage(&env.dataset, config)?;
    stage.blocking = timer.elapsed().as_secs_f64();

    let pair_count: usize = blocks.iter().map(|b| b.pairs.len()).sum();
    metrics.blocks = blocks.len() as u64;
    metrics.candidate_pairs = pair_count as u64;
    metrics.labeled_pairs = env.dataset.labeled_pairs.len() as u64;

    let timer = Instant::now();
    let seeds = if !variant.uses_retrieval() {
        Seeds::None
    } else {
        let index = env
            .index
            .as_ref()
            .ok_or_else(|| Error::Config("vector index was not prepared".into()))?;
        if variant.batch_retrieval() {
            let (per_block, rac) = retrieval::batch_retrieve(
                &blocks,
                &env.dataset,
                index,
                env.embedder.as_ref(),
                &config.retrieval,
            )?;
            metrics.rac_count = rac as u64;
            Seeds::PerBlock(per_block)
        } else {
            let (per_pair, rac) = retrieval::per_query_retrieve(
                &blocks,
                &env.dataset,
                index,
                env.embedder.as_ref(),
                &config.retrieval,
            )?;
            metrics.rac_count = rac as u64;
            Seeds::PerPair(per_pair)
        }
    };
    stage.retrieval = timer.elapsed().as_secs_f64();

    match &seeds {
        Seeds::None => {}
        Seeds::PerBlock(list) => {
            for s in list {
                metrics.truncated_queries += s.truncated as u64;
                metrics.block_errors += s.error.is_some() as u64;
            }
        }
        Seeds::PerPair(list) => {
            for block in list {
                for s in &block.per_pair {
                    metrics.truncated_queries += s.truncated as u64;
                    metrics.block_errors += s.error.is_some() as u64;
                }
            }
        }
    }

    let timer = Instant::now();
    let expanded = if !variant.uses_kg() {
        Expanded::None
    } else {
        let kg = env
            .kg
            .as_ref()
            .ok_or_else(|| Error::Config("knowledge graph was not prepared".into()))?;
        let traversal = config.traversal()?;
        match &seeds {
            Seeds::None => Expanded::None,
            Seeds::PerBlock(list) => Expanded::PerBlock(
                list.iter()
                    .map(|s| expand_seeds(&s.seeds, kg, config, traversal))
                    .collect(),
            ),
            Seeds::PerPair(list) => Expanded::PerPair(
                list.iter()
                    .map(|block| {
                        block
                            .per_pair
                            .iter()
                            .map(|s| expand_seeds(&s.seeds, kg, config, traversal))
                            .collect()
                    })
                    .collect(),
            ),
        }
    };
    stage.expansion = timer.elapsed().as_secs_f64();

    let timer = Instant::now();
    let catalog_provider;
    let index_provider;
    let provider: Option<&dyn DescriptionProvider> = if let Some(kg) = env.kg.as_ref() {
        catalog_provider = CatalogProvider::new(kg);
        Some(&catalog_provider)
    } else if let Some(index) = env.index.as_ref() {
        index_provider = IndexProvider { index };
        Some(&index_provider)
    } else {
        None
    };
    let contexts: Vec<BlockContext> = match (&seeds, &expanded) {
        (Seeds::None, _) => blocks.iter().map(|_| BlockContext::empty()).collect(),
        (Seeds::PerBlock(list), Expanded::None) => {
            let provider = provider.expect("retrieval implies a provider");
            list.iter()
                .map(|s| BlockContext {
                    shared: node_context(&s.seeds, provider, s.ordinal, config.retrieval.k),
                    per_pair: None,
                })
                .collect()
        }
        (Seeds::PerBlock(_), Expanded::PerBlock(outputs)) => {
            let provider = provider.expect("retrieval implies a provider");
            let traversal = config.traversal()?;
            outputs
                .iter()
                .enumerate()
                .map(|(i, output)| BlockContext {
                    shared: triple_context(
                        output,
                        provider,
                        blocks[i].ordinal,
                        traversal,
                        config.search.config.triple_top_k,
                    ),
                    per_pair: None,
                })
                .collect()
        }
        (Seeds::PerPair(list), Expanded::None) => {
            let provider = provider.expect("retrieval implies a provider");
            list.iter()
                .map(|block| {
                    let per_pair: Vec<Vec<String>> = block
                        .per_pair
                        .iter()
                        .map(|s| node_context(&s.seeds, provider, s.ordinal, config.retrieval.k))
                        .collect();
                    BlockContext {
                        shared: dedup_concat(&per_pair),
                        per_pair: Some(per_pair),
                    }
                })
                .collect()
        }
        (Seeds::PerPair(_), Expanded::PerPair(outputs)) => {
            let provider = provider.expect("retrieval implies a provider");
            let traversal = config.traversal()?;
            outputs
                .iter()
                .enumerate()
                .map(|(i, block_outputs)| {
                    let per_pair: Vec<Vec<String>> = block_outputs
                        .iter()
                        .map(|output| {
                            triple_context(
                                output,
                                provider,
                                blocks[i].ordinal,
                                traversal,
                                config.search.config.triple_top_k,
                            )
                        })
                        .collect();
                    BlockContext {
                        shared: dedup_concat(&per_pair),
                        per_pair: Some(per_pair),
                    }
                })
                .collect()
        }
        _ => {
            return Err(Error::Config(
                "inconsistent retrieval/expansion shapes".into(),
            ))
        }
    };
    metrics.enrichment_misses = provider.map(|p| p.miss_count()).unwrap_or(0) as u64;
    stage.enrichment = timer.elapsed().as_secs_f64();

    let timer = Instant::now();
    let decoding = &config.backend.decoding;
    let mut decisions: Vec<MatchDecision> = Vec::with_capacity(pair_count);
    for (block_index, block) in blocks.iter().enumerate() {
        let queries: Vec<String> = block
            .pairs
            .iter()
            .map(|pair| serialize_pair_query(pair, &env.dataset))
            .collect::<Result<_>>()?;
        let context = &contexts[block_index];
        let mut push = |pair_index: usize, parsed: ParsedDecision| {
            let pair = &block.pairs[pair_index];
            if parsed.provenance == Provenance::FallbackDefault {
                metrics.fallback_decisions += 1;
            }
            decisions.push(MatchDecision {
                source_id: pair.source_id.clone(),
                target_id: pair.target_id.clone(),
                decision: parsed.decision,
                provenance: parsed.provenance,
                raw_text: parsed.raw_text,
            });
        };
        if variant.batch_generation() {
            let prompt = generation::build_prompt_batch(&queries, &context.shared)?;
            let answer = env.backend.complete(&prompt, decoding)?;
            let reask = |i: usize| -> Result<ParsedDecision> {
                let single = generation::build_prompt_single(&queries[i], context.for_pair(i));
                let text = env.backend.complete(&single, decoding)?;
                Ok(generation::parse_single(&text))
            };
            let result = generation::parse_batch(&answer, queries.len(), Some(&reask))?;
            match result.parse_status {
                ParseStatus::Clean => metrics.parse_clean += 1,
                ParseStatus::RecoveredPerPair => metrics.parse_recovered += 1,
                ParseStatus::Defaulted => metrics.parse_defaulted += 1,
            }
            for (i, parsed) in result.decisions.into_iter().enumerate() {
                push(i, parsed);
            }
        } else {
            for i in 0..queries.len() {
                let prompt = generation::build_prompt_single(&queries[i], context.for_pair(i));
                let answer = env.backend.complete(&prompt, decoding)?;
                let parsed = generation::parse_single(&answer);
                match parsed.provenance {
                    Provenance::Parsed => metrics.parse_clean += 1,
                    Provenance::FallbackDefault => metrics.parse_defaulted += 1,
                }
                push(i, parsed);
            }
        }
    }
    stage.generation = timer.elapsed().as_secs_f64();

    metrics.stage_seconds = stage;
    metrics.per_pair_seconds = stage.per_pair(pair_count);
    metrics.seconds_total = stage.total();
    let counts = evaluation::confusion(&decisions, &env.dataset.labeled_pairs)?;
    metrics.finish_quality(counts);
    Ok((metrics, decisions))
}

/// One completed run with its emitted artifact paths.
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub decisions: Vec<MatchDecision>,
    pub report_path: PathBuf,
    pub decisions_path: PathBuf,
    pub csv_path: PathBuf,
}

fn dataset_name(config: &RunConfig) -> String {
    config
        .run
        .dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn method_label(method: BlockingMethod) -> &'static str {
    match method {
        BlockingMethod::Standard => "standard",
        BlockingMethod::Qgram => "qgram",
        BlockingMethod::Xqgram => "xqgram",
    }
}

fn granularity_label(granularity: Granularity) -> &'static str {
    match granularity {
        Granularity::Entity => "entity",
        Granularity::Predicate => "predicate",
        Granularity::Triple => "triple",
    }
}

/// Map a finished run onto the fixed cross-run CSV columns.
pub fn csv_row(config: &RunConfig, metrics: &RunMetrics) -> CsvRow {
    CsvRow {
        dataset: dataset_name(config),
        variant: config.run.variant.label().to_string(),
        blocking: method_label(config.blocking.method).to_string(),
        max_bs: config.blocking.max_bs,
        top_k: config.retrieval.k,
        granularity: granularity_label(config.retrieval.granularity).to_string(),
        traversal: config
            .search
            .traversal
            .map(|t| t.label().to_string())
            .unwrap_or_default(),
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        rac: metrics.rac_count,
        seconds_total: metrics.seconds_total,
        seconds_retrieval: metrics.stage_seconds.retrieval,
        seconds_expansion: metrics.stage_seconds.expansion,
        seconds_enrichment: metrics.stage_seconds.enrichment,
        seconds_generation: metrics.stage_seconds.generation,
    }
}

/// Execute a prepared run and emit the decision file, JSON report, and
/// CSV row under `run.output_dir`.
pub fn run_prepared(config: &RunConfig, env: &Prepared) -> Result<RunOutcome> {
    let (metrics, decisions) = execute(config, env)?;
    let out_dir = &config.run.output_dir;
    fs::create_dir_all(out_dir)?;
    let stem = format!(
        "{}_{}_{}_bs{}_k{}",
        dataset_name(config),
        config.run.variant.label(),
        method_label(config.blocking.method),
        config.blocking.max_bs,
        config.retrieval.k
    );

    let decisions_path = out_dir.join(format!("{stem}_decisions.jsonl"));
    let mut file = fs::File::create(&decisions_path)?;
    for d in &decisions {
        let line = serde_json::json!({
            "source_id": d.source_id,
            "target_id": d.target_id,
            "decision": d.decision,
            "provenance": d.provenance,
        });
        writeln!(file, "{line}")?;
    }

    let report_path = out_dir.join(format!("{stem}_report.json"));
    let report = Report {
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seed: config.run.seed,
        config: config.clone(),
        metrics: metrics.clone(),
    };
    evaluation::write_report(&report_path, &report)?;

    let csv_path = out_dir.join("runs.csv");
    evaluation::append_csv_row(&csv_path, &csv_row(config, &metrics))?;

    Ok(RunOutcome {
        metrics,
        decisions,
        report_path,
        decisions_path,
        csv_path,
    })
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let env = prepare(config)?;
    run_prepared(config, &env)
}

/// A sweep over the configured grid axes.
pub struct SweepOutcome {
    pub rows: Vec<CsvRow>,
    /// `(grid point label, error)` for points that failed; the sweep
    /// continues past them.
    pub failures: Vec<(String, String)>,
    pub csv_path: PathBuf,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Run one pipeline execution per grid point over
/// `{max_bs, blocking, granularity, traversal, top_k}`, sharing the
/// prepared dataset/index/graph, accumulating the cross-run CSV.
pub fn sweep(config: &RunConfig) -> Result<SweepOutcome> {
    if config.sweep.is_empty() {
        return Err(Error::Usage(
            "sweep grid is empty; set at least one axis under [sweep]".into(),
        ));
    }
    let env = prepare(config)?;
    let max_bs_axis = axis(&config.sweep.max_bs, config.blocking.max_bs);
    let blocking_axis = axis(&config.sweep.blocking, config.blocking.method);
    let granularity_axis = axis(&config.sweep.granularity, config.retrieval.granularity);
    let traversal_axis: Vec<Option<Traversal>> = if config.sweep.traversal.is_empty() {
        vec![config.search.traversal]
    } else {
        config.sweep.traversal.iter().map(|&t| Some(t)).collect()
    };
    let top_k_axis = axis(&config.sweep.top_k, config.retrieval.k);

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &max_bs in &max_bs_axis {
        for &method in &blocking_axis {
            for &granularity in &granularity_axis {
                for &traversal in &traversal_axis {
                    for &top_k in &top_k_axis {
                        let mut point = config.clone();
                        point.sweep = Default::default();
                        point.blocking.max_bs = max_bs;
                        point.blocking.method = method;
                        point.retrieval.granularity = granularity;
                        point.search.traversal = traversal;
                        point.retrieval.k = top_k;
                        let label = format!(
                            "max_bs={max_bs} blocking={} granularity={} traversal={} top_k={top_k}",
                            method_label(method),
                            granularity_label(granularity),
                            traversal.map(|t| t.label()).unwrap_or("-"),
                        );
                        match point.validate().and_then(|_| run_prepared(&point, &env)) {
                            Ok(outcome) => rows.push(csv_row(&point, &outcome.metrics)),
                            Err(e) => failures.push((label, e.to_string())),
                        }
                    }
                }
            }
        }
    }
    Ok(SweepOutcome {
        rows,
        failures,
        csv_path: config.run.output_dir.join("runs.csv"),
    })
}
