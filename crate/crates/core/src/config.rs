//! TOML run configuration: variant selection, per-stage settings, and
//! dotted-path `--set key=value` overrides for sweeps.
//!
//! Validation rejects impossible variant combinations up front: KG
//! variants require triple granularity plus a traversal, non-KG variants
//! require entity or predicate granularity.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocking::BlockingConfig;
use crate::generation::Decoding;
use crate::kgsearch::SearchConfig;
use crate::retrieval::{Granularity, RetrievalConfig};
use crate::{Error, Result};

/// The eight run variants: two baselines plus the BR/BG cost
/// optimizations with and without KG triple search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Direct prompting, one LLM call per pair, no retrieval.
    LlmEm,
    /// Per-query retrieval + per-query generation.
    Rag4em,
    CeRag4emBr,
    CeRag4emBg,
    CeRag4emBrBg,
    CeKgRag4emBr,
    CeKgRag4emBg,
    CeKgRag4emBrBg,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::LlmEm,
        Variant::Rag4em,
        Variant::CeRag4emBr,
        Variant::CeRag4emBg,
        Variant::CeRag4emBrBg,
        Variant::CeKgRag4emBr,
        Variant::CeKgRag4emBg,
        Variant::CeKgRag4emBrBg,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::LlmEm => "llm_em",
            Variant::Rag4em => "rag4em",
            Variant::CeRag4emBr => "ce_rag4em_br",
            Variant::CeRag4emBg => "ce_rag4em_bg",
            Variant::CeRag4emBrBg => "ce_rag4em_br_bg",
            Variant::CeKgRag4emBr => "ce_kg_rag4em_br",
            Variant::CeKgRag4emBg => "ce_kg_rag4em_bg",
            Variant::CeKgRag4emBrBg => "ce_kg_rag4em_br_bg",
        }
    }

    pub fn uses_retrieval(&self) -> bool {
        !matches!(self, Variant::LlmEm)
    }

    /// Batch retrieval: one retrieval call per (sub-)block.
    pub fn batch_retrieval(&self) -> bool {
        matches!(
            self,
            Variant::CeRag4emBr
                | Variant::CeRag4emBrBg
                | Variant::CeKgRag4emBr
                | Variant::CeKgRag4emBrBg
        )
    }

    /// Batch generation: one LLM call per (sub-)block.
    pub fn batch_generation(&self) -> bool {
        matches!(
            self,
            Variant::CeRag4emBg
                | Variant::CeRag4emBrBg
                | Variant::CeKgRag4emBg
                | Variant::CeKgRag4emBrBg
        )
    }

    /// KG variants expand retrieved entity seeds into graph triples.
    pub fn uses_kg(&self) -> bool {
        matches!(
            self,
            Variant::CeKgRag4emBr | Variant::CeKgRag4emBg | Variant::CeKgRag4emBrBg
        )
    }
}

/// Seed-to-triple traversal strategy (triple granularity only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    Bfs,
    Exp,
}

impl Traversal {
    pub fn label(&self) -> &'static str {
        match self {
            Traversal::Bfs => "bfs",
            Traversal::Exp => "exp",
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// The `[run]` section: dataset location, variant, seed, output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub dataset: PathBuf,
    pub variant: Variant,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Keep only candidate pairs that appear in the labeled test set.
    /// Benchmark runs score labeled pairs only; unlabeled candidates
    /// would spend LLM calls on pairs the metrics cannot see.
    #[serde(default = "default_true")]
    pub restrict_to_labeled: bool,
}

/// The `[kg]` section: catalog/edges inputs and an optional prebuilt
/// vector index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KgSection {
    pub catalog: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// Optional on-disk cache for remote description lookups.
    pub description_cache: Option<PathBuf>,
}

/// Which implementation serves a pluggable stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

fn default_jaccard_threshold() -> f64 {
    0.5
}

/// The `[backend]` section: completion backend selection and decoding
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub decoding: Decoding,
    /// Mock backend match threshold on token-set Jaccard similarity.
    #[serde(default = "default_jaccard_threshold")]
    pub jaccard_threshold: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            decoding: Decoding::default(),
            jaccard_threshold: default_jaccard_threshold(),
        }
    }
}

/// The `[embedder]` section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EmbedderSection {
    #[serde(default)]
    pub kind: BackendKind,
}

/// The `[search]` section: triple-search settings plus the traversal
/// choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSection {
    #[serde(flatten)]
    pub config: SearchConfig,
    pub traversal: Option<Traversal>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            config: SearchConfig::default(),
            traversal: None,
        }
    }
}

/// The `[sweep]` section: grid axes. Empty lists mean "hold at the base
/// config value".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default)]
    pub max_bs: Vec<usize>,
    #[serde(default)]
    pub blocking: Vec<crate::blocking::BlockingMethod>,
    #[serde(default)]
    pub granularity: Vec<Granularity>,
    #[serde(default)]
    pub traversal: Vec<Traversal>,
    #[serde(default)]
    pub top_k: Vec<usize>,
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        self.max_bs.is_empty()
            && self.blocking.is_empty()
            && self.granularity.is_empty()
            && self.traversal.is_empty()
            && self.top_k.is_empty()
    }
}

/// Full run configuration, one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub kg: KgSection,
    #[serde(default)]
    pub blocking: BlockingConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub embedder: EmbedderSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Parse with dotted-path overrides (`--set retrieval.k=4`) applied
    /// to the TOML value before deserialization.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.blocking.validate()?;
        self.retrieval.validate()?;
        self.search.config.validate()?;
        let variant = self.run.variant;
        let granularity = self.retrieval.granularity;
        if variant.uses_kg() {
            if granularity != Granularity::Triple {
                return Err(Error::Config(format!(
                    "variant {} requires granularity = \"triple\", got {granularity:?}",
                    variant.label()
                )));
            }
            if self.search.traversal.is_none() {
                return Err(Error::Config(format!(
                    "variant {} requires search.traversal = \"bfs\" or \"exp\"",
                    variant.label()
                )));
            }
        } else if granularity == Granularity::Triple {
            return Err(Error::Config(format!(
                "granularity \"triple\" requires a KG variant, got {}",
                variant.label()
            )));
        }
        if variant.uses_retrieval()
            && self.kg.catalog.is_none()
            && self.kg.index.is_none()
        {
            return Err(Error::Config(format!(
                "variant {} requires kg.catalog or kg.index",
                variant.label()
            )));
        }
        if variant.uses_kg() && (self.kg.edges.is_none() || self.kg.catalog.is_none()) {
            return Err(Error::Config(format!(
                "variant {} requires kg.catalog and kg.edges",
                variant.label()
            )));
        }
        if !(self.backend.jaccard_threshold >= 0.0 && self.backend.jaccard_threshold <= 1.0) {
            return Err(Error::Config(
                "backend.jaccard_threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Traversal to use, or an error when a KG variant left it unset
    /// (validate() rejects that case already).
    pub fn traversal(&self) -> Result<Traversal> {
        self.search.traversal.ok_or_else(|| {
            Error::Config("search.traversal is not set".into())
        })
    }
}

fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

/// Apply one `key.path=value` override in place. Intermediate tables are
/// created as needed; list values use TOML syntax (`[2,4,6]`).
pub fn apply_override(value: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| {
        Error::Usage(format!("override {entry:?} is not of the form key=value"))
    })?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Usage(format!("override {entry:?} has an empty key segment")));
    }
    let new_value = if raw.trim_start().starts_with('[') {
        // Wrap the list in a throwaway document to reuse the TOML parser.
        let doc: toml::Value = toml::from_str(&format!("v = {raw}"))
            .map_err(|e| Error::Usage(format!("override {entry:?}: {e}")))?;
        doc.get("v").cloned().unwrap()
    } else {
        parse_toml_scalar(raw)
    };
    let mut cursor = value;
    for segment in &segments[..segments.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override {entry:?}: {segment} is not a table")))?;
        cursor = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Usage(format!("override {entry:?}: parent is not a table")))?;
    table.insert(segments[segments.len() - 1].to_string(), new_value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [run]
        dataset = "data/fixture"
        variant = "ce_rag4em_br"

        [kg]
        catalog = "data/catalog.jsonl"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let config = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(config.run.variant, Variant::CeRag4emBr);
        assert_eq!(config.run.seed, 42);
        assert!(config.run.restrict_to_labeled);
        assert_eq!(config.blocking.max_bs, 6);
        assert_eq!(config.retrieval.k, 2);
        assert_eq!(config.backend.kind, BackendKind::Mock);
        assert_eq!(config.backend.decoding.temperature, 0.5);
    }

    #[test]
    fn llm_em_needs_no_kg() {
        let config = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "llm_em"
            "#,
        )
        .unwrap();
        assert!(!config.run.variant.uses_retrieval());
    }

    #[test]
    fn kg_variant_requires_triple_granularity() {
        let err = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "ce_kg_rag4em_br"

            [kg]
            catalog = "c"
            edges = "e"

            [search]
            traversal = "bfs"
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn kg_variant_valid_combination() {
        let config = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "ce_kg_rag4em_br_bg"

            [kg]
            catalog = "c"
            edges = "e"

            [retrieval]
            granularity = "triple"

            [search]
            traversal = "exp"
            "#,
        )
        .unwrap();
        assert_eq!(config.traversal().unwrap(), Traversal::Exp);
        assert!(config.run.variant.batch_retrieval());
        assert!(config.run.variant.batch_generation());
    }

    #[test]
    fn kg_variant_requires_traversal() {
        let err = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "ce_kg_rag4em_bg"

            [kg]
            catalog = "c"
            edges = "e"

            [retrieval]
            granularity = "triple"
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn triple_granularity_requires_kg_variant() {
        let err = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "rag4em"

            [kg]
            catalog = "c"

            [retrieval]
            granularity = "triple"
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn retrieval_variant_requires_catalog_or_index() {
        let err = RunConfig::parse(
            r#"
            [run]
            dataset = "d"
            variant = "rag4em"
            "#,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn variant_gating_table() {
        use Variant::*;
        assert!(!LlmEm.uses_retrieval() && !LlmEm.uses_kg());
        assert!(Rag4em.uses_retrieval() && !Rag4em.batch_retrieval() && !Rag4em.batch_generation());
        assert!(CeRag4emBr.batch_retrieval() && !CeRag4emBr.batch_generation());
        assert!(!CeRag4emBg.batch_retrieval() && CeRag4emBg.batch_generation());
        assert!(CeRag4emBrBg.batch_retrieval() && CeRag4emBrBg.batch_generation());
        for v in [CeKgRag4emBr, CeKgRag4emBg, CeKgRag4emBrBg] {
            assert!(v.uses_kg());
        }
        let labels: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
        assert_eq!(labels.len(), 8);
        assert!(labels.contains(&"ce_kg_rag4em_br_bg"));
    }

    #[test]
    fn overrides_scalar_and_nested() {
        let config = RunConfig::parse_with_overrides(
            MINIMAL,
            &[
                "blocking.max_bs=8".to_string(),
                "retrieval.k=4".to_string(),
                "run.seed=7".to_string(),
                "backend.jaccard_threshold=0.4".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.blocking.max_bs, 8);
        assert_eq!(config.retrieval.k, 4);
        assert_eq!(config.run.seed, 7);
        assert!((config.backend.jaccard_threshold - 0.4).abs() < 1e-12);
    }

    #[test]
    fn overrides_list_and_string() {
        let config = RunConfig::parse_with_overrides(
            MINIMAL,
            &[
                "sweep.max_bs=[2,4,6,8]".to_string(),
                "blocking.method=standard".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.sweep.max_bs, vec![2, 4, 6, 8]);
        assert_eq!(config.blocking.method, crate::blocking::BlockingMethod::Standard);
    }

    #[test]
    fn override_without_equals_is_usage_error() {
        let err = RunConfig::parse_with_overrides(MINIMAL, &["retrieval.k".to_string()]);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = RunConfig::parse(MINIMAL).unwrap();
        let text = toml::to_string(&config).unwrap();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(reparsed.run.variant, config.run.variant);
        assert_eq!(reparsed.blocking.max_bs, config.blocking.max_bs);
        assert_eq!(reparsed.retrieval.k, config.retrieval.k);
        assert_eq!(reparsed.run.seed, config.run.seed);
    }

    #[test]
    fn config_round_trips_through_json() {
        // The report echoes the config as JSON; it must reparse.
        let config = RunConfig::parse(MINIMAL).unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let reparsed: RunConfig = serde_json::from_str(&json).unwrap();
        reparsed.validate().unwrap();
        assert_eq!(reparsed.run.variant, config.run.variant);
    }
}
