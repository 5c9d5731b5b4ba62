//! Per-query and batch prompt construction, decision parsing, and the
//! pluggable completion backends (a deterministic local matcher and a
//! chat-completions-style remote endpoint).
//!
//! Unparseable outputs default to "no" (the benchmark pair distributions
//! are heavily negative-skewed); the provenance flag keeps the fallback
//! auditable.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Decision, Provenance};
use crate::{Error, Result};

const INTRO: &str = "You are an expert in entity matching, who is to determine whether these \
two given entity representations refer to the same entity. You are also provided with \
additional information retrieved from Wikidata, which might be helpful for your reasoning.";

const SINGLE_INSTRUCTION: &str = "## Instruction: 1. Analyse each entity's semantics \
independently: consider key terms, roles, and context.\n\
2. Rank the relevance of each entry in the additional information, and only use it if it \
helps make the decision.\n\
3. Perform a step-by-step logical comparison of the two entities.";

const BATCH_INSTRUCTION: &str = "## Instruction:\n\
1. Process each entity pair sequentially, and treat each pair independently.\n\
2. Analyse each entity's semantics independently: consider key terms, roles, and context.\n\
3. Rank the relevance of each entry in the additional information, and only use it if it \
helps make the decision.\n\
4. Perform a step-by-step logical comparison of the two entities.";

const EMPTY_CONTEXT: &str = "(none)";

fn render_context(items: &[String]) -> String {
    if items.is_empty() {
        format!(" {EMPTY_CONTEXT}")
    } else {
        format!("\n{}", items.join("\n"))
    }
}

/// Per-query prompt. `pair_query` is the `Entity 1: ... Entity 2: ...`
/// text; context items render one per line, or `(none)`.
pub fn build_prompt_single(pair_query: &str, context_items: &[String]) -> String {
    format!(
        "{INTRO}\n\n\
         ## Input: {pair_query}\n\
         Additional Information (You can use this in your reasoning if available):{}\n\n\
         {SINGLE_INSTRUCTION}\n\n\
         ## Output Format: Match Decision: [Yes / No]",
        render_context(context_items)
    )
}

/// Batch prompt: pairs numbered `Pair 1 ... Pair N` in block order, the
/// shared context rendered once.
pub fn build_prompt_batch(pair_queries: &[String], context_items: &[String]) -> Result<String> {
    if pair_queries.is_empty() {
        return Err(Error::Usage("batch prompt requires at least one pair".into()));
    }
    let pairs: Vec<String> = pair_queries
        .iter()
        .enumerate()
        .map(|(i, q)| format!("Pair {} - {q}", i + 1))
        .collect();
    Ok(format!(
        "{INTRO}\n\n\
         ## Input:\n\
         Entity Pairs in a Batch:\n\
         [{}]\n\
         Additional Information (shared; you may use this in your reasoning if available):{}\n\n\
         {BATCH_INSTRUCTION}\n\n\
         ## Output format: Match Decisions: [Yes / No]",
        pairs.join("\n"),
        render_context(context_items)
    ))
}

/// A parsed decision without pair identity (the caller attaches ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecision {
    pub decision: Decision,
    pub provenance: Provenance,
    pub raw_text: String,
}

fn yes_no_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

fn token_to_decision(token: &str) -> Decision {
    if token.eq_ignore_ascii_case("yes") {
        Decision::Yes
    } else {
        Decision::No
    }
}

/// Parse a per-query answer: the Yes/No following the last
/// `Match Decision` marker (case-insensitive); failing that, the last
/// standalone yes/no anywhere; failing that, decision "no" with
/// `fallback_default` provenance.
pub fn parse_single(text: &str) -> ParsedDecision {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let marker = MARKER.get_or_init(|| Regex::new(r"(?i)match\s+decision").unwrap());
    if let Some(pos) = marker.find_iter(text).last().map(|m| m.start()) {
        if let Some(m) = yes_no_regex().find(&text[pos..]) {
            return ParsedDecision {
                decision: token_to_decision(m.as_str()),
                provenance: Provenance::Parsed,
                raw_text: text[pos..pos + m.end()].to_string(),
            };
        }
    }
    if let Some(m) = yes_no_regex().find_iter(text).last() {
        return ParsedDecision {
            decision: token_to_decision(m.as_str()),
            provenance: Provenance::Parsed,
            raw_text: m.as_str().to_string(),
        };
    }
    ParsedDecision {
        decision: Decision::No,
        provenance: Provenance::FallbackDefault,
        raw_text: text.to_string(),
    }
}

/// How a batch output was recovered into decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    RecoveredPerPair,
    Defaulted,
}

/// A batch of decisions for one block; `decisions` always has exactly the
/// block's pair count, in every status.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub decisions: Vec<ParsedDecision>,
    pub parse_status: ParseStatus,
}

fn batch_list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)match\s+decisions?\s*:\s*\[([^\]]*)\]").unwrap())
}

fn pair_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bpair\s*(\d+)\s*[:\-]\s*(yes|no)\b").unwrap())
}

/// Extract decisions from a batch answer without recovery. Accepts the
/// bracketed `Match Decisions: [d1, d2, ...]` list (last occurrence wins)
/// or per-line `Pair i: d` markers.
pub fn extract_batch_decisions(text: &str) -> Vec<ParsedDecision> {
    if let Some(captures) = batch_list_regex().captures_iter(text).last() {
        let inner = captures.get(1).unwrap().as_str();
        let decisions: Vec<ParsedDecision> = yes_no_regex()
            .find_iter(inner)
            .map(|m| ParsedDecision {
                decision: token_to_decision(m.as_str()),
                provenance: Provenance::Parsed,
                raw_text: m.as_str().to_string(),
            })
            .collect();
        if !decisions.is_empty() {
            return decisions;
        }
    }
    let mut numbered: Vec<(usize, ParsedDecision)> = pair_line_regex()
        .captures_iter(text)
        .filter_map(|c| {
            let index: usize = c.get(1)?.as_str().parse().ok()?;
            let token = c.get(2)?.as_str();
            Some((
                index,
                ParsedDecision {
                    decision: token_to_decision(token),
                    provenance: Provenance::Parsed,
                    raw_text: c.get(0).unwrap().as_str().to_string(),
                },
            ))
        })
        .collect();
    numbered.sort_by_key(|(i, _)| *i);
    // Require a clean 1..=n numbering; anything else is a count mismatch.
    if numbered.iter().enumerate().all(|(i, (n, _))| *n == i + 1) {
        numbered.into_iter().map(|(_, d)| d).collect()
    } else {
        Vec::new()
    }
}

/// Parse a batch answer for `expected` pairs. On a count mismatch the
/// per-pair `reask` hook is invoked once per pair (one retry round); if
/// no hook is available the result is padded/truncated to `expected`
/// with "no" decisions.
pub fn parse_batch(
    text: &str,
    expected: usize,
    reask: Option<&dyn Fn(usize) -> Result<ParsedDecision>>,
) -> Result<BatchResult> {
    if expected < 1 {
        return Err(Error::Usage("batch must contain at least one pair".into()));
    }
    let decisions = extract_batch_decisions(text);
    if decisions.len() == expected {
        return Ok(BatchResult {
            decisions,
            parse_status: ParseStatus::Clean,
        });
    }
    if let Some(reask) = reask {
        let mut recovered = Vec::with_capacity(expected);
        for i in 0..expected {
            recovered.push(reask(i)?);
        }
        return Ok(BatchResult {
            decisions: recovered,
            parse_status: ParseStatus::RecoveredPerPair,
        });
    }
    let mut padded = decisions;
    padded.truncate(expected);
    while padded.len() < expected {
        padded.push(ParsedDecision {
            decision: Decision::No,
            provenance: Provenance::FallbackDefault,
            raw_text: text.to_string(),
        });
    }
    Ok(BatchResult {
        decisions: padded,
        parse_status: ParseStatus::Defaulted,
    })
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Decoding controls passed to remote backends. The mock ignores them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k_decode: u32,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.5,
            top_p: 0.8,
            top_k_decode: 20,
            max_tokens: 1024,
        }
    }
}

/// Completion contract. Implementations must be safe for concurrent
/// calls.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str, decoding: &Decoding) -> Result<String>;
}

/// Deterministic local matcher: token-set Jaccard similarity over the two
/// entity segments, yes iff >= threshold. The context section is ignored
/// so batch and per-pair answers provably coincide.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub jaccard_threshold: f64,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend {
            jaccard_threshold: 0.5,
        }
    }
}

fn token_set(text: &str) -> std::collections::HashSet<String> {
    crate::blocking::tokenize(text).into_iter().collect()
}

/// Jaccard over lowercase alphanumeric token sets; two empty sets are
/// fully similar.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa = token_set(a);
    let sb = token_set(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let intersection = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    intersection / union
}

/// Split a `Entity 1: ... Entity 2: ...` query into its two segments.
/// Unextractable segments are treated as empty.
fn split_entities(query: &str) -> (String, String) {
    let rest = match query.find("Entity 1:") {
        Some(pos) => &query[pos + "Entity 1:".len()..],
        None => return (String::new(), String::new()),
    };
    match rest.find("Entity 2:") {
        Some(pos) => (
            rest[..pos].trim().to_string(),
            rest[pos + "Entity 2:".len()..].trim().to_string(),
        ),
        None => (rest.trim().to_string(), String::new()),
    }
}

impl MockBackend {
    fn decide(&self, query: &str) -> Decision {
        let (e1, e2) = split_entities(query);
        if jaccard(&e1, &e2) >= self.jaccard_threshold {
            Decision::Yes
        } else {
            Decision::No
        }
    }

    fn decision_word(d: Decision) -> &'static str {
        match d {
            Decision::Yes => "Yes",
            Decision::No => "No",
        }
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &str, _decoding: &Decoding) -> Result<String> {
        if prompt.contains("Entity Pairs in a Batch:") {
            let mut answers = Vec::new();
            for line in prompt.lines() {
                let line = line.strip_prefix('[').unwrap_or(line);
                if !line.starts_with("Pair ") {
                    continue;
                }
                let query = match line.find('-') {
                    Some(pos) => line[pos + 1..].trim_end_matches(']'),
                    None => continue,
                };
                answers.push(Self::decision_word(self.decide(query)));
            }
            Ok(format!("Match Decisions: [{}]", answers.join(", ")))
        } else {
            let query = prompt
                .lines()
                .find_map(|line| line.strip_prefix("## Input: "))
                .unwrap_or("");
            Ok(format!(
                "Match Decision: {}",
                Self::decision_word(self.decide(query))
            ))
        }
    }
}

/// Remote chat-completions-style backend. Endpoint, key, and model come
/// from `BLOCKRAG_LLM_URL`, `BLOCKRAG_LLM_KEY`, and `BLOCKRAG_LLM_MODEL`
/// unless set explicitly.
pub struct RemoteBackend {
    client: crate::httputil::RetryClient,
    url: String,
    api_key: Option<String>,
    model: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl RemoteBackend {
    pub fn new(url: String, api_key: Option<String>, model: String) -> Result<Self> {
        Ok(RemoteBackend {
            client: crate::httputil::RetryClient::new()?,
            url,
            api_key,
            model,
        })
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var("BLOCKRAG_LLM_URL")
            .map_err(|_| Error::Config("BLOCKRAG_LLM_URL is not set".into()))?;
        let api_key = std::env::var("BLOCKRAG_LLM_KEY").ok();
        let model = std::env::var("BLOCKRAG_LLM_MODEL").unwrap_or_else(|_| "default".into());
        Self::new(url, api_key, model)
    }
}

impl CompletionBackend for RemoteBackend {
    fn complete(&self, prompt: &str, decoding: &Decoding) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
            "top_k": decoding.top_k_decode,
            "max_tokens": decoding.max_tokens,
        });
        let response: ChatResponse =
            self.client.post_json(&self.url, self.api_key.as_deref(), &body)?;
        response
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Http("completion returned no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_prompt_contains_context_lines() {
        let prompt = build_prompt_single(
            "Entity 1: title: X Entity 2: title: Y",
            &["Q1 (universe)".into(), "Q2 (Earth)".into()],
        );
        assert!(prompt.contains("\nQ1 (universe)\nQ2 (Earth)"));
        assert!(prompt.ends_with("Match Decision: [Yes / No]"));
    }

    #[test]
    fn single_prompt_empty_context_marker() {
        let prompt = build_prompt_single("Entity 1: a Entity 2: b", &[]);
        assert!(prompt.contains("available): (none)"));
    }

    #[test]
    fn single_prompt_deterministic() {
        let a = build_prompt_single("Entity 1: a Entity 2: b", &["c".into()]);
        let b = build_prompt_single("Entity 1: a Entity 2: b", &["c".into()]);
        assert_eq!(a, b);
    }

    #[test]
    fn batch_prompt_numbers_pairs() {
        let queries: Vec<String> = (0..3)
            .map(|i| format!("Entity 1: a{i} Entity 2: b{i}"))
            .collect();
        let prompt = build_prompt_batch(&queries, &[]).unwrap();
        for i in 1..=3 {
            assert!(prompt.contains(&format!("Pair {i} - ")));
        }
        assert!(prompt.contains("Process each entity pair sequentially"));
    }

    #[test]
    fn batch_prompt_single_pair_still_batch() {
        let prompt =
            build_prompt_batch(&["Entity 1: a Entity 2: b".into()], &[]).unwrap();
        assert!(prompt.contains("Entity Pairs in a Batch:"));
        assert!(prompt.contains("Match Decisions:"));
    }

    #[test]
    fn batch_prompt_empty_is_usage_error() {
        assert!(matches!(build_prompt_batch(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn batch_prompt_smaller_than_singles() {
        let queries: Vec<String> = (0..4)
            .map(|i| format!("Entity 1: title: widget {i} Entity 2: title: gadget {i}"))
            .collect();
        let context = vec!["Q1 (thing)".to_string()];
        let batch = build_prompt_batch(&queries, &context).unwrap();
        let singles: usize = queries
            .iter()
            .map(|q| build_prompt_single(q, &context).chars().count())
            .sum();
        assert!(batch.chars().count() < singles);
    }

    #[test]
    fn parse_single_marker() {
        let d = parse_single("some reasoning...\nMatch Decision: Yes");
        assert_eq!(d.decision, Decision::Yes);
        assert_eq!(d.provenance, Provenance::Parsed);
    }

    #[test]
    fn parse_single_case_and_whitespace() {
        let d = parse_single("match decision:   NO.");
        assert_eq!(d.decision, Decision::No);
        assert_eq!(d.provenance, Provenance::Parsed);
    }

    #[test]
    fn parse_single_fallback() {
        let d = parse_single("I cannot determine this.");
        assert_eq!(d.decision, Decision::No);
        assert_eq!(d.provenance, Provenance::FallbackDefault);
    }

    #[test]
    fn parse_single_standalone_token() {
        let d = parse_single("The answer is yes");
        assert_eq!(d.decision, Decision::Yes);
        assert_eq!(d.provenance, Provenance::Parsed);
    }

    #[test]
    fn parse_single_not_is_not_no() {
        // "not" must not match the standalone "no" token rule
        let d = parse_single("This is not determinable");
        assert_eq!(d.provenance, Provenance::FallbackDefault);
    }

    #[test]
    fn parse_batch_clean_list() {
        let result = parse_batch("Match Decisions: [Yes, No, Yes]", 3, None).unwrap();
        assert_eq!(result.parse_status, ParseStatus::Clean);
        let ds: Vec<Decision> = result.decisions.iter().map(|d| d.decision).collect();
        assert_eq!(ds, vec![Decision::Yes, Decision::No, Decision::Yes]);
    }

    #[test]
    fn parse_batch_per_line() {
        let result = parse_batch("Pair 1: Yes\nPair 2: No\nPair 3: yes", 3, None).unwrap();
        assert_eq!(result.parse_status, ParseStatus::Clean);
        assert_eq!(result.decisions[2].decision, Decision::Yes);
    }

    #[test]
    fn parse_batch_mismatch_defaults() {
        let result = parse_batch("Pair 1: Yes\nPair 2: No", 3, None).unwrap();
        assert_eq!(result.parse_status, ParseStatus::Defaulted);
        assert_eq!(result.decisions.len(), 3);
        assert_eq!(result.decisions[2].decision, Decision::No);
        assert_eq!(result.decisions[2].provenance, Provenance::FallbackDefault);
    }

    #[test]
    fn parse_batch_mismatch_reasks() {
        let reask = |i: usize| {
            Ok(ParsedDecision {
                decision: if i == 0 { Decision::Yes } else { Decision::No },
                provenance: Provenance::Parsed,
                raw_text: String::new(),
            })
        };
        let result = parse_batch("garbled", 2, Some(&reask)).unwrap();
        assert_eq!(result.parse_status, ParseStatus::RecoveredPerPair);
        assert_eq!(result.decisions[0].decision, Decision::Yes);
        assert_eq!(result.decisions[1].decision, Decision::No);
    }

    #[test]
    fn mock_identical_entities_yes() {
        let backend = MockBackend::default();
        let prompt = build_prompt_single("Entity 1: title: iPad Entity 2: title: iPad", &[]);
        let out = backend.complete(&prompt, &Decoding::default()).unwrap();
        assert_eq!(parse_single(&out).decision, Decision::Yes);
    }

    #[test]
    fn mock_disjoint_entities_no() {
        let backend = MockBackend::default();
        let prompt =
            build_prompt_single("Entity 1: title: alpha Entity 2: title: omega thing", &[]);
        let out = backend.complete(&prompt, &Decoding::default()).unwrap();
        // shared token "title" only: jaccard 1/4 < 0.5
        assert_eq!(parse_single(&out).decision, Decision::No);
    }

    #[test]
    fn mock_batch_equals_singles() {
        let backend = MockBackend::default();
        let queries: Vec<String> = vec![
            "Entity 1: title: iPad; price: 499 Entity 2: title: iPad; price: 499".into(),
            "Entity 1: title: iPad Entity 2: name: galaxy phone".into(),
            "Entity 1: a b c Entity 2: a b d".into(),
        ];
        let batch_prompt = build_prompt_batch(&queries, &["ignored context".into()]).unwrap();
        let batch_out = backend.complete(&batch_prompt, &Decoding::default()).unwrap();
        let batch = parse_batch(&batch_out, queries.len(), None).unwrap();
        assert_eq!(batch.parse_status, ParseStatus::Clean);
        for (query, batched) in queries.iter().zip(&batch.decisions) {
            let single_prompt = build_prompt_single(query, &[]);
            let single_out = backend.complete(&single_prompt, &Decoding::default()).unwrap();
            assert_eq!(parse_single(&single_out).decision, batched.decision);
        }
    }

    #[test]
    fn jaccard_empty_sets() {
        assert_eq!(jaccard("", ""), 1.0);
        assert_eq!(jaccard("", "word"), 0.0);
    }
}
