//! Block construction over the global record set, within-block candidate
//! pair generation, cross-block deduplication, and threshold-based
//! decomposition of oversized blocks.
//!
//! Blocks are ordered by first appearance of their key while scanning
//! records in input order (source table first, then target table); that
//! order defines the "earliest block" for deduplication and makes the
//! whole stage deterministic.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{CandidatePair, Record, Side};
use crate::{Error, Result};

/// Blocking key method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockingMethod {
    /// Lowercase alphanumeric tokens.
    Standard,
    /// Character q-grams of each token.
    Qgram,
    /// Q-grams plus combination keys of q-grams.
    Xqgram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockingConfig {
    pub method: BlockingMethod,
    /// Q-gram length, >= 2.
    pub q: usize,
    /// Fraction of a token's q-grams each XQGram combination key must
    /// cover, in (0, 1].
    pub xqgram_threshold: f64,
    /// Maximum candidate pairs per (sub-)block, >= 1.
    pub max_bs: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            method: BlockingMethod::Qgram,
            q: 3,
            xqgram_threshold: 0.8,
            max_bs: 6,
        }
    }
}

impl BlockingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 {
            return Err(Error::Config(format!("q must be >= 2, got {}", self.q)));
        }
        if !(self.xqgram_threshold > 0.0 && self.xqgram_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "xqgram_threshold must be in (0, 1], got {}",
                self.xqgram_threshold
            )));
        }
        if self.max_bs < 1 {
            return Err(Error::Config("max_bs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Upper bound on combination keys emitted per token under XQGram.
/// Unbounded combinations are exponential in token length.
pub const XQGRAM_COMBINATION_CAP: usize = 32;

/// A group of records sharing one blocking key, and the candidate pairs it
/// induces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    /// Unique ordinal assigned in deterministic creation order.
    pub ordinal: usize,
    /// The blocking key value.
    pub key: String,
    /// Member record ids from the source table, in scan order.
    pub source_members: Vec<String>,
    /// Member record ids from the target table, in scan order.
    pub target_members: Vec<String>,
    /// Cartesian pairs, filled by [`generate_pairs`].
    pub pairs: Vec<CandidatePair>,
}

/// Lowercase alphanumeric tokens of a string: split on non-alphanumeric
/// characters, lowercase, no stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn qgrams(token: &str, q: usize) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    if chars.len() < q {
        // Short-token rule: tokens shorter than q emit the whole token.
        return vec![token.to_string()];
    }
    chars.windows(q).map(|w| w.iter().collect()).collect()
}

/// Lexicographic k-combinations of `0..n`, capped at `cap` results.
fn combinations(n: usize, k: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        if out.len() >= cap {
            break;
        }
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Blocking keys of a record under the configured method. Keys are
/// returned in first-production order (attributes, then tokens, then
/// grams), deduplicated; an empty record yields no keys.
pub fn block_keys(record: &Record, config: &BlockingConfig) -> Vec<String> {
    let mut keys = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |key: String, keys: &mut Vec<String>| {
        if seen.insert(key.clone()) {
            keys.push(key);
        }
    };
    for (_, value) in &record.attributes {
        for token in tokenize(value) {
            match config.method {
                BlockingMethod::Standard => push(token, &mut keys),
                BlockingMethod::Qgram => {
                    for gram in qgrams(&token, config.q) {
                        push(gram, &mut keys);
                    }
                }
                BlockingMethod::Xqgram => {
                    let grams = qgrams(&token, config.q);
                    for gram in &grams {
                        push(gram.clone(), &mut keys);
                    }
                    let len = grams.len();
                    let take = (config.xqgram_threshold * len as f64).ceil() as usize;
                    for combo in combinations(len, take, XQGRAM_COMBINATION_CAP) {
                        let key: String =
                            combo.iter().map(|&i| grams[i].as_str()).collect();
                        push(key, &mut keys);
                    }
                }
            }
        }
    }
    keys
}

/// Build one block per distinct key with at least one member. Blocks are
/// ordered by first appearance of the key while scanning `records` in
/// order; one-sided blocks are retained (they yield zero pairs).
pub fn build_blocks<'a, I>(records: I, config: &BlockingConfig) -> Vec<Block>
where
    I: IntoIterator<Item = &'a Record>,
{
    let mut blocks: Vec<Block> = Vec::new();
    let mut by_key: HashMap<String, usize> = HashMap::new();
    for record in records {
        for key in block_keys(record, config) {
            let idx = *by_key.entry(key.clone()).or_insert_with(|| {
                blocks.push(Block {
                    ordinal: blocks.len(),
                    key,
                    source_members: Vec::new(),
                    target_members: Vec::new(),
                    pairs: Vec::new(),
                });
                blocks.len() - 1
            });
            let block = &mut blocks[idx];
            match record.side {
                Side::Source => block.source_members.push(record.id.clone()),
                Side::Target => block.target_members.push(record.id.clone()),
            }
        }
    }
    blocks
}

/// Cartesian pairs of a block: (source scan order x target scan order),
/// source index outermost.
pub fn generate_pairs(block: &Block) -> Vec<CandidatePair> {
    let mut pairs = Vec::with_capacity(block.source_members.len() * block.target_members.len());
    for src in &block.source_members {
        for tgt in &block.target_members {
            pairs.push(CandidatePair {
                source_id: src.clone(),
                target_id: tgt.clone(),
                origin_block: block.ordinal,
            });
        }
    }
    pairs
}

/// Fill `pairs` for every block in place.
pub fn generate_all_pairs(blocks: &mut [Block]) {
    for block in blocks.iter_mut() {
        block.pairs = generate_pairs(block);
    }
}

/// Keep each pair key only at its first sighting, scanning blocks by
/// ascending ordinal and pairs in sequence. Block order and internal pair
/// order are otherwise preserved; blocks left empty are dropped.
pub fn deduplicate(blocks: Vec<Block>) -> Vec<Block> {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out = Vec::new();
    for mut block in blocks {
        block.pairs.retain(|pair| {
            seen.insert((pair.source_id.clone(), pair.target_id.clone()))
        });
        if !block.pairs.is_empty() {
            out.push(block);
        }
    }
    out
}

/// Split every block with more than `max_bs` pairs into consecutive chunks
/// preserving pair order. Sub-blocks inherit the parent key and receive
/// fresh ordinals in overall sequence; pairs are restamped with their
/// sub-block ordinal.
pub fn decompose(blocks: Vec<Block>, max_bs: usize) -> Result<Vec<Block>> {
    if max_bs < 1 {
        return Err(Error::Config("max_bs must be >= 1".into()));
    }
    let mut out: Vec<Block> = Vec::new();
    for block in blocks {
        if block.pairs.is_empty() {
            continue;
        }
        for chunk in block.pairs.chunks(max_bs) {
            let ordinal = out.len();
            let pairs: Vec<CandidatePair> = chunk
                .iter()
                .map(|p| CandidatePair {
                    origin_block: ordinal,
                    ..p.clone()
                })
                .collect();
            let mut source_members: Vec<String> = Vec::new();
            let mut target_members: Vec<String> = Vec::new();
            for pair in &pairs {
                if !source_members.contains(&pair.source_id) {
                    source_members.push(pair.source_id.clone());
                }
                if !target_members.contains(&pair.target_id) {
                    target_members.push(pair.target_id.clone());
                }
            }
            out.push(Block {
                ordinal,
                key: block.key.clone(),
                source_members,
                target_members,
                pairs,
            });
        }
    }
    Ok(out)
}

/// Full blocking stage: build, pair, dedup, decompose.
pub fn block_dataset(
    dataset: &crate::datamodel::Dataset,
    config: &BlockingConfig,
) -> Result<Vec<Block>> {
    config.validate()?;
    let mut blocks = build_blocks(dataset.scan_records(), config);
    generate_all_pairs(&mut blocks);
    let blocks = deduplicate(blocks);
    decompose(blocks, config.max_bs)
}
