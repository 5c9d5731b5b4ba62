//! Quality metrics, cost accounting (retrieval calls, stage latency,
//! block amortization), and dataset loading for the Magellan-style
//! benchmark layout (`tableA.csv`, `tableB.csv`, `test.csv`).
//!
//! Labeled positives pruned by blocking count as false negatives, so
//! end-to-end F1 reflects blocking recall loss.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Decision, LabeledPair, MatchDecision, Record, Side};
use crate::{Error, Result};

/// Confusion counts over the labeled test pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Standard confusion counts. Labeled pairs without a decision (pruned by
/// blocking) are scored as predicted-no. Duplicate decisions for a key
/// are an integrity error.
pub fn confusion(decisions: &[MatchDecision], labeled: &[LabeledPair]) -> Result<Confusion> {
    let mut by_key: HashMap<(&str, &str), Decision> = HashMap::new();
    for decision in decisions {
        let key = (decision.source_id.as_str(), decision.target_id.as_str());
        if by_key.insert(key, decision.decision).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate decision for pair ({}, {})",
                decision.source_id, decision.target_id
            )));
        }
    }
    let mut counts = Confusion::default();
    for pair in labeled {
        let predicted = by_key
            .get(&(pair.source_id.as_str(), pair.target_id.as_str()))
            .copied()
            .unwrap_or(Decision::No);
        match (pair.label, predicted) {
            (true, Decision::Yes) => counts.tp += 1,
            (false, Decision::Yes) => counts.fp += 1,
            (true, Decision::No) => counts.fn_ += 1,
            (false, Decision::No) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Precision, recall, F1 with zero-denominator conventions: each is 0
/// when its denominator is 0.
pub fn prf1(counts: &Confusion) -> (f64, f64, f64) {
    let precision = if counts.tp + counts.fp > 0 {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    } else {
        0.0
    };
    let recall = if counts.tp + counts.fn_ > 0 {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Attribute a block-level stage time uniformly to each pair in the
/// block.
pub fn amortize(block_stage_seconds: f64, pairs_in_block: usize) -> Result<f64> {
    if pairs_in_block == 0 {
        return Err(Error::Usage("cannot amortize over zero pairs".into()));
    }
    Ok(block_stage_seconds / pairs_in_block as f64)
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

fn load_table(path: &Path, side: Side) -> Result<Vec<Record>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Load {
            file: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Load {
            file: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Load {
            file: path.display().to_string(),
            line: 1,
            message: "table has no columns; the first column must be the record id".into(),
        });
    }
    let mut records = Vec::new();
    for (row_index, row) in reader.records().enumerate() {
        let line = (row_index + 2) as u64;
        let row = row.map_err(|e| Error::Load {
            file: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let id = row
            .get(0)
            .filter(|v| !v.is_empty())
            .map(|v| v.to_string())
            // Inputs lacking ids get `<side>-<row index>` assigned.
            .unwrap_or_else(|| {
                let prefix = match side {
                    Side::Source => "source",
                    Side::Target => "target",
                };
                format!("{prefix}-{row_index}")
            });
        let attributes: Vec<(String, String)> = headers
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, name)| (name.clone(), row.get(i).unwrap_or("").to_string()))
            .collect();
        records.push(Record::new(id, side, attributes));
    }
    Ok(records)
}

/// Load a dataset directory: `tableA.csv` (source), `tableB.csv`
/// (target), and `test.csv` with `ltable_id,rtable_id,label` columns.
pub fn load_dataset(directory: &Path) -> Result<Dataset> {
    let source = load_table(&directory.join("tableA.csv"), Side::Source)?;
    let target = load_table(&directory.join("tableB.csv"), Side::Target)?;

    let test_path = directory.join("test.csv");
    let mut reader = csv::Reader::from_path(&test_path).map_err(|e| Error::Load {
        file: test_path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Load {
            file: test_path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Load {
            file: test_path.display().to_string(),
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let ltable = column("ltable_id")?;
    let rtable = column("rtable_id")?;
    let label_col = column("label")?;

    let source_ids: std::collections::HashSet<&str> =
        source.iter().map(|r| r.id.as_str()).collect();
    let target_ids: std::collections::HashSet<&str> =
        target.iter().map(|r| r.id.as_str()).collect();

    let mut labeled = Vec::new();
    for (row_index, row) in reader.records().enumerate() {
        let line = (row_index + 2) as u64;
        let fail = |message: String| Error::Load {
            file: test_path.display().to_string(),
            line,
            message,
        };
        let row = row.map_err(|e| fail(e.to_string()))?;
        let source_id = row.get(ltable).unwrap_or("").to_string();
        let target_id = row.get(rtable).unwrap_or("").to_string();
        if !source_ids.contains(source_id.as_str()) {
            return Err(fail(format!("ltable_id {source_id} not found in tableA.csv")));
        }
        if !target_ids.contains(target_id.as_str()) {
            return Err(fail(format!("rtable_id {target_id} not found in tableB.csv")));
        }
        let label = match row.get(label_col).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => return Err(fail(format!("label must be 0 or 1, got {other:?}"))),
        };
        labeled.push(LabeledPair {
            source_id,
            target_id,
            label,
        });
    }
    Dataset::new(source, target, labeled)
}

// ---------------------------------------------------------------------------
// Run metrics and reports
// ---------------------------------------------------------------------------

/// Wall-clock seconds per pipeline stage (monotonic clock, stage
/// boundaries at module entry/exit).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageSeconds {
    pub blocking: f64,
    pub retrieval: f64,
    pub expansion: f64,
    pub enrichment: f64,
    pub generation: f64,
}

impl StageSeconds {
    pub fn total(&self) -> f64 {
        self.blocking + self.retrieval + self.expansion + self.enrichment + self.generation
    }

    pub fn per_pair(&self, pairs: usize) -> StageSeconds {
        if pairs == 0 {
            return StageSeconds::default();
        }
        let n = pairs as f64;
        StageSeconds {
            blocking: self.blocking / n,
            retrieval: self.retrieval / n,
            expansion: self.expansion / n,
            enrichment: self.enrichment / n,
            generation: self.generation / n,
        }
    }
}

/// Full accounting for one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rac_count: u64,
    pub labeled_pairs: u64,
    pub candidate_pairs: u64,
    pub blocks: u64,
    pub stage_seconds: StageSeconds,
    pub per_pair_seconds: StageSeconds,
    pub seconds_total: f64,
    pub parse_clean: u64,
    pub parse_recovered: u64,
    pub parse_defaulted: u64,
    pub fallback_decisions: u64,
    pub truncated_queries: u64,
    pub enrichment_misses: u64,
    pub block_errors: u64,
}

impl RunMetrics {
    pub fn finish_quality(&mut self, counts: Confusion) {
        self.confusion = counts;
        let (p, r, f1) = prf1(&counts);
        self.precision = p;
        self.recall = r;
        self.f1 = f1;
    }
}

pub const CSV_HEADER: &str = "dataset,variant,blocking,max_bs,top_k,granularity,traversal,\
precision,recall,f1,rac,seconds_total,seconds_retrieval,seconds_expansion,seconds_enrichment,\
seconds_generation";

/// One cross-run CSV row keyed by (dataset, variant, blocking method,
/// max_bs, k).
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub dataset: String,
    pub variant: String,
    pub blocking: String,
    pub max_bs: usize,
    pub top_k: usize,
    pub granularity: String,
    pub traversal: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rac: u64,
    pub seconds_total: f64,
    pub seconds_retrieval: f64,
    pub seconds_expansion: f64,
    pub seconds_enrichment: f64,
    pub seconds_generation: f64,
}

/// Append one run row to the cross-run CSV, writing the fixed header for
/// a new file.
pub fn append_csv_row(path: &Path, row: &CsvRow) -> Result<()> {
    let new_file = !path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new_file {
        writeln!(file, "{CSV_HEADER}")?;
    }
    writeln!(
        file,
        "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        row.dataset,
        row.variant,
        row.blocking,
        row.max_bs,
        row.top_k,
        row.granularity,
        row.traversal,
        row.precision,
        row.recall,
        row.f1,
        row.rac,
        row.seconds_total,
        row.seconds_retrieval,
        row.seconds_expansion,
        row.seconds_enrichment,
        row.seconds_generation
    )?;
    Ok(())
}

/// Full JSON report: metrics plus the configuration echo and run seed for
/// reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub timestamp_unix: u64,
    pub seed: u64,
    pub config: crate::config::RunConfig,
    pub metrics: RunMetrics,
}

pub fn write_report(path: &Path, report: &Report) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(s: &str, t: &str, d: Decision) -> MatchDecision {
        MatchDecision {
            source_id: s.into(),
            target_id: t.into(),
            decision: d,
            provenance: crate::datamodel::Provenance::Parsed,
            raw_text: String::new(),
        }
    }

    fn labeled(s: &str, t: &str, label: bool) -> LabeledPair {
        LabeledPair {
            source_id: s.into(),
            target_id: t.into(),
            label,
        }
    }

    #[test]
    fn confusion_all_correct() {
        let decisions = vec![
            decision("s1", "t1", Decision::Yes),
            decision("s2", "t2", Decision::No),
        ];
        let labels = vec![labeled("s1", "t1", true), labeled("s2", "t2", false)];
        let c = confusion(&decisions, &labels).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 0, 0, 1));
    }

    #[test]
    fn confusion_hand_enumerated() {
        // decisions {yes,yes,yes,no,no,no} vs labels {1,0,1,1,0,0}
        let ds = [
            Decision::Yes,
            Decision::Yes,
            Decision::Yes,
            Decision::No,
            Decision::No,
            Decision::No,
        ];
        let ls = [true, false, true, true, false, false];
        let decisions: Vec<MatchDecision> = ds
            .iter()
            .enumerate()
            .map(|(i, &d)| decision(&format!("s{i}"), &format!("t{i}"), d))
            .collect();
        let labels: Vec<LabeledPair> = ls
            .iter()
            .enumerate()
            .map(|(i, &l)| labeled(&format!("s{i}"), &format!("t{i}"), l))
            .collect();
        let c = confusion(&decisions, &labels).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 2));
    }

    #[test]
    fn confusion_pruned_positive_is_fn() {
        let labels = vec![labeled("s1", "t1", true)];
        let c = confusion(&[], &labels).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 0, 1, 0));
    }

    #[test]
    fn confusion_duplicate_decision_is_error() {
        let decisions = vec![
            decision("s1", "t1", Decision::Yes),
            decision("s1", "t1", Decision::No),
        ];
        assert!(matches!(
            confusion(&decisions, &[]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn confusion_total_equals_labeled_count() {
        let labels: Vec<LabeledPair> = (0..9)
            .map(|i| labeled(&format!("s{i}"), &format!("t{i}"), i % 3 == 0))
            .collect();
        let decisions: Vec<MatchDecision> = (0..5)
            .map(|i| {
                decision(
                    &format!("s{i}"),
                    &format!("t{i}"),
                    if i % 2 == 0 { Decision::Yes } else { Decision::No },
                )
            })
            .collect();
        let c = confusion(&decisions, &labels).unwrap();
        assert_eq!(c.tp + c.fp + c.fn_ + c.tn, labels.len() as u64);
    }

    #[test]
    fn prf1_hand_arithmetic() {
        let c = Confusion {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 0,
        };
        let (p, r, f1) = prf1(&c);
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 0.6).abs() < 1e-12);
        assert!((f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn prf1_degenerate_zero() {
        assert_eq!(prf1(&Confusion::default()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf1_perfect() {
        let c = Confusion {
            tp: 7,
            fp: 0,
            fn_: 0,
            tn: 3,
        };
        assert_eq!(prf1(&c), (1.0, 1.0, 1.0));
    }

    #[test]
    fn amortize_basic() {
        assert_eq!(amortize(6.0, 6).unwrap(), 1.0);
        assert_eq!(amortize(2.5, 1).unwrap(), 2.5);
        assert!(matches!(amortize(1.0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn amortize_conserves_totals() {
        let blocks = [(1.25f64, 4usize), (0.5, 1), (3.0, 6)];
        let total: f64 = blocks.iter().map(|(t, _)| t).sum();
        let reassembled: f64 = blocks
            .iter()
            .map(|&(t, n)| amortize(t, n).unwrap() * n as f64)
            .sum();
        assert!((total - reassembled).abs() < 1e-9);
    }

    fn write_fixture(dir: &Path) {
        fs::write(
            dir.join("tableA.csv"),
            "id,title,price\na1,iPad,499\na2,Galaxy,399\n",
        )
        .unwrap();
        fs::write(
            dir.join("tableB.csv"),
            "id,title,price\nb1,iPad,499\nb2,Pixel,299\n",
        )
        .unwrap();
        fs::write(
            dir.join("test.csv"),
            "ltable_id,rtable_id,label\na1,b1,1\na2,b2,0\n",
        )
        .unwrap();
    }

    #[test]
    fn load_dataset_minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.source_table.len(), 2);
        assert_eq!(ds.target_table.len(), 2);
        assert_eq!(ds.positive_count(), 1);
        assert_eq!(ds.negative_count(), 1);
        assert_eq!(
            ds.source("a1").unwrap().attributes,
            vec![("title".to_string(), "iPad".to_string()), ("price".to_string(), "499".to_string())]
        );
    }

    #[test]
    fn load_dataset_dangling_id_names_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(
            dir.path().join("test.csv"),
            "ltable_id,rtable_id,label\na1,b1,1\naX,b2,0\n",
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("aX"));
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn load_dataset_non_binary_label() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(
            dir.path().join("test.csv"),
            "ltable_id,rtable_id,label\na1,b1,2\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn load_dataset_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(dir.path().join("test.csv"), "ltable_id,label\na1,1\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { message, .. }) => assert!(message.contains("rtable_id")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn csv_row_appends_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let row = CsvRow {
            dataset: "fixture".into(),
            variant: "ce_rag4em_br".into(),
            blocking: "qgram".into(),
            max_bs: 6,
            top_k: 2,
            granularity: "entity".into(),
            traversal: "".into(),
            precision: 1.0,
            recall: 0.5,
            f1: 2.0 / 3.0,
            rac: 4,
            seconds_total: 0.1,
            seconds_retrieval: 0.01,
            seconds_expansion: 0.0,
            seconds_enrichment: 0.0,
            seconds_generation: 0.05,
        };
        append_csv_row(&path, &row).unwrap();
        append_csv_row(&path, &row).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("fixture,ce_rag4em_br,qgram,6,2,entity,"));
    }
}
