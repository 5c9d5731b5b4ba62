//! Command-line entry point: each pipeline stage is a subcommand, runs
//! are driven by a TOML config with `--set` overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockrag::config::RunConfig;
use blockrag::datamodel::{Decision, MatchDecision, Provenance};
use blockrag::evaluation;
use blockrag::pipeline;
use blockrag::retrieval::{load_catalog, Embedder, MockEmbedder, RemoteEmbedder, VectorIndex};

#[derive(Parser)]
#[command(name = "blockrag", about = "Blocking-based retrieval-augmented entity matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a KG catalog into a vector index file.
    IndexKg {
        /// JSON Lines catalog of entities and predicates.
        #[arg(long)]
        catalog: PathBuf,
        /// Output index file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = blockrag::retrieval::DEFAULT_DIMENSION)]
        dimension: usize,
        /// Use the remote embedding endpoint (BLOCKRAG_EMBEDDER_URL)
        /// instead of the deterministic mock embedder.
        #[arg(long)]
        remote: bool,
    },
    /// Run blocking only and print block statistics.
    Block {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Execute one full pipeline run and emit reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one pipeline execution per [sweep] grid point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score an existing decision file against a dataset's labels.
    Eval {
        /// Decisions JSONL emitted by `run`.
        #[arg(long)]
        decisions: PathBuf,
        /// Dataset directory with tableA.csv/tableB.csv/test.csv.
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn real_main() -> blockrag::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::IndexKg {
            catalog,
            out,
            dimension,
            remote,
        } => {
            let embedder: Box<dyn Embedder> = if remote {
                Box::new(RemoteEmbedder::from_env(dimension)?)
            } else {
                Box::new(MockEmbedder::new(dimension))
            };
            let items = load_catalog(&catalog)?;
            let index = VectorIndex::build(&items, embedder.as_ref())?;
            index.save(&out)?;
            println!(
                "indexed {} items (dimension {}) -> {}",
                index.items.len(),
                index.dimension,
                out.display()
            );
        }
        Command::Block { config, overrides } => {
            let config = RunConfig::load(&config, &overrides)?;
            let dataset = evaluation::load_dataset(&config.run.dataset)?;
            let blocks = pipeline::blocking_stage(&dataset, &config)?;
            let pairs: usize = blocks.iter().map(|b| b.pairs.len()).sum();
            println!(
                "{} records + {} records -> {} blocks, {} candidate pairs (max_bs {})",
                dataset.source_table.len(),
                dataset.target_table.len(),
                blocks.len(),
                pairs,
                config.blocking.max_bs
            );
            for block in blocks.iter().take(10) {
                println!(
                    "  block {} key={:?} pairs={}",
                    block.ordinal,
                    block.key,
                    block.pairs.len()
                );
            }
            if blocks.len() > 10 {
                println!("  ... {} more blocks", blocks.len() - 10);
            }
        }
        Command::Run { config, overrides } => {
            let config = RunConfig::load(&config, &overrides)?;
            let outcome = pipeline::run(&config)?;
            let m = &outcome.metrics;
            println!(
                "variant={} pairs={} blocks={} rac={}",
                config.run.variant.label(),
                m.candidate_pairs,
                m.blocks,
                m.rac_count
            );
            println!(
                "precision={:.4} recall={:.4} f1={:.4} (tp={} fp={} fn={} tn={})",
                m.precision, m.recall, m.f1, m.confusion.tp, m.confusion.fp, m.confusion.fn_,
                m.confusion.tn
            );
            println!(
                "seconds total={:.3} blocking={:.3} retrieval={:.3} expansion={:.3} enrichment={:.3} generation={:.3}",
                m.seconds_total,
                m.stage_seconds.blocking,
                m.stage_seconds.retrieval,
                m.stage_seconds.expansion,
                m.stage_seconds.enrichment,
                m.stage_seconds.generation
            );
            println!("report: {}", outcome.report_path.display());
            println!("decisions: {}", outcome.decisions_path.display());
        }
        Command::Sweep { config, overrides } => {
            let config = RunConfig::load(&config, &overrides)?;
            let outcome = pipeline::sweep(&config)?;
            println!("{}", evaluation::CSV_HEADER);
            for row in &outcome.rows {
                println!(
                    "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
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
                );
            }
            for (label, error) in &outcome.failures {
                eprintln!("failed point [{label}]: {error}");
            }
            println!("csv: {}", outcome.csv_path.display());
        }
        Command::Eval { decisions, dataset } => {
            let dataset = evaluation::load_dataset(&dataset)?;
            let text = std::fs::read_to_string(&decisions)?;
            let mut parsed: Vec<MatchDecision> = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| blockrag::Error::Load {
                        file: decisions.display().to_string(),
                        line: (i + 1) as u64,
                        message: e.to_string(),
                    })?;
                let field = |name: &str| -> blockrag::Result<String> {
                    value
                        .get(name)
                        .and_then(|v| v.as_str())
                        .map(|s| s.to_string())
                        .ok_or_else(|| blockrag::Error::Load {
                            file: decisions.display().to_string(),
                            line: (i + 1) as u64,
                            message: format!("missing field {name}"),
                        })
                };
                let decision = match field("decision")?.as_str() {
                    "yes" => Decision::Yes,
                    "no" => Decision::No,
                    other => {
                        return Err(blockrag::Error::Load {
                            file: decisions.display().to_string(),
                            line: (i + 1) as u64,
                            message: format!("decision must be yes or no, got {other:?}"),
                        })
                    }
                };
                parsed.push(MatchDecision {
                    source_id: field("source_id")?,
                    target_id: field("target_id")?,
                    decision,
                    provenance: Provenance::Parsed,
                    raw_text: String::new(),
                });
            }
            let counts = evaluation::confusion(&parsed, &dataset.labeled_pairs)?;
            let (p, r, f1) = evaluation::prf1(&counts);
            println!(
                "pairs={} tp={} fp={} fn={} tn={}",
                dataset.labeled_pairs.len(),
                counts.tp,
                counts.fp,
                counts.fn_,
                counts.tn
            );
            println!("precision={p:.4} recall={r:.4} f1={f1:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
