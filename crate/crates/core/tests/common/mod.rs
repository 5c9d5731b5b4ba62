//! Shared fixtures for the integration test targets.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockrag::config::RunConfig;
use blockrag::datamodel::{Record, Side};

/// Six-record product fixture with one multi-pair block and both match
/// outcomes under the mock backend.
pub fn write_tables(dir: &Path) {
    fs::write(
        dir.join("tableA.csv"),
        "id,name\n\
         a1,ipad apple tablet\n\
         a2,galaxy samsung phone\n\
         a3,thinkpad lenovo laptop\n\
         a4,ipod apple player\n",
    )
    .unwrap();
    fs::write(
        dir.join("tableB.csv"),
        "id,name\n\
         b1,ipad apple tablet\n\
         b2,galaxy samsung telephone\n\
         b3,macbook apple laptop\n",
    )
    .unwrap();
    fs::write(
        dir.join("test.csv"),
        "ltable_id,rtable_id,label\n\
         a1,b1,1\n\
         a2,b2,1\n\
         a3,b3,0\n\
         a1,b3,0\n\
         a4,b3,0\n",
    )
    .unwrap();
}

pub fn write_kg(dir: &Path) {
    fs::write(
        dir.join("catalog.jsonl"),
        concat!(
            r#"{"id":"e_ipad","kind":"entity","label":"ipad","description":"apple tablet"}"#,
            "\n",
            r#"{"id":"e_apple","kind":"entity","label":"apple","description":"maker of tablets"}"#,
            "\n",
            r#"{"id":"e_galaxy","kind":"entity","label":"galaxy","description":"samsung phone"}"#,
            "\n",
            r#"{"id":"e_samsung","kind":"entity","label":"samsung","description":"electronics maker"}"#,
            "\n",
            r#"{"id":"p_made_by","kind":"predicate","label":"made by","description":"manufacturer"}"#,
            "\n",
        ),
    )
    .unwrap();
    fs::write(
        dir.join("edges.tsv"),
        "e_ipad\tp_made_by\te_apple\ne_galaxy\tp_made_by\te_samsung\n",
    )
    .unwrap();
}

pub fn fixture_config(dir: &Path, variant: &str) -> RunConfig {
    let text = format!(
        r#"
        [run]
        dataset = "{d}"
        variant = "{variant}"
        output_dir = "{d}/out"

        [kg]
        catalog = "{d}/catalog.jsonl"
        edges = "{d}/edges.tsv"

        {extra}
        "#,
        d = dir.display(),
        variant = variant,
        extra = if variant.starts_with("ce_kg") {
            "[retrieval]\ngranularity = \"triple\"\n\n[search]\ntraversal = \"bfs\"\n"
        } else {
            ""
        },
    );
    RunConfig::parse(&text).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=7);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect()
}

/// A random two-table instance: records carry 1..=3 tokens drawn from a
/// small per-instance vocabulary so blocks overlap.
pub fn random_records(rng: &mut ChaCha8Rng, max_per_side: usize) -> Vec<Record> {
    let vocab_size = rng.gen_range(5..=30);
    let vocab: Vec<String> = (0..vocab_size).map(|_| random_word(rng)).collect();
    let mut records = Vec::new();
    let n_src = rng.gen_range(1..=max_per_side);
    let n_tgt = rng.gen_range(1..=max_per_side);
    for i in 0..n_src + n_tgt {
        let (id, side) = if i < n_src {
            (format!("s{i}"), Side::Source)
        } else {
            (format!("t{}", i - n_src), Side::Target)
        };
        let tokens = rng.gen_range(1..=3);
        let text = (0..tokens)
            .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
            .collect::<Vec<_>>()
            .join(" ");
        records.push(Record::new(id, side, vec![("name".into(), text)]));
    }
    records
}
