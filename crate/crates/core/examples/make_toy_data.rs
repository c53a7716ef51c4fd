//! Regenerate the bundled toy graph and question set.
//!
//! cargo run -p pathgen --example make_toy_data -- [out_dir]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use pathgen::qa::write_dataset;
use pathgen::toy::{toy_kg, toy_kg_records, toy_qa, write_kg_tsv, ToyKgConfig, ToyQaConfig};

fn main() -> pathgen::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data"));
    std::fs::create_dir_all(&dir)?;
    let cfg = ToyKgConfig::default();
    write_kg_tsv(BufWriter::new(File::create(dir.join("toy_kg.tsv"))?), &toy_kg_records(&cfg)?)?;
    let qa = toy_qa(&toy_kg(&cfg)?, &ToyQaConfig::default())?;
    write_dataset(BufWriter::new(File::create(dir.join("toy_qa.jsonl"))?), &qa)?;
    println!("wrote toy data to {}", dir.display());
    Ok(())
}
