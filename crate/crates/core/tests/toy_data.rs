use std::path::Path;

use pathgen::kg::{DiscardSet, KnowledgeGraph};
use pathgen::qa::{read_dataset, write_dataset};
use pathgen::toy::{toy_kg, toy_kg_records, toy_qa, write_kg_tsv, ToyKgConfig, ToyQaConfig};

fn data(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn bundled_files_match_generators() {
    let mut kg_bytes = Vec::new();
    write_kg_tsv(&mut kg_bytes, &toy_kg_records(&ToyKgConfig::default()).unwrap()).unwrap();
    assert_eq!(std::fs::read(data("toy_kg.tsv")).unwrap(), kg_bytes, "rerun the make_toy_data example");

    let kg = toy_kg(&ToyKgConfig::default()).unwrap();
    let mut qa_bytes = Vec::new();
    write_dataset(&mut qa_bytes, &toy_qa(&kg, &ToyQaConfig::default()).unwrap()).unwrap();
    assert_eq!(std::fs::read(data("toy_qa.jsonl")).unwrap(), qa_bytes, "rerun the make_toy_data example");
}

#[test]
fn bundled_graph_loads_like_the_generator() {
    let loaded = KnowledgeGraph::load_tsv(&data("toy_kg.tsv"), &DiscardSet::default()).unwrap();
    let built = toy_kg(&ToyKgConfig::default()).unwrap();
    assert_eq!(loaded.num_entities(), built.num_entities());
    assert_eq!(loaded.triplets(), built.triplets());
    let qa = read_dataset(std::io::BufReader::new(std::fs::File::open(data("toy_qa.jsonl")).unwrap())).unwrap();
    assert_eq!(qa.len(), 500);
    assert!(qa.iter().all(|q| q.choices.len() == 4));
}
