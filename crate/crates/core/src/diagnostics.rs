//! Finite-difference checks of every trainable module on tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{encode_record, Vocab};
use crate::error::Result;
use crate::generator::{self, GeneratorConfig};
use crate::kg::{DiscardSet, KnowledgeGraph};
use crate::numerics::{grad_check, ParamStore, Tensor};
use crate::qa::{batch_loss, ChoiceEvidence, Layout, Prepared, Variant};
use crate::sampler::{Path, PathRecord};

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const SAMPLES_PER_PARAM: usize = 24;

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl ModuleCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

fn tiny_kg() -> Result<KnowledgeGraph> {
    KnowledgeGraph::from_records(
        [
            ("predator", "DistinctFrom", "prey"),
            ("prey", "IsA", "animal"),
            ("animal", "AtLocation", "forest"),
            ("forest", "HasA", "tree"),
            ("tree", "IsA", "plant"),
        ],
        &DiscardSet::default(),
    )
}

/// Widen the uniform init so activations leave the near-linear regime.
fn spread(st: &mut ParamStore<f64>, factor: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = st.ids().collect();
    for id in ids {
        for v in st.value_mut(id).data_mut() {
            *v = *v * factor + rng.gen_range(-0.1..0.1);
        }
    }
}

fn generator_check(kg: &KnowledgeGraph, seed: u64) -> Result<ModuleCheck> {
    let vocab = Vocab::build(kg);
    let cfg = GeneratorConfig { width: 8, heads: 2, ff_width: 12, blocks: 2, max_seq_len: 32 };
    let rec = |e: &[&str], r: &[&str]| PathRecord {
        entities: e.iter().map(|s| s.to_string()).collect(),
        relations: r.iter().map(|s| s.to_string()).collect(),
        hops: r.len(),
    };
    let seqs = [
        encode_record(&rec(&["predator", "prey", "animal"], &["DistinctFrom", "IsA"]), &vocab)?,
        encode_record(&rec(&["plant", "tree"], &["_IsA"]), &vocab)?,
    ];
    let mut st = generator::init_params::<f64>(&cfg, vocab.len(), seed)?;
    spread(&mut st, 8.0, seed);
    let refs: Vec<_> = seqs.iter().collect();
    let r = grad_check(&st, |s, g| generator::batch_loss(s, &cfg, g, &refs), GRAD_CHECK_EPS, SAMPLES_PER_PARAM, seed)?;
    Ok(ModuleCheck { module: "generator", max_rel_error: r.max_rel_error, coordinates: r.coordinates_checked })
}

fn qa_checks(kg: &KnowledgeGraph, seed: u64) -> Result<Vec<ModuleCheck>> {
    let id = |p: &str| kg.entity_by_phrase(p).expect("tiny graph entity");
    let rel = |r: &str| kg.relation_by_name(r).expect("tiny graph relation");
    let one = Path::new(vec![id("prey"), id("animal")], vec![rel("IsA")])?;
    let two = Path::new(vec![id("predator"), id("prey"), id("animal")], vec![rel("DistinctFrom"), rel("IsA")])?;
    let three = Path::new(
        vec![id("animal"), id("forest"), id("tree"), id("plant")],
        vec![rel("AtLocation"), rel("HasA"), rel("IsA")],
    )?;
    let layout = Layout {
        variant: Variant::PgFull,
        width: 6,
        words: 9,
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        gen_width: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| {
        let data = (0..n * layout.gen_width).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_rows(n, layout.gen_width, data)
    };
    let examples = [
        Prepared {
            context: vec![vec![2, 3, 1, 4], vec![2, 3, 1, 5, 6], vec![7, 1, 8]],
            evidence: vec![
                ChoiceEvidence { generated: gen(3), static_paths: vec![one.clone(), two.clone(), three.clone()] },
                ChoiceEvidence { generated: gen(1), static_paths: vec![] },
                ChoiceEvidence { generated: gen(0), static_paths: vec![two.clone()] },
            ],
            answer: 0,
        },
        Prepared {
            context: vec![vec![5, 1, 2], vec![0, 1, 3]],
            evidence: vec![
                ChoiceEvidence { generated: gen(2), static_paths: vec![three, one] },
                ChoiceEvidence { generated: gen(2), static_paths: vec![two] },
            ],
            answer: 1,
        },
    ];
    let mut st = layout.init_params::<f64>(seed)?;
    spread(&mut st, 12.0, seed ^ 1);
    let refs: Vec<_> = examples.iter().collect();
    let r = grad_check(&st, |s, g| batch_loss(g, s, &layout, &refs), GRAD_CHECK_EPS, SAMPLES_PER_PARAM, seed)?;
    let groups: [(&'static str, &[&str]); 4] = [
        ("context encoder", &["ctx."]),
        ("path mlp", &["static."]),
        ("attention", &["att."]),
        ("classifier", &["cls."]),
    ];
    Ok(groups
        .iter()
        .map(|(module, prefixes)| {
            let errs: Vec<f64> = r
                .per_param
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(_, e)| *e)
                .collect();
            let coordinates = r
                .per_param
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, _)| st.value(st.id(n).expect("listed")).len().min(SAMPLES_PER_PARAM))
                .sum();
            ModuleCheck { module, max_rel_error: errs.into_iter().fold(0.0, f64::max), coordinates }
        })
        .collect())
}

/// Worst relative error of tape gradients against central differences
/// (64-bit, eps 1e-5) for the generator and each QA module.
pub fn module_grad_checks(seed: u64) -> Result<Vec<ModuleCheck>> {
    let kg = tiny_kg()?;
    let mut out = vec![generator_check(&kg, seed)?];
    out.extend(qa_checks(&kg, seed)?);
    Ok(out)
}
