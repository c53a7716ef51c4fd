use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{ground, Grounding, QaExample};
use super::model::{argmax, batch_loss, forward, ChoiceEvidence, Layout, Prepared, Variant, WordVocab};
use super::retrieval::{retrieve_static_paths, DEFAULT_PATH_CAP};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kg::{EntityId, KnowledgeGraph, LemmaTable};
use crate::numerics::{softmax, Adam, Checkpoint, Graph, ParamStore, Tensor, CLIP_NORM};

pub const CHECKPOINT_KIND: &str = "qa";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub width: usize,
    pub max_hops: usize,
    pub path_cap: usize,
    /// Learning rate of the knowledge module and classifier.
    pub lr: f64,
    /// Learning rate of the context encoder.
    pub ctx_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            width: 128,
            max_hops: 2,
            path_cap: DEFAULT_PATH_CAP,
            lr: 1e-3,
            ctx_lr: 1e-5,
            batch_size: 16,
            max_epochs: 30,
            patience: 2,
            seed: 0,
        }
    }
}

/// Frozen inputs shared by evidence building.
#[derive(Clone, Copy)]
pub struct EvidenceSource<'a> {
    pub kg: &'a KnowledgeGraph,
    pub generator: Option<&'a Generator>,
    pub lemmas: Option<&'a LemmaTable>,
    pub max_hops: usize,
    pub path_cap: usize,
}

impl<'a> EvidenceSource<'a> {
    pub fn new(kg: &'a KnowledgeGraph, generator: Option<&'a Generator>, cfg: &QaConfig) -> Self {
        EvidenceSource { kg, generator, lemmas: None, max_hops: cfg.max_hops, path_cap: cfg.path_cap }
    }

    fn gen_width(&self) -> usize {
        self.generator.map_or(0, |g| g.config.width)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceStats {
    pub questions: usize,
    /// Questions with no grounded entity in the question or in every choice.
    pub ungrounded_questions: usize,
    /// Question-choice pairs whose evidence set is empty.
    pub empty_choices: usize,
    pub generated_paths: usize,
    pub static_paths: usize,
    /// Entity pairs skipped because a phrase is outside the generator vocabulary.
    pub untokenizable_pairs: usize,
}

/// Evidence for every example under `variant`.
pub fn build_evidence(
    examples: &[QaExample],
    src: &EvidenceSource,
    variant: Variant,
) -> Result<(Vec<Vec<ChoiceEvidence>>, EvidenceStats)> {
    let groundings: Vec<Grounding> = examples.par_iter().map(|ex| ground(ex, src.kg, src.lemmas)).collect();
    let gw = src.gen_width();

    let mut embeddings: BTreeMap<(EntityId, EntityId), Option<Vec<f32>>> = BTreeMap::new();
    if variant.uses_generated() {
        let gen = src.generator.ok_or_else(|| Error::Config(format!("variant {variant} needs a generator")))?;
        let pairs: BTreeSet<(EntityId, EntityId)> = groundings
            .iter()
            .flat_map(|g| {
                g.choices.iter().flat_map(move |c| g.question.iter().flat_map(move |&q| c.iter().map(move |&a| (q, a))))
            })
            .collect();
        let pairs: Vec<(EntityId, EntityId)> = pairs.into_iter().collect();
        let embedded: Vec<Option<Vec<f32>>> = pairs
            .par_iter()
            .map(|&(q, a)| match gen.generate_path(src.kg.entity_phrase(q), src.kg.entity_phrase(a), Some(src.kg)) {
                Ok(r) => gen.path_embedding(&r.sequence).map(Some),
                Err(Error::OutOfVocab(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        embeddings.extend(pairs.into_iter().zip(embedded));
    }

    let per_example: Vec<(Vec<ChoiceEvidence>, EvidenceStats)> = groundings
        .par_iter()
        .map(|g| {
            let mut stats = EvidenceStats { questions: 1, ..Default::default() };
            if g.question.is_empty() || g.choices.iter().all(Vec::is_empty) {
                stats.ungrounded_questions = 1;
            }
            let mut out = Vec::with_capacity(g.choices.len());
            for choice in &g.choices {
                let mut ev = ChoiceEvidence::empty(gw);
                if variant.uses_generated() {
                    let mut rows = Vec::new();
                    let mut n = 0;
                    for &q in &g.question {
                        for &a in choice {
                            match &embeddings[&(q, a)] {
                                Some(e) => {
                                    rows.extend_from_slice(e);
                                    n += 1;
                                }
                                None => stats.untokenizable_pairs += 1,
                            }
                        }
                    }
                    ev.generated = Tensor::new(vec![n, gw], rows)?;
                    stats.generated_paths += n;
                }
                if variant.uses_static() {
                    ev.static_paths = retrieve_static_paths(src.kg, &g.question, choice, src.max_hops, src.path_cap)?;
                    stats.static_paths += ev.static_paths.len();
                }
                if variant != Variant::NoKg && ev.num_generated() == 0 && ev.static_paths.is_empty() {
                    stats.empty_choices += 1;
                }
                out.push(ev);
            }
            Ok((out, stats))
        })
        .collect::<Result<_>>()?;

    let mut stats = EvidenceStats::default();
    let mut evidence = Vec::with_capacity(examples.len());
    for (ev, s) in per_example {
        stats.questions += s.questions;
        stats.ungrounded_questions += s.ungrounded_questions;
        stats.empty_choices += s.empty_choices;
        stats.generated_paths += s.generated_paths;
        stats.static_paths += s.static_paths;
        stats.untokenizable_pairs += s.untokenizable_pairs;
        evidence.push(ev);
    }
    Ok((evidence, stats))
}

#[derive(Debug, Clone)]
pub struct QaModel {
    pub layout: Layout,
    pub config: QaConfig,
    pub words: WordVocab,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    layout: Layout,
    config: QaConfig,
    words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub answer: usize,
    pub correct: bool,
    pub probs: Vec<f64>,
    pub generated_paths: Vec<usize>,
    pub static_paths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEvaluation {
    pub variant: Variant,
    pub accuracy: f64,
    pub evidence: EvidenceStats,
    pub predictions: Vec<Prediction>,
}

impl QaModel {
    pub fn prepare(&self, examples: &[QaExample], evidence: Vec<Vec<ChoiceEvidence>>) -> Vec<Prepared> {
        prepare(&self.words, examples, evidence)
    }

    /// Predicted choice and softmax probabilities; ties go to the lowest index.
    pub fn predict(&self, ex: &Prepared) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::new();
        let f = forward(&mut g, &self.params, &self.layout, ex)?;
        let scores: Vec<f64> = g.value(f.scores).data().iter().map(|&v| v as f64).collect();
        let probs = softmax(&scores)?;
        Ok((argmax(&scores), probs))
    }

    pub fn accuracy(&self, data: &[Prepared]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let correct: Vec<bool> =
            data.par_iter().map(|ex| Ok(self.predict(ex)?.0 == ex.answer)).collect::<Result<_>>()?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
    }

    /// Accuracy and mean gold-choice negative log-likelihood.
    pub fn dev_metrics(&self, data: &[Prepared]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let per: Vec<(bool, f64)> = data
            .par_iter()
            .map(|ex| {
                let (pred, probs) = self.predict(ex)?;
                Ok((pred == ex.answer, -probs[ex.answer].max(f64::MIN_POSITIVE).ln()))
            })
            .collect::<Result<_>>()?;
        let n = data.len() as f64;
        let correct = per.iter().filter(|p| p.0).count() as f64;
        Ok((correct / n, per.iter().map(|p| p.1).sum::<f64>() / n))
    }

    pub fn evaluate(&self, examples: &[QaExample], src: &EvidenceSource) -> Result<QaEvaluation> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        self.check_graph(src.kg)?;
        let (evidence, stats) = build_evidence(examples, src, self.layout.variant)?;
        let prepared = self.prepare(examples, evidence);
        let predictions: Vec<Prediction> = examples
            .par_iter()
            .zip(&prepared)
            .map(|(ex, p)| {
                let (predicted, probs) = self.predict(p)?;
                Ok(Prediction {
                    id: ex.id.clone(),
                    predicted,
                    answer: ex.answer,
                    correct: predicted == ex.answer,
                    probs,
                    generated_paths: p.evidence.iter().map(ChoiceEvidence::num_generated).collect(),
                    static_paths: p.evidence.iter().map(|e| e.static_paths.len()).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let accuracy = predictions.iter().filter(|p| p.correct).count() as f64 / predictions.len() as f64;
        Ok(QaEvaluation { variant: self.layout.variant, accuracy, evidence: stats, predictions })
    }

    fn check_graph(&self, kg: &KnowledgeGraph) -> Result<()> {
        if self.layout.variant.uses_static()
            && (self.layout.entities != kg.num_entities() || self.layout.relations != kg.num_relations())
        {
            return Err(Error::Config(format!(
                "model was trained on a graph with {} entities and {} relations, got {} and {}",
                self.layout.entities,
                self.layout.relations,
                kg.num_entities(),
                kg.num_relations()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta { layout: self.layout, config: self.config, words: self.words.words().to_vec() };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta)?,
            vocab: None,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(ck.meta)?;
        let expected = meta.layout.init_params::<f32>(0)?;
        if expected.len() != ck.params.len()
            || expected
                .entries()
                .iter()
                .zip(ck.params.entries())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Checkpoint("parameter layout does not match QA model metadata".into()));
        }
        Ok(QaModel {
            layout: meta.layout,
            config: meta.config,
            words: WordVocab::from_words(meta.words),
            params: ck.params,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

pub fn prepare(words: &WordVocab, examples: &[QaExample], evidence: Vec<Vec<ChoiceEvidence>>) -> Vec<Prepared> {
    examples
        .iter()
        .zip(evidence)
        .map(|(ex, ev)| Prepared {
            context: ex.choices.iter().map(|c| words.encode_pair(&ex.question, c)).collect(),
            evidence: ev,
            answer: ex.answer,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub variant: Variant,
    pub epochs: Vec<QaEpoch>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub train_evidence: EvidenceStats,
    pub dev_evidence: EvidenceStats,
}

/// Train a QA model of the given variant. The generator is only read.
pub fn train_qa(
    train: &[QaExample],
    dev: &[QaExample],
    src: &EvidenceSource,
    variant: Variant,
    cfg: &QaConfig,
) -> Result<(QaModel, QaReport)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("train and dev sets must be non-empty"));
    }
    let words = WordVocab::build(
        train.iter().flat_map(|ex| std::iter::once(ex.question.as_str()).chain(ex.choices.iter().map(String::as_str))),
    );
    let layout = Layout {
        variant,
        width: cfg.width,
        words: words.len(),
        entities: src.kg.num_entities(),
        relations: src.kg.num_relations(),
        gen_width: src.gen_width(),
    };
    let (train_ev, train_stats) = build_evidence(train, src, variant)?;
    let (dev_ev, dev_stats) = build_evidence(dev, src, variant)?;
    let train_p = prepare(&words, train, train_ev);
    let dev_p = prepare(&words, dev, dev_ev);
    let (model, epochs, best_epoch, best_dev_accuracy) = fit(layout, words, &train_p, &dev_p, cfg)?;
    Ok((
        model,
        QaReport {
            variant,
            epochs,
            best_epoch,
            best_dev_accuracy,
            train_evidence: train_stats,
            dev_evidence: dev_stats,
        },
    ))
}

/// Optimize on prepared examples with early stopping on dev accuracy.
pub fn fit(
    layout: Layout,
    words: WordVocab,
    train: &[Prepared],
    dev: &[Prepared],
    cfg: &QaConfig,
) -> Result<(QaModel, Vec<QaEpoch>, usize, f64)> {
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut model = QaModel { layout, config: *cfg, words, params: layout.init_params(cfg.seed)? };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a_5eed);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    // Epoch 1 always becomes the first best; an untrained model can score a
    // lucky dev accuracy that would otherwise stall training. Accuracy ties
    // are broken by dev loss, since small dev sets move in coarse steps.
    let mut best = ((f64::NEG_INFINITY, f64::INFINITY), 0usize, model.params.clone());
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            model.params.zero_grads();
            let mut g = Graph::new();
            let l = batch_loss(&mut g, &model.params, &model.layout, &batch)?;
            let loss = g.value(l).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            g.backward(l)?;
            g.accumulate_into(&mut model.params)?;
            model.params.clip_grad_norm(CLIP_NORM as f32);
            adam.step_with(&mut model.params, |name| if name.starts_with("ctx.") { cfg.ctx_lr } else { cfg.lr })?;
            step += 1;
            total += loss * batch.len() as f64;
        }
        let (dev_accuracy, dev_loss) = model.dev_metrics(dev)?;
        epochs.push(QaEpoch { epoch, train_loss: total / train.len() as f64, dev_accuracy, dev_loss });
        let (best_acc, best_loss) = best.0;
        if dev_accuracy > best_acc || (dev_accuracy == best_acc && dev_loss < best_loss) {
            best = ((dev_accuracy, dev_loss), epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.2;
    model.params.zero_grads();
    Ok((model, epochs, best.1, best.0 .0))
}
