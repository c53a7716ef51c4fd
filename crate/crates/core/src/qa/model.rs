use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Segment, Tensor, Var, INIT_SCALE};
use crate::sampler::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NoKg,
    StaticRn,
    PgLocal,
    PgGlobal,
    PgFull,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::NoKg, Variant::StaticRn, Variant::PgLocal, Variant::PgGlobal, Variant::PgFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoKg => "no-kg",
            Variant::StaticRn => "static-rn",
            Variant::PgLocal => "pg-local",
            Variant::PgGlobal => "pg-global",
            Variant::PgFull => "pg-full",
        }
    }

    pub fn uses_generated(self) -> bool {
        matches!(self, Variant::PgLocal | Variant::PgGlobal | Variant::PgFull)
    }

    pub fn uses_static(self) -> bool {
        matches!(self, Variant::StaticRn | Variant::PgFull)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

pub const UNK: usize = 0;
pub const SEP_WORD: usize = 1;

/// Lowercase alphanumeric words of free text.
pub fn text_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Context-encoder vocabulary: `[UNK]`, `[SEP]`, then sorted words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(text_words(t));
        }
        let words = ["[UNK]".to_string(), "[SEP]".to_string()].into_iter().chain(set).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordVocab { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text_words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    /// `question [SEP] choice`; an empty result becomes a single `[UNK]`.
    pub fn encode_pair(&self, question: &str, choice: &str) -> Vec<usize> {
        let mut ids = self.encode(question);
        ids.push(SEP_WORD);
        ids.extend(self.encode(choice));
        ids
    }
}

/// Shapes of a QA model's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub variant: Variant,
    pub width: usize,
    pub words: usize,
    pub entities: usize,
    pub relations: usize,
    /// Width of generated-path embeddings.
    pub gen_width: usize,
}

impl Layout {
    /// Width of the knowledge vector k.
    pub fn knowledge_width(&self) -> usize {
        let mut w = 0;
        if self.variant.uses_generated() {
            w += self.gen_width;
        }
        if self.variant.uses_static() {
            w += self.width;
        }
        w
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let d = self.width;
        if d == 0 || self.words == 0 {
            return Err(Error::Config("QA width and word vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add_uniform("ctx.emb", &[self.words, d], INIT_SCALE, &mut rng)?;
        s.add_uniform("ctx.w", &[d, d], INIT_SCALE, &mut rng)?;
        s.add_zeros("ctx.b", &[d])?;
        if self.variant.uses_generated() {
            if self.gen_width == 0 {
                return Err(Error::Config("generated-path variants need a generator width".into()));
            }
            s.add_uniform("att.gen.w", &[self.gen_width, d], INIT_SCALE, &mut rng)?;
            s.add_zeros("att.gen.b", &[d])?;
        }
        if self.variant.uses_static() {
            if self.entities == 0 || self.relations == 0 {
                return Err(Error::Config("static-path variants need a non-empty graph".into()));
            }
            s.add_uniform("static.ent", &[self.entities, d], INIT_SCALE, &mut rng)?;
            s.add_uniform("static.rel", &[self.relations, d], INIT_SCALE, &mut rng)?;
            s.add_uniform("static.mlp1.w", &[3 * d, d], INIT_SCALE, &mut rng)?;
            s.add_zeros("static.mlp1.b", &[d])?;
            s.add_uniform("static.mlp2.w", &[d, d], INIT_SCALE, &mut rng)?;
            s.add_zeros("static.mlp2.b", &[d])?;
            s.add_uniform("att.static.w", &[d, d], INIT_SCALE, &mut rng)?;
            s.add_zeros("att.static.b", &[d])?;
        }
        s.add_uniform("cls.w", &[d + self.knowledge_width(), 1], INIT_SCALE, &mut rng)?;
        s.add_zeros("cls.b", &[1])?;
        Ok(s)
    }
}

/// Evidence for one question-choice pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceEvidence {
    /// Generated-path embeddings, one row per (question entity, choice
    /// entity) pair.
    pub generated: Tensor<f32>,
    pub static_paths: Vec<Path>,
}

impl ChoiceEvidence {
    pub fn empty(gen_width: usize) -> Self {
        ChoiceEvidence { generated: Tensor::zeros(&[0, gen_width]), static_paths: Vec::new() }
    }

    pub fn num_generated(&self) -> usize {
        self.generated.shape()[0]
    }
}

/// A question ready for the model: context word ids and evidence per choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub context: Vec<Vec<usize>>,
    pub evidence: Vec<ChoiceEvidence>,
    pub answer: usize,
}

pub(crate) fn param<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(st, st.id(name)?))
}

fn linear<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = param(g, st, &format!("{prefix}.w"))?;
    let b = param(g, st, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Context vectors `tanh(W · mean(word embeddings) + b)`, one row per entry
/// of `contexts`.
pub fn encode_contexts<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, contexts: &[Vec<usize>]) -> Result<Var> {
    let mut ids = Vec::new();
    let mut segs = Vec::with_capacity(contexts.len());
    for c in contexts {
        let c: &[usize] = if c.is_empty() { &[UNK] } else { c };
        segs.push(Segment { start: ids.len(), len: c.len() });
        ids.extend_from_slice(c);
    }
    let emb = param(g, st, "ctx.emb")?;
    let x = g.gather(emb, &ids)?;
    let m = g.mean_rows(x, &segs)?;
    let h = linear(g, st, m, "ctx")?;
    Ok(g.tanh(h))
}

/// MLP([e_head; r_0 * ... * r_{T-1}; e_tail]) for each path, in input
/// order. Paths must be grouped by hop count for batching; any order works.
pub fn encode_static_paths<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, paths: &[Path]) -> Result<Var> {
    if paths.is_empty() {
        return Err(Error::invalid("no static paths to encode"));
    }
    let ent = param(g, st, "static.ent")?;
    let rel = param(g, st, "static.rel")?;
    let mut groups = Vec::new();
    let mut start = 0;
    while start < paths.len() {
        let hops = paths[start].hops();
        let end = start + paths[start..].iter().take_while(|p| p.hops() == hops).count();
        let group = &paths[start..end];
        let heads: Vec<usize> = group.iter().map(|p| p.source().index()).collect();
        let tails: Vec<usize> = group.iter().map(|p| p.target().index()).collect();
        let h = g.gather(ent, &heads)?;
        let t = g.gather(ent, &tails)?;
        let mut r = g.gather(rel, &group.iter().map(|p| p.relations[0].index()).collect::<Vec<_>>())?;
        for j in 1..hops {
            let rj = g.gather(rel, &group.iter().map(|p| p.relations[j].index()).collect::<Vec<_>>())?;
            r = g.mul(r, rj)?;
        }
        groups.push(g.concat_cols(&[h, r, t])?);
        start = end;
    }
    let x = if groups.len() == 1 { groups[0] } else { g.concat_rows(&groups)? };
    let hdn = linear(g, st, x, "static.mlp1")?;
    let hdn = g.tanh(hdn);
    linear(g, st, hdn, "static.mlp2")
}

/// Attention pooling of path vectors `p` ([n, dp]) under query `c` ([1, d]):
/// scores `c · tanh(W p + b)`, weights `softmax(scores)`, result `Σ α p`.
/// Returns (k, α).
pub fn aggregate_knowledge<T: Scalar>(
    g: &mut Graph<T>,
    st: &ParamStore<T>,
    prefix: &str,
    c: Var,
    p: Var,
) -> Result<(Var, Var)> {
    let n = g.value(p).rows();
    let a = linear(g, st, p, prefix)?;
    let a = g.tanh(a);
    let s = g.matmul_bt(a, c)?;
    let s = g.reshape(s, &[1, n])?;
    let alpha = g.softmax_all(s)?;
    let k = g.matmul(alpha, p)?;
    Ok((k, alpha))
}

/// Per-choice outputs of one forward pass.
pub struct Forward {
    /// Scores, shape [1, choices].
    pub scores: Var,
    /// Attention weights per choice and source ("gen" or "static"); `None`
    /// when that evidence set is empty.
    pub alphas: Vec<Vec<Option<Var>>>,
}

pub fn forward<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, layout: &Layout, ex: &Prepared) -> Result<Forward> {
    let m = ex.context.len();
    if m == 0 || ex.evidence.len() != m {
        return Err(Error::invalid("prepared example needs one evidence entry per choice"));
    }
    let cs = encode_contexts(g, st, &ex.context)?;
    let mut feats = Vec::with_capacity(m);
    let mut alphas = Vec::with_capacity(m);
    for (i, ev) in ex.evidence.iter().enumerate() {
        let c = g.slice_rows(cs, i, 1)?;
        let mut parts = vec![c];
        let mut a = Vec::new();
        if layout.variant.uses_generated() {
            if ev.num_generated() == 0 {
                parts.push(g.constant(Tensor::zeros(&[1, layout.gen_width])));
                a.push(None);
            } else {
                if ev.generated.cols() != layout.gen_width {
                    return Err(Error::Shape(format!(
                        "generated path width {} != {}",
                        ev.generated.cols(),
                        layout.gen_width
                    )));
                }
                let p = g.constant(ev.generated.cast());
                let (k, alpha) = aggregate_knowledge(g, st, "att.gen", c, p)?;
                parts.push(k);
                a.push(Some(alpha));
            }
        }
        if layout.variant.uses_static() {
            if ev.static_paths.is_empty() {
                parts.push(g.constant(Tensor::zeros(&[1, layout.width])));
                a.push(None);
            } else {
                let p = encode_static_paths(g, st, &ev.static_paths)?;
                let (k, alpha) = aggregate_knowledge(g, st, "att.static", c, p)?;
                parts.push(k);
                a.push(Some(alpha));
            }
        }
        feats.push(if parts.len() == 1 { c } else { g.concat_cols(&parts)? });
        alphas.push(a);
    }
    let x = g.concat_rows(&feats)?;
    let s = linear(g, st, x, "cls")?;
    let scores = g.reshape(s, &[1, m])?;
    Ok(Forward { scores, alphas })
}

/// Cross-entropy of the gold choice.
pub fn example_loss<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, layout: &Layout, ex: &Prepared) -> Result<Var> {
    let f = forward(g, st, layout, ex)?;
    g.cross_entropy(f.scores, &[Some(ex.answer)])
}

/// Mean loss over a batch of questions.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    st: &ParamStore<T>,
    layout: &Layout,
    batch: &[&Prepared],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = example_loss(g, st, layout, batch[0])?;
    for ex in &batch[1..] {
        let l = example_loss(g, st, layout, ex)?;
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, T::of(1.0 / batch.len() as f64)))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
