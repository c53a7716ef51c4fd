//! Small decoder-only transformer that continues `target [SEP] source`
//! prompts into paths.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_tokens, encode_prompt, DecodedPath, Lexicon, TokenSequence, Vocab, EOS, MAX_SEQ_LEN, PAD};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::numerics::{
    lr_schedule, softmax, Adam, Checkpoint, Graph, ParamStore, Scalar, Segment, Tensor, Var, CLIP_NORM, INIT_SCALE,
};

pub const CHECKPOINT_KIND: &str = "generator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub blocks: usize,
    pub max_seq_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { width: 128, heads: 4, ff_width: 512, blocks: 2, max_seq_len: MAX_SEQ_LEN }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ff_width == 0 || self.blocks == 0 || self.max_seq_len < 4 {
            return Err(Error::Config("ff_width, blocks must be positive and max_seq_len >= 4".into()));
        }
        Ok(())
    }
}

/// Fresh parameters: weights and embeddings uniform, biases zero, layer-norm
/// gains one.
pub fn init_params<T: Scalar>(cfg: &GeneratorConfig, vocab_size: usize, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.width, cfg.ff_width);
    let mut s = ParamStore::new();
    s.add_uniform("tok_emb", &[vocab_size, d], INIT_SCALE, &mut rng)?;
    s.add_uniform("pos_emb", &[cfg.max_seq_len, d], INIT_SCALE, &mut rng)?;
    for b in 0..cfg.blocks {
        s.add_full(format!("block{b}.ln1.g"), &[d], 1.0)?;
        s.add_zeros(format!("block{b}.ln1.b"), &[d])?;
        s.add_uniform(format!("block{b}.attn.qkv.w"), &[d, 3 * d], INIT_SCALE, &mut rng)?;
        s.add_zeros(format!("block{b}.attn.qkv.b"), &[3 * d])?;
        s.add_uniform(format!("block{b}.attn.out.w"), &[d, d], INIT_SCALE, &mut rng)?;
        s.add_zeros(format!("block{b}.attn.out.b"), &[d])?;
        s.add_full(format!("block{b}.ln2.g"), &[d], 1.0)?;
        s.add_zeros(format!("block{b}.ln2.b"), &[d])?;
        s.add_uniform(format!("block{b}.ff1.w"), &[d, f], INIT_SCALE, &mut rng)?;
        s.add_zeros(format!("block{b}.ff1.b"), &[f])?;
        s.add_uniform(format!("block{b}.ff2.w"), &[f, d], INIT_SCALE, &mut rng)?;
        s.add_zeros(format!("block{b}.ff2.b"), &[d])?;
    }
    s.add_full("ln_f.g", &[d], 1.0)?;
    s.add_zeros("ln_f.b", &[d])?;
    Ok(s)
}

/// Sequences packed row-wise without padding.
struct Packed {
    ids: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
}

fn strip_pad(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &ids[..end]
}

fn pack(seqs: &[&[u32]], max_len: usize) -> Result<Packed> {
    let mut p = Packed { ids: Vec::new(), positions: Vec::new(), segments: Vec::with_capacity(seqs.len()) };
    for s in seqs {
        if s.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if s.len() > max_len {
            return Err(Error::invalid(format!("sequence of {} tokens exceeds {max_len}", s.len())));
        }
        p.segments.push(Segment { start: p.ids.len(), len: s.len() });
        p.ids.extend(s.iter().map(|&t| t as usize));
        p.positions.extend(0..s.len());
    }
    Ok(p)
}

fn param<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(st, st.id(name)?))
}

fn linear<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = param(g, st, &format!("{prefix}.w"))?;
    let b = param(g, st, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, st: &ParamStore<T>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = param(g, st, &format!("{prefix}.g"))?;
    let beta = param(g, st, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Final-layer (post layer-norm) hidden states, one row per packed token.
fn hidden<T: Scalar>(st: &ParamStore<T>, cfg: &GeneratorConfig, g: &mut Graph<T>, p: &Packed) -> Result<Var> {
    let tok = param(g, st, "tok_emb")?;
    let pos = param(g, st, "pos_emb")?;
    let te = g.gather(tok, &p.ids)?;
    let pe = g.gather(pos, &p.positions)?;
    let mut x = g.add(te, pe)?;
    for b in 0..cfg.blocks {
        let h = layer_norm(g, st, x, &format!("block{b}.ln1"))?;
        let qkv = linear(g, st, h, &format!("block{b}.attn.qkv"))?;
        let a = g.causal_attention(qkv, &p.segments, cfg.heads)?;
        let a = linear(g, st, a, &format!("block{b}.attn.out"))?;
        x = g.add(x, a)?;
        let h = layer_norm(g, st, x, &format!("block{b}.ln2"))?;
        let h = linear(g, st, h, &format!("block{b}.ff1"))?;
        let h = g.gelu(h);
        let h = linear(g, st, h, &format!("block{b}.ff2"))?;
        x = g.add(x, h)?;
    }
    layer_norm(g, st, x, "ln_f")
}

/// Next-token targets: row i predicts token i+1 when that token lies after
/// the prompt and is not padding.
fn targets(seq: &[u32], prompt_len: usize) -> Vec<Option<usize>> {
    (0..seq.len())
        .map(|i| {
            let next = *seq.get(i + 1)?;
            (i + 1 >= prompt_len && next != PAD).then_some(next as usize)
        })
        .collect()
}

fn scored_count(seq: &TokenSequence) -> usize {
    let ids = strip_pad(&seq.ids);
    targets(ids, seq.prompt_len).iter().flatten().count()
}

/// Mean next-token NLL over the post-prompt tokens of a packed batch.
pub fn batch_loss<T: Scalar>(
    st: &ParamStore<T>,
    cfg: &GeneratorConfig,
    g: &mut Graph<T>,
    seqs: &[&TokenSequence],
) -> Result<Var> {
    let mut trimmed = Vec::with_capacity(seqs.len());
    let mut tgt = Vec::new();
    for s in seqs {
        let ids = strip_pad(&s.ids);
        if s.prompt_len == 0 || ids.len() < s.prompt_len + 1 {
            return Err(Error::invalid(format!(
                "sequence of {} tokens has nothing after its {}-token prompt",
                ids.len(),
                s.prompt_len
            )));
        }
        tgt.extend(targets(ids, s.prompt_len));
        trimmed.push(ids);
    }
    let p = pack(&trimmed, cfg.max_seq_len)?;
    let h = hidden(st, cfg, g, &p)?;
    let tok = param(g, st, "tok_emb")?;
    let logits = g.matmul_bt(h, tok)?;
    g.cross_entropy(logits, &tgt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub sequence: Vec<u32>,
    pub prompt_len: usize,
    pub text: String,
    pub decoded: DecodedPath,
    /// Probability of each chosen continuation token.
    pub step_probs: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocab,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: GeneratorConfig,
    lexicon: Lexicon,
}

impl Generator {
    pub fn new(config: GeneratorConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = init_params(&config, vocab.len(), seed)?;
        Ok(Generator { config, vocab, params })
    }

    /// Mean per-token NLL over `seqs`, weighting every scored token equally.
    pub fn nll(&self, seqs: &[TokenSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::invalid("no sequences to score"));
        }
        let parts: Vec<Result<(f64, usize)>> = seqs
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&TokenSequence> = chunk.iter().collect();
                let n: usize = chunk.iter().map(scored_count).sum();
                let mut g = Graph::new();
                let l = batch_loss(&self.params, &self.config, &mut g, &refs)?;
                Ok((g.value(l).item() as f64 * n as f64, n))
            })
            .collect();
        let (mut total, mut count) = (0.0, 0usize);
        for p in parts {
            let (t, n) = p?;
            total += t;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Loss of a single sequence.
    pub fn nll_loss(&self, seq: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let l = batch_loss(&self.params, &self.config, &mut g, &[seq])?;
        Ok(g.value(l).item() as f64)
    }

    fn hidden_rows(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        let p = pack(&[ids], self.config.max_seq_len)?;
        let mut g = Graph::new();
        let h = hidden(&self.params, &self.config, &mut g, &p)?;
        Ok(g.value(h).clone())
    }

    /// Next-token distribution after `ids`.
    pub fn next_token_probs(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let h = self.hidden_rows(ids)?;
        let last = h.row(h.rows() - 1);
        let emb = self.params.value(self.params.id("tok_emb")?);
        let logits: Vec<f32> = (0..emb.rows()).map(|v| emb.row(v).iter().zip(last).map(|(a, b)| a * b).sum()).collect();
        softmax(&logits)
    }

    /// Greedy continuation of an encoded prompt; ties go to the lowest id.
    pub fn continue_prompt(&self, prompt: &TokenSequence) -> Result<(Vec<u32>, Vec<f32>)> {
        let mut ids = prompt.ids.clone();
        let mut probs = Vec::new();
        while ids.len() < self.config.max_seq_len {
            let p = self.next_token_probs(&ids)?;
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
            probs.push(p[best]);
            if best as u32 == EOS {
                break;
            }
        }
        Ok((ids, probs))
    }

    pub fn generate_path(&self, source: &str, target: &str, kg: Option<&KnowledgeGraph>) -> Result<GenerationResult> {
        let prompt = encode_prompt(source, target, &self.vocab)?;
        let (ids, step_probs) = self.continue_prompt(&prompt)?;
        let seq = TokenSequence { ids, prompt_len: prompt.prompt_len };
        Ok(GenerationResult {
            text: self.vocab.render(&seq.ids),
            decoded: decode_tokens(&seq, &self.vocab, kg),
            sequence: seq.ids,
            prompt_len: seq.prompt_len,
            step_probs,
        })
    }

    /// Generate for many (source, target) pairs in parallel, preserving order.
    pub fn generate_many(
        &self,
        pairs: &[(String, String)],
        kg: Option<&KnowledgeGraph>,
    ) -> Result<Vec<GenerationResult>> {
        pairs.par_iter().map(|(s, t)| self.generate_path(s, t, kg)).collect()
    }

    /// Mean of final hidden states over every non-padding position.
    pub fn path_embedding(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let ids = strip_pad(ids);
        if ids.is_empty() {
            return Err(Error::invalid("cannot embed an empty sequence"));
        }
        let h = self.hidden_rows(ids)?;
        let n = h.rows() as f32;
        let mut out = vec![0.0f32; h.cols()];
        for r in 0..h.rows() {
            for (o, &v) in out.iter_mut().zip(h.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta { config: self.config, lexicon: self.vocab.lexicon() };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta)?,
            vocab: Some(self.vocab.tokens().to_vec()),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(ck.meta)?;
        let tokens = ck.vocab.ok_or_else(|| Error::Checkpoint("generator checkpoint without vocabulary".into()))?;
        let vocab = Vocab::from_parts(tokens, meta.lexicon)?;
        let expected = init_params::<f32>(&meta.config, vocab.len(), 0)?;
        if expected.len() != ck.params.len()
            || expected
                .entries()
                .iter()
                .zip(ck.params.entries())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Checkpoint("parameter layout does not match generator config".into()));
        }
        Ok(Generator { config: meta.config, vocab, params: ck.params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Defaults to min(500, total_steps / 10).
    pub warmup_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 2e-3, batch_size: 64, max_epochs: 30, patience: 2, warmup_steps: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_dev_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub steps: usize,
}

/// Teacher-forced training with early stopping on dev loss; returns the
/// parameters of the best dev epoch.
pub fn train_generator(
    vocab: Vocab,
    model_cfg: GeneratorConfig,
    train: &[TokenSequence],
    dev: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(Generator, TrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    if dev.is_empty() {
        return Err(Error::invalid("empty dev corpus"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut model = Generator::new(model_cfg, vocab, cfg.seed)?;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.max_epochs;
    let warmup = cfg.warmup_steps.unwrap_or((total / 10).min(500));
    lr_schedule(0, cfg.lr, warmup, total)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_9e4e);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_dev_loss = model.nll(dev)?;
    let mut best = (initial_dev_loss, 0usize, model.params.clone());
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &train[i]).collect();
            model.params.zero_grads();
            let mut g = Graph::new();
            let l = batch_loss(&model.params, &model.config, &mut g, &batch)?;
            let loss = g.value(l).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            g.backward(l)?;
            g.accumulate_into(&mut model.params)?;
            model.params.clip_grad_norm(CLIP_NORM as f32);
            step += 1;
            adam.step(&mut model.params, lr_schedule(step, cfg.lr, warmup, total)?)?;
            let n: usize = batch.iter().map(|s| scored_count(s)).sum();
            sum += loss * n as f64;
            count += n;
        }
        let dev_loss = model.nll(dev)?;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { step, loss: dev_loss });
        }
        epochs.push(EpochStats { epoch, train_loss: sum / count as f64, dev_loss });
        if dev_loss < best.0 {
            best = (dev_loss, epoch, model.params.clone());
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
    let report = TrainReport { initial_dev_loss, epochs, best_epoch: best.1, best_dev_loss: best.0, steps: step };
    Ok((model, report))
}
