//! The `pathgen` command line.
//!
//! Every option can also come from a `--config` file of `key=value` lines
//! whose keys are the long flag names; flags win over the file. Each run
//! that writes an artifact also writes `<artifact>.run.json` holding the
//! resolved settings.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::codec::{encode_record, Vocab};
use crate::diagnostics::{module_grad_checks, GRAD_CHECK_TOLERANCE};
use crate::error::{Error, Result};
use crate::evaluator::{eval_paths, train_triplet_scorer, BilinearScorer, ScorerConfig};
use crate::generator::{train_generator, GenerationResult, Generator, GeneratorConfig, TrainConfig};
use crate::kg::{DiscardSet, KnowledgeGraph, LemmaTable};
use crate::qa::{read_dataset, train_qa, EvidenceSource, QaConfig, QaModel, Variant};
use crate::sampler::{read_records, sample_corpus, split_corpus, write_jsonl, SamplerConfig, Strategy};

#[derive(Debug, Parser)]
#[command(name = "pathgen", version, about = "Knowledge-graph path generation and path-augmented QA")]
struct Cli {
    /// Random seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of key=value defaults; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample random-walk paths from a knowledge graph.
    SamplePaths(SampleArgs),
    /// Shuffle a JSONL file and cut it into train/dev/test.
    Split(SplitArgs),
    /// Train the path generator.
    TrainGenerator(TrainGeneratorArgs),
    /// Generate a path for every (source, target) pair.
    Generate(GenerateArgs),
    /// Train the bilinear triplet scorer.
    TrainScorer(TrainScorerArgs),
    /// Train a QA model.
    TrainQa(TrainQaArgs),
    /// Evaluate a QA model.
    EvalQa(EvalQaArgs),
    /// Score generated paths.
    EvalPaths(EvalPathsArgs),
    /// Check analytic gradients of every module against finite differences.
    GradCheck,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    kg: Option<PathBuf>,
    /// One relation name per line; defaults to the built-in discard set.
    #[arg(long)]
    discard: Option<PathBuf>,
    /// global or local.
    #[arg(long)]
    strategy: Option<String>,
    /// One entity phrase per line (local strategy).
    #[arg(long)]
    start_entities: Option<PathBuf>,
    /// Comma-separated hop counts.
    #[arg(long)]
    hops: Option<String>,
    #[arg(long)]
    count_per_hop: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// train:dev:test percentages.
    #[arg(long)]
    ratio: Option<String>,
    /// Output prefix; files are <prefix>.train.jsonl and so on.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainGeneratorArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Build the vocabulary from this graph instead of the corpus.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// TSV of source<TAB>target.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Mark decoded entities and relations against this graph.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainScorerArgs {
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainQaArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dev set; when absent a seeded tenth of the dataset is held out.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    lemmas: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    /// no-kg, static-rn, pg-local, pg-global or pg-full.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_hops: Option<usize>,
    #[arg(long)]
    path_cap: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ctx_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalQaArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Defaults to the graph the model was trained with.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    lemmas: Option<PathBuf>,
    /// Defaults to the generator the model was trained with.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Per-example predictions; defaults to <model>.predictions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalPathsArgs {
    /// JSONL written by `generate`.
    #[arg(long)]
    paths: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    discard: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Flag, then config file, then default; remembers what was resolved.
struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, Value>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| io_context(path, e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("expected key=value in {}", path.display()),
                })?;
                let key = k.trim().replace('_', "-");
                if file.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(Error::Config(format!("config key {key} given twice")));
                }
            }
        }
        Ok(Settings { file, used: BTreeSet::new(), resolved: BTreeMap::new() })
    }

    fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let from_file = match self.file.get(key) {
            Some(raw) => {
                self.used.insert(key.to_string());
                Some(raw.parse::<T>().map_err(|e| Error::Config(format!("config key {key}={raw}: {e}")))?)
            }
            None => None,
        };
        let v = flag.or(from_file);
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), serde_json::to_value(v)?);
        }
        Ok(v)
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), serde_json::to_value(&default)?);
                Ok(default)
            }
        }
    }

    fn req<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| Error::Config(format!("missing required option --{key}")))
    }

    /// Reject config keys that no option consumed.
    fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k) && !matches!(k.as_str(), "seed" | "threads"))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    settings: &'a BTreeMap<String, Value>,
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => io_context(path, io),
        other => other,
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| io_context(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_context(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n").map_err(|e| io_context(path, e))?;
    w.flush().map_err(|e| io_context(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn record_run(artifact: &Path, command: &str, settings: &Settings) -> Result<()> {
    let rec = RunRecord { command, version: env!("CARGO_PKG_VERSION"), settings: &settings.resolved };
    write_json(&sibling(artifact, ".run.json"), &rec)
}

fn load_discard(path: Option<&Path>) -> Result<DiscardSet> {
    match path {
        Some(p) => with_path(p, DiscardSet::load(p)),
        None => Ok(DiscardSet::default()),
    }
}

fn load_kg(path: &Path, discard: Option<&Path>) -> Result<KnowledgeGraph> {
    let discard = load_discard(discard)?;
    with_path(path, KnowledgeGraph::load_tsv(path, &discard))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| io_context(path, e))?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn parse_list<T: FromStr>(raw: &str, sep: char, what: &str) -> Result<Vec<T>> {
    raw.split(sep).map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad {what} {raw:?}")))).collect()
}

fn sample_paths(a: SampleArgs, s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let kg_path: PathBuf = s.req("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let strategy: String = s.get("strategy", a.strategy, "global".into())?;
    let starts: Option<PathBuf> = s.opt("start-entities", a.start_entities)?;
    let hops: String = s.get("hops", a.hops, "1,2,3".into())?;
    let count: usize = s.get("count-per-hop", a.count_per_hop, 1000)?;
    let out_path: PathBuf = s.req("out", a.out)?;
    s.finish()?;

    let kg = load_kg(&kg_path, discard.as_deref())?;
    let strategy = match strategy.as_str() {
        "global" => Strategy::Global,
        "local" => {
            let file = starts.ok_or_else(|| Error::Config("local sampling needs --start-entities".into()))?;
            let ids = read_lines(&file)?
                .iter()
                .map(|p| {
                    kg.entity_by_phrase(p.trim())
                        .ok_or_else(|| Error::Lookup { kind: "entity", name: p.trim().to_string() })
                })
                .collect::<Result<_>>()?;
            Strategy::Local(ids)
        }
        other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
    };
    let per_hop: BTreeMap<usize, usize> =
        parse_list::<usize>(&hops, ',', "hop list")?.into_iter().map(|h| (h, count)).collect();
    let corpus = sample_corpus(&kg, &strategy, &per_hop, seed, &SamplerConfig::default())?;
    let mut w = create(&out_path)?;
    with_path(&out_path, write_jsonl(&mut w, &kg, &corpus.paths))?;
    w.flush().map_err(|e| io_context(&out_path, e))?;
    record_run(&out_path, "sample-paths", s)?;
    writeln!(out, "wrote {} paths to {}", corpus.paths.len(), out_path.display())?;
    Ok(())
}

fn split(a: SplitArgs, s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let input: PathBuf = s.req("in", a.input)?;
    let ratio: String = s.get("ratio", a.ratio, "90:5:5".into())?;
    let default_prefix = input.with_extension("");
    let prefix: PathBuf = s.get("out-prefix", a.out_prefix, default_prefix)?;
    s.finish()?;

    let parts = parse_list::<u32>(&ratio, ':', "split ratio")?;
    let ratio: [u32; 3] =
        parts.try_into().map_err(|_| Error::Config(format!("split ratio {ratio:?} needs three parts")))?;
    let lines = read_lines(&input)?;
    let (train, dev, test) = split_corpus(&lines, ratio, seed)?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let path = sibling(&prefix, &format!(".{name}.jsonl"));
        let mut w = create(&path)?;
        for l in part {
            writeln!(w, "{l}").map_err(|e| io_context(&path, e))?;
        }
        w.flush().map_err(|e| io_context(&path, e))?;
        writeln!(out, "wrote {} lines to {}", part.len(), path.display())?;
    }
    record_run(&sibling(&prefix, ".split"), "split", s)
}

fn train_generator_cmd(a: TrainGeneratorArgs, s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let train_path: PathBuf = s.req("train", a.train)?;
    let dev_path: PathBuf = s.req("dev", a.dev)?;
    let kg_path: Option<PathBuf> = s.opt("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let out_path: PathBuf = s.req("out", a.out)?;
    let d = GeneratorConfig::default();
    let model = GeneratorConfig {
        width: s.get("width", a.width, d.width)?,
        heads: s.get("heads", a.heads, d.heads)?,
        ff_width: s.get("ff-width", a.ff_width, d.ff_width)?,
        blocks: s.get("blocks", a.blocks, d.blocks)?,
        max_seq_len: d.max_seq_len,
    };
    let t = TrainConfig::default();
    let cfg = TrainConfig {
        lr: s.get("lr", a.lr, t.lr)?,
        batch_size: s.get("batch-size", a.batch_size, t.batch_size)?,
        max_epochs: s.get("max-epochs", a.max_epochs, t.max_epochs)?,
        patience: s.get("patience", a.patience, t.patience)?,
        warmup_steps: s.opt("warmup-steps", a.warmup_steps)?,
        seed,
    };
    s.finish()?;

    let train_recs = with_path(&train_path, read_records(open(&train_path)?))?;
    let dev_recs = with_path(&dev_path, read_records(open(&dev_path)?))?;
    let vocab = match &kg_path {
        Some(p) => Vocab::build(&load_kg(p, discard.as_deref())?),
        None => {
            let all = train_recs.iter().chain(&dev_recs);
            Vocab::from_lexicon(
                all.clone().flat_map(|r| r.entities.iter().cloned()),
                all.flat_map(|r| r.relations.iter().cloned()),
            )
        }
    };
    let train = train_recs.iter().map(|r| encode_record(r, &vocab)).collect::<Result<Vec<_>>>()?;
    let dev = dev_recs.iter().map(|r| encode_record(r, &vocab)).collect::<Result<Vec<_>>>()?;
    let (gen, report) = train_generator(vocab, model, &train, &dev, &cfg)?;
    gen.save(&out_path)?;
    write_json(&sibling(&out_path, ".report.json"), &report)?;
    record_run(&out_path, "train-generator", s)?;
    writeln!(
        out,
        "trained {} epochs; best dev loss {:.4} at epoch {}; wrote {}",
        report.epochs.len(),
        report.best_dev_loss,
        report.best_epoch,
        out_path.display()
    )?;
    Ok(())
}

fn generate(a: GenerateArgs, s: &mut Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let model: PathBuf = s.req("model", a.model)?;
    let pairs_path: PathBuf = s.req("pairs", a.pairs)?;
    let kg_path: Option<PathBuf> = s.opt("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let out_path: PathBuf = s.req("out", a.out)?;
    s.finish()?;

    let gen = with_path(&model, Generator::load(&model))?;
    let kg = kg_path.map(|p| load_kg(&p, discard.as_deref())).transpose()?;
    let mut pairs = Vec::new();
    for (i, line) in read_lines(&pairs_path)?.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected source<TAB>target in {}", pairs_path.display()),
            });
        }
        pairs.push((f[0].trim().to_string(), f[1].trim().to_string()));
    }
    let results = gen.generate_many(&pairs, kg.as_ref())?;
    let mut w = create(&out_path)?;
    for r in &results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| io_context(&out_path, e))?;
    }
    w.flush().map_err(|e| io_context(&out_path, e))?;
    record_run(&out_path, "generate", s)?;
    let connected = results.iter().filter(|r| r.decoded.connects()).count();
    writeln!(
        out,
        "generated {} paths ({} connect their prompt); wrote {}",
        results.len(),
        connected,
        out_path.display()
    )?;
    Ok(())
}

fn train_scorer(a: TrainScorerArgs, s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let kg_path: PathBuf = s.req("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let out_path: PathBuf = s.req("out", a.out)?;
    let d = ScorerConfig::default();
    let cfg = ScorerConfig {
        dim: s.get("dim", a.dim, d.dim)?,
        lr: s.get("lr", a.lr, d.lr)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        holdout: s.get("holdout", a.holdout, d.holdout)?,
        seed,
    };
    s.finish()?;

    let kg = load_kg(&kg_path, discard.as_deref())?;
    let (scorer, report) = train_triplet_scorer(&kg, &cfg)?;
    scorer.save(&out_path)?;
    write_json(&sibling(&out_path, ".report.json"), &report)?;
    record_run(&out_path, "train-scorer", s)?;
    writeln!(
        out,
        "held-out accuracy {:.4} on {} triplets; wrote {}",
        report.heldout_accuracy,
        report.heldout_triplets,
        out_path.display()
    )?;
    Ok(())
}

fn read_qa(path: &Path) -> Result<Vec<crate::qa::QaExample>> {
    with_path(path, read_dataset(open(path)?))
}

fn train_qa_cmd(a: TrainQaArgs, s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<()> {
    let dataset: PathBuf = s.req("dataset", a.dataset)?;
    let dev_path: Option<PathBuf> = s.opt("dev", a.dev)?;
    let kg_path: PathBuf = s.req("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let lemmas: Option<PathBuf> = s.opt("lemmas", a.lemmas)?;
    let gen_path: Option<PathBuf> = s.opt("generator", a.generator)?;
    let variant: Variant = s.req("variant", a.variant)?.parse()?;
    let out_path: PathBuf = s.req("out", a.out)?;
    let d = QaConfig::default();
    let cfg = QaConfig {
        width: s.get("width", a.width, d.width)?,
        max_hops: s.get("max-hops", a.max_hops, d.max_hops)?,
        path_cap: s.get("path-cap", a.path_cap, d.path_cap)?,
        lr: s.get("lr", a.lr, d.lr)?,
        ctx_lr: s.get("ctx-lr", a.ctx_lr, d.ctx_lr)?,
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        max_epochs: s.get("max-epochs", a.max_epochs, d.max_epochs)?,
        patience: s.get("patience", a.patience, d.patience)?,
        seed,
    };
    s.finish()?;

    let examples = read_qa(&dataset)?;
    let (train, dev) = match &dev_path {
        Some(p) => (examples, read_qa(p)?),
        None => {
            let (t, d, rest) = split_corpus(&examples, [90, 10, 0], seed)?;
            debug_assert!(rest.is_empty());
            (t, d)
        }
    };
    let kg = load_kg(&kg_path, discard.as_deref())?;
    let lemma_table = lemmas.as_deref().map(|p| with_path(p, LemmaTable::load(p))).transpose()?;
    let gen = gen_path.as_deref().map(|p| with_path(p, Generator::load(p))).transpose()?;
    let mut src = EvidenceSource::new(&kg, gen.as_ref(), &cfg);
    src.lemmas = lemma_table.as_ref();
    let (model, report) = train_qa(&train, &dev, &src, variant, &cfg)?;
    model.save(&out_path)?;
    write_json(&sibling(&out_path, ".report.json"), &report)?;
    record_run(&out_path, "train-qa", s)?;
    writeln!(
        out,
        "{variant}: best dev accuracy {:.4} at epoch {}; wrote {}",
        report.best_dev_accuracy,
        report.best_epoch,
        out_path.display()
    )?;
    Ok(())
}

/// A path setting recorded when `model` was trained.
fn recorded_path(model: &Path, key: &str) -> Result<Option<PathBuf>> {
    let run = sibling(model, ".run.json");
    if !run.exists() {
        return Ok(None);
    }
    let v: Value = serde_json::from_reader(open(&run)?)?;
    Ok(v["settings"][key].as_str().map(PathBuf::from))
}

fn eval_qa(a: EvalQaArgs, s: &mut Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let dataset: PathBuf = s.req("dataset", a.dataset)?;
    let model_path: PathBuf = s.req("model", a.model)?;
    let kg_flag: Option<PathBuf> = s.opt("kg", a.kg)?;
    let discard_flag: Option<PathBuf> = s.opt("discard", a.discard)?;
    let lemmas_flag: Option<PathBuf> = s.opt("lemmas", a.lemmas)?;
    let gen_flag: Option<PathBuf> = s.opt("generator", a.generator)?;
    let out_path: PathBuf = s.get("out", a.out, sibling(&model_path, ".predictions.jsonl"))?;
    let mut fill = |key: &str, flag: Option<PathBuf>| -> Result<Option<PathBuf>> {
        let v = match flag {
            Some(v) => Some(v),
            None => recorded_path(&model_path, key)?,
        };
        if let Some(v) = &v {
            s.resolved.insert(key.to_string(), serde_json::to_value(v)?);
        }
        Ok(v)
    };
    let kg_path = fill("kg", kg_flag)?.ok_or_else(|| Error::Config("missing required option --kg".into()))?;
    let discard = fill("discard", discard_flag)?;
    let lemmas = fill("lemmas", lemmas_flag)?;
    let gen_path = fill("generator", gen_flag)?;
    s.finish()?;

    let examples = read_qa(&dataset)?;
    let model = with_path(&model_path, QaModel::load(&model_path))?;
    let kg = load_kg(&kg_path, discard.as_deref())?;
    let lemma_table = lemmas.as_deref().map(|p| with_path(p, LemmaTable::load(p))).transpose()?;
    let gen = match (&gen_path, model.layout.variant.uses_generated()) {
        (Some(p), true) => Some(with_path(p, Generator::load(p))?),
        (None, true) => return Err(Error::Config(format!("variant {} needs --generator", model.layout.variant))),
        _ => None,
    };
    let mut src = EvidenceSource::new(&kg, gen.as_ref(), &model.config);
    src.lemmas = lemma_table.as_ref();
    let eval = model.evaluate(&examples, &src)?;
    let mut w = create(&out_path)?;
    for p in &eval.predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| io_context(&out_path, e))?;
    }
    w.flush().map_err(|e| io_context(&out_path, e))?;
    record_run(&out_path, "eval-qa", s)?;
    let correct = eval.predictions.iter().filter(|p| p.correct).count();
    writeln!(out, "accuracy {:.4} ({correct}/{})", eval.accuracy, eval.predictions.len())?;
    Ok(())
}

#[derive(Serialize)]
struct PathReport {
    metrics: crate::evaluator::PathMetrics,
    connection: f64,
    valid_entity: Option<f64>,
    valid_relation: Option<f64>,
    novelty: f64,
    score: Option<f64>,
}

fn eval_paths_cmd(a: EvalPathsArgs, s: &mut Settings, out: &mut (dyn Write + Send)) -> Result<()> {
    let paths: PathBuf = s.req("paths", a.paths)?;
    let kg_path: PathBuf = s.req("kg", a.kg)?;
    let discard: Option<PathBuf> = s.opt("discard", a.discard)?;
    let scorer_path: PathBuf = s.req("scorer", a.scorer)?;
    let report_path: PathBuf = s.req("report", a.report)?;
    s.finish()?;

    let mut decoded = Vec::new();
    for (i, line) in read_lines(&paths)?.iter().enumerate() {
        let r: GenerationResult = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, message: format!("{}: {e}", paths.display()) })?;
        decoded.push(r.decoded);
    }
    let kg = load_kg(&kg_path, discard.as_deref())?;
    let scorer = with_path(&scorer_path, BilinearScorer::load(&scorer_path))?;
    let m = eval_paths(&decoded, &kg, &scorer)?;
    let pct = |v: f64| (v * 1e4).round() / 100.0;
    let report = PathReport {
        connection: pct(m.connection_rate),
        valid_entity: m.valid_entity_rate.map(pct),
        valid_relation: m.valid_relation_rate.map(pct),
        novelty: pct(m.novelty_rate),
        score: m.mean_novel_triplet_score.map(pct),
        metrics: m,
    };
    write_json(&report_path, &report)?;
    record_run(&report_path, "eval-paths", s)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    writeln!(
        out,
        "connection {:.2}  valid entity {}  valid relation {}  novelty {:.2}  score {}",
        report.connection,
        show(report.valid_entity),
        show(report.valid_relation),
        report.novelty,
        show(report.score)
    )?;
    Ok(())
}

fn grad_check(s: &mut Settings, seed: u64, out: &mut (dyn Write + Send)) -> Result<bool> {
    s.finish()?;
    let checks = module_grad_checks(seed)?;
    for c in &checks {
        writeln!(
            out,
            "{:<16} max relative error {:.3e} over {} coordinates  {}",
            c.module,
            c.max_rel_error,
            c.coordinates,
            if c.passes() { "ok" } else { "FAIL" }
        )?;
    }
    Ok(checks.iter().all(|c| c.passes()))
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send)) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed: u64 = s.get("seed", cli.seed, 0)?;
    let threads: Option<usize> = s.opt("threads", cli.threads)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        match cli.command {
            Command::SamplePaths(a) => sample_paths(a, &mut s, seed, out)?,
            Command::Split(a) => split(a, &mut s, seed, out)?,
            Command::TrainGenerator(a) => train_generator_cmd(a, &mut s, seed, out)?,
            Command::Generate(a) => generate(a, &mut s, out)?,
            Command::TrainScorer(a) => train_scorer(a, &mut s, seed, out)?,
            Command::TrainQa(a) => train_qa_cmd(a, &mut s, seed, out)?,
            Command::EvalQa(a) => eval_qa(a, &mut s, out)?,
            Command::EvalPaths(a) => eval_paths_cmd(a, &mut s, out)?,
            Command::GradCheck => {
                if !grad_check(&mut s, seed, out)? {
                    return Ok(1);
                }
            }
        }
        Ok(0)
    })
}

/// Run with explicit arguments (the first is the program name) and return
/// the process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let grad_check = matches!(cli.command, Command::GradCheck);
    match dispatch(cli, out) {
        Ok(0) => 0,
        Ok(code) => {
            if grad_check {
                let _ = writeln!(err, "error: grad_check: relative error at or above {GRAD_CHECK_TOLERANCE:e}");
            }
            code
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {}: {msg}", e.kind());
            1
        }
    }
}
