//! `coex` command-line interface: corpus synthesis, training, extraction,
//! evaluation, latency benchmarking, serving and export.

pub mod server;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coex_core::checkpoint::{encode_checkpoint, CheckpointHeader};
use coex_core::data::{load_corpus, save_corpus, RawExample};
use coex_core::edge::{benchmark_latency, model_version, InferenceModel, TripleOut};
use coex_core::eval::evaluate;
use coex_core::synth::{generate_synthetic_corpus, SynthConfig};
use coex_core::tagger::RelationSchema;
use coex_core::train::{train_with, DecayMode, TrainConfig, TrainData};
use coex_core::{Model, Vocab};

#[derive(Debug, Parser)]
#[command(name = "coex", version, about = "Joint entity and relation extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus as JSON lines.
    Synth(SynthArgs),
    /// Train a model on a JSON-lines corpus and write a checkpoint.
    Train(TrainArgs),
    /// Extract triples from text with a trained model.
    Extract(ExtractArgs),
    /// Micro precision, recall and F1 of a model on a gold corpus.
    Eval(EvalArgs),
    /// Per-request extraction latency through the service handler.
    Bench(BenchArgs),
    /// Serve `POST /extract` and `GET /healthz` on a local address.
    Serve(ServeArgs),
    /// Write a self-contained inference artifact from a checkpoint.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Target fraction of sentences sharing an entity between triples.
    #[arg(long, default_value_t = 0.3)]
    pub overlap: f64,
    /// Fraction of non-overlapping sentences written as two clauses.
    #[arg(long, default_value_t = 0.0)]
    pub compound: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML training configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predicate list, one per line; the medicine schema when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_decay_mode)]
    pub decay_mode: Option<DecayMode>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines step and epoch metrics.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Held-out corpus scored after every epoch.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Checkpoint of the epoch with the best held-out F1.
    #[arg(long, requires = "eval_corpus")]
    pub best_out: Option<PathBuf>,
    /// Abort on the first malformed corpus line instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "file")]
    pub text: Option<String>,
    /// One input text per line.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Inputs are the corpus texts, cycled.
    #[arg(long, conflicts_with = "text")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_decay_mode(s: &str) -> std::result::Result<DecayMode, String> {
    match s {
        "coupled" => Ok(DecayMode::Coupled),
        "decoupled" => Ok(DecayMode::Decoupled),
        _ => Err(format!("expected coupled or decoupled, got {s}")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => {
            let model = load_model(&a.model)?;
            server::serve(model, &a.addr)
        }
        Command::Export(a) => export(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut config = SynthConfig::new(a.n, a.overlap, a.seed);
    config.compound_fraction = a.compound;
    let corpus = generate_synthetic_corpus(&config, &RelationSchema::medicine())?;
    match a.out {
        Some(path) => save_corpus(&path, &corpus)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(coex_core::data::corpus_to_string(&corpus)?.as_bytes())?;
        }
    }
    Ok(())
}

fn read_corpus(path: &Path, schema: &RelationSchema, strict: bool) -> Result<Vec<RawExample>> {
    let loaded =
        load_corpus(path, schema, strict).with_context(|| format!("reading corpus {}", path.display()))?;
    for (line, msg) in &loaded.skipped {
        eprintln!("{}:{line}: skipped: {msg}", path.display());
    }
    Ok(loaded.examples)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = a.decay_mode {
        c.decay_mode = v;
    }
    if let Some(v) = a.batch {
        c.batch_size = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.negatives {
        c.negatives_per_positive = v;
    }
    if let Some(v) = a.threshold {
        c.threshold = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

/// Checkpoint bytes carrying everything needed for inference plus the
/// training configuration that produced them.
pub fn checkpoint_bytes(
    model: &Model<f32>,
    config: &TrainConfig,
    vocab: &Vocab,
    schema: &RelationSchema,
) -> Result<Vec<u8>> {
    let mut header = CheckpointHeader::new(model.config.clone());
    header.train = Some(config.clone());
    header.vocab = Some(vocab.entries().to_vec());
    header.schema = Some(schema.predicates().to_vec());
    header.threshold = Some(config.threshold);
    header.model_version = Some(model_version(model)?);
    Ok(encode_checkpoint(&header, &model.params)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = train_config(&a)?;
    let schema = match &a.schema {
        Some(p) => RelationSchema::load(p)?,
        None => RelationSchema::medicine(),
    };
    let corpus = read_corpus(&a.corpus, &schema, a.strict)?;
    let eval = match &a.eval_corpus {
        Some(p) => Some(read_corpus(p, &schema, a.strict)?),
        None => None,
    };
    eprintln!(
        "training on {} sentences for {} epochs",
        corpus.len(),
        config.epochs
    );
    let data = TrainData {
        corpus: &corpus,
        schema: &schema,
        vocab: None,
        eval: eval.as_deref(),
    };
    let out = train_with(&config, data, |e| {
        let f1 = e
            .eval
            .as_ref()
            .map(|r| format!(" held-out F1 {:.4}", r.f1))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3} loss {:.4} (subject {:.4}, relation {:.4}) {:.1}s{f1}",
            e.epoch, e.mean_loss, e.mean_subject_loss, e.mean_relation_loss, e.wall_time_s
        );
    })?;
    write_file(
        &a.out,
        &checkpoint_bytes(&out.model, &config, &out.vocab, &schema)?,
    )?;
    if let Some(p) = &a.metrics {
        write_file(p, out.metrics.to_jsonl()?.as_bytes())?;
    }
    if let Some(p) = &a.best_out {
        let (epoch, best) = out.best.as_ref().context("no held-out evaluation was run")?;
        eprintln!("best held-out epoch {epoch}");
        write_file(p, &checkpoint_bytes(best, &config, &out.vocab, &schema)?)?;
    }
    Ok(())
}

/// Loads a checkpoint or exported artifact for inference.
pub fn load_model(path: &Path) -> Result<InferenceModel> {
    InferenceModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn extract(a: ExtractArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let texts: Vec<String> = match (a.text, a.file) {
        (Some(t), _) => vec![t],
        (None, Some(p)) => {
            let f = std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            std::io::BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()?
        }
        (None, None) => bail!("one of --text or --file is required"),
    };
    let mut out = std::io::stdout().lock();
    for text in &texts {
        let triples: Vec<TripleOut> = model.infer(text)?.iter().map(TripleOut::from).collect();
        let line = serde_json::json!({
            "text": text,
            "truncated": model.would_truncate(text),
            "triples": triples,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = read_corpus(&a.corpus, model.schema(), a.strict)?;
    let all = evaluate(
        model.model(),
        model.vocab(),
        model.schema(),
        &corpus,
        model.threshold(),
    )?;
    let overlapping: Vec<RawExample> = corpus.iter().filter(|e| e.is_overlapping()).cloned().collect();
    let subset = evaluate(
        model.model(),
        model.vocab(),
        model.schema(),
        &overlapping,
        model.threshold(),
    )?;
    let line = serde_json::json!({
        "sentences": corpus.len(),
        "overall": all,
        "overlapping_sentences": overlapping.len(),
        "overlapping": subset,
    });
    println!("{line}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let inputs: Vec<String> = match (a.corpus, a.text) {
        (Some(p), _) => read_corpus(&p, model.schema(), false)?
            .into_iter()
            .map(|e| e.text)
            .collect(),
        (None, Some(t)) => vec![t],
        (None, None) => bail!("one of --corpus or --text is required"),
    };
    let report = benchmark_latency(&model, &inputs, a.iterations, a.warmup)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    model.save(&a.out)?;
    eprintln!("exported {} to {}", model.model_version(), a.out.display());
    Ok(())
}
