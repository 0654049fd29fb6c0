//! `tokalign` command-line front end.
//!
//! Every subcommand prints a JSON summary on stdout. Exit status: 0 on
//! success, 1 for usage or configuration errors, 2 for data and format
//! errors, 3 for numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use tokalign::align::{self, ExtractConfig, SelfLearnConfig, Similarity};
use tokalign::cooccur::{self, DEFAULT_WINDOW};
use tokalign::corpus::{self, GreedyTokenizer};
use tokalign::glove::{self, GloveConfig};
use tokalign::hidden::{self, PoolMode};
use tokalign::lexicon::{AlignmentLexicon, Direction};
use tokalign::metrics;
use tokalign::pipeline::{self, PipelineConfig};
use tokalign::plan::{self, DistillOverrides};
use tokalign::remap::{self, InitKind, InitStrategy};
use tokalign::synth::PermutationBenchmark;
use tokalign::tensor;
use tokalign::vocab::{self, SharedTokenSet};
use tokalign::Embeddings;

#[derive(Parser, Debug)]
#[command(name = "tokalign", version, about = "Vocabulary alignment and embedding transplant toolkit")]
struct Cli {
    /// Top-level seed; every stochastic step derives its seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pipeline configuration file (TOML) for `run`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect vocabularies.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Tokenize a text corpus (one document per line) into a TITS stream.
    Tokenize(TokenizeArgs),
    /// Count windowed co-occurrences of a TITS stream into a TCOC matrix.
    Cooccur(CooccurArgs),
    /// Train GloVe token vectors from a TCOC matrix.
    Glove(GloveArgs),
    /// Pool per-occurrence hidden states (THSR) into token vectors.
    HiddenPool(HiddenPoolArgs),
    /// Align two embedding spaces and extract lexicons in both directions.
    Align(AlignArgs),
    /// Score lexicons by converting token streams (BLEU-1, semantic similarity).
    Eval(EvalArgs),
    /// Transplant source parameters onto the target vocabulary.
    Remap(RemapArgs),
    /// Emit training plans for an external trainer.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Bytes-per-token compression rate of a tokenizer on a corpus.
    CompressRate(CompressRateArgs),
    /// Run the whole pipeline from a configuration file.
    Run(RunArgs),
    /// Generate synthetic benchmark data.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Subcommand, Debug)]
enum VocabCommand {
    /// Size and byte coverage of one vocabulary.
    Stats { vocab: PathBuf },
    /// Byte-identical tokens shared by two vocabularies.
    Overlap {
        src: PathBuf,
        tgt: PathBuf,
        /// Write the shared `(src_id, tgt_id)` pairs as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CooccurArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: u32,
    /// Count every pair in the window as 1 instead of 1/distance.
    #[arg(long)]
    no_distance_weighting: bool,
}

#[derive(Args, Debug)]
struct GloveArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    x_max: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Unsynchronized parallel workers; results are then not reproducible.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct HiddenPoolArgs {
    #[arg(long)]
    input: PathBuf,
    /// Vocabulary whose size fixes the number of output rows.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "max")]
    pool: PoolMode,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    /// Source vocabulary; with `--tgt-vocab` enables the shared-token seed
    /// dictionary and direct substitution.
    #[arg(long, requires = "tgt_vocab")]
    src_vocab: Option<PathBuf>,
    #[arg(long, requires = "src_vocab")]
    tgt_vocab: Option<PathBuf>,
    /// Directory for `mapping.tal`, `lexicon_t2s.tsv` and `lexicon_s2t.tsv`.
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = Similarity::Csls)]
    similarity: Similarity,
    #[arg(long, default_value_t = 3)]
    top_n: usize,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Build the initial dictionary without any seed pairs.
    #[arg(long)]
    unsupervised_init: bool,
    /// Ignore shared tokens when seeding the dictionary.
    #[arg(long)]
    no_shared_seed: bool,
    /// Emit lexicons as JSON instead of TSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    src_tokens: PathBuf,
    #[arg(long)]
    tgt_tokens: PathBuf,
    #[arg(long)]
    lexicon_t2s: PathBuf,
    #[arg(long)]
    lexicon_s2t: PathBuf,
    /// Interleaved (converted, original) sentence embeddings per document.
    #[arg(long)]
    semantic_t2s: Option<PathBuf>,
    #[arg(long)]
    semantic_s2t: Option<PathBuf>,
    /// JSON array of the true source ID of every target token.
    #[arg(long)]
    gold_t2s: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RemapArgs {
    /// Source model parameters (TAL).
    #[arg(long)]
    bundle: PathBuf,
    /// Target→source lexicon.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = InitKind::TokAlign)]
    strategy: InitKind,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand, Debug)]
enum PlanCommand {
    /// Embedding-and-head warm-up followed by full tuning.
    TwoStage {
        #[arg(long, default_value_t = plan::DEFAULT_TOTAL_STEPS)]
        total_steps: u64,
        #[arg(long, default_value_t = plan::DEFAULT_EMBED_FRAC)]
        embed_frac: f64,
        #[arg(long, default_value_t = plan::DEFAULT_LEARNING_RATE)]
        learning_rate: f64,
        #[arg(long, default_value_t = plan::DEFAULT_BATCH_TOKENS)]
        batch_tokens: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Token-level distillation from a teacher sharing the target vocabulary.
    Distill {
        #[arg(long)]
        teacher: String,
        #[arg(long)]
        student: String,
        #[arg(long)]
        kd_weight: Option<f64>,
        #[arg(long)]
        task_sample_fraction: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CompressRateArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Include the per-document rates in the output.
    #[arg(long)]
    per_document: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Configuration file; alternative to the global `--config`.
    config_file: Option<PathBuf>,
    /// Ignore cached stage outputs.
    #[arg(long)]
    no_cache: bool,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Bigram corpus under two tokenizers that differ by a hidden relabeling.
    Permutation {
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2_000_000)]
        tokens: usize,
        #[arg(long, default_value_t = 1000)]
        doc_len: usize,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.chain().find_map(|c| c.downcast_ref::<tokalign::Error>()) {
        Some(err) if err.is_usage() => 1,
        Some(err) if err.is_numerical() => 3,
        _ => 2,
    }
}

/// Invocation errors detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn execute(cli: &Cli) -> anyhow::Result<Value> {
    let seed = cli.seed.unwrap_or(0);
    if cli.config.is_some() && !matches!(cli.command, Command::Run(_)) {
        return Err(usage("--config only applies to `run`"));
    }
    match &cli.command {
        Command::Vocab(c) => vocab_cmd(c),
        Command::Tokenize(a) => tokenize(a),
        Command::Cooccur(a) => cooccur_cmd(a),
        Command::Glove(a) => glove_cmd(a, seed),
        Command::HiddenPool(a) => hidden_pool(a),
        Command::Align(a) => align_cmd(a, seed),
        Command::Eval(a) => eval(a),
        Command::Remap(a) => remap_cmd(a, cli.seed),
        Command::Plan(c) => plan_cmd(c),
        Command::CompressRate(a) => compress_rate(a),
        Command::Run(a) => run(a, cli),
        Command::Synth(c) => synth(c, seed),
    }
}

fn vocab_cmd(c: &VocabCommand) -> anyhow::Result<Value> {
    match c {
        VocabCommand::Stats { vocab } => {
            let v = vocab::load_vocab(vocab)?;
            Ok(json!({
                "size": v.len(),
                "byte_coverage": v.has_byte_coverage(),
                "max_token_bytes": v.max_token_len(),
            }))
        }
        VocabCommand::Overlap { src, tgt, output } => {
            let shared = vocab::shared_tokens(&vocab::load_vocab(src)?, &vocab::load_vocab(tgt)?);
            if let Some(out) = output {
                write_text(out, &serde_json::to_string(&shared.pairs)?)?;
            }
            Ok(json!({
                "shared_tokens": shared.len(),
                "overlap_ratio_src": shared.overlap_ratio_src,
                "overlap_ratio_tgt": shared.overlap_ratio_tgt,
            }))
        }
    }
}

fn tokenize(a: &TokenizeArgs) -> anyhow::Result<Value> {
    let v = vocab::load_vocab(&a.vocab)?;
    let docs = corpus::read_text_corpus(&a.input)?;
    let stream = GreedyTokenizer::new(&v).tokenize_corpus(&docs, v.len() as u32)?;
    corpus::write_token_stream(&stream, &a.output)?;
    let report = vocab::compression_rate(&docs, &stream)?;
    Ok(json!({
        "documents": stream.docs().len(),
        "tokens": stream.total_tokens(),
        "bytes": report.total_bytes,
        "compression_rate": finite_or_null(report.rate),
    }))
}

fn cooccur_cmd(a: &CooccurArgs) -> anyhow::Result<Value> {
    let stream = corpus::read_token_stream(&a.input)?;
    let m = cooccur::accumulate(&stream, a.window, !a.no_distance_weighting)?;
    cooccur::write_cooccur(&m, &a.output)?;
    Ok(json!({ "vocab_size": m.vocab_size(), "window": a.window, "nonzero_pairs": m.nnz_upper() }))
}

fn glove_cmd(a: &GloveArgs, seed: u64) -> anyhow::Result<Value> {
    let m = cooccur::read_cooccur(&a.input)?;
    let d = GloveConfig::default();
    let cfg = GloveConfig {
        dim: a.dim.unwrap_or(d.dim),
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        x_max: a.x_max.unwrap_or(d.x_max),
        alpha: a.alpha.unwrap_or(d.alpha),
        seed,
        threads: a.workers,
    };
    let run = glove::train_from(&m, &cfg, None)?;
    run.embeddings.save(&a.output)?;
    Ok(json!({
        "rows": run.embeddings.rows(),
        "dim": run.embeddings.dim(),
        "coverage": run.embeddings.coverage(),
        "epoch_losses": run.epoch_losses,
    }))
}

fn hidden_pool(a: &HiddenPoolArgs) -> anyhow::Result<Value> {
    let v = vocab::load_vocab(&a.vocab)?;
    let records = hidden::read_hidden_states(&a.input)?;
    let emb = hidden::build_embeddings(&records, v.len(), a.pool)?;
    emb.save(&a.output)?;
    Ok(json!({ "rows": emb.rows(), "dim": emb.dim(), "coverage": emb.coverage(), "pool": a.pool.to_string() }))
}

fn align_cmd(a: &AlignArgs, seed: u64) -> anyhow::Result<Value> {
    let src = Embeddings::load(&a.src_emb)?;
    let tgt = Embeddings::load(&a.tgt_emb)?;
    let shared = match (&a.src_vocab, &a.tgt_vocab) {
        (Some(s), Some(t)) => vocab::shared_tokens(&vocab::load_vocab(s)?, &vocab::load_vocab(t)?),
        _ => SharedTokenSet::empty(),
    };
    let src_n = align::normalize(&src)?;
    let tgt_n = align::normalize(&tgt)?;
    let cfg = SelfLearnConfig {
        csls_k: a.csls_k,
        max_iter: a.max_iter,
        unsupervised_init: a.unsupervised_init,
        seed,
        ..SelfLearnConfig::default()
    };
    let seed_pairs = if a.no_shared_seed { SharedTokenSet::empty() } else { shared.clone() };
    let mapping = align::self_learn_align(&src_n, &tgt_n, &seed_pairs, &cfg)?;
    fs::create_dir_all(&a.output_dir).with_context(|| format!("creating {}", a.output_dir.display()))?;
    tensor::write_bundle(&mapping.to_bundle()?, a.output_dir.join("mapping.tal"))?;
    let ext = if a.json { "json" } else { "tsv" };
    let mut summary = json!({
        "objective": mapping.objective,
        "iterations": mapping.iterations,
        "converged": mapping.converged,
        "dictionary_size": mapping.dictionary_size,
        "shared_tokens": shared.len(),
    });
    for direction in [Direction::TgtToSrc, Direction::SrcToTgt] {
        let extract = ExtractConfig {
            direction,
            top_n: a.top_n,
            similarity: a.similarity,
            csls_k: a.csls_k,
        };
        let lex = align::extract_lexicon(&src_n, &tgt_n, &mapping, &shared, &extract)?;
        lex.save(a.output_dir.join(format!("lexicon_{direction}.{ext}")))?;
        summary[format!("low_confidence_{direction}")] = json!(lex.low_confidence_count());
        summary[format!("direct_{direction}")] = json!(lex.direct_count());
    }
    Ok(summary)
}

fn eval(a: &EvalArgs) -> anyhow::Result<Value> {
    let src = corpus::read_token_stream(&a.src_tokens)?;
    let tgt = corpus::read_token_stream(&a.tgt_tokens)?;
    let t2s = AlignmentLexicon::load(&a.lexicon_t2s)?;
    let s2t = AlignmentLexicon::load(&a.lexicon_s2t)?;
    let pairs_t2s = a.semantic_t2s.as_ref().map(metrics::read_sentence_pairs).transpose()?;
    let pairs_s2t = a.semantic_s2t.as_ref().map(metrics::read_sentence_pairs).transpose()?;
    let (r_t2s, r_s2t) = metrics::evaluate_bidirectional(&src, &tgt, &t2s, &s2t, [semantic_input(&pairs_t2s), semantic_input(&pairs_s2t)])?;
    let mut report = json!({ "t2s": r_t2s, "s2t": r_s2t });
    if let Some(g) = &a.gold_t2s {
        let text = fs::read_to_string(g).with_context(|| format!("reading {}", g.display()))?;
        let truth: Vec<u32> = serde_json::from_str(&text).map_err(|e| tokalign::Error::Format(format!("gold lexicon: {e}")))?;
        report["top1_accuracy"] = json!(metrics::top1_accuracy(&t2s, &truth, None)?);
    }
    if let Some(out) = &a.output {
        write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(report)
}

fn semantic_input(p: &Option<metrics::SentencePairs>) -> Option<metrics::SemanticInput<'_>> {
    p.as_ref().map(|(c, o)| (c.as_slice(), o.as_slice()))
}

fn remap_cmd(a: &RemapArgs, seed: Option<u64>) -> anyhow::Result<Value> {
    let bundle = tensor::read_bundle(&a.bundle)?;
    let lex = AlignmentLexicon::load(&a.lexicon)?;
    let seed = if a.strategy.is_stochastic() { Some(seed.unwrap_or(0)) } else { seed };
    let strategy = InitStrategy::new(a.strategy, seed)?;
    let out = remap::remap_parameters(&bundle, &lex, &strategy, lex.query_vocab_size())?;
    tensor::write_bundle(&out, &a.output)?;
    Ok(json!({
        "strategy": a.strategy.to_string(),
        "target_rows": lex.query_vocab_size(),
        "direct_rows": lex.direct_count(),
        "bitwise_identical": out == bundle,
    }))
}

fn plan_cmd(c: &PlanCommand) -> anyhow::Result<Value> {
    let (text, output) = match c {
        PlanCommand::TwoStage {
            total_steps,
            embed_frac,
            learning_rate,
            batch_tokens,
            output,
        } => (plan::emit_two_stage_plan(*total_steps, *embed_frac, *learning_rate, *batch_tokens)?.to_json(), output),
        PlanCommand::Distill {
            teacher,
            student,
            kd_weight,
            task_sample_fraction,
            temperature,
            output,
        } => {
            let overrides = DistillOverrides {
                kd_weight: *kd_weight,
                task_sample_fraction: *task_sample_fraction,
                temperature: *temperature,
            };
            (plan::emit_distill_config(teacher, student, overrides)?.to_json(), output)
        }
    };
    if let Some(out) = output {
        write_text(out, &text)?;
    }
    Ok(serde_json::from_str(&text)?)
}

fn compress_rate(a: &CompressRateArgs) -> anyhow::Result<Value> {
    let v = vocab::load_vocab(&a.vocab)?;
    let docs = corpus::read_text_corpus(&a.input)?;
    let stream = GreedyTokenizer::new(&v).tokenize_corpus(&docs, v.len() as u32)?;
    let report = vocab::compression_rate(&docs, &stream)?;
    let mut out = json!({
        "total_bytes": report.total_bytes,
        "total_tokens": report.total_tokens,
        "rate": finite_or_null(report.rate),
    });
    if a.per_document {
        out["per_document"] = json!(report.per_document);
    }
    Ok(out)
}

fn run(a: &RunArgs, cli: &Cli) -> anyhow::Result<Value> {
    let path = match (&a.config_file, &cli.config) {
        (Some(_), Some(_)) => return Err(usage("give the configuration either as an argument or with --config, not both")),
        (Some(p), None) | (None, Some(p)) => p,
        (None, None) => return Err(usage("`run` needs a configuration file (--config)")),
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if a.no_cache {
        cfg.cache = false;
    }
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = dir.clone();
    }
    info!("running pipeline into {}", cfg.output_dir.display());
    let manifest = pipeline::run_pipeline(&cfg)?;
    let stages: Vec<Value> = manifest.stages.iter().map(|s| json!({ "name": s.name, "status": s.status })).collect();
    Ok(json!({
        "output_dir": cfg.output_dir,
        "complete": manifest.complete,
        "stages": stages,
        "metrics": manifest.metrics,
    }))
}

fn synth(c: &SynthCommand, seed: u64) -> anyhow::Result<Value> {
    match c {
        SynthCommand::Permutation {
            vocab_size,
            tokens,
            doc_len,
            output_dir,
        } => {
            if *vocab_size < 2 || *doc_len == 0 || *tokens == 0 {
                return Err(usage("vocab size must be at least 2 and tokens/doc length positive"));
            }
            fs::create_dir_all(output_dir).with_context(|| format!("creating {}", output_dir.display()))?;
            let b = PermutationBenchmark::new(*vocab_size, *tokens, *doc_len, seed);
            vocab::save_vocab(&b.src_vocab, output_dir.join("src_vocab.json"))?;
            vocab::save_vocab(&b.tgt_vocab, output_dir.join("tgt_vocab.json"))?;
            corpus::write_token_stream(&b.src_stream, output_dir.join("src.tits"))?;
            corpus::write_token_stream(&b.tgt_stream, output_dir.join("tgt.tits"))?;
            write_text(&output_dir.join("gold_t2s.json"), &serde_json::to_string(&b.inverse())?)?;
            Ok(json!({
                "vocab_size": vocab_size,
                "tokens": b.src_stream.total_tokens(),
                "documents": b.src_stream.docs().len(),
                "output_dir": output_dir,
            }))
        }
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}
