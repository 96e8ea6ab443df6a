//! Command-line front door: preprocess raw regulation text, inspect corpus
//! statistics, fine-tune (full or LoRA), merge adapters, evaluate with the
//! rolling cache, and generate synthetic QA data through a completion
//! client.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.

mod config;
#[cfg(feature = "live")]
mod live;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eduqalm::checkpoint::{load_adapters_into, load_model, save_model};
use eduqalm::error::{Error, Result};
use eduqalm::fsutil::write_atomic;
use eduqalm::kvcache::{generate, GenerationParams};
use eduqalm::lora::reduction_warning;
use eduqalm::metrics::score_corpus;
use eduqalm::model::DecoderModel;
use eduqalm::pipeline::{
    compute_stats, craft_prompts, generate_candidates, label_quality, preprocess_document,
    read_corpus, write_corpus, ClientPolicy, CompletionClient, ContextRecord, FieldStats,
    InstructionTemplate, MockClient, NoopSpellChecker, TemplateStyle,
};
use eduqalm::tokenizer::{ByteTokenizer, Tokenizer};
use eduqalm::train::{format_eval_prompt, train, TrainMode, TrainOptions};

use config::RunConfigFile;

#[derive(Parser)]
#[command(
    name = "eduqalm",
    version,
    about = "Desk-scale decoder-transformer laboratory for Vietnamese regulation QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Lora,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => TrainMode::Full,
            ModeArg::Lora => TrainMode::Lora,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Plain,
    #[value(name = "chain_of_thought", alias = "chain-of-thought")]
    ChainOfThought,
    #[value(name = "self_consistency_cot", alias = "self-consistency-cot")]
    SelfConsistencyCot,
    #[value(name = "tree_of_thought", alias = "tree-of-thought")]
    TreeOfThought,
}

impl From<StyleArg> for TemplateStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Plain => TemplateStyle::Plain,
            StyleArg::ChainOfThought => TemplateStyle::ChainOfThought,
            StyleArg::SelfConsistencyCot => TemplateStyle::SelfConsistencyCot,
            StyleArg::TreeOfThought => TemplateStyle::TreeOfThought,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Clean, segment, and formula-normalize a raw regulation document
    /// into a contexts file (JSONL of {id, text}).
    Preprocess {
        /// Raw UTF-8 input document
        #[arg(long)]
        input: PathBuf,
        /// Output contexts file
        #[arg(long)]
        output: PathBuf,
        /// Maximum characters per context segment
        #[arg(long, default_value_t = 2000)]
        max_chars: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print character-length statistics (count/mean/std/min/25%/50%/75%/max)
    /// for the context, question, and answer fields of a corpus.
    Stats {
        /// QA corpus (JSONL)
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a model from a TOML run config. Optimizer defaults:
    /// beta1 0.9, beta2 0.999, warmup ratio 0.05, weight decay 0.01,
    /// max length 1024, 10 epochs; batch size 8/4 by variant and mode;
    /// LoRA rank 128, dropout 0.1.
    Train {
        /// Run configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Full fine-tune or LoRA with the base frozen
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Fold an adapter-only checkpoint into a base checkpoint and verify
    /// the merge on a random probe batch (max deviation must stay below
    /// 1e-5).
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate answers for a gold corpus with the rolling cache and print
    /// Exact / F1-score.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Instruction template style wrapped around each question
        #[arg(long, value_enum, default_value_t = StyleArg::Plain)]
        template: StyleArg,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        /// Per-example score records (JSONL)
        #[arg(long, default_value = "predictions.jsonl")]
        output: PathBuf,
        /// Score the gold answers against themselves instead of
        /// generating (sanity check of the scoring path)
        #[arg(long, default_value_t = false)]
        replay_gold: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic QA pairs from a contexts file through a
    /// completion client (a scripted mock, or a live endpoint with
    /// --live).
    GenData {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long, value_enum, default_value_t = StyleArg::Plain)]
        template: StyleArg,
        /// Prompts per context
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Scripted mock client fixture (JSONL of {response}/{error})
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Use the live completion endpoint from the environment
        #[arg(long, default_value_t = false)]
        live: bool,
        /// Output corpus
        #[arg(long)]
        output: PathBuf,
        /// Quarantine manifest for unparseable responses
        #[arg(long, default_value = "quarantine.jsonl")]
        quarantine: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess {
            input,
            output,
            max_chars,
            seed,
        } => cmd_preprocess(&input, &output, max_chars, seed),
        Command::Stats { corpus, seed } => cmd_stats(&corpus, seed),
        Command::Train { config, mode } => cmd_train(&config, mode.into()),
        Command::Merge {
            base,
            adapter,
            output,
            seed,
        } => cmd_merge(&base, &adapter, &output, seed),
        Command::Eval {
            checkpoint,
            corpus,
            template,
            max_new_tokens,
            output,
            replay_gold,
            seed,
        } => cmd_eval(
            &checkpoint,
            &corpus,
            template.into(),
            max_new_tokens,
            &output,
            replay_gold,
            seed,
        ),
        Command::GenData {
            contexts,
            template,
            k,
            mock,
            live,
            output,
            quarantine,
            seed,
        } => cmd_gen_data(
            &contexts,
            template.into(),
            k,
            mock.as_deref(),
            live,
            &output,
            &quarantine,
            seed,
        ),
    }
}

fn cmd_preprocess(input: &Path, output: &Path, max_chars: usize, seed: u64) -> Result<()> {
    println!("seed: {seed}");
    let raw = std::fs::read_to_string(input)?;
    let records = preprocess_document(&raw, max_chars, &NoopSpellChecker)?;
    let mut body = String::new();
    for rec in &records {
        body.push_str(&serde_json::to_string(rec).map_err(|e| Error::Input(e.to_string()))?);
        body.push('\n');
    }
    write_atomic(output, body.as_bytes())?;
    let chars: usize = records.iter().map(|r| r.text.chars().count()).sum();
    println!(
        "{} segments, {chars} chars written to {}",
        records.len(),
        output.display()
    );
    Ok(())
}

fn cmd_stats(corpus_path: &Path, seed: u64) -> Result<()> {
    println!("seed: {seed}");
    let corpus = read_corpus(corpus_path)?;
    let stats = compute_stats(&corpus)?;
    let row = |name: &str, f: &dyn Fn(&FieldStats) -> String| {
        println!(
            "{name:<8}{:>14}{:>14}{:>14}",
            f(&stats.context),
            f(&stats.question),
            f(&stats.answer)
        );
    };
    println!("{:<8}{:>14}{:>14}{:>14}", "", "context", "question", "answer");
    row("count", &|s| format!("{}", s.count));
    row("mean", &|s| format!("{:.2}", s.mean));
    row("std", &|s| format!("{:.2}", s.std));
    row("min", &|s| format!("{:.2}", s.min));
    row("25%", &|s| format!("{:.2}", s.q25));
    row("50%", &|s| format!("{:.2}", s.median));
    row("75%", &|s| format!("{:.2}", s.q75));
    row("max", &|s| format!("{:.2}", s.max));
    Ok(())
}

fn cmd_train(config_path: &Path, mode: TrainMode) -> Result<()> {
    let raw = std::fs::read_to_string(config_path)?;
    let run_config = RunConfigFile::parse(&raw)?;
    run_config.check_paths()?;
    println!("seed: {}", run_config.seed);

    let optimizer = run_config.optimizer.resolve(&run_config.model, mode);
    optimizer.validate()?;
    let lora = run_config.lora.clone().unwrap_or_default();
    if mode == TrainMode::Lora {
        let mut probe = DecoderModel::<f32>::zeros(&run_config.model)?;
        probe.attach_lora(&lora, 0)?;
        for adapter in probe.adapters().values() {
            let (d, k) = adapter.base_shape();
            if let Some(warning) = reduction_warning(d, k, adapter.rank()) {
                eprintln!("warning: {warning}");
            }
        }
    }

    let corpus = read_corpus(&run_config.paths.corpus)?;
    let mut model = DecoderModel::<f32>::init(&run_config.model, run_config.seed)?;
    match mode {
        TrainMode::Full => println!(
            "model: {} parameters, all trainable",
            model.param_count(false)
        ),
        TrainMode::Lora => println!(
            "model: {} base parameters (frozen); adapters rank {} train",
            model.param_count(false),
            lora.rank
        ),
    }
    let mut options = TrainOptions::new(mode, run_config.template(), run_config.seed);
    options.lora = lora;
    options.checkpoint_dir = Some(run_config.paths.checkpoint_dir.clone());

    let records = train(&mut model, &corpus, &ByteTokenizer, &optimizer, &options)?;

    let mut log = String::new();
    for record in &records {
        log.push_str(&serde_json::to_string(record).map_err(|e| Error::Input(e.to_string()))?);
        log.push('\n');
    }
    write_atomic(&run_config.paths.run_log, log.as_bytes())?;

    let manifest = serde_json::json!({
        "seed": run_config.seed,
        "mode": match mode { TrainMode::Full => "full", TrainMode::Lora => "lora" },
        "model": run_config.model,
        "optimizer": optimizer,
        "steps": records.last().map(|r| r.step).unwrap_or(0),
    });
    write_atomic(
        &run_config.paths.checkpoint_dir.join("run-manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Input(e.to_string()))?
            .as_bytes(),
    )?;

    match records.last() {
        Some(last) => println!(
            "final train loss {:.4}{} at step {}",
            last.train_loss,
            last.val_loss
                .map(|v| format!(" (val {v:.4})"))
                .unwrap_or_default(),
            last.step
        ),
        None => println!("no training steps (num_epochs 0); initial checkpoint written"),
    }
    Ok(())
}

fn cmd_merge(base: &Path, adapter: &Path, output: &Path, seed: u64) -> Result<()> {
    println!("seed: {seed}");
    let base_model = load_model::<f32>(base)?;
    let mut adapted = base_model.clone();
    load_adapters_into(&mut adapted, adapter)?;
    let merged = adapted.merge_adapters()?;

    // random probe batch: the merged weights must reproduce the adapter
    // path within 1e-5
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbead);
    let vocab = merged.config().vocab_size;
    let mut max_dev = 0f32;
    for _ in 0..32 {
        let tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(0..vocab)).collect();
        let a = adapted
            .forward(&eduqalm::Tape::new(), &tokens, None)?
            .to_vec();
        let b = merged
            .forward(&eduqalm::Tape::new(), &tokens, None)?
            .to_vec();
        for (x, y) in a.iter().zip(&b) {
            max_dev = max_dev.max((x - y).abs());
        }
    }
    println!("probe max deviation: {max_dev:.3e}");
    if max_dev.is_nan() || max_dev >= 1e-5 {
        return Err(Error::Numeric(format!(
            "merged forward deviates by {max_dev} (tolerance 1e-5)"
        )));
    }
    save_model(&merged, output)?;
    println!("merged checkpoint written to {}", output.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    corpus_path: &Path,
    style: TemplateStyle,
    max_new_tokens: usize,
    output: &Path,
    replay_gold: bool,
    seed: u64,
) -> Result<()> {
    println!("seed: {seed}");
    let model = load_model::<f32>(checkpoint)?;
    let corpus = read_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(Error::Contract(format!(
            "eval corpus {} is empty",
            corpus_path.display()
        )));
    }
    let tokenizer = ByteTokenizer;
    let template = InstructionTemplate::builtin_training(style);
    let config = model.config();
    // leave room for the generated answer when the variant cannot evict
    let prompt_budget = match config.window() {
        Some(_) => config.max_seq_len,
        None => config.max_seq_len.saturating_sub(max_new_tokens + 1).max(4),
    };

    let mut predictions: Vec<(String, String)> = Vec::with_capacity(corpus.len());
    for ex in &corpus {
        let text = if replay_gold {
            ex.answer.clone()
        } else {
            let prompt = format_eval_prompt(ex, &template, &tokenizer, prompt_budget)?;
            let params = GenerationParams {
                stop_token: Some(tokenizer.eos_id()),
                ..GenerationParams::greedy(max_new_tokens)
            };
            let generated = generate(&model, &prompt, &params)?;
            tokenizer.decode(&generated)
        };
        predictions.push((ex.id.clone(), text));
    }

    let report = score_corpus(&predictions, &corpus)?;
    println!("n        {}", report.n);
    println!("Exact    {:.2}", report.exact);
    println!("F1-score {:.2}", report.f1);

    let mut body = String::new();
    for (scored, (_, prediction)) in report.per_example.iter().zip(&predictions) {
        let line = serde_json::json!({
            "id": scored.id,
            "prediction": prediction,
            "em": scored.em,
            "precision": scored.precision,
            "recall": scored.recall,
            "f1": scored.f1,
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    write_atomic(output, body.as_bytes())?;
    println!("per-example records written to {}", output.display());
    Ok(())
}

fn read_contexts(path: &Path) -> Result<Vec<ContextRecord>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    contexts_path: &Path,
    style: TemplateStyle,
    k: usize,
    mock: Option<&Path>,
    live: bool,
    output: &Path,
    quarantine_path: &Path,
    seed: u64,
) -> Result<()> {
    println!("seed: {seed}");
    let contexts = read_contexts(contexts_path)?;
    let template = InstructionTemplate::builtin(style);
    if contexts.is_empty() {
        write_corpus(&[], output)?;
        write_atomic(quarantine_path, b"")?;
        println!("0 contexts; empty corpus written to {}", output.display());
        return Ok(());
    }
    let prompts = craft_prompts(&contexts, &template, k)?;

    let client: Box<dyn CompletionClient> = match (mock, live) {
        (Some(path), _) => Box::new(MockClient::from_fixture(path)?),
        (None, true) => live_client()?,
        (None, false) => {
            return Err(Error::Config(
                "choose a client: --mock SCRIPT for offline runs, or --live".into(),
            ));
        }
    };

    let mut outcome = generate_candidates(client.as_ref(), &prompts, ClientPolicy::default());
    for ex in &mut outcome.examples {
        let reference = ex.context.clone();
        label_quality(ex, &reference)?;
    }
    write_corpus(&outcome.examples, output)?;
    let mut manifest = String::new();
    for q in &outcome.quarantined {
        manifest.push_str(&serde_json::to_string(q).map_err(|e| Error::Input(e.to_string()))?);
        manifest.push('\n');
    }
    write_atomic(quarantine_path, manifest.as_bytes())?;
    println!(
        "{} prompts -> {} examples, {} quarantined",
        prompts.len(),
        outcome.examples.len(),
        outcome.quarantined.len()
    );
    println!(
        "corpus written to {}, quarantine manifest to {}",
        output.display(),
        quarantine_path.display()
    );
    Ok(())
}

#[cfg(feature = "live")]
fn live_client() -> Result<Box<dyn CompletionClient>> {
    Ok(Box::new(live::client_from_env()?))
}

#[cfg(not(feature = "live"))]
fn live_client() -> Result<Box<dyn CompletionClient>> {
    Err(Error::Config(
        "this binary was built without the `live` feature; \
         rebuild with `--features live` or use --mock SCRIPT"
            .into(),
    ))
}
