//! Command-line front end: corpus conversion, training, evaluation,
//! prediction, checkpoint inspection, and epoch benchmarking.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use jointnlu::checkpoint::{load_checkpoint, save_checkpoint};
use jointnlu::corpus::{
    build_vocabularies, parse_corpus, split_validation, write_native, Corpus, CorpusFormat,
};
use jointnlu::embeddings::{load_contextual, load_embedding_text, ContextualStore, EmbeddingTable};
use jointnlu::eval::evaluate;
use jointnlu::model::{Model, ModelConfig, Variant, WordSource};
use jointnlu::train::{bench_epochs, epoch_timer, fit_single_task, Task, TrainConfig};

#[derive(Parser)]
#[command(
    name = "jointnlu",
    version,
    about = "Joint intent classification and IOB slot tagging"
)]
struct Cli {
    /// Optional JSON config file mirroring the flags; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Native,
    Ctf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VariantArg {
    Recurrent,
    #[value(name = "time_distributed")]
    TimeDistributed,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Recurrent => Variant::Recurrent,
            VariantArg::TimeDistributed => Variant::TimeDistributed,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TaskArg {
    Joint,
    Intent,
    Ner,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Joint => Task::Joint,
            TaskArg::Intent => Task::IntentOnly,
            TaskArg::Ner => Task::NerOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a corpus (CTF or native) to the native text format.
    Prepare {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a JSONL history.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Precomputed contextual vectors; substitutes the word-vector slot.
        #[arg(long)]
        contextual: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// History path; defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Fraction of the training corpus held out for validation.
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Evaluate a checkpoint on a test corpus and write a JSON report.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        contextual: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Read whitespace-tokenized utterances from stdin, write one JSON
    /// prediction per line.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Print a checkpoint's config, vocabulary sizes, and parameter count.
    Inspect {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Time training epochs without validation or early stopping.
    Bench {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Every flag, optional, as it may appear in the JSON config file.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    format: Option<String>,
    output: Option<PathBuf>,
    train: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    contextual: Option<PathBuf>,
    variant: Option<VariantArg>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    task: Option<TaskArg>,
    history: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    patience: Option<usize>,
    lr: Option<f64>,
    hidden: Option<usize>,
    dropout: Option<f64>,
    val_fraction: Option<f64>,
    model: Option<PathBuf>,
    test: Option<PathBuf>,
    report: Option<PathBuf>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("cannot open config file {}", path.display()))?;
            serde_json::from_reader(BufReader::new(file))
                .with_context(|| format!("invalid config file {}", path.display()))
        }
    }
}

fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .with_context(|| format!("missing required option --{name}"))
}

/// Writes through a temp file and renames, so a path exists only when its
/// content is complete.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file =
            File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        let mut writer = BufWriter::new(file);
        write(&mut writer)?;
        writer.flush()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// Parses a corpus file, sniffing CTF by its `|S0` field markers.
fn load_corpus(path: &Path, name: &str) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read corpus {}", path.display()))?;
    let format = if text
        .lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.contains("|S0"))
    {
        CorpusFormat::Ctf
    } else {
        CorpusFormat::Native
    };
    parse_corpus(Cursor::new(text), format, name)
        .with_context(|| format!("cannot parse corpus {}", path.display()))
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let file =
        File::open(path).with_context(|| format!("cannot open embeddings {}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".to_string());
    load_embedding_text(BufReader::new(file), None, &name)
        .with_context(|| format!("cannot parse embeddings {}", path.display()))
}

fn load_store(path: &Path) -> Result<ContextualStore> {
    let file = File::open(path)
        .with_context(|| format!("cannot open contextual store {}", path.display()))?;
    load_contextual(BufReader::new(file))
        .with_context(|| format!("cannot parse contextual store {}", path.display()))
}

fn cmd_prepare(input: &Path, format: FormatArg, output: &Path) -> Result<()> {
    let file =
        File::open(input).with_context(|| format!("cannot open input {}", input.display()))?;
    let format = match format {
        FormatArg::Native => CorpusFormat::Native,
        FormatArg::Ctf => CorpusFormat::Ctf,
    };
    let name = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let corpus = parse_corpus(BufReader::new(file), format, &name)?;
    write_atomic(output, |w| {
        write_native(&corpus, w)?;
        Ok(())
    })?;
    println!("wrote {} utterances to {}", corpus.len(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    train_path: &Path,
    embeddings_path: &Path,
    contextual_path: Option<&Path>,
    variant: Variant,
    out: &Path,
    history_path: Option<&Path>,
    seed: u64,
    task: Task,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    patience: Option<usize>,
    lr: Option<f64>,
    hidden: Option<usize>,
    dropout: Option<f64>,
    val_fraction: f64,
) -> Result<()> {
    let full_train = load_corpus(train_path, "train")?;
    let table = load_table(embeddings_path)?;
    let store = contextual_path.map(load_store).transpose()?;
    let source = match &store {
        Some(store) => WordSource::Contextual(store),
        None => WordSource::Static(&table),
    };

    let vocabs = build_vocabularies(&full_train);
    let (train, val) = split_validation(&full_train, val_fraction, seed)?;

    let mut config = ModelConfig::new(variant, source.dim());
    config.init_seed = seed;
    if let Some(h) = hidden {
        config.hidden = h;
    }
    if let Some(d) = dropout {
        config.dropout_rate = d;
    }
    let mut model: Model<f32> = Model::build(config, vocabs)?;

    let mut train_config = TrainConfig {
        shuffle_seed: seed,
        ..TrainConfig::default()
    };
    if let Some(e) = epochs {
        train_config.max_epochs = e;
    }
    if let Some(b) = batch_size {
        train_config.batch_size = b;
    }
    if let Some(p) = patience {
        train_config.patience = p;
    }
    if let Some(lr) = lr {
        train_config.optimizer.lr = lr;
    }

    let history = fit_single_task(&mut model, &train, &val, &source, &train_config, task)?;

    write_atomic(out, |w| {
        save_checkpoint(&model, w)?;
        Ok(())
    })?;
    let default_history = out.with_extension("history.jsonl");
    let history_path = history_path.unwrap_or(&default_history);
    write_atomic(history_path, |w| {
        history.write_jsonl(w)?;
        Ok(())
    })?;

    let (params, task_line) = match task {
        Task::Joint => (
            model.count_parameters(),
            "joint (slot weight 1, intent weight 1)",
        ),
        Task::IntentOnly => (
            model.count_parameters_excluding("slot"),
            "intent only (slot weight 0)",
        ),
        Task::NerOnly => (
            model.count_parameters_excluding("intent"),
            "ner only (intent weight 0)",
        ),
    };
    let best = &history.records[history.best_epoch];
    println!(
        "trained {variant} on {} utterances ({} validation)",
        train.len(),
        val.len()
    );
    println!("task: {task_line}");
    println!("parameters: {params}");
    println!(
        "epochs: {} (best {}, val loss {:.6}, stopped_early={})",
        history.records.len(),
        history.best_epoch,
        best.val_loss,
        history.stopped_early
    );
    println!("mean epoch seconds: {:.3}", epoch_timer(&history)?);
    println!("checkpoint: {}", out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn cmd_eval(
    model_path: &Path,
    test_path: &Path,
    embeddings_path: &Path,
    contextual_path: Option<&Path>,
    report_path: &Path,
) -> Result<()> {
    let file = File::open(model_path)
        .with_context(|| format!("cannot open checkpoint {}", model_path.display()))?;
    let model: Model<f32> = load_checkpoint(BufReader::new(file))?;
    let test = load_corpus(test_path, "test")?;
    let table = load_table(embeddings_path)?;
    let store = contextual_path.map(load_store).transpose()?;
    let source = match &store {
        Some(store) => WordSource::Contextual(store),
        None => WordSource::Static(&table),
    };
    let report = evaluate(&model, &test, &source)?;
    write_atomic(report_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    println!(
        "intent accuracy {:.4}, slot F1 {:.4} (P {:.4} / R {:.4}), token F1 {:.4}",
        report.intent_accuracy,
        report.slot.f1,
        report.slot.precision,
        report.slot.recall,
        report.slot.token_f1
    );
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_predict(model_path: &Path, embeddings_path: &Path) -> Result<()> {
    let file = File::open(model_path)
        .with_context(|| format!("cannot open checkpoint {}", model_path.display()))?;
    let model: Model<f32> = load_checkpoint(BufReader::new(file))?;
    let table = load_table(embeddings_path)?;
    let source = WordSource::Static(&table);

    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in stdin.lines().enumerate() {
        let line = line?;
        let tokens: Vec<String> = line.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            continue;
        }
        let prediction = model.predict(&tokens, i as u32, &source)?;
        serde_json::to_writer(&mut out, &prediction)?;
        writeln!(out)?;
    }
    Ok(())
}

fn cmd_inspect(model_path: &Path) -> Result<()> {
    let file = File::open(model_path)
        .with_context(|| format!("cannot open checkpoint {}", model_path.display()))?;
    let model: Model<f32> = load_checkpoint(BufReader::new(file))?;
    println!("{}", serde_json::to_string_pretty(model.config())?);
    let v = model.vocabs();
    println!(
        "vocabularies: {} tokens, {} chars, {} slots, {} intents",
        v.tokens.len(),
        v.chars.len(),
        v.slots.len(),
        v.intents.len()
    );
    for (name, tensor) in model.param_names().iter().zip(model.param_tensors()) {
        println!("  {name}: {:?}", tensor.shape());
    }
    println!("parameters: {}", model.count_parameters());
    Ok(())
}

fn cmd_bench(
    train_path: &Path,
    embeddings_path: &Path,
    variant: Variant,
    epochs: usize,
    batch_size: Option<usize>,
    seed: u64,
) -> Result<()> {
    if epochs == 0 {
        bail!("--epochs must be >= 1");
    }
    let corpus = load_corpus(train_path, "bench")?;
    let table = load_table(embeddings_path)?;
    let source = WordSource::Static(&table);
    let vocabs = build_vocabularies(&corpus);
    let mut config = ModelConfig::new(variant, table.dim());
    config.init_seed = seed;
    let mut model: Model<f32> = Model::build(config, vocabs)?;
    let mut train_config = TrainConfig {
        shuffle_seed: seed,
        ..TrainConfig::default()
    };
    if let Some(b) = batch_size {
        train_config.batch_size = b;
    }
    let times = bench_epochs(&mut model, &corpus, &source, &train_config, epochs)?;
    println!("epoch  seconds");
    for (i, t) in times.iter().enumerate() {
        println!("{i:>5}  {t:.3}");
    }
    println!(
        "mean   {:.3}",
        times.iter().sum::<f64>() / times.len() as f64
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare {
            input,
            format,
            output,
        } => {
            let file_format = match file.format.as_deref() {
                Some("native") => Some(FormatArg::Native),
                Some("ctf") => Some(FormatArg::Ctf),
                Some(other) => bail!("config file: unknown format {other:?}"),
                None => None,
            };
            cmd_prepare(
                &require(input, file.input, "input")?,
                require(format, file_format, "format")?,
                &require(output, file.output, "output")?,
            )
        }
        Command::Train {
            train,
            embeddings,
            contextual,
            variant,
            out,
            seed,
            task,
            history,
            epochs,
            batch_size,
            patience,
            lr,
            hidden,
            dropout,
            val_fraction,
        } => cmd_train(
            &require(train, file.train, "train")?,
            &require(embeddings, file.embeddings, "embeddings")?,
            contextual.or(file.contextual).as_deref(),
            require(variant, file.variant, "variant")?.into(),
            &require(out, file.out, "out")?,
            history.or(file.history).as_deref(),
            seed.or(file.seed).unwrap_or(0),
            task.or(file.task).unwrap_or(TaskArg::Joint).into(),
            epochs.or(file.epochs),
            batch_size.or(file.batch_size),
            patience.or(file.patience),
            lr.or(file.lr),
            hidden.or(file.hidden),
            dropout.or(file.dropout),
            val_fraction.or(file.val_fraction).unwrap_or(0.1),
        ),
        Command::Eval {
            model,
            test,
            embeddings,
            contextual,
            report,
        } => cmd_eval(
            &require(model, file.model, "model")?,
            &require(test, file.test, "test")?,
            &require(embeddings, file.embeddings, "embeddings")?,
            contextual.or(file.contextual).as_deref(),
            &require(report, file.report, "report")?,
        ),
        Command::Predict { model, embeddings } => cmd_predict(
            &require(model, file.model, "model")?,
            &require(embeddings, file.embeddings, "embeddings")?,
        ),
        Command::Inspect { model } => cmd_inspect(&require(model, file.model, "model")?),
        Command::Bench {
            train,
            embeddings,
            variant,
            epochs,
            batch_size,
            seed,
        } => cmd_bench(
            &require(train, file.train, "train")?,
            &require(embeddings, file.embeddings, "embeddings")?,
            require(variant, file.variant, "variant")?.into(),
            require(epochs, file.epochs, "epochs")?,
            batch_size.or(file.batch_size),
            seed.or(file.seed).unwrap_or(0),
        ),
    }
}
