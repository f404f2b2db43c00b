//! Command implementations behind the `edgeedit` binary.

pub mod config;
pub mod dot;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use edgeedit::corpus::{corpus_stats, Corpus, Document, Segmenter, Split, SplitManifest};
use edgeedit::editor::{edit_document, EditTrace};
use edgeedit::metrics::{score, MetricsReport};
use edgeedit::model::{EdgeModel, EdgeNet, EncoderKind, NodeVectors, Vocab};
use edgeedit::relgraph::{GraphRecord, RelationGraph};
use edgeedit::rules::{DictionarySet, RuleExtractor};
use edgeedit::training::{log_csv, train};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigFile, Overrides, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] edgeedit::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for usage errors, 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(edgeedit::Error::Numeric(_)) => 3,
            CliError::Core(_) | CliError::Io { .. } => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgeedit", version, about = "Document-level relation extraction by iterative edge editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print entity and relation counts per split.
    Stats(RunArgs),
    /// Run the rule-based extractor and score it.
    RuleExtract(RunArgs),
    /// Train an edge editor on the train split, selecting on dev.
    Train(RunArgs),
    /// Edit documents with a trained checkpoint and score the result.
    Edit(EditArgs),
    /// Render a graph record as Graphviz DOT.
    ExportDot(DotArgs),
    /// Rebuild the Material dictionaries from gold training relations.
    BuildDicts(RunArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings and a `[model]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `<id>.txt` / `<id>.ann` files.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Split manifest with `[train]`, `[dev]` and `[test]` sections.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory holding the Material dictionaries.
    #[arg(long)]
    pub dicts: Option<PathBuf>,
    /// Per-entity vectors (JSON lines) for the precomputed encoder.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train, dev or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Initial graph: empty, rule or random.
    #[arg(long)]
    pub init: Option<String>,
    /// Edit order: close or random.
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub dmax: Option<usize>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-document work.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct DotArgs {
    /// Graph record (JSON) written by `rule-extract` or `edit`.
    #[arg(long)]
    pub graph: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn settings(&self) -> Result<Settings, CliError> {
        let file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        Settings::resolve(
            file,
            Overrides {
                corpus: self.corpus.clone(),
                manifest: self.manifest.clone(),
                dicts: self.dicts.clone(),
                vectors: self.vectors.clone(),
                out: self.out.clone(),
                split: self.split.clone(),
                init: self.init.clone(),
                order: self.order.clone(),
                seed: self.seed,
                jobs: self.jobs,
                dmax: self.dmax,
                gcn_layers: self.gcn_layers,
                epochs: self.epochs,
                lr: self.lr,
            },
        )
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Stats(args) => stats(&args.settings()?, stdout),
        Command::RuleExtract(args) => rule_extract(&args.settings()?, stdout),
        Command::Train(args) => train_cmd(&args.settings()?, stdout),
        Command::Edit(args) => edit(&args.run.settings()?, &args.checkpoint, stdout),
        Command::ExportDot(args) => export_dot(&args, stdout),
        Command::BuildDicts(args) => build_dicts(&args.settings()?, stdout),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required for this command")))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| CliError::io(path, e))
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

/// Loads only the given splits of the configured corpus.
fn load_corpus(settings: &Settings, splits: &[Split]) -> Result<Corpus, CliError> {
    let dir = required(&settings.corpus, "corpus")?;
    let mut manifest = SplitManifest::load(required(&settings.manifest, "manifest")?)?;
    manifest.splits.retain(|s, _| splits.contains(s));
    Ok(Corpus::load(dir, &manifest, &Segmenter::default())?)
}

fn load_rules(settings: &Settings) -> Result<RuleExtractor, CliError> {
    let dir = required(&settings.dicts, "dicts")?;
    Ok(RuleExtractor::new(DictionarySet::load_dir(dir)?))
}

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> edgeedit::Result<R> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect::<edgeedit::Result<Vec<R>>>())?)
}

fn stats(settings: &Settings, stdout: &mut dyn Write) -> Result<(), CliError> {
    let splits = settings.split.map_or(Split::ALL.to_vec(), |s| vec![s]);
    let corpus = load_corpus(settings, &splits)?;
    let table = corpus_stats(&corpus).to_table();
    if let Some(out) = &settings.out {
        write_file(&out.join("stats.txt"), &table)?;
    }
    emit(stdout, &table)?;
    if corpus.report.warnings() > 0 {
        eprintln!(
            "note: skipped {} unsupported annotation lines, {} duplicate and {} self relations",
            corpus.report.skipped_lines, corpus.report.duplicate_relations, corpus.report.self_relations
        );
    }
    Ok(())
}

/// Writes graphs, optional traces, metrics and the resolved settings, and
/// prints the metrics table.
fn write_predictions(
    settings: &Settings,
    docs: &[Document],
    predicted: &[(String, RelationGraph)],
    traces: Option<&[EditTrace]>,
    stdout: &mut dyn Write,
) -> Result<MetricsReport, CliError> {
    let report = score(docs, predicted)?;
    if let Some(out) = &settings.out {
        for (doc, (_, graph)) in docs.iter().zip(predicted) {
            let record = GraphRecord::with_nodes(graph, doc);
            let json = serde_json::to_string_pretty(&record).map_err(edgeedit::Error::from)? + "\n";
            write_file(&out.join("graphs").join(format!("{}.json", doc.doc_id)), &json)?;
        }
        for trace in traces.unwrap_or_default() {
            write_file(&out.join("traces").join(format!("{}.jsonl", trace.doc_id)), &trace.to_jsonl()?)?;
        }
        write_file(&out.join("metrics.csv"), &report.to_csv())?;
        write_file(&out.join("metrics.txt"), &report.report_table())?;
        write_settings(settings, out)?;
    }
    emit(stdout, &report.report_table())?;
    Ok(report)
}

fn write_settings(settings: &Settings, out: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(settings).map_err(edgeedit::Error::from)? + "\n";
    write_file(&out.join("run_config.json"), &json)
}

fn rule_extract(settings: &Settings, stdout: &mut dyn Write) -> Result<(), CliError> {
    let split = settings.split.unwrap_or(Split::Test);
    let corpus = load_corpus(settings, &[split])?;
    let rules = load_rules(settings)?;
    let docs = corpus.split(split);
    let predicted = par_map(settings.jobs, docs, |d| Ok((d.doc_id.clone(), rules.extract(d))))?;
    write_predictions(settings, docs, &predicted, None, stdout)?;
    Ok(())
}

/// Rules are needed by every initial graph except the empty one.
fn optional_rules(settings: &Settings) -> Result<Option<RuleExtractor>, CliError> {
    match (settings.init, &settings.dicts) {
        (edgeedit::editor::InitialGraphSource::Empty, None) => Ok(None),
        _ => load_rules(settings).map(Some),
    }
}

fn load_vectors(settings: &Settings) -> Result<Option<NodeVectors>, CliError> {
    match &settings.vectors {
        Some(path) => Ok(Some(NodeVectors::load(path)?)),
        None => Ok(None),
    }
}

fn train_cmd(settings: &Settings, stdout: &mut dyn Write) -> Result<(), CliError> {
    let out = required(&settings.out, "out")?.to_path_buf();
    let corpus = load_corpus(settings, &[Split::Train, Split::Dev])?;
    let rules = optional_rules(settings)?;
    let net = match load_vectors(settings)? {
        Some(vectors) => EdgeNet::with_vectors(settings.model.clone(), vectors)?,
        None if settings.model.encoder_kind == EncoderKind::PrecomputedFile => {
            return Err(CliError::Usage("the precomputed encoder needs --vectors".into()))
        }
        None => {
            let vocab = Vocab::build(corpus.split(Split::Train), settings.model.min_token_freq);
            EdgeNet::new(settings.model.clone(), vocab)?
        }
    };
    write_settings(settings, &out)?;
    let checkpoints = out.join("checkpoints");
    let outcome = train(
        net,
        corpus.split(Split::Train),
        corpus.split(Split::Dev),
        &settings.train_config(),
        rules.as_ref(),
        |entry, model| {
            fs::create_dir_all(&checkpoints).map_err(|e| edgeedit::Error::io(&checkpoints, e))?;
            model.save(&checkpoints.join(format!("epoch-{}.json", entry.epoch)))
        },
    )?;
    outcome.best.save(&out.join("model.json"))?;
    outcome.last.save(&out.join("model_last.json"))?;
    write_file(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    let summary = match best.dev_micro_f {
        Some(f) => format!(
            "trained {} epochs; best epoch {} with dev micro-F {f:.4}\n",
            outcome.log.len(),
            outcome.best_epoch
        ),
        None => format!(
            "trained {} epochs without a dev split; kept the last epoch (train NLL {:.4})\n",
            outcome.log.len(),
            best.train_nll
        ),
    };
    emit(stdout, &summary)
}

fn edit(settings: &Settings, checkpoint: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let split = settings.split.unwrap_or(Split::Test);
    let corpus = load_corpus(settings, &[split])?;
    let rules = optional_rules(settings)?;
    let model = EdgeModel::load(checkpoint, load_vectors(settings)?)?;
    let docs = corpus.split(split);
    let edit_settings = settings.edit_settings();
    let results = par_map(settings.jobs, docs, |d| {
        let (g, trace) = edit_document(&model, d, &edit_settings, rules.as_ref())?;
        Ok(((d.doc_id.clone(), g), trace))
    })?;
    let (predicted, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write_predictions(settings, docs, &predicted, Some(&traces), stdout)?;
    Ok(())
}

fn export_dot(args: &DotArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let json = fs::read_to_string(&args.graph).map_err(|e| CliError::io(&args.graph, e))?;
    let record: GraphRecord = serde_json::from_str(&json).map_err(edgeedit::Error::from)?;
    let dot = dot::to_dot(&record);
    match &args.out {
        Some(path) => write_file(path, &dot),
        None => emit(stdout, &dot),
    }
}

fn build_dicts(settings: &Settings, stdout: &mut dyn Write) -> Result<(), CliError> {
    let out = required(&settings.out, "out")?;
    let split = settings.split.unwrap_or(Split::Train);
    let corpus = load_corpus(settings, &[split])?;
    let dicts = DictionarySet::from_gold(corpus.split(split));
    dicts.write_dir(out)?;
    emit(
        stdout,
        &format!(
            "wrote {} solvent, {} atmospheric and {} participant entries to {}\n",
            dicts.solvent.len(),
            dicts.atmospheric.len(),
            dicts.participant.len(),
            out.display()
        ),
    )
}
