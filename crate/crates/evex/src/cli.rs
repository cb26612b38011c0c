//! The `evex` command line: corpus generation, training, evaluation, and
//! embedding export, driven by a TOML config file with dotted-path
//! overrides.
//!
//! Exit codes: 0 success, 2 validation/config errors, 3 IO errors,
//! 4 training divergence, 1 anything else.

use crate::datakit::{
    read_jsonl, validate_document, write_jsonl, Document, GenConfig, ScoreReport,
};
use crate::decoder::Schema;
use crate::diffcore::load_checkpoint;
use crate::encoder::Vocab;
use crate::model::Model;
use crate::trainer::{evaluate, export_embeddings, train, Ablation, TrainConfig};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory holding train/dev/test.jsonl, schema.json and vocab.txt.
    pub data_dir: PathBuf,
    /// Directory receiving run directories.
    pub out_dir: PathBuf,
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            train_fraction: 0.8,
            dev_fraction: 0.1,
        }
    }
}

/// Merged view of the config file plus command-line overrides; serialized
/// verbatim into every run's config snapshot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

#[derive(Parser, Debug)]
#[command(name = "evex", version, about = "Document-level multi-event extraction")]
pub struct Cli {
    /// TOML config file; flags and --set override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.batch_size=16
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus: train/dev/test splits, schema, vocab.
    Generate(GenerateArgs),
    /// Train a model and write run artifacts.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Export entity and proxy vectors of one document as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total documents across the three splits.
    #[arg(long)]
    pub docs: Option<usize>,
    /// Output directory (defaults to paths.data_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory (defaults to paths.data_dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// Run-directory parent (defaults to paths.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fixed run directory name instead of a timestamped one.
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory produced by `train` (reads config, checkpoint, schema,
    /// vocab from it).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report destination (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write predicted events as JSONL.
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub doc_id: i64,
    /// CSV destination (default: next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---- config loading ---------------------------------------------------------

fn parse_toml_config(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<toml::Table>().map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0),
        msg: e.message().to_string(),
    })
}

fn apply_set(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {:?}", spec)))?;
    // parse the value as a TOML literal, falling back to a bare string
    let parsed: toml::Value = format!("v = {}", value)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("--set key {:?} is not a dotted path", key)));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set path {} crosses a non-table", key)))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Loads the config file (if any) and applies the --set overrides.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<CliConfig> {
    let mut table = match path {
        Some(p) => parse_toml_config(p)?,
        None => toml::Table::new(),
    };
    for spec in sets {
        apply_set(&mut table, spec)?;
    }
    let value = toml::Value::Table(table);
    value
        .try_into()
        .map_err(|e| Error::Config(format!("config: {}", e)))
}

fn render_config(config: &CliConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(format!("config serialization: {}", e)))
}

// ---- corpus statistics --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub documents: usize,
    pub events: usize,
    pub single_event_docs: usize,
    pub multi_event_docs: usize,
    pub entities: usize,
    pub mentions: usize,
}

impl CorpusStats {
    pub fn of(docs: &[Document]) -> CorpusStats {
        CorpusStats {
            documents: docs.len(),
            events: docs.iter().map(|d| d.events.len()).sum(),
            single_event_docs: docs.iter().filter(|d| d.events.len() == 1).count(),
            multi_event_docs: docs.iter().filter(|d| d.events.len() > 1).count(),
            entities: docs.iter().map(|d| d.unique_entity_ids().len()).sum(),
            mentions: docs.iter().map(|d| d.entities.len()).sum(),
        }
    }

    pub fn multi_fraction(&self) -> f64 {
        if self.documents == 0 {
            0.0
        } else {
            self.multi_event_docs as f64 / self.documents as f64
        }
    }
}

// ---- commands -----------------------------------------------------------------

fn split_sizes(total: usize, paths: &PathsConfig) -> Result<(usize, usize, usize)> {
    if !(0.0..1.0).contains(&paths.train_fraction) || !(0.0..1.0).contains(&paths.dev_fraction) {
        return Err(Error::Config("split fractions must lie in [0, 1)".into()));
    }
    let n_train = (total as f64 * paths.train_fraction).round() as usize;
    let n_dev = (total as f64 * paths.dev_fraction).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= total {
        return Err(Error::Config(format!(
            "cannot split {} documents into nonempty train/dev/test with fractions {}/{}",
            total, paths.train_fraction, paths.dev_fraction
        )));
    }
    Ok((n_train, n_dev, total - n_train - n_dev))
}

pub fn cmd_generate(config: &CliConfig, args: &GenerateArgs) -> Result<()> {
    let mut gen = config.gen.clone();
    if let Some(seed) = args.seed {
        gen.seed = seed;
    }
    if let Some(docs) = args.docs {
        gen.num_docs = docs;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| config.paths.data_dir.clone());
    let (n_train, n_dev, n_test) = split_sizes(gen.num_docs, &config.paths)?;
    let corpus = crate::datakit::generate(&gen)?;
    std::fs::create_dir_all(&out_dir)?;
    let docs = corpus.documents;
    let (train_docs, rest) = docs.split_at(n_train);
    let (dev_docs, test_docs) = rest.split_at(n_dev);
    write_jsonl(train_docs, &out_dir.join("train.jsonl"))?;
    write_jsonl(dev_docs, &out_dir.join("dev.jsonl"))?;
    write_jsonl(test_docs, &out_dir.join("test.jsonl"))?;
    corpus.schema.save(&out_dir.join("schema.json"))?;
    Vocab::from_tokens(corpus.inventory.tokens()).save(&out_dir.join("vocab.txt"))?;

    let stats = CorpusStats::of(&docs);
    eprintln!(
        "generated {} documents into {} (train {}, dev {}, test {})",
        stats.documents,
        out_dir.display(),
        n_train,
        n_dev,
        n_test
    );
    eprintln!(
        "events {}, single-event docs {} ({:.1}%), multi-event docs {} ({:.1}%)",
        stats.events,
        stats.single_event_docs,
        100.0 * (1.0 - stats.multi_fraction()),
        stats.multi_event_docs,
        100.0 * stats.multi_fraction()
    );
    eprintln!("entities {}, mentions {}", stats.entities, stats.mentions);
    Ok(())
}

fn unique_run_dir(parent: &Path, seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("run-{}-s{}", stamp, seed);
    let mut dir = parent.join(&base);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = parent.join(format!("{}-{}", base, k));
    }
    dir
}

fn load_corpus_file(path: &Path, schema: &Schema) -> Result<Vec<Document>> {
    let docs = read_jsonl(path)?;
    for doc in &docs {
        validate_document(doc, schema)?;
    }
    Ok(docs)
}

pub fn cmd_train(config: &CliConfig, args: &TrainArgs) -> Result<PathBuf> {
    let mut config = config.clone();
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(ablation) = &args.ablation {
        config.train.ablation = Ablation::parse(ablation)?;
    }
    if let Some(data) = &args.data {
        config.paths.data_dir = data.clone();
    }
    if let Some(out) = &args.out {
        config.paths.out_dir = out.clone();
    }
    let data = &config.paths.data_dir;
    let schema = Schema::load(&data.join("schema.json"))?;
    let vocab = Vocab::load(&data.join("vocab.txt"))?;
    let train_docs = load_corpus_file(&data.join("train.jsonl"), &schema)?;
    let dev_docs = load_corpus_file(&data.join("dev.jsonl"), &schema)?;

    std::fs::create_dir_all(&config.paths.out_dir)?;
    let run_dir = match &args.run_name {
        Some(name) => config.paths.out_dir.join(name),
        None => unique_run_dir(&config.paths.out_dir, config.train.seed),
    };
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), render_config(&config)?)?;
    schema.save(&run_dir.join("schema.json"))?;
    vocab.save(&run_dir.join("vocab.txt"))?;

    let artifacts = train(&train_docs, &dev_docs, &schema, &vocab, &config.train, &run_dir)?;
    std::fs::write(
        config.paths.out_dir.join("latest"),
        format!("{}\n", run_dir.file_name().unwrap().to_string_lossy()),
    )?;
    eprintln!(
        "run {} finished after {} epochs; best dev F1 {:.4}",
        run_dir.display(),
        artifacts.epochs_run,
        artifacts.best_dev_f1
    );
    eprintln!(
        "artifacts: {}, {}, {}",
        artifacts.metrics_csv.display(),
        artifacts.best_checkpoint.display(),
        artifacts.report_json.display()
    );
    Ok(run_dir)
}

struct ResolvedModel {
    model: Model,
    schema: Schema,
    vocab: Vocab,
    checkpoint: PathBuf,
}

fn resolve_model(
    config: &CliConfig,
    run_dir: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    schema: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
) -> Result<ResolvedModel> {
    let (train_cfg, ckpt_path, schema_path, vocab_path) = match run_dir {
        Some(dir) => {
            let snapshot = load_config(Some(&dir.join("config.toml")), &[])?;
            (
                snapshot.train,
                checkpoint.clone().unwrap_or_else(|| dir.join("best.ckpt")),
                schema.clone().unwrap_or_else(|| dir.join("schema.json")),
                vocab.clone().unwrap_or_else(|| dir.join("vocab.txt")),
            )
        }
        None => {
            let ckpt = checkpoint.clone().ok_or_else(|| {
                Error::Config("either --run-dir or --checkpoint is required".into())
            })?;
            let schema = schema
                .clone()
                .ok_or_else(|| Error::Config("--schema is required without --run-dir".into()))?;
            let vocab = vocab
                .clone()
                .ok_or_else(|| Error::Config("--vocab is required without --run-dir".into()))?;
            (config.train.clone(), ckpt, schema, vocab)
        }
    };
    let schema = Schema::load(&schema_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let dims = train_cfg.dims(vocab.len(), &schema);
    let mut model = Model::init(dims, train_cfg.ablation.structure(), train_cfg.seed)?;
    let loaded = load_checkpoint(&ckpt_path)?;
    model.load_values(&loaded)?;
    Ok(ResolvedModel {
        model,
        schema,
        vocab,
        checkpoint: ckpt_path,
    })
}

pub fn cmd_eval(config: &CliConfig, args: &EvalArgs) -> Result<ScoreReport> {
    let resolved = resolve_model(config, &args.run_dir, &args.checkpoint, &args.schema, &args.vocab)?;
    let docs = load_corpus_file(&args.corpus, &resolved.schema)?;
    let (report, predictions) = evaluate(&resolved.model, &docs, &resolved.vocab, &resolved.schema)?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("report serialization: {}", e)))?;
    println!("{}", json);
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args
            .corpus
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        resolved
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{}.json", stem))
    });
    std::fs::write(&out, &json)?;
    eprintln!(
        "P {:.4} R {:.4} F1 {:.4} | F1 single {:.4} multi {:.4}",
        report.precision, report.recall, report.f1, report.f1_single, report.f1_multi
    );
    for (ty, s) in &report.per_type {
        eprintln!("  {}: P {:.4} R {:.4} F1 {:.4}", ty, s.precision, s.recall, s.f1);
    }
    eprintln!("report written to {}", out.display());

    if let Some(pred_path) = &args.dump_predictions {
        let mut f = std::fs::File::create(pred_path)?;
        for (doc, events) in docs.iter().zip(&predictions) {
            let line = serde_json::json!({ "id": doc.id, "events": events });
            writeln!(f, "{}", line)?;
        }
        eprintln!("predictions written to {}", pred_path.display());
    }
    Ok(report)
}

pub fn cmd_export_embeddings(config: &CliConfig, args: &ExportArgs) -> Result<PathBuf> {
    let resolved = resolve_model(config, &args.run_dir, &args.checkpoint, &args.schema, &args.vocab)?;
    let docs = load_corpus_file(&args.corpus, &resolved.schema)?;
    let doc = docs
        .iter()
        .find(|d| d.id == args.doc_id)
        .ok_or_else(|| Error::Validation(format!("document {} not found in corpus", args.doc_id)))?;
    let rows = export_embeddings(&resolved.model, doc, &resolved.vocab, &resolved.schema)?;
    let out = args.out.clone().unwrap_or_else(|| {
        resolved
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("embeddings_doc{}.csv", args.doc_id))
    });
    let d_h = rows.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut f = std::fs::File::create(&out)?;
    let header: Vec<String> = ["kind", "id", "events"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d_h).map(|i| format!("d{}", i)))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for row in &rows {
        let bits: String = row.membership.iter().map(|b| char::from(b'0' + b)).collect();
        let vals: Vec<String> = row.vector.iter().map(|v| format!("{}", v)).collect();
        writeln!(f, "{},{},{},{}", row.kind, row.id, bits, vals.join(","))?;
    }
    eprintln!("{} rows written to {}", rows.len(), out.display());
    Ok(out)
}

/// Entry point for the binary.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::Generate(args) => cmd_generate(&config, args),
        Command::Train(args) => cmd_train(&config, args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&config, args).map(|_| ()),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(&config, args).map(|_| ()),
    }
}

/// Process exit code for an error: validation-like failures, IO failures,
/// and divergence are distinguishable.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::Shape { .. }
        | Error::Index { .. } => 2,
        Error::Io(_) => 3,
        Error::Divergence { .. } => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_keys() {
        let config = load_config(
            None,
            &[
                "train.batch_size=16".to_string(),
                "gen.entity_sharing=0.9".to_string(),
                "train.ablation=\"no_proxy\"".to_string(),
                "paths.data_dir=\"corpus\"".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.train.batch_size, 16);
        assert_eq!(config.gen.entity_sharing, 0.9);
        assert_eq!(config.train.ablation, Ablation::NoProxy);
        assert_eq!(config.paths.data_dir, PathBuf::from("corpus"));
    }

    #[test]
    fn bare_string_set_value_is_accepted() {
        let config = load_config(None, &["train.ablation=no_hdm".to_string()]).unwrap();
        assert_eq!(config.train.ablation, Ablation::NoHdm);
    }

    #[test]
    fn malformed_set_is_config_error() {
        assert!(matches!(
            load_config(None, &["no_equals_sign".to_string()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_snapshot_roundtrips() {
        let config = CliConfig::default();
        let text = render_config(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, &text).unwrap();
        let reloaded = load_config(Some(&path), &[]).unwrap();
        assert_eq!(render_config(&reloaded).unwrap(), text);
    }

    #[test]
    fn split_sizes_sum_to_total() {
        let paths = PathsConfig::default();
        let (a, b, c) = split_sizes(250, &paths).unwrap();
        assert_eq!(a + b + c, 250);
        assert_eq!(a, 200);
        assert_eq!(b, 25);
    }

    #[test]
    fn stats_count_multi_event_docs() {
        use crate::datakit::{generate, GenConfig};
        let corpus = generate(&GenConfig {
            num_docs: 30,
            ..GenConfig::default()
        })
        .unwrap();
        let stats = CorpusStats::of(&corpus.documents);
        assert_eq!(stats.documents, 30);
        assert_eq!(stats.single_event_docs + stats.multi_event_docs, 30);
        let recount = corpus.documents.iter().filter(|d| d.events.len() > 1).count();
        assert_eq!(stats.multi_event_docs, recount);
    }
}
