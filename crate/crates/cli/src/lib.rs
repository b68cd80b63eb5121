//! Command-line front end: training, evaluation, prediction, data tools
//! and benchmarks. Every command writes into its `--out` directory only and
//! leaves a `manifest.json` there.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use typespan::baseline::SpanClassifier;
use typespan::datasets::{
    degrade_distant, load_corpus, load_type_defs, save_corpus, save_type_defs, synth, type_defs_from_labels,
    CorpusFormat, DegradeConfig, LabeledDocument, TypeIndex,
};
use typespan::decoder::{
    decode, read_predictions, write_predictions, DecodeConfig, DocumentPrediction, ScoredMention, Strategy,
    ThresholdMode,
};
use typespan::datasets::merge_window_predictions;
use typespan::metrics::{per_type_report, EvalReport, Triple};
use typespan::model::{build_vocab, Model};
use typespan::trainer::{dump_similarity_distributions, evaluate, fit, FitReport};

use config::{parse_override, read_config_file, RunConfig};
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] typespan::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "typespan", version, about = "Span-based entity recognition with type-description encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against a labeled corpus.
    Eval(EvalArgs),
    /// Write predictions for a corpus or a piece of raw text.
    Predict(PredictArgs),
    /// Generate the synthetic nested corpus.
    Synth(SynthArgs),
    /// Drop (and optionally inject) mentions to mimic dictionary labels.
    Degrade(DegradeArgs),
    /// Measure scoring and decoding throughput with and without cached types.
    Bench(BenchArgs),
    /// Export similarity scores for density plots.
    Simdump(SimdumpArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` lines or a JSON object.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides applied after the config file, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub show_config: bool,
    /// Train the explicit-Outside span classifier instead.
    #[arg(long)]
    pub baseline: bool,
    /// Independent runs with seeds `seed, seed + 1, ..`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, required_unless_present = "show_config")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// `span_only` or `joint_position_span`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Remove overlapping predictions.
    #[arg(long)]
    pub flat: Option<bool>,
    /// `dynamic`, `learned_global` or `checkpoint` (keep the saved mode).
    #[arg(long)]
    pub threshold_mode: Option<String>,
    /// Documents processed in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines predictions to score instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Gold corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "json_spans")]
    pub format: String,
    /// Type order for the report when scoring a prediction file.
    #[arg(long)]
    pub types: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "text", conflicts_with = "text")]
    pub corpus: Option<PathBuf>,
    /// Raw text, tokenized on whitespace and punctuation.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value = "json_spans")]
    pub format: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub train_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub dev_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub test_docs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "json_spans")]
    pub format: String,
    /// Fraction of mentions kept for types without `--keep-type`.
    #[arg(long, default_value_t = 0.5)]
    pub keep: f64,
    /// Per-type fraction, e.g. `PER=0.3`.
    #[arg(long = "keep-type", value_name = "TYPE=FRACTION")]
    pub keep_type: Vec<String>,
    /// Spurious mentions injected per retained mention.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "json_spans")]
    pub format: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimdumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "json_spans")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; messages go to `out` and `err`.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Degrade(a) => cmd_degrade(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Simdump(a) => cmd_simdump(&a, out),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn parse_format(s: &str) -> Result<CorpusFormat> {
    s.parse().map_err(|e: typespan::Error| CliError::Usage(e.to_string()))
}

fn load(path: &Path, format: &str, manifest: &mut RunManifest) -> Result<Vec<LabeledDocument>> {
    require(path, "corpus")?;
    let format = parse_format(format)?;
    manifest.input(path)?;
    Ok(load_corpus(path, format)?)
}

fn load_model(dir: &Path, manifest: &mut RunManifest) -> Result<Model> {
    require(dir, "checkpoint")?;
    manifest.input(dir)?;
    Ok(Model::load(dir)?.0)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn apply_decode_args(model: &mut Model, a: &DecodeArgs) -> Result<()> {
    let d = &mut model.config.decode;
    if let Some(s) = &a.strategy {
        d.strategy = match s.as_str() {
            "span_only" => Strategy::SpanOnly,
            "joint_position_span" => Strategy::JointPositionSpan,
            other => return Err(CliError::Usage(format!("unknown strategy `{other}`"))),
        };
    }
    if let Some(f) = a.flat {
        d.flat = f;
    }
    match a.threshold_mode.as_deref() {
        None | Some("checkpoint") => {}
        Some("dynamic") => d.threshold_mode = ThresholdMode::Dynamic,
        Some("learned_global") => d.threshold_mode = ThresholdMode::LearnedGlobal,
        Some(other) => return Err(CliError::Usage(format!("unknown threshold mode `{other}`"))),
    }
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    Ok(())
}

/// Runs `f` over `items` on up to `workers` threads; output order matches
/// input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn predict_corpus(model: &Model, docs: &[LabeledDocument], workers: usize) -> Result<Vec<Vec<ScoredMention>>> {
    let types = model.type_embeddings()?;
    par_map(docs, workers, |d| Ok(model.predict(d, &types)?))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut pairs = match &a.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    for s in &a.set {
        pairs.push(parse_override(s)?);
    }
    let config = RunConfig::resolve(&pairs)?;
    if a.show_config {
        write!(out, "{}", config.render())?;
        return Ok(());
    }
    let dir = a.out.as_ref().expect("clap enforces --out");
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let (train_path, dev_path) = match (&config.data.train, &config.data.dev) {
        (Some(t), Some(d)) => (t.clone(), d.clone()),
        _ => return Err(CliError::Usage("data.train and data.dev must be set".into())),
    };
    require(&train_path, "training corpus")?;
    require(&dev_path, "development corpus")?;
    for p in config.data.test.iter().chain(&config.data.types) {
        require(p, "input")?;
    }
    prepare_out(dir)?;
    let flat_config: serde_json::Map<String, Value> = config.flat().into_iter().collect();
    let mut manifest = RunManifest::new("train", Value::Object(flat_config), Some(config.train.seed));
    let format = config.data.format;
    let read = |p: &Path, m: &mut RunManifest| -> Result<Vec<LabeledDocument>> {
        m.input(p)?;
        Ok(load_corpus(p, format)?)
    };
    let train = read(&train_path, &mut manifest)?;
    let dev = read(&dev_path, &mut manifest)?;
    let test = match &config.data.test {
        Some(p) => Some(read(p, &mut manifest)?),
        None => None,
    };
    let types = match &config.data.types {
        Some(p) => {
            manifest.input(p)?;
            load_type_defs(p)?
        }
        None => type_defs_from_labels(&train),
    };
    let vocab = build_vocab(&train, &types);
    let model_config = config.model_config();

    let mut summaries = Vec::new();
    for run in 0..a.runs {
        let mut cfg = config.train.clone();
        cfg.seed = config.train.seed.wrapping_add(run as u64);
        let run_dir = if a.runs == 1 { dir.clone() } else { dir.join(format!("run-{run}")) };
        prepare_out(&run_dir)?;
        let prefix = if a.runs == 1 { String::new() } else { format!("run-{run}/") };
        let log_path = run_dir.join("train_log.jsonl");
        let mut log = BufWriter::new(std::fs::File::create(&log_path)?);
        let ckpt = run_dir.join("checkpoint");
        let t = Instant::now();
        let (report, test_f1): (FitReport, Option<f64>) = if a.baseline {
            let index = TypeIndex::new(&types)?;
            let mut clf = SpanClassifier::init(model_config.clone(), vocab.clone(), index, cfg.seed)?;
            let report = fit(&mut clf, &train, &dev, &cfg, &mut log, Some(&ckpt))?;
            let f1 = test.as_ref().map(|t| clf.evaluate(t)).transpose()?;
            (report, f1)
        } else {
            let mut model = Model::init(model_config.clone(), vocab.clone(), types.clone(), cfg.seed)?;
            let report = fit(&mut model, &train, &dev, &cfg, &mut log, Some(&ckpt))?;
            let f1 = match &test {
                Some(t) => {
                    let preds: Vec<Vec<Triple>> = predict_corpus(&model, t, 1)?
                        .iter()
                        .map(|p| p.iter().map(ScoredMention::key).collect())
                        .collect();
                    let gold = model.gold_triples(t)?;
                    let rep = per_type_report(&preds, &gold, model.type_index.names());
                    std::fs::write(run_dir.join("test_report.json"), rep.to_json() + "\n")?;
                    manifest.output(&format!("{prefix}test_report.json"));
                    Some(rep.micro.strict_span.f1)
                }
                None => None,
            };
            (report, f1)
        };
        log.flush()?;
        manifest.timings.insert(format!("{prefix}fit"), t.elapsed().as_secs_f64());
        manifest.output(&format!("{prefix}train_log.jsonl"));
        manifest.output(&format!("{prefix}checkpoint"));
        writeln!(
            out,
            "run {run} seed {}: {} steps, best dev S-F1 {:.4} at step {}{}",
            cfg.seed,
            report.steps,
            report.best_dev_f1,
            report.best_step,
            test_f1.map_or(String::new(), |f| format!(", test S-F1 {f:.4}"))
        )?;
        summaries.push(json!({
            "seed": cfg.seed,
            "steps": report.steps,
            "best_step": report.best_step,
            "best_dev_f1": report.best_dev_f1,
            "test_f1": test_f1,
        }));
    }
    if a.runs > 1 {
        let mut dev_f1: Vec<f64> = summaries.iter().filter_map(|s| s["best_dev_f1"].as_f64()).collect();
        let mut test_f1: Vec<f64> = summaries.iter().filter_map(|s| s["test_f1"].as_f64()).collect();
        let summary = json!({
            "runs": summaries,
            "median_dev_f1": median(&mut dev_f1),
            "median_test_f1": if test_f1.is_empty() { Value::Null } else { json!(median(&mut test_f1)) },
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        manifest.output("summary.json");
    }
    manifest.write(dir)
}

fn triples_from_predictions(
    preds: &[DocumentPrediction],
    gold_docs: &[LabeledDocument],
    index: &TypeIndex,
) -> Result<Vec<Vec<Triple>>> {
    let by_id: BTreeMap<&str, &DocumentPrediction> = preds.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    gold_docs
        .iter()
        .map(|d| {
            let Some(p) = by_id.get(d.doc_id.as_str()) else {
                return Ok(Vec::new());
            };
            p.mentions
                .iter()
                .map(|m| Ok((m.start_token, m.end_token, index.id(&m.type_name)?)))
                .collect()
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let config = json!({
        "checkpoint": a.checkpoint, "predictions": a.predictions, "corpus": a.corpus, "format": a.format,
        "types": a.types, "strategy": a.decode.strategy, "flat": a.decode.flat,
        "threshold_mode": a.decode.threshold_mode, "workers": a.decode.workers,
    });
    let mut manifest = RunManifest::new("eval", config, None);
    let gold_docs = load(&a.corpus, &a.format, &mut manifest)?;
    prepare_out(&a.out)?;
    let report: EvalReport = if let Some(pred_path) = &a.predictions {
        require(pred_path, "predictions")?;
        manifest.input(pred_path)?;
        let preds = read_predictions(&std::fs::read_to_string(pred_path)?)?;
        let types = match &a.types {
            Some(p) => {
                require(p, "types")?;
                manifest.input(p)?;
                load_type_defs(p)?
            }
            None => {
                let mut names: Vec<String> = gold_docs
                    .iter()
                    .flat_map(|d| d.mentions.iter().map(|m| m.type_name.clone()))
                    .chain(preds.iter().flat_map(|p| p.mentions.iter().map(|m| m.type_name.clone())))
                    .collect();
                names.sort();
                names.dedup();
                names.into_iter().map(typespan::datasets::EntityTypeDef::named).collect()
            }
        };
        let index = TypeIndex::new(&types)?;
        let pred = triples_from_predictions(&preds, &gold_docs, &index)?;
        let gold = gold_docs.iter().map(|d| d.gold_ids(&index)).collect::<typespan::Result<Vec<_>>>()?;
        per_type_report(&pred, &gold, index.names())
    } else {
        let mut model = load_model(a.checkpoint.as_ref().expect("clap enforces a source"), &mut manifest)?;
        apply_decode_args(&mut model, &a.decode)?;
        let scored = manifest.time("predict", || predict_corpus(&model, &gold_docs, a.decode.workers))?;
        let preds: Vec<DocumentPrediction> =
            gold_docs.iter().zip(&scored).map(|(d, m)| model.to_prediction(d, m)).collect();
        let mut w = BufWriter::new(std::fs::File::create(a.out.join("predictions.jsonl"))?);
        write_predictions(&mut w, &preds)?;
        w.flush()?;
        manifest.output("predictions.jsonl");
        let pred: Vec<Vec<Triple>> = scored.iter().map(|p| p.iter().map(ScoredMention::key).collect()).collect();
        per_type_report(&pred, &model.gold_triples(&gold_docs)?, model.type_index.names())
    };
    std::fs::write(a.out.join("report.json"), report.to_json() + "\n")?;
    manifest.output("report.json");
    write!(out, "{}", report.table())?;
    manifest.write(&a.out)
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let config = json!({
        "checkpoint": a.checkpoint, "corpus": a.corpus, "text": a.text, "format": a.format,
        "strategy": a.decode.strategy, "flat": a.decode.flat,
        "threshold_mode": a.decode.threshold_mode, "workers": a.decode.workers,
    });
    let mut manifest = RunManifest::new("predict", config, None);
    let docs = match (&a.corpus, &a.text) {
        (Some(p), _) => load(p, &a.format, &mut manifest)?,
        (None, Some(t)) => vec![LabeledDocument::from_text("text-0", t.clone(), Vec::new())?],
        (None, None) => return Err(CliError::Usage("give --corpus or --text".into())),
    };
    let mut model = load_model(&a.checkpoint, &mut manifest)?;
    apply_decode_args(&mut model, &a.decode)?;
    prepare_out(&a.out)?;
    let scored = manifest.time("predict", || predict_corpus(&model, &docs, a.decode.workers))?;
    let preds: Vec<DocumentPrediction> = docs.iter().zip(&scored).map(|(d, m)| model.to_prediction(d, m)).collect();
    let mut w = BufWriter::new(std::fs::File::create(a.out.join("predictions.jsonl"))?);
    write_predictions(&mut w, &preds)?;
    w.flush()?;
    manifest.output("predictions.jsonl");
    let n: usize = preds.iter().map(|p| p.mentions.len()).sum();
    writeln!(out, "{} documents, {n} mentions", preds.len())?;
    manifest.write(&a.out)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let config = json!({
        "seed": a.seed, "train_docs": a.train_docs, "dev_docs": a.dev_docs, "test_docs": a.test_docs,
    });
    let mut manifest = RunManifest::new("synth", config, Some(a.seed));
    prepare_out(&a.out)?;
    let docs = synth::generate(a.seed, a.train_docs + a.dev_docs + a.test_docs);
    let (train, rest) = docs.split_at(a.train_docs);
    let (dev, test) = rest.split_at(a.dev_docs);
    for (name, split) in [("train.jsonl", train), ("dev.jsonl", dev), ("test.jsonl", test)] {
        if !split.is_empty() {
            save_corpus(&a.out.join(name), split)?;
            manifest.output(name);
        }
    }
    save_type_defs(&a.out.join("types.json"), &synth::type_defs())?;
    manifest.output("types.json");
    let nested = docs.iter().filter(|d| d.has_nested_pair()).count();
    writeln!(out, "{} documents ({nested} with nesting)", docs.len())?;
    manifest.write(&a.out)
}

fn cmd_degrade(a: &DegradeArgs, out: &mut dyn Write) -> Result<()> {
    let mut keep_recall = BTreeMap::new();
    for kv in &a.keep_type {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected TYPE=FRACTION, got `{kv}`")))?;
        let v: f64 = v.parse().map_err(|_| CliError::Usage(format!("bad fraction in `{kv}`")))?;
        keep_recall.insert(k.to_string(), v);
    }
    let cfg = DegradeConfig {
        keep_recall,
        default_keep: a.keep,
        precision_noise: a.noise,
        seed: a.seed,
    };
    let mut manifest = RunManifest::new("degrade", serde_json::to_value(&cfg)?, Some(a.seed));
    let docs = load(&a.corpus, &a.format, &mut manifest)?;
    let (degraded, record) = degrade_distant(&docs, &cfg).map_err(|e| match e {
        typespan::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    prepare_out(&a.out)?;
    save_corpus(&a.out.join("corpus.jsonl"), &degraded)?;
    std::fs::write(a.out.join("degrade_manifest.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    manifest.output("corpus.jsonl");
    manifest.output("degrade_manifest.json");
    writeln!(out, "dropped {} mentions, injected {}", record.dropped.len(), record.injected.len())?;
    manifest.write(&a.out)
}

#[derive(Clone, Copy, Default)]
struct Timing {
    types: f64,
    scoring: f64,
    decoding: f64,
}

impl Timing {
    fn total(&self) -> f64 {
        self.types + self.scoring + self.decoding
    }
}

fn bench_pass(model: &Model, docs: &[LabeledDocument], cached: bool) -> Result<Timing> {
    let mut t = Timing::default();
    let decode_cfg = &model.config.decode;
    let per_window = DecodeConfig {
        flat: false,
        ..decode_cfg.clone()
    };
    let clock = Instant::now();
    let shared = if cached { Some(model.type_embeddings()?) } else { None };
    t.types += clock.elapsed().as_secs_f64();
    for doc in docs {
        let clock = Instant::now();
        let own;
        let types = match &shared {
            Some(s) => s,
            None => {
                own = model.type_embeddings()?;
                &own
            }
        };
        t.types += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let scored = model.score_windows(doc, types, decode_cfg)?;
        t.scoring += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        let (windows, preds): (Vec<_>, Vec<_>) = scored
            .into_iter()
            .map(|(w, cands, th)| (w, decode(&cands, &th, &per_window)))
            .unzip();
        std::hint::black_box(merge_window_predictions(&windows, &preds, decode_cfg.flat));
        t.decoding += clock.elapsed().as_secs_f64();
    }
    Ok(t)
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let config = json!({"checkpoint": a.checkpoint, "corpus": a.corpus, "format": a.format, "repeats": a.repeats});
    let mut manifest = RunManifest::new("bench", config, None);
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let docs = load(&a.corpus, &a.format, &mut manifest)?;
    let model = load_model(&a.checkpoint, &mut manifest)?;
    prepare_out(&a.out)?;
    let tokens: usize = docs.iter().map(|d| d.tokens.len()).sum();
    let mut cands = Vec::new();
    for d in &docs {
        let n = d.tokens.len();
        let l = model.config.decode.max_span_len;
        cands.push(typespan::decoder::enumerate_spans(n, l).len() * model.num_types());
    }
    let best = |cached: bool| -> Result<Timing> {
        let mut best: Option<Timing> = None;
        for _ in 0..a.repeats {
            let t = bench_pass(&model, &docs, cached)?;
            if best.is_none_or(|b| t.total() < b.total()) {
                best = Some(t);
            }
        }
        Ok(best.expect("repeats is positive"))
    };
    let uncached = best(false)?;
    let cached = best(true)?;
    let rate = |secs: f64| if secs > 0.0 { tokens as f64 / secs } else { f64::INFINITY };
    let summary = |t: &Timing| {
        json!({
            "seconds": t.total(),
            "type_seconds": t.types,
            "scoring_seconds": t.scoring,
            "decoding_seconds": t.decoding,
            "tokens_per_sec": rate(t.total()),
            "scoring_tokens_per_sec": rate(t.types + t.scoring),
            "decoding_tokens_per_sec": rate(t.decoding),
        })
    };
    let total_cands: usize = cands.iter().sum();
    let result = json!({
        "documents": docs.len(),
        "tokens": tokens,
        "repeats": a.repeats,
        "cached": summary(&cached),
        "uncached": summary(&uncached),
        "speedup": uncached.total() / cached.total(),
        "candidates_per_doc": {
            "min": cands.iter().min(),
            "max": cands.iter().max(),
            "mean": if docs.is_empty() { 0.0 } else { total_cands as f64 / docs.len() as f64 },
            "total": total_cands,
        },
    });
    std::fs::write(a.out.join("bench.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    manifest.output("bench.json");
    writeln!(
        out,
        "cached {:.0} tok/s, uncached {:.0} tok/s, speedup {:.2}x",
        rate(cached.total()),
        rate(uncached.total()),
        uncached.total() / cached.total()
    )?;
    manifest.write(&a.out)
}

fn cmd_simdump(a: &SimdumpArgs, out: &mut dyn Write) -> Result<()> {
    let config = json!({"checkpoint": a.checkpoint, "corpus": a.corpus, "format": a.format});
    let mut manifest = RunManifest::new("simdump", config, None);
    let docs = load(&a.corpus, &a.format, &mut manifest)?;
    let model = load_model(&a.checkpoint, &mut manifest)?;
    prepare_out(&a.out)?;
    let mut w = BufWriter::new(std::fs::File::create(a.out.join("similarities.csv"))?);
    let rows = dump_similarity_distributions(&model, &docs, &mut w)?;
    w.flush()?;
    manifest.output("similarities.csv");
    writeln!(out, "{rows} rows")?;
    manifest.write(&a.out)
}

/// Micro strict span F1 of a checkpoint on a corpus.
pub fn checkpoint_f1(dir: &Path, docs: &[LabeledDocument]) -> Result<f64> {
    Ok(evaluate(&Model::load(dir)?.0, docs)?)
}
