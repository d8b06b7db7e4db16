//! Command implementations behind the `refeednet` binary.
//!
//! Every command writes one JSON document to the output it is given and logs
//! to stderr. With `--no-timestamps` the JSON depends only on flags and seed.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use refeednet::datasets::{
    load_dir, pnm, split, synth_dataset, write_dir, Dataset, Domain, LoadOptions, SplitSpec,
};
use refeednet::micronet::{
    checkpoint_checksum, evaluate, load_checkpoint, pretrain_source, save_checkpoint, train,
    Architecture, EpochStats, Model, PretrainConfig, TrainConfig, DEFAULT_LEARNING_RATE,
};
use refeednet::refeed::{
    execute, relationship_residual, GainMetrics, QoeConfig, RefeedConfig, DEFAULT_Q,
};
use refeednet::{Error, ErrorClass, MicroCnn, Result};
use refeednet_service::{AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "refeednet", version, about = "Traffic density classifier with stack-driven retraining")]
pub struct Cli {
    /// Leave wall-clock values out of the JSON output.
    #[arg(long, global = true)]
    pub no_timestamps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as one directory per class.
    Synth(SynthArgs),
    /// Fit a classifier and save its checkpoint.
    Train(TrainArgs),
    /// Measure a checkpoint's accuracy on a corpus.
    Eval(EvalArgs),
    /// Run an experiment group on generated corpora.
    Experiment(ExperimentArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Classify frames into the service's record log.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
    Shifted,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
            DomainArg::Shifted => Domain::Shifted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Group {
    #[value(name = "g1", alias = "g1-analog")]
    G1,
    #[value(name = "g2", alias = "g2-analog")]
    G2,
    #[value(name = "g3", alias = "g3-analog")]
    G3,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, value_enum, default_value_t = DomainArg::Target)]
    pub domain: DomainArg,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory; a synthetic target corpus is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub split: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    /// Train every layer from random weights instead of fine-tuning a pretrained head.
    #[arg(long)]
    pub scratch: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_Q)]
    pub q: f64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum)]
    pub group: Group,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_Q)]
    pub q: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Data directory; falls back to $REFEEDNET_DATA.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Checkpoint to deploy when the data directory has none.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_Q)]
    pub q: f64,
    #[arg(long)]
    pub auto_cycle: Option<usize>,
    #[arg(long, default_value_t = refeednet::refeed::DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    #[arg(long)]
    pub token: Option<String>,
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// A PNM file or a directory of them.
    #[arg(long, conflicts_with = "synth")]
    pub input: Option<PathBuf>,
    /// Generate frames from this domain instead of reading files.
    #[arg(long, value_enum)]
    pub synth: Option<DomainArg>,
    #[arg(long, default_value_t = 12)]
    pub per_class: usize,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit code for a failure of this class.
pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Io => 2,
        ErrorClass::Protocol => 3,
        ErrorClass::Validation => 4,
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    let s = seed.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    });
    eprintln!("seed: {s}");
    s
}

struct Clock {
    enabled: bool,
    started: Instant,
}

impl Clock {
    fn stamp(&self, v: &mut Value) {
        if self.enabled {
            let at = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64);
            v["generated_at"] = json!(at);
            v["elapsed_ms"] = json!(self.started.elapsed().as_millis() as u64);
        }
    }
}

fn read_model(path: &Path) -> Result<MicroCnn> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    load_checkpoint(&bytes)
}

fn write_model(path: &Path, model: &MicroCnn) -> Result<String> {
    let bytes = save_checkpoint(model);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(checkpoint_checksum(&bytes).expect("fresh checkpoint"))
}

fn last_val(history: &[EpochStats]) -> Option<f64> {
    history.last().and_then(|h| h.val_accuracy)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Value> {
    let seed = resolve_seed(args.seed);
    if args.per_class == 0 {
        return Err(Error::InvalidConfig("per-class must be >= 1".into()));
    }
    let d = synth_dataset(args.per_class, seed, args.domain.into());
    let files = write_dir(&d, &args.out)?;
    Ok(json!({
        "out": args.out,
        "domain": Domain::from(args.domain),
        "per_class": args.per_class,
        "seed": seed,
        "files": files.len(),
        "counts": d.counts(),
    }))
}

/// A pretrained base with a fresh head, ready for head-only training.
pub fn pretrained_base(arch: &Architecture, seed: u64) -> Result<MicroCnn> {
    let mut cfg = PretrainConfig::new(seed);
    cfg.architecture = arch.clone();
    let mut model: MicroCnn = pretrain_source(&cfg)?;
    model.freeze_base();
    model.reset_head(seed);
    Ok(model)
}

fn load_corpus(dir: Option<&Path>, seed: u64) -> Result<Dataset> {
    match dir {
        Some(dir) => {
            let report = load_dir(dir, &LoadOptions::default())?;
            if !report.skipped.is_empty() {
                log::warn!("{} unreadable files skipped", report.skipped.len());
            }
            Ok(report.dataset)
        }
        None => Ok(synth_dataset(100, seed, Domain::Target)),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<Value> {
    let seed = resolve_seed(args.seed);
    let corpus = load_corpus(args.data.as_deref(), seed)?;
    let (tr, val) = split(&corpus, &SplitSpec::new(args.split, seed)?)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        ..TrainConfig::with_seed(seed)
    };
    cfg.validate()?;
    let mut model = if args.scratch {
        Model::new(&Architecture::standard(), seed)?
    } else {
        pretrained_base(&Architecture::standard(), seed)?
    };
    let history = train(&mut model, tr.items(), val.items(), &cfg)?;
    let checksum = write_model(&args.model, &model)?;
    Ok(json!({
        "seed": seed,
        "mode": if args.scratch { "scratch" } else { "transfer" },
        "train_size": tr.len(),
        "val_size": val.len(),
        "val_accuracy": last_val(&history),
        "history": history,
        "model": args.model,
        "checksum": checksum,
    }))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Value> {
    let qoe = QoeConfig::new(args.q)?;
    let model = read_model(&args.model)?;
    let opts = LoadOptions::from_shape(model.input_shape())?;
    let d = load_dir(&args.data, &opts)?.dataset;
    let eval = evaluate(&model, d.items())?;
    let mut per_class = [[0usize; 2]; 4];
    for (item, ok) in d.iter().zip(&eval.correct) {
        per_class[item.label.index()][0] += usize::from(*ok);
        per_class[item.label.index()][1] += 1;
    }
    let per_class: serde_json::Map<String, Value> = refeednet::datasets::TrafficClass::ALL
        .iter()
        .map(|c| {
            let [hit, n] = per_class[c.index()];
            (c.name().to_string(), json!({ "correct": hit, "total": n }))
        })
        .collect();
    Ok(json!({
        "accuracy": eval.accuracy,
        "correct": eval.correct_count(),
        "total": d.len(),
        "per_class": per_class,
        "q": qoe.q,
        "qoe_satisfied": qoe.satisfied(eval.accuracy),
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitRow {
    pub fraction: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub val_accuracy: Option<f64>,
}

/// Split-fraction sweep on the target corpus.
pub fn experiment_g1(seed: u64, train_cfg: &TrainConfig) -> Result<Value> {
    let corpus = synth_dataset(100, seed, Domain::Target);
    let base = pretrained_base(&Architecture::standard(), seed)?;
    let mut rows = Vec::new();
    for fraction in [0.9, 0.8, 0.75, 0.7, 0.6, 0.5] {
        let (tr, val) = split(&corpus, &SplitSpec::new(fraction, seed)?)?;
        let mut model = base.clone();
        let history = train(&mut model, tr.items(), val.items(), train_cfg)?;
        rows.push(SplitRow {
            fraction,
            train_size: tr.len(),
            val_size: val.len(),
            val_accuracy: last_val(&history),
        });
    }
    Ok(json!({ "group": "g1-analog", "seed": seed, "corpus_size": corpus.len(), "splits": rows }))
}

/// Train on the target domain, test on the shifted one, then retrain from the stack.
pub fn experiment_drift(group: Group, seed: u64, q: f64, train_cfg: &TrainConfig) -> Result<Value> {
    let arch = match group {
        Group::G3 => Architecture::compact(),
        _ => Architecture::standard(),
    };
    let offline = synth_dataset(100, seed, Domain::Target);
    let test = synth_dataset(48, seed.wrapping_add(100), Domain::Shifted);
    let retest = synth_dataset(48, seed.wrapping_add(200), Domain::Shifted);
    let mut cfg = RefeedConfig::new(seed);
    cfg.qoe = QoeConfig::new(q)?;
    cfg.offline = train_cfg.clone();
    cfg.online.epochs = train_cfg.epochs;
    cfg.online.batch_size = train_cfg.batch_size;
    let model = pretrained_base(&arch, seed)?;
    let out = execute(model, &offline, &test, &retest, &cfg)?;
    let m: GainMetrics = out.metrics;
    let residual = if m.pf.is_some() {
        Some(relationship_residual(&m)?)
    } else {
        None
    };
    let name = match group {
        Group::G3 => "g3-analog",
        _ => "g2-analog",
    };
    Ok(json!({
        "group": name,
        "seed": seed,
        "q": m.q,
        "architecture": if group == Group::G3 { "compact" } else { "standard" },
        "offline": {
            "train_size": out.offline.train_size,
            "val_size": out.offline.val_size,
            "val_accuracy": last_val(&out.offline.history),
        },
        "test_size": test.len(),
        "retest_size": retest.len(),
        "misclassified": out.misclassified,
        "stack_capacity": out.stack.capacity(),
        "stack_after_sweep": out.stack_after_sweep,
        "retrain_size": out.retrain.as_ref().map(|r| r.train_size + r.val_size),
        "retrained": m.pf.is_some(),
        "p0": m.p0,
        "pf": m.pf,
        "r": m.r,
        "gain": m.gain,
        "residual": residual,
        "percent": m.percent(),
    }))
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<Value> {
    let seed = resolve_seed(args.seed);
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        ..TrainConfig::with_seed(seed)
    };
    cfg.validate()?;
    match args.group {
        Group::G1 => experiment_g1(seed, &cfg),
        g => experiment_drift(g, seed, args.q, &cfg),
    }
}

fn service_config(data: Option<&Path>, seed: u64, timestamps: bool) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(ServiceConfig::resolve_data_dir(data));
    cfg.seed = seed;
    cfg.timestamps = timestamps;
    cfg
}

fn install_model(cfg: &ServiceConfig, model: Option<&Path>) -> Result<()> {
    let Some(src) = model else { return Ok(()) };
    let dest = cfg.data_dir.join("model.rfn");
    if !dest.exists() {
        let m = read_model(src)?;
        write_model(&dest, &m)?;
    }
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs, timestamps: bool) -> Result<Value> {
    let seed = resolve_seed(args.seed);
    let mut cfg = service_config(args.data.as_deref(), seed, timestamps);
    cfg.addr = args.addr;
    cfg.q = args.q;
    cfg.auto_cycle_every = args.auto_cycle;
    cfg.max_rounds = args.max_rounds;
    cfg.token = args.token.clone();
    cfg.ui_dir = args.ui.clone();
    cfg.validate()?;
    install_model(&cfg, args.model.as_deref())?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: "tokio runtime".into(),
        source: e,
    })?;
    rt.block_on(refeednet_service::serve(cfg.clone()))?;
    Ok(json!({ "stopped": true, "data": cfg.data_dir }))
}

pub fn cmd_predict(args: &PredictArgs, timestamps: bool) -> Result<Value> {
    let seed = resolve_seed(args.seed);
    let cfg = service_config(args.data.as_deref(), seed, timestamps);
    install_model(&cfg, args.model.as_deref())?;
    let state = AppState::open(cfg)?;
    let mut records = Vec::new();
    match (&args.input, args.synth) {
        (Some(path), _) if path.is_dir() => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let bytes = std::fs::read(&f).map_err(|e| Error::Io { path: f.clone(), source: e })?;
                match state.predict_bytes(&bytes) {
                    Ok(r) => records.push(r),
                    Err(e) => log::warn!("skipping {}: {e}", f.display()),
                }
            }
        }
        (Some(path), _) => {
            let bytes = std::fs::read(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            records.push(state.predict_bytes(&bytes)?);
        }
        (None, Some(domain)) => {
            for item in synth_dataset(args.per_class, seed, domain.into()).into_items() {
                let bytes = pnm::encode(&item.pixels)?;
                records.push(state.predict_bytes(&bytes)?);
            }
        }
        (None, None) => return Err(Error::InvalidConfig("give --input or --synth".into())),
    }
    Ok(json!({ "records": records }))
}

/// Parses `args` (program name first), runs the command and writes its JSON to `out`.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit_code(ErrorClass::Validation) } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let clock = Clock {
        enabled: !cli.no_timestamps,
        started: Instant::now(),
    };
    let timestamps = !cli.no_timestamps;
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Serve(a) => cmd_serve(a, timestamps),
        Command::Predict(a) => cmd_predict(a, timestamps),
    };
    match result {
        Ok(mut v) => {
            clock.stamp(&mut v);
            let text = serde_json::to_string_pretty(&v).expect("json output");
            if writeln!(out, "{text}").is_err() {
                return exit_code(ErrorClass::Io);
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class())
        }
    }
}
