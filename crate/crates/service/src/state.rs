use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use refeednet::datasets::{load_dir, pnm, resolve_source, synth_dataset, write_dir, Dataset, LoadOptions};
use refeednet::micronet::{
    checkpoint_checksum, load_checkpoint, pretrain_source, save_checkpoint, Architecture, LayerKind,
    PretrainConfig,
};
use refeednet::prediction::{
    apply_correction, continuous_cycle, predict_and_store, transfer_corrections, CycleRecord,
    CycleTrigger, PredictionRecord, RecordStore, Review, Verdict,
};
use refeednet::refeed::{
    train_offline, MetricsReport, QoeConfig, ReFeedStack, RefeedConfig, StackLine,
};
use refeednet::{Error, MicroCnn, Result};

use crate::config::ServiceConfig;

/// File layout inside the data directory.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub root: PathBuf,
    pub model: PathBuf,
    pub model_meta: PathBuf,
    pub records: PathBuf,
    pub prediction_stack: PathBuf,
    pub training_stack: PathBuf,
    pub metrics: PathBuf,
    pub retest: PathBuf,
    pub images: PathBuf,
}

impl DataPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            model: root.join("model.rfn"),
            model_meta: root.join("model.json"),
            records: root.join("records.jsonl"),
            prediction_stack: root.join("prediction_stack.jsonl"),
            training_stack: root.join("training_stack.jsonl"),
            metrics: root.join("metrics.jsonl"),
            retest: root.join("retest"),
            images: root.join("images"),
        }
    }
}

/// Writes through a temporary sibling and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::Io {
        path: tmp.clone(),
        source: e,
    })?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Pretrains on the source domain and fits the head on the target domain.
pub fn bootstrap_model(seed: u64) -> Result<MicroCnn> {
    let mut model: MicroCnn = pretrain_source(&PretrainConfig::new(seed))?;
    let corpus = synth_dataset(100, seed, refeednet::datasets::Domain::Target);
    train_offline(&mut model, &corpus, &RefeedConfig::new(seed))?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub checksum: String,
    pub deployed_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub input_shape: Vec<usize>,
    pub layers: Vec<String>,
    pub base_boundary: usize,
    pub param_count: usize,
    pub frozen_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture: ArchitectureSummary,
    pub checksum: String,
    pub deployed_at: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSizes {
    pub prediction: usize,
    pub training: usize,
}

/// Body of `GET /metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    #[serde(flatten)]
    pub current: MetricsReport,
    pub busy: bool,
    pub stack: StackSizes,
    pub history: Vec<CycleRecord>,
}

/// Reply to a review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReply {
    #[serde(flatten)]
    pub record: PredictionRecord,
    pub cycle_started: bool,
}

struct Inner {
    store: RecordStore,
    prediction_stack: ReFeedStack,
    training_stack: ReFeedStack,
    history: Vec<CycleRecord>,
    trigger: CycleTrigger,
    below_q_streak: usize,
    meta: ModelMeta,
}

/// Everything the service owns. All mutations persist before returning.
pub struct AppState {
    cfg: ServiceConfig,
    paths: DataPaths,
    opts: LoadOptions,
    retest: Dataset,
    model: RwLock<Arc<MicroCnn>>,
    inner: Mutex<Inner>,
    busy: AtomicBool,
}

fn summarize(model: &MicroCnn) -> ArchitectureSummary {
    let arch: Architecture = model.architecture();
    let layers = arch
        .layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => format!("conv {kernel_h}x{kernel_w}x{out_channels} stride {stride} pad {padding}"),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool2d { window, stride } => format!("maxpool {window} stride {stride}"),
            LayerKind::Flatten => "flatten".into(),
            LayerKind::Dense { out_features } => format!("dense {out_features}"),
            LayerKind::Softmax => "softmax".into(),
        })
        .collect();
    ArchitectureSummary {
        input_shape: arch.input_shape.clone(),
        layers,
        base_boundary: arch.base_boundary,
        param_count: model.param_count(),
        frozen_layers: arch
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.frozen)
            .map(|(i, _)| i)
            .collect(),
    }
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io(path)(e)),
    }
}

impl AppState {
    /// Loads or initializes every state file. Corrupt files are refused.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<Self>> {
        cfg.validate()?;
        let paths = DataPaths::new(&cfg.data_dir);
        fs::create_dir_all(&paths.root).map_err(io(&paths.root))?;
        fs::create_dir_all(&paths.images).map_err(io(&paths.images))?;

        let model: MicroCnn = if paths.model.exists() {
            let bytes = fs::read(&paths.model).map_err(io(&paths.model))?;
            load_checkpoint(&bytes)?
        } else {
            log::info!("no checkpoint in {}, bootstrapping one", paths.root.display());
            let m = bootstrap_model(cfg.seed)?;
            write_atomic(&paths.model, &save_checkpoint(&m))?;
            m
        };
        let bytes = save_checkpoint(&model);
        let checksum = checkpoint_checksum(&bytes).expect("fresh checkpoint");
        let meta = match read_optional(&paths.model_meta)? {
            Some(text) => {
                let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::StateFile {
                    path: paths.model_meta.clone(),
                    line: 1,
                    reason: e.to_string(),
                })?;
                if meta.checksum != checksum {
                    log::warn!("model metadata checksum differs from checkpoint; refreshing");
                }
                ModelMeta { checksum, ..meta }
            }
            None => ModelMeta {
                checksum,
                deployed_at: None,
            },
        };

        let opts = LoadOptions::from_shape(model.input_shape())?;
        if !paths.retest.is_dir() {
            let d = synth_dataset(
                cfg.retest_per_class,
                cfg.seed.wrapping_add(200),
                cfg.retest_domain,
            );
            write_dir(&d, &paths.retest)?;
        }
        let retest = load_dir(&paths.retest, &opts)?.dataset;
        if retest.is_empty() {
            return Err(Error::EmptyDataset("retest corpus"));
        }

        let store = RecordStore::open(&paths.records)?;
        let load_stack = |path: &Path, cap: usize| -> Result<ReFeedStack> {
            match read_optional(path)? {
                Some(text) => ReFeedStack::from_jsonl(&text, cap, path, |id| {
                    resolve_source(id, &paths.root, &opts)
                }),
                None => ReFeedStack::new(cap),
            }
        };
        let prediction_stack = load_stack(&paths.prediction_stack, cfg.prediction_capacity)?;
        let training_stack = load_stack(&paths.training_stack, cfg.training_capacity)?;
        let mut history = Vec::new();
        if let Some(text) = read_optional(&paths.metrics)? {
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                history.push(serde_json::from_str(line).map_err(|e| Error::StateFile {
                    path: paths.metrics.clone(),
                    line: n + 1,
                    reason: e.to_string(),
                })?);
            }
        }
        let trigger = CycleTrigger::new(cfg.auto_cycle_every)?;
        let q = cfg.q;
        let below_q_streak = history
            .iter()
            .rev()
            .take_while(|c: &&CycleRecord| c.pf.max(c.p0) < q)
            .count();
        Ok(Arc::new(Self {
            paths,
            opts,
            retest,
            model: RwLock::new(Arc::new(model)),
            inner: Mutex::new(Inner {
                store,
                prediction_stack,
                training_stack,
                history,
                trigger,
                below_q_streak,
                meta,
            }),
            busy: AtomicBool::new(false),
            cfg,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn paths(&self) -> &DataPaths {
        &self.paths
    }

    pub fn retest(&self) -> &Dataset {
        &self.retest
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// The deployed model.
    pub fn model(&self) -> Arc<MicroCnn> {
        self.model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    fn timestamp(&self) -> u64 {
        if self.cfg.timestamps {
            now_ms()
        } else {
            0
        }
    }

    fn persist_stacks(&self, inner: &Inner) -> Result<()> {
        write_atomic(&self.paths.prediction_stack, inner.prediction_stack.to_jsonl().as_bytes())?;
        write_atomic(&self.paths.training_stack, inner.training_stack.to_jsonl().as_bytes())
    }

    /// Decodes a PNM frame, stores it under `images/` and records a prediction.
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<PredictionRecord> {
        let px = pnm::decode(bytes)?;
        let px = pnm::resize_nearest(&px, self.opts.height, self.opts.width, self.opts.channels);
        self.predict_pixels(&px)
    }

    pub fn predict_pixels(&self, px: &refeednet::Tensor) -> Result<PredictionRecord> {
        let model = self.model();
        let mut inner = self.lock();
        let id = inner.store.next_id();
        let ext = if px.shape()[2] == 3 { "ppm" } else { "pgm" };
        let rel = format!("images/{id:08}.{ext}");
        let path = self.paths.root.join(&rel);
        let encoded = pnm::encode(px)?;
        let stored = pnm::decode(&encoded)?;
        write_atomic(&path, &encoded)?;
        let at = self.timestamp();
        predict_and_store(model.as_ref(), &mut inner.store, &stored, rel, at)
    }

    pub fn records(&self, status: Option<Review>, limit: Option<usize>) -> Vec<PredictionRecord> {
        self.lock().store.list(status, limit)
    }

    pub fn record(&self, id: u64) -> Option<PredictionRecord> {
        self.lock().store.get(id).cloned()
    }

    /// Encoded pixels behind a `source_id`.
    pub fn image(&self, source_id: &str) -> Result<Vec<u8>> {
        let px = resolve_source(source_id, &self.paths.root, &self.opts)?;
        pnm::encode(&px)
    }

    /// Applies a review; may start an automatic cycle.
    pub fn review(self: &Arc<Self>, id: u64, verdict: Verdict) -> Result<ReviewReply> {
        let (record, due) = {
            let mut inner = self.lock();
            let Inner {
                store,
                prediction_stack,
                ..
            } = &mut *inner;
            let root = &self.paths.root;
            let opts = &self.opts;
            let c = apply_correction(store, prediction_stack, id, verdict, |r| {
                resolve_source(r, root, opts)
            })?;
            if c.pushed {
                self.persist_stacks(&inner)?;
            }
            let due = c.pushed
                && inner.trigger.note_correction()
                && inner.below_q_streak < self.cfg.max_rounds;
            (c.record, due)
        };
        let cycle_started = due && self.start_cycle().is_ok();
        Ok(ReviewReply {
            record,
            cycle_started,
        })
    }

    pub fn metrics(&self) -> MetricsView {
        let inner = self.lock();
        let current = match inner.history.last() {
            Some(c) => MetricsReport::from_metrics(&c.metrics(), inner.history.len()),
            None => MetricsReport::empty(self.cfg.q),
        };
        MetricsView {
            current,
            busy: self.is_busy(),
            stack: StackSizes {
                prediction: inner.prediction_stack.len(),
                training: inner.training_stack.len(),
            },
            history: inner.history.clone(),
        }
    }

    /// Bottom-first contents of the (prediction, training) stacks.
    pub fn stack_lines(&self) -> (Vec<StackLine>, Vec<StackLine>) {
        let inner = self.lock();
        (inner.prediction_stack.to_lines(), inner.training_stack.to_lines())
    }

    pub fn model_info(&self) -> ModelInfo {
        let model = self.model();
        let inner = self.lock();
        ModelInfo {
            architecture: summarize(&model),
            checksum: inner.meta.checksum.clone(),
            deployed_at: inner.meta.deployed_at,
        }
    }

    fn prepare_cycle(&self) -> Result<(usize, ReFeedStack)> {
        let mut inner = self.lock();
        if self
            .busy
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return Err(Error::Conflict("retraining already running".into()));
        }
        let Inner {
            prediction_stack,
            training_stack,
            ..
        } = &mut *inner;
        let report = transfer_corrections(prediction_stack, training_stack);
        if report.evicted > 0 {
            log::warn!("training stack overflow evicted {} images", report.evicted);
        }
        if let Err(e) = self.persist_stacks(&inner) {
            self.busy.store(false, Ordering::SeqCst);
            return Err(e);
        }
        if inner.training_stack.is_empty() {
            self.busy.store(false, Ordering::SeqCst);
            return Err(Error::Conflict("stack empty".into()));
        }
        Ok((inner.history.len() + 1, inner.training_stack.clone()))
    }

    fn finish_cycle(&self, cycle: usize, mut stack: ReFeedStack) -> Result<Option<CycleRecord>> {
        let model = self.model();
        let mut rcfg = RefeedConfig::new(self.cfg.seed.wrapping_add(cycle as u64));
        rcfg.qoe = QoeConfig::new(self.cfg.q)?;
        let out = continuous_cycle(model.as_ref(), &mut stack, &self.retest, &rcfg, cycle)?;
        let Some(record) = out.record else {
            return Ok(None);
        };
        let mut inner = self.lock();
        if record.deployed {
            let bytes = save_checkpoint(&out.model);
            write_atomic(&self.paths.model, &bytes)?;
            inner.meta = ModelMeta {
                checksum: checkpoint_checksum(&bytes).expect("fresh checkpoint"),
                deployed_at: Some(self.timestamp()),
            };
            let meta = serde_json::to_vec(&inner.meta).expect("meta serializes");
            write_atomic(&self.paths.model_meta, &meta)?;
            *self.model.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(out.model);
        }
        inner.training_stack.reset();
        self.persist_stacks(&inner)?;
        let mut line = serde_json::to_vec(&record).expect("cycle serializes");
        line.push(b'\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.paths.metrics)
            .map_err(io(&self.paths.metrics))?;
        f.write_all(&line)
            .and_then(|_| f.sync_data())
            .map_err(io(&self.paths.metrics))?;
        if record.pf.max(record.p0) < self.cfg.q {
            inner.below_q_streak += 1;
        } else {
            inner.below_q_streak = 0;
        }
        inner.history.push(record.clone());
        Ok(Some(record))
    }

    /// Runs a full cycle on the calling thread.
    pub fn run_cycle(&self) -> Result<Option<CycleRecord>> {
        let (cycle, stack) = self.prepare_cycle()?;
        let result = self.finish_cycle(cycle, stack);
        self.busy.store(false, Ordering::SeqCst);
        result
    }

    /// Starts a cycle on a background thread and returns its number.
    pub fn start_cycle(self: &Arc<Self>) -> Result<usize> {
        let (cycle, stack) = self.prepare_cycle()?;
        let me = Arc::clone(self);
        std::thread::spawn(move || {
            if let Err(e) = me.finish_cycle(cycle, stack) {
                log::error!("retraining cycle {cycle} failed: {e}");
            }
            me.busy.store(false, Ordering::SeqCst);
        });
        Ok(cycle)
    }
}
