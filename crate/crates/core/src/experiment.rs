//! Configuration-driven experiment runner shared by the command-line tool
//! and the examples.
//!
//! A run trains (or loads from cache) one model per seed, evaluates the
//! requested tasks on the test split, writes per-seed artifacts, and records
//! everything in a [`RunManifest`]. [`emit_report`] aggregates a manifest
//! into fixed-header CSV tables or a single JSON document.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    build_ee_ensemble, build_mcd, train_deep, train_ee_ensemble, train_single_exit, BasePredictor, EePredictor, EnsembleOfGraphs, McdPredictor,
    TemperatureScaled, DEFAULT_EE_HIDDEN, DEFAULT_MCD_RATE,
};
use crate::data::{build_cid_dataset, build_fixed_severity_dataset, load_idx, synth_dataset, CorruptionKind, Dataset};
use crate::ensemble::Predictor;
use crate::graph::presets::{after_layer, base_spec, cnn4, Cnn4Config};
use crate::graph::{build_graph, load_checkpoint, save_checkpoint, BlockSpec, NetworkGraph};
use crate::metrics::{CalibrationReport, PredictionBatch, DEFAULT_ECE_BINS};
use crate::monitor::{
    accuracy_drop_auprc, failure_tasks, predict_batch, rho_grid, DriftResult, FailureScores, Outcomes, PrAggregation, DEFAULT_WINDOW,
};
use crate::qute::{attach_qute_heads, train_qute_with, LossWeights, QutePredictor, DEFAULT_DELTA, DEFAULT_W_EV0};
use crate::tensor::Rng;
use crate::train::{init_rng, TrainConfig};
use crate::{Error, Result};

/// Library version folded into cache keys.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Qute,
    /// Same architecture and loss as `qute`, no weight transfer.
    QuteNoTransfer,
    Deep,
    Mcd,
    EeEnsemble,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Qute => "qute",
            Method::QuteNoTransfer => "qute_no_transfer",
            Method::Deep => "deep",
            Method::Mcd => "mcd",
            Method::EeEnsemble => "ee_ensemble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Calibration,
    Drift,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Conv widths; `None` picks the dataset's default trunk.
    pub widths: Option<[usize; 4]>,
    /// Ensemble size: early exits, deep-ensemble members, dropout passes.
    pub k: usize,
    /// 1-based trunk layers the early exits (or dropout) follow; defaults to `1..=k`.
    pub locations: Option<Vec<usize>>,
    pub ee_hidden: usize,
    pub mcd_rate: f32,
    /// Dropout passes at inference; defaults to `k`.
    pub mcd_passes: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: None,
            k: 2,
            locations: None,
            ee_hidden: DEFAULT_EE_HIDDEN,
            mcd_rate: DEFAULT_MCD_RATE,
            mcd_passes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_ev0: f64,
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_ev0: DEFAULT_W_EV0,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test images.
    pub test_limit: Option<usize>,
    pub valid_fraction: f64,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_limit: None,
            test_limit: None,
            valid_fraction: 0.1,
            synth_train: 4000,
            synth_test: 500,
            synth_classes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CidMode {
    /// Every test image corrupted at `severity`.
    Fixed,
    /// Equal shares of severities 1 through 5.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CidConfig {
    pub mode: CidMode,
    pub severity: u8,
}

impl Default for CidConfig {
    fn default() -> Self {
        Self {
            mode: CidMode::Fixed,
            severity: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub window: usize,
    pub rho_grid: Vec<f64>,
    pub aggregation: PrAggregation,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            rho_grid: rho_grid(),
            aggregation: PrAggregation::Pooled,
        }
    }
}

fn default_corruptions() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

fn default_ece_bins() -> usize {
    DEFAULT_ECE_BINS
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_tasks() -> Vec<Task> {
    vec![Task::Calibration, Task::Drift, Task::Failure]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub method: Method,
    /// Pool member logits and fit a temperature on the validation split.
    #[serde(default)]
    pub temperature: bool,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_corruptions")]
    pub corruptions: Vec<CorruptionKind>,
    #[serde(default)]
    pub cid: CidConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Minimal config with every default filled in.
    pub fn new(dataset: DatasetKind, method: Method) -> Self {
        parse_config_str(&format!(
            r#"{{"dataset": {}, "method": {}}}"#,
            serde_json::to_string(&dataset).expect("enum serialises"),
            serde_json::to_string(&method).expect("enum serialises")
        ))
        .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| config_err("train", e.to_string()))?;
        let a = &self.arch;
        if a.k == 0 {
            return Err(config_err("arch.k", "must be at least 1"));
        }
        if matches!(self.method, Method::Deep) && a.k < 2 {
            return Err(config_err("arch.k", "a deep ensemble needs at least 2 members"));
        }
        if let Some(w) = a.widths {
            if w.contains(&0) {
                return Err(config_err("arch.widths", "widths must be positive"));
            }
        }
        if let Some(locs) = &a.locations {
            if locs.len() != a.k {
                return Err(config_err("arch.locations", format!("{} locations for k = {}", locs.len(), a.k)));
            }
        }
        if !(a.mcd_rate > 0.0 && a.mcd_rate < 1.0) {
            return Err(config_err("arch.mcd_rate", "must lie in (0, 1)"));
        }
        if a.mcd_passes == Some(0) {
            return Err(config_err("arch.mcd_passes", "must be at least 1"));
        }
        if !(self.data.valid_fraction > 0.0 && self.data.valid_fraction < 1.0) {
            return Err(config_err("data.valid_fraction", "must lie in (0, 1)"));
        }
        if !(2..=10).contains(&self.data.synth_classes) {
            return Err(config_err("data.synth_classes", "must lie in 2..=10"));
        }
        if !(1..=5).contains(&self.cid.severity) {
            return Err(config_err("cid.severity", "must lie in 1..=5"));
        }
        if self.monitor.window == 0 {
            return Err(config_err("monitor.window", "must be at least 1"));
        }
        if self.monitor.rho_grid.is_empty() || self.monitor.rho_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(config_err("monitor.rho_grid", "thresholds must lie in [0, 1]"));
        }
        if self.ece_bins == 0 {
            return Err(config_err("ece_bins", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed required"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(config_err("seeds", format!("duplicate seed {s}")));
            }
        }
        if self.corruptions.is_empty() && self.tasks.iter().any(|t| matches!(t, Task::Drift | Task::Failure)) {
            return Err(config_err("corruptions", "drift and failure tasks need at least one corruption"));
        }
        Ok(())
    }

    /// Method name as reported, with `+ts` when temperature scaling is on.
    pub fn label(&self) -> String {
        if self.temperature {
            format!("{}+ts", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }

    /// Stable hash of everything but the output location, plus the code version.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&v)?);
        h.update(CODE_VERSION.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Hash of the inputs that determine a trained model for `seed`.
    pub fn model_hash(&self, seed: u64) -> Result<String> {
        // Test-set sizes do not affect training.
        let data = DataConfig {
            test_limit: None,
            synth_test: 0,
            ..self.data.clone()
        };
        let key = serde_json::json!({
            "dataset": self.dataset,
            "method": self.method,
            "arch": self.arch,
            "train": TrainConfig { seed, ..self.train.clone() },
            "loss": self.loss,
            "data": data,
            "version": CODE_VERSION,
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }

    fn trunk(&self) -> Vec<BlockSpec> {
        let default = match self.dataset {
            DatasetKind::Mnist => Cnn4Config::mnist(),
            DatasetKind::Synth => Cnn4Config::synth(),
        };
        let cfg = match self.arch.widths {
            Some(widths) => Cnn4Config { widths, ..default },
            None => default,
        };
        cnn4(&cfg)
    }

    fn locations(&self, trunk: &[BlockSpec]) -> Result<Vec<String>> {
        let layers: Vec<usize> = self.arch.locations.clone().unwrap_or_else(|| (1..=self.arch.k).collect());
        layers.iter().map(|&l| after_layer(trunk, l)).collect()
    }
}

/// Parse and validate a JSON config; errors name the offending field.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path.is_empty() { "." } else { &path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e.to_string()))?;
    parse_config_str(&text)
}

/// Training, test, and out-of-distribution images for one dataset.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

fn idx_pair(dir: &Path, prefix: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

fn load_pair(dir: &Path, prefix: &str, name: &str) -> Result<Dataset> {
    let (images, labels) = idx_pair(dir, prefix);
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
    }
    let mut ds = load_idx(&images, &labels)?;
    ds.name = name.into();
    Ok(ds)
}

/// Seeded uniform-noise images, used as out-of-distribution inputs for the
/// synthetic dataset.
pub fn noise_dataset(n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    let mut rng = Rng::new(seed, 0x0d);
    let per: usize = shape.iter().product();
    let images = (0..n * per).map(|_| rng.below(256) as u8).collect();
    Ok(Dataset::new("noise", shape, images, vec![0; n])?.with_meta(format!("uniform noise seed {seed}")))
}

pub fn load_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<DataBundle> {
    let limit = |ds: Dataset, n: Option<usize>| n.map_or(ds.clone(), |n| ds.head(n));
    let d = &cfg.data;
    let bundle = match cfg.dataset {
        DatasetKind::Mnist => DataBundle {
            train: limit(load_pair(&data_dir.join("mnist"), "train", "mnist-train")?, d.train_limit),
            test: limit(load_pair(&data_dir.join("mnist"), "t10k", "mnist-test")?, d.test_limit),
            ood: limit(load_pair(&data_dir.join("fashion-mnist"), "t10k", "fashion-mnist")?, d.test_limit),
        },
        DatasetKind::Synth => {
            let mut train = synth_dataset(d.synth_train, d.synth_classes, 0x7a1)?;
            train.name = "synth-train".into();
            let mut test = synth_dataset(d.synth_test, d.synth_classes, 0x7e5)?;
            test.name = "synth-test".into();
            let ood = noise_dataset(d.synth_test, test.shape(), 0x00d)?;
            DataBundle { train, test, ood }
        }
    };
    if bundle.train.is_empty() || bundle.test.is_empty() {
        return Err(Error::Data("empty training or test split".into()));
    }
    Ok(bundle)
}

/// Corrupted copies of `test`, one per configured corruption.
pub fn build_corrupted_sets(cfg: &ExperimentConfig, test: &Dataset) -> Result<IndexMap<String, Dataset>> {
    let mut out = IndexMap::new();
    for &kind in &cfg.corruptions {
        let ds = match cfg.cid.mode {
            CidMode::Fixed => build_fixed_severity_dataset(test, kind, cfg.cid.severity, CORRUPTION_SEED)?,
            CidMode::Mixed => build_cid_dataset(test, kind, test.len() / 5, CORRUPTION_SEED)?.0,
        };
        out.insert(kind.name().to_string(), ds);
    }
    Ok(out)
}

const CORRUPTION_SEED: u64 = 0xc0de;

/// A trained model of any method.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Graph(NetworkGraph),
    Ensemble(EnsembleOfGraphs),
}

fn deep_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| seed.wrapping_mul(1000).wrapping_add(i)).collect()
}

/// Train one model for `seed` on `train`, validating on `valid`.
pub fn train_model(cfg: &ExperimentConfig, seed: u64, train: &Dataset, valid: &Dataset) -> Result<TrainedModel> {
    let trunk = cfg.trunk();
    let input = train.shape();
    let classes = match cfg.dataset {
        DatasetKind::Mnist => 10,
        DatasetKind::Synth => cfg.data.synth_classes,
    };
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let mut rng = init_rng(seed);
    let graph = |g: NetworkGraph| Ok(TrainedModel::Graph(g));
    match cfg.method {
        Method::Base => {
            let mut g = build_graph(base_spec(&trunk, input, classes), &mut rng)?;
            train_single_exit(&mut g, train, valid, &tc)?;
            graph(g)
        }
        Method::Qute | Method::QuteNoTransfer => {
            let locs = cfg.locations(&trunk)?;
            let mut g = attach_qute_heads(&trunk, input, classes, cfg.arch.k, &locs, &mut rng)?;
            let w = LossWeights::for_graph(&g, cfg.loss.w_ev0, cfg.loss.delta)?;
            train_qute_with(&mut g, train, valid, &tc, &w, cfg.method == Method::Qute, &mut |_, _| {})?;
            graph(g)
        }
        Method::Deep => Ok(TrainedModel::Ensemble(train_deep(
            &trunk,
            input,
            classes,
            &deep_seeds(seed, cfg.arch.k),
            train,
            valid,
            &tc,
            false,
        )?)),
        Method::Mcd => {
            let locs = cfg.locations(&trunk)?;
            let mut g = build_mcd(&trunk, input, classes, &locs, cfg.arch.mcd_rate, &mut rng)?;
            train_single_exit(&mut g, train, valid, &tc)?;
            graph(g)
        }
        Method::EeEnsemble => {
            let locs = cfg.locations(&trunk)?;
            let mut g = build_ee_ensemble(&trunk, input, classes, &locs, cfg.arch.ee_hidden, &mut rng)?;
            train_ee_ensemble(&mut g, train, valid, &tc)?;
            graph(g)
        }
    }
}

/// The method's inference path over a trained model.
pub fn predictor(cfg: &ExperimentConfig, model: &TrainedModel, seed: u64) -> Result<Box<dyn Predictor>> {
    let wrong = || Error::Graph(format!("trained model does not match method `{}`", cfg.method.name()));
    Ok(match (cfg.method, model) {
        (Method::Deep, TrainedModel::Ensemble(e)) => Box::new(e.clone()),
        (Method::Base, TrainedModel::Graph(g)) => Box::new(BasePredictor { graph: g.clone() }),
        (Method::Qute | Method::QuteNoTransfer, TrainedModel::Graph(g)) => Box::new(QutePredictor::new(g)?),
        (Method::Mcd, TrainedModel::Graph(g)) => Box::new(McdPredictor {
            graph: g.clone(),
            passes: cfg.arch.mcd_passes.unwrap_or(cfg.arch.k),
            seed,
        }),
        (Method::EeEnsemble, TrainedModel::Graph(g)) => Box::new(EePredictor { graph: g.clone() }),
        _ => return Err(wrong()),
    })
}

fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    match model {
        TrainedModel::Graph(g) => save_checkpoint(g, path),
        TrainedModel::Ensemble(e) => e.save(path),
    }
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<TrainedModel> {
    match cfg.method {
        Method::Deep => Ok(TrainedModel::Ensemble(EnsembleOfGraphs::load(path)?)),
        _ => Ok(TrainedModel::Graph(load_checkpoint(path)?)),
    }
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Whether the checkpoint came from the cache.
    pub cached: bool,
    pub train_seconds: Option<f64>,
    pub temperature: Option<f64>,
    pub calibration: Option<CalibrationReport>,
    pub drift: Option<DriftResult>,
    pub failure: Option<FailureScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub method: String,
    pub dataset: DatasetKind,
    pub seeds: Vec<SeedResult>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Where to find data and where to write.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub data_dir: PathBuf,
    /// Overrides `output_dir` from the config.
    pub out_dir: Option<PathBuf>,
    /// Seeds trained concurrently.
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            out_dir: None,
            jobs: 1,
        }
    }
}

/// A model ready for evaluation, with its validation split.
#[derive(Debug, Clone)]
pub struct ObtainedModel {
    pub model: TrainedModel,
    pub checkpoint: PathBuf,
    pub cached: bool,
    pub valid: Dataset,
    /// Wall-clock training time, recorded when the checkpoint was written.
    pub train_seconds: Option<f64>,
}

const TRAIN_TIME_FILE: &str = "train_seconds";

/// Train or load a model for `seed`, caching checkpoints by model hash.
pub fn obtain_model(cfg: &ExperimentConfig, seed: u64, data: &DataBundle, out: &Path) -> Result<ObtainedModel> {
    let (train, valid) = data.train.split(cfg.data.valid_fraction, seed);
    let dir = out.join("cache").join(cfg.model_hash(seed)?);
    let checkpoint = dir.join(if cfg.method == Method::Deep { "ensemble" } else { "model.qte" });
    if checkpoint.exists() {
        let train_seconds = fs::read_to_string(dir.join(TRAIN_TIME_FILE)).ok().and_then(|t| t.trim().parse().ok());
        return Ok(ObtainedModel {
            model: load_model(cfg, &checkpoint)?,
            checkpoint,
            cached: true,
            valid,
            train_seconds,
        });
    }
    let started = Instant::now();
    let model = train_model(cfg, seed, &train, &valid)?;
    let secs = started.elapsed().as_secs_f64();
    fs::create_dir_all(&dir)?;
    save_model(&model, &checkpoint)?;
    fs::write(dir.join(TRAIN_TIME_FILE), format!("{secs:.3}\n"))?;
    Ok(ObtainedModel {
        model,
        checkpoint,
        cached: false,
        valid,
        train_seconds: Some(secs),
    })
}

/// Run every configured task for every seed and write the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out)?;
    let data = load_data(cfg, &opts.data_dir)?;
    let wants = |t: Task| cfg.tasks.contains(&t);
    let corrupted = if wants(Task::Drift) || wants(Task::Failure) {
        build_corrupted_sets(cfg, &data.test)?
    } else {
        IndexMap::new()
    };
    let mut manifest = RunManifest {
        config_hash: cfg.hash()?,
        code_version: CODE_VERSION.into(),
        method: cfg.label(),
        dataset: cfg.dataset,
        seeds: Vec::new(),
        artifacts: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let one = |seed: u64| {
        let mut artifacts = Vec::new();
        let r = run_seed(cfg, seed, &data, &corrupted, &out, &mut artifacts);
        (r, artifacts)
    };
    // Seeds are independent; results are joined in config order.
    let outcomes: Vec<(Result<SeedResult>, Vec<PathBuf>)> = if opts.jobs > 1 && cfg.seeds.len() > 1 {
        let mut all = Vec::new();
        for group in cfg.seeds.chunks(opts.jobs) {
            all.extend(std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|&seed| s.spawn(move || one(seed))).collect();
                handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect::<Vec<_>>()
            }));
        }
        all
    } else {
        cfg.seeds.iter().map(|&seed| one(seed)).collect()
    };
    let mut result = Ok(());
    for (r, artifacts) in outcomes {
        manifest.artifacts.extend(artifacts);
        match r {
            Ok(r) => manifest.seeds.push(r),
            Err(e) if result.is_ok() => result = Err(e),
            Err(_) => {}
        }
    }
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    let path = manifest.save(&out)?;
    result?;
    manifest.artifacts.push(path);
    manifest.save(&out)?;
    Ok(manifest)
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &DataBundle,
    corrupted: &IndexMap<String, Dataset>,
    out: &Path,
    artifacts: &mut Vec<PathBuf>,
) -> Result<SeedResult> {
    let ObtainedModel {
        model,
        checkpoint,
        cached,
        valid,
        train_seconds,
    } = obtain_model(cfg, seed, data, out)?;
    artifacts.push(checkpoint.clone());
    let inner = predictor(cfg, &model, seed)?;
    let (p, temperature): (Box<dyn Predictor>, Option<f64>) = if cfg.temperature {
        let ts = TemperatureScaled::fit(inner, &valid)?;
        let t = ts.t.value();
        (Box::new(ts), Some(t))
    } else {
        (inner, None)
    };
    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir)?;
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        artifacts.push(path);
        Ok(())
    };
    let chunk = crate::ensemble::EVAL_CHUNK;
    let id_batch = predict_batch(p.as_ref(), &data.test, chunk)?;
    let mut cid_batches = IndexMap::new();
    for (name, ds) in corrupted {
        cid_batches.insert(name.clone(), predict_batch(p.as_ref(), ds, chunk)?);
    }
    let mut r = SeedResult {
        seed,
        checkpoint,
        cached,
        train_seconds,
        temperature,
        calibration: None,
        drift: None,
        failure: None,
    };
    if cfg.tasks.contains(&Task::Calibration) {
        let report = CalibrationReport::compute(&id_batch, cfg.ece_bins)?;
        write("calibration.json", report.to_json()?)?;
        write("reliability.csv", report.bins_csv())?;
        r.calibration = Some(report);
    }
    if cfg.tasks.contains(&Task::Drift) {
        let id = Outcomes::from_batch(&id_batch);
        let cids: IndexMap<String, Outcomes> = cid_batches.iter().map(|(k, b)| (k.clone(), Outcomes::from_batch(b))).collect();
        let drift = accuracy_drop_auprc(&id, &cids, cfg.monitor.window, &cfg.monitor.rho_grid, cfg.monitor.aggregation)?;
        write("pr_curve.csv", drift.pr_csv())?;
        write("auprc.csv", drift.auprc_csv())?;
        r.drift = Some(drift);
    }
    if cfg.tasks.contains(&Task::Failure) {
        let cid = cid_batches
            .values()
            .try_fold(None::<PredictionBatch>, |acc, b| -> Result<_> {
                Ok(Some(match acc {
                    Some(a) => a.concat(b)?,
                    None => b.clone(),
                }))
            })?
            .ok_or_else(|| Error::Data("failure detection needs corrupted data".into()))?;
        let ood = predict_batch_unlabelled(p.as_ref(), &data.ood)?;
        let scores = failure_tasks(&id_batch, &cid, &ood)?;
        write("failure.json", serde_json::to_string_pretty(&scores)?)?;
        r.failure = Some(scores);
    }
    Ok(r)
}

/// Confidences only; OOD labels live in a different label space.
fn predict_batch_unlabelled(p: &dyn Predictor, ds: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut conf = Vec::with_capacity(ds.len());
    for part in idx.chunks(crate::ensemble::EVAL_CHUNK) {
        conf.extend(p.predict(&ds.tensor(part))?.into_iter().map(|e| e.confidence));
    }
    Ok(conf)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRow {
    pub f1: Stat,
    pub brier: Stat,
    pub nll: Stat,
    pub ece: Stat,
    pub accuracy: Stat,
}

/// Aggregated results across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub method: String,
    pub seeds: Vec<u64>,
    pub calibration: Option<CalibrationRow>,
    /// Per corruption, plus `pooled` for the headline score.
    pub auprc: IndexMap<String, Stat>,
    pub failure: IndexMap<String, Stat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const POOLED_ROW: &str = "pooled";

pub fn build_report(manifest: &RunManifest) -> Result<Report> {
    if manifest.seeds.is_empty() {
        return Err(Error::MissingArtifact("manifest lists no completed seeds".into()));
    }
    for a in &manifest.artifacts {
        if !a.exists() {
            return Err(Error::MissingArtifact(a.display().to_string()));
        }
    }
    let s = &manifest.seeds;
    let calibration = if s.iter().all(|r| r.calibration.is_some()) {
        let col = |f: fn(&CalibrationReport) -> f64| Stat::of(&s.iter().map(|r| f(r.calibration.as_ref().expect("checked"))).collect::<Vec<_>>());
        Some(CalibrationRow {
            f1: col(|c| c.f1),
            brier: col(|c| c.brier),
            nll: col(|c| c.nll),
            ece: col(|c| c.ece),
            accuracy: col(|c| c.accuracy),
        })
    } else {
        None
    };
    let mut auprc = IndexMap::new();
    if s.iter().all(|r| r.drift.is_some()) {
        let drifts: Vec<&DriftResult> = s.iter().map(|r| r.drift.as_ref().expect("checked")).collect();
        for name in drifts[0].per_corruption.keys() {
            let v: Vec<f64> = drifts.iter().map(|d| d.per_corruption.get(name).copied().unwrap_or(f64::NAN)).collect();
            auprc.insert(name.clone(), Stat::of(&v));
        }
        auprc.insert(POOLED_ROW.into(), Stat::of(&drifts.iter().map(|d| d.auprc).collect::<Vec<_>>()));
    }
    let mut failure = IndexMap::new();
    if s.iter().all(|r| r.failure.is_some()) {
        let f: Vec<FailureScores> = s.iter().map(|r| r.failure.expect("checked")).collect();
        failure.insert(
            "id_correct_vs_incorrect".into(),
            Stat::of(&f.iter().map(|x| x.id_correct_vs_incorrect).collect::<Vec<_>>()),
        );
        failure.insert(
            "id_correct_vs_ood".into(),
            Stat::of(&f.iter().map(|x| x.id_correct_vs_ood).collect::<Vec<_>>()),
        );
    }
    Ok(Report {
        method: manifest.method.clone(),
        seeds: s.iter().map(|r| r.seed).collect(),
        calibration,
        auprc,
        failure,
    })
}

pub const CALIBRATION_HEADER: &str = "method,seeds,f1_mean,f1_std,brier_mean,brier_std,nll_mean,nll_std,ece_mean,ece_std,accuracy_mean,accuracy_std";
pub const AUPRC_HEADER: &str = "method,corruption,auprc_mean,auprc_std";
pub const FAILURE_HEADER: &str = "method,task,auroc_mean,auroc_std";
pub const RELIABILITY_HEADER: &str = "method,seed,bin,lower,upper,count,accuracy,confidence";
pub const PR_HEADER: &str = "method,seed,rho,tp,fp,tn,fn,precision,recall";

/// Write report tables into `dir`; returns the files written.
pub fn emit_report(manifest: &RunManifest, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    let report = build_report(manifest)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        files.push(p);
        Ok(())
    };
    match format {
        ReportFormat::Json => put("report.json", serde_json::to_string_pretty(&report)? + "\n")?,
        ReportFormat::Csv => {
            let m = &report.method;
            let mut cal = format!("{CALIBRATION_HEADER}\n");
            if let Some(c) = &report.calibration {
                let _ = write!(cal, "{m},{}", report.seeds.len());
                for s in [c.f1, c.brier, c.nll, c.ece, c.accuracy] {
                    let _ = write!(cal, ",{:.6},{:.6}", s.mean, s.std);
                }
                cal.push('\n');
            }
            put("calibration.csv", cal)?;
            let mut auprc = format!("{AUPRC_HEADER}\n");
            for (name, s) in &report.auprc {
                let _ = writeln!(auprc, "{m},{name},{:.6},{:.6}", s.mean, s.std);
            }
            put("auprc.csv", auprc)?;
            let mut fail = format!("{FAILURE_HEADER}\n");
            for (name, s) in &report.failure {
                let _ = writeln!(fail, "{m},{name},{:.6},{:.6}", s.mean, s.std);
            }
            put("failure.csv", fail)?;
            let mut rel = format!("{RELIABILITY_HEADER}\n");
            let mut pr = format!("{PR_HEADER}\n");
            for r in &manifest.seeds {
                if let Some(c) = &r.calibration {
                    for (i, b) in c.bins.iter().enumerate() {
                        let _ = writeln!(
                            rel,
                            "{m},{},{i},{:.6},{:.6},{},{:.6},{:.6}",
                            r.seed, b.lower, b.upper, b.count, b.accuracy, b.confidence
                        );
                    }
                }
                if let Some(d) = &r.drift {
                    for p in &d.pooled_curve {
                        let c = p.counts;
                        let _ = writeln!(
                            pr,
                            "{m},{},{:.1},{},{},{},{},{:.6},{:.6}",
                            r.seed, p.rho, c.tp, c.fp, c.tn, c.fn_, p.precision, p.recall
                        );
                    }
                }
            }
            put("reliability.csv", rel)?;
            put("pr_curve.csv", pr)?;
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(r#"{"dataset": "synth", "method": "base"}"#).unwrap();
        assert_eq!(c.monitor.window, 100);
        assert_eq!(c.ece_bins, 15);
        assert_eq!(c.loss.w_ev0, 3.0);
        assert_eq!(c.loss.delta, 0.5);
        assert_eq!(c.train.freeze_fraction, 0.10);
        assert_eq!(c.monitor.rho_grid.len(), 11);
        assert_eq!(c, ExperimentConfig::new(DatasetKind::Synth, Method::Base));
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = parse_config_str(r#"{"dataset": "synth", "method": "base", "train": {"epoch": 3}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("epoch"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_method_rejected() {
        let err = parse_config_str(r#"{"dataset": "synth", "method": "hydra"}"#).unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        for bad in [
            r#"{"dataset": "synth", "method": "base", "seeds": [1, 1]}"#,
            r#"{"dataset": "synth", "method": "base", "monitor": {"rho_grid": [1.5]}}"#,
            r#"{"dataset": "synth", "method": "deep", "arch": {"k": 1}}"#,
            r#"{"dataset": "synth", "method": "base", "train": {"epochs": 0}}"#,
        ] {
            assert!(matches!(parse_config_str(bad), Err(Error::Config { .. })), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::new(DatasetKind::Synth, Method::Qute);
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig { ece_bins: 10, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_ne!(a.model_hash(0).unwrap(), a.model_hash(1).unwrap());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_manifest_rejected() {
        let m = RunManifest {
            config_hash: String::new(),
            code_version: CODE_VERSION.into(),
            method: "base".into(),
            dataset: DatasetKind::Synth,
            seeds: vec![],
            artifacts: vec![],
            wall_clock_secs: 0.0,
        };
        assert!(matches!(
            emit_report(&m, ReportFormat::Csv, Path::new("/nonexistent")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
