//! Experiment configuration and the runners behind the CLI verbs.
//!
//! A run is described by a TOML file:
//!
//! ```toml
//! seed = 0
//!
//! [federation]
//! clients = 50
//! fraction = 0.1
//! epochs = 5
//! batch_size = 32
//! stage1_cap = 100
//! stage2_rounds = 50
//!
//! [optimizer]
//! lr = 0.001
//!
//! [pruning]
//! k = 2.0
//! patience = 3
//!
//! [model]
//! family = "conv"
//! widths = [64, 128]
//! kernel = 5
//!
//! [dataset]
//! kind = "synthetic"
//! samples_per_client = 64
//! ```
//!
//! Every key is optional. Validation failures name the offending key and,
//! when the key appears in the file, its line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::data::{generate_synthetic, load_idx_federated, FederatedDataset, IdxSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{derive_seed, FederatedRun, FederationConfig, FilterPruner, LocalTrainConfig, ServerPruner, Stage};
use crate::metrics::{cumulative_cost, mean_std, MetricsLedger, DEFAULT_ELEM_BYTES};
use crate::nn::{build_architecture, count_params, init_weights, ArchitectureSpec, Family, ModelGraph};
use crate::optim::AdamConfig;
use crate::pruning::{prune_model, PruneConfig, PruneReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub fraction: f64,
    pub clients_per_round: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub stage1_cap: usize,
    pub stage2_rounds: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        FederationSection {
            clients: f.clients,
            fraction: f.fraction,
            clients_per_round: None,
            epochs: f.local.epochs,
            batch_size: f.local.batch_size,
            stage1_cap: f.stage1_cap,
            stage2_rounds: f.stage2_rounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    /// Family default when absent.
    pub widths: Option<Vec<usize>>,
    pub kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: Family::Conv,
            widths: None,
            kernel: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub image_shape: [usize; 3],
    pub noise: f64,
    pub shards_per_client: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: 10,
            samples_per_client: 64,
            test_samples: 500,
            image_shape: [1, 8, 8],
            noise: 1.0,
            shards_per_client: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    /// Relative paths resolve against the config file's directory.
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_shards")]
    pub shards_per_client: usize,
    #[serde(default = "default_idx_test")]
    pub test_samples: usize,
}

fn default_classes() -> usize {
    10
}
fn default_shards() -> usize {
    2
}
fn default_idx_test() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSection {
    Synthetic(SyntheticSection),
    Idx(IdxSection),
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection::Synthetic(SyntheticSection::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub federation: FederationSection,
    pub optimizer: AdamConfig,
    pub pruning: PruneConfig,
    pub model: ModelSection,
    pub dataset: DatasetSection,
}

/// 1-based line of `key` inside `[section]` (or the root table when `section` is empty).
pub fn key_line(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    source: Option<&'a str>,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        match self.source.and_then(|s| key_line(s, section, key)) {
            Some(line) => Error::Config(format!("line {line}: {path}: {msg}")),
            None => Error::Config(format!("{path}: {msg}")),
        }
    }

    fn ensure(&self, ok: bool, section: &str, key: &str, msg: impl std::fmt::Display) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(section, key, msg))
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the line of the offending key.
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_of_offset(source, span.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate_against(Some(source))?;
        Ok(cfg)
    }

    /// Loads `path`, resolving relative dataset paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&source)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?;
        if let DatasetSection::Idx(idx) = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut idx.images, &mut idx.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_against(None)
    }

    fn validate_against(&self, source: Option<&str>) -> Result<()> {
        let c = Checker { source };
        let f = &self.federation;
        c.ensure(f.clients >= 1, "federation", "clients", "must be at least 1")?;
        c.ensure(
            f.fraction > 0.0 && f.fraction <= 1.0,
            "federation",
            "fraction",
            format!("must lie in (0, 1], got {}", f.fraction),
        )?;
        if let Some(n) = f.clients_per_round {
            c.ensure(
                n >= 1 && n <= f.clients,
                "federation",
                "clients_per_round",
                format!("must lie in [1, {}], got {n}", f.clients),
            )?;
        }
        c.ensure(f.batch_size >= 1, "federation", "batch_size", "must be at least 1")?;
        c.ensure(f.stage1_cap >= 1, "federation", "stage1_cap", "must be at least 1")?;

        let o = &self.optimizer;
        c.ensure(o.lr.is_finite() && o.lr > 0.0, "optimizer", "lr", format!("must be positive, got {}", o.lr))?;
        c.ensure((0.0..1.0).contains(&o.beta1), "optimizer", "beta1", "must lie in [0, 1)")?;
        c.ensure((0.0..1.0).contains(&o.beta2), "optimizer", "beta2", "must lie in [0, 1)")?;
        c.ensure(o.eps.is_finite() && o.eps > 0.0, "optimizer", "eps", "must be positive")?;

        let p = &self.pruning;
        c.ensure(p.k.is_finite() && p.k > 0.0, "pruning", "k", format!("must be positive, got {}", p.k))?;
        c.ensure(p.patience >= 1, "pruning", "patience", "must be at least 1")?;
        c.ensure(p.min_filters >= 1, "pruning", "min_filters", "must be at least 1")?;

        match &self.dataset {
            DatasetSection::Synthetic(s) => {
                c.ensure(s.classes >= 2, "dataset", "classes", "must be at least 2")?;
                c.ensure(s.samples_per_client >= 1, "dataset", "samples_per_client", "must be at least 1")?;
                c.ensure(s.test_samples >= 1, "dataset", "test_samples", "must be at least 1")?;
                c.ensure(s.image_shape.iter().all(|&d| d > 0), "dataset", "image_shape", "extents must be positive")?;
                c.ensure(s.noise.is_finite() && s.noise >= 0.0, "dataset", "noise", "must be non-negative")?;
                c.ensure(s.shards_per_client >= 1, "dataset", "shards_per_client", "must be at least 1")?;
            }
            DatasetSection::Idx(s) => {
                c.ensure(s.classes >= 2, "dataset", "classes", "must be at least 2")?;
                c.ensure(s.test_samples >= 1, "dataset", "test_samples", "must be at least 1")?;
                c.ensure(s.shards_per_client >= 1, "dataset", "shards_per_client", "must be at least 1")?;
            }
        }

        // Dry-build the architecture so width and kernel mistakes surface here.
        if let DatasetSection::Synthetic(s) = &self.dataset {
            let spec = self.architecture(s.image_shape, s.classes);
            build_architecture(&spec)
                .and_then(|m| m.validate())
                .map_err(|e| c.fail("model", if self.model.widths.is_some() { "widths" } else { "family" }, e))?;
        }
        Ok(())
    }

    pub fn architecture(&self, input_shape: [usize; 3], classes: usize) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::default_for(self.model.family, input_shape, classes);
        if let Some(w) = &self.model.widths {
            spec.widths = w.clone();
        }
        spec.kernel = self.model.kernel;
        spec
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            clients: f.clients,
            fraction: f.fraction,
            clients_per_round: f.clients_per_round,
            local: LocalTrainConfig {
                epochs: f.epochs,
                batch_size: f.batch_size,
                adam: self.optimizer,
            },
            stage1_cap: f.stage1_cap,
            stage2_rounds: f.stage2_rounds,
            seed: self.seed,
        }
    }

    pub fn build_dataset(&self) -> Result<FederatedDataset> {
        match &self.dataset {
            DatasetSection::Synthetic(s) => generate_synthetic(&SyntheticSpec {
                classes: s.classes,
                clients: self.federation.clients,
                samples_per_client: s.samples_per_client,
                test_samples: s.test_samples,
                image_shape: s.image_shape,
                noise: s.noise,
                shards_per_client: s.shards_per_client,
                seed: self.seed,
            }),
            DatasetSection::Idx(s) => load_idx_federated(&IdxSpec {
                images: s.images.clone(),
                labels: s.labels.clone(),
                classes: s.classes,
                clients: self.federation.clients,
                shards_per_client: s.shards_per_client,
                test_samples: s.test_samples,
                seed: self.seed,
            }),
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[3])
    }

    pub fn build_model(&self, data: &FederatedDataset) -> Result<ModelGraph> {
        let model = build_architecture(&self.architecture(data.image_shape, data.classes))?;
        model.validate()?;
        Ok(init_weights(model, self.init_seed()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Search then train.
    Pruned,
    /// Unpruned architecture trained for a given number of rounds.
    Baseline { rounds: usize },
}

/// Remembers the first model it is asked to prune.
struct SnapshotPruner {
    inner: FilterPruner,
    first: Option<ModelGraph>,
}

impl ServerPruner for SnapshotPruner {
    fn prune(&mut self, model: &ModelGraph) -> Result<(ModelGraph, PruneReport)> {
        if self.first.is_none() {
            self.first = Some(model.clone());
        }
        self.inner.prune(model)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub ledger: MetricsLedger,
    pub model: ModelGraph,
    pub initial_params: usize,
    pub stage1_rounds: usize,
    pub stage2_rounds: usize,
    /// Aggregated global model entering the first prune step.
    pub search_entry: Option<ModelGraph>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Best accuracy over the training stage only.
    pub best_train_accuracy: f64,
}

impl RunResult {
    pub fn final_params(&self) -> usize {
        count_params(&self.model)
    }
}

pub fn run_on(cfg: &ExperimentConfig, data: &FederatedDataset, mode: RunMode) -> Result<RunResult> {
    let model = cfg.build_model(data)?;
    let initial_params = count_params(&model);
    let mut run = FederatedRun::new(cfg.federation_config(), data, model)?;
    let mut search_entry = None;
    let (stage1_rounds, stage2) = match mode {
        RunMode::Pruned => {
            let mut pruner = SnapshotPruner {
                inner: FilterPruner(cfg.pruning),
                first: None,
            };
            let rounds = run.run_stage1_with(cfg.pruning.patience, &mut pruner)?;
            search_entry = pruner.first;
            (rounds, cfg.federation.stage2_rounds)
        }
        RunMode::Baseline { rounds } => {
            run.skip_search()?;
            (0, rounds)
        }
    };
    run.run_stage2(stage2)?;
    let ledger = MetricsLedger::from_history(&run.history, DEFAULT_ELEM_BYTES);
    let best_train_accuracy = run
        .history
        .iter()
        .filter(|o| o.stage == Stage::Train)
        .map(|o| o.accuracy)
        .fold(0.0, f64::max);
    Ok(RunResult {
        final_accuracy: run.history.last().map_or(0.0, |o| o.accuracy),
        best_accuracy: run.best_accuracy,
        best_train_accuracy,
        initial_params,
        stage1_rounds,
        stage2_rounds: stage2,
        search_entry,
        model: run.global,
        ledger,
    })
}

pub fn run(cfg: &ExperimentConfig, mode: RunMode) -> Result<RunResult> {
    let data = cfg.build_dataset()?;
    run_on(cfg, &data, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub init_seed: u64,
    pub mode: String,
    pub initial_params: usize,
    pub final_params: usize,
    pub stage1_rounds: usize,
    pub stage2_rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub cumulative_bytes: u64,
    pub final_filters: BTreeMap<String, usize>,
    pub config: ExperimentConfig,
}

/// Writes `ledger.csv`, `run.json` and `final.ckpt` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, mode: RunMode, result: &RunResult) -> Result<RunMetadata> {
    std::fs::create_dir_all(dir)?;
    result.ledger.save(&dir.join("ledger.csv"))?;
    save_checkpoint(&result.model, &dir.join("final.ckpt"))?;
    let meta = RunMetadata {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        init_seed: cfg.init_seed(),
        mode: match mode {
            RunMode::Pruned => "pruned".into(),
            RunMode::Baseline { .. } => "baseline".into(),
        },
        initial_params: result.initial_params,
        final_params: result.final_params(),
        stage1_rounds: result.stage1_rounds,
        stage2_rounds: result.stage2_rounds,
        final_accuracy: result.final_accuracy,
        best_accuracy: result.best_accuracy,
        cumulative_bytes: if result.ledger.is_empty() { 0 } else { cumulative_cost(&result.ledger)? },
        final_filters: result.model.filter_counts().into_iter().collect(),
        config: cfg.clone(),
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepEntry {
    pub k: f64,
    /// Parameters of the shared search-entry snapshot.
    pub snapshot_params: usize,
    /// Parameters left after pruning that snapshot once with this `k`.
    pub snapshot_retained: usize,
    pub final_params: usize,
    pub best_accuracy: f64,
    pub stage1_rounds: usize,
    pub cumulative_bytes: u64,
}

pub const DEFAULT_KS: [f64; 3] = [2.0, 2.5, 3.0];

/// One full pruned run per `k`, each written to `out/k<k>/`, plus `out/sweep_k.csv`.
///
/// Every run shares seeds, so their first aggregated models coincide; that
/// snapshot is also pruned once with each `k`.
pub fn sweep_k(cfg: &ExperimentConfig, ks: &[f64], out: Option<&Path>) -> Result<Vec<KSweepEntry>> {
    let data = cfg.build_dataset()?;
    let mut snapshot: Option<ModelGraph> = None;
    let mut entries = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.pruning.k = k;
        c.validate()?;
        let res = run_on(&c, &data, RunMode::Pruned)?;
        let entry_model = res
            .search_entry
            .clone()
            .ok_or_else(|| Error::State("search stage ran no rounds".into()))?;
        match &snapshot {
            None => snapshot = Some(entry_model),
            Some(s) if *s != entry_model => {
                return Err(Error::Consistency("search-entry snapshots differ across k".into()));
            }
            Some(_) => {}
        }
        let snap = snapshot.as_ref().expect("set above");
        let (_, report) = prune_model(snap, &c.pruning)?;
        if let Some(dir) = out {
            write_run(&dir.join(format!("k{k}")), &c, RunMode::Pruned, &res)?;
        }
        entries.push(KSweepEntry {
            k,
            snapshot_params: report.params_before,
            snapshot_retained: report.params_after,
            final_params: res.final_params(),
            best_accuracy: res.best_accuracy,
            stage1_rounds: res.stage1_rounds,
            cumulative_bytes: cumulative_cost(&res.ledger)?,
        });
    }
    if let Some(dir) = out {
        write_csv(&dir.join("sweep_k.csv"), &entries)?;
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSweepEntry {
    pub clients_per_round: usize,
    pub final_params: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize)]
struct ClientSweepRow {
    clients_per_round: usize,
    seeds: usize,
    mean: f64,
    std: f64,
}

/// Search-stage-only runs for each per-round client count over seeds
/// `cfg.seed .. cfg.seed + seeds`.
pub fn sweep_clients(cfg: &ExperimentConfig, counts: &[usize], seeds: usize, out: Option<&Path>) -> Result<Vec<ClientSweepEntry>> {
    if seeds == 0 {
        return Err(Error::Config("seed count must be at least 1".into()));
    }
    let mut entries = Vec::new();
    for &count in counts {
        let mut finals = Vec::with_capacity(seeds);
        for s in 0..seeds as u64 {
            let mut c = cfg.clone();
            c.seed = cfg.seed + s;
            c.federation.clients_per_round = Some(count);
            c.validate()?;
            let data = c.build_dataset()?;
            let model = c.build_model(&data)?;
            let mut run = FederatedRun::new(c.federation_config(), &data, model)?;
            run.run_stage1(&c.pruning)?;
            finals.push(count_params(&run.global));
            log::info!("clients {count} seed {} final params {}", c.seed, finals.last().unwrap());
        }
        let xs: Vec<f64> = finals.iter().map(|&p| p as f64).collect();
        let (mean, std) = mean_std(&xs);
        entries.push(ClientSweepEntry {
            clients_per_round: count,
            final_params: finals,
            mean,
            std,
        });
    }
    if let Some(dir) = out {
        let rows: Vec<ClientSweepRow> = entries
            .iter()
            .map(|e| ClientSweepRow {
                clients_per_round: e.clients_per_round,
                seeds,
                mean: e.mean,
                std: e.std,
            })
            .collect();
        write_csv(&dir.join("sweep_clients.csv"), &rows)?;
    }
    Ok(entries)
}

/// sqrt of the mean of the group variances (equal group sizes).
pub fn pooled_std(entries: &[ClientSweepEntry]) -> f64 {
    let n = entries.len() as f64;
    (entries.iter().map(|e| e.std * e.std).sum::<f64>() / n).sqrt()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_k_sweep(path: &Path) -> Result<Vec<KSweepEntry>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::LedgerParse { row: i + 1, reason: e.to_string() }))
        .collect()
}
