//! Two-stage federated orchestration.
//!
//! Stage 1 (search) repeats select → broadcast → local training → FedAvg →
//! server-side prune until the global parameter count has failed to drop
//! for `patience` consecutive rounds, or a round cap is hit. Stage 2
//! (train) runs plain FedAvg rounds on the frozen architecture.
//!
//! Models cross the simulated wire as 32-bit floats: the broadcast global
//! model and every upload are rounded to f32 precision.

pub mod client;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, FederatedDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{count_flops, count_params, ModelGraph};
use crate::pruning::{prune_model, PruneConfig, PruneReport};

pub use client::{local_train, mean_loss, LocalTrainConfig, LocalUpdate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Search,
    Train,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Search => "search",
            Stage::Train => "train",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    /// Total clients M.
    pub clients: usize,
    /// Fraction selected per round.
    pub fraction: f64,
    /// Fixed per-round count; overrides `fraction` when set.
    pub clients_per_round: Option<usize>,
    pub local: LocalTrainConfig,
    /// Hard cap on search rounds.
    pub stage1_cap: usize,
    pub stage2_rounds: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 50,
            fraction: 0.10,
            clients_per_round: None,
            local: LocalTrainConfig::default(),
            stage1_cap: 100,
            stage2_rounds: 50,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn per_round(&self) -> usize {
        let n = self
            .clients_per_round
            .unwrap_or_else(|| (self.fraction * self.clients as f64).round() as usize);
        n.clamp(1, self.clients.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if let Some(n) = self.clients_per_round {
            if n == 0 || n > self.clients {
                return Err(Error::Config(format!(
                    "clients_per_round must lie in [1, {}], got {n}",
                    self.clients
                )));
            }
        }
        if self.local.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer over the mixed inputs.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SELECT_TAG: u64 = 1;
const TRAIN_TAG: u64 = 2;

/// Uniform sample of `count` distinct ids out of `total`, sorted; a pure function of `(seed, round)`.
pub fn select_clients(total: usize, count: usize, seed: u64, round: usize) -> Vec<usize> {
    let count = count.clamp(1, total.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SELECT_TAG, round as u64]));
    let mut ids = rand::seq::index::sample(&mut rng, total, count).into_vec();
    ids.sort_unstable();
    ids
}

/// Sample-count weighted mean of structurally identical models.
pub fn fedavg(locals: &[(ModelGraph, usize)]) -> Result<ModelGraph> {
    let (first, _) = locals
        .first()
        .ok_or_else(|| Error::Aggregation("no local models to aggregate".into()))?;
    if let Some((bad, _)) = locals.iter().find(|(m, _)| !m.same_architecture(first)) {
        return Err(Error::Aggregation(format!(
            "architecture mismatch: {:?} vs {:?}",
            bad.filter_counts(),
            first.filter_counts()
        )));
    }
    let total: usize = locals.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    let weight = |n: usize| n as f64 / total as f64;
    let mut out = first.clone();
    let w0 = weight(locals[0].1);
    for p in out.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= w0);
    }
    for (model, n) in &locals[1..] {
        let w = weight(*n);
        for (acc, p) in out.params_mut().into_iter().zip(model.params()) {
            for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `test` samples whose argmax prediction matches the label.
pub fn evaluate(model: &ModelGraph, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(250) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (batch, labels) = make_batch(&refs, model.input_shape);
        let logits = model.forward(&batch)?;
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(classes)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Halts after `patience` consecutive observations without a decrease.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    last: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, initial: usize) -> Self {
        EarlyStop {
            patience,
            last: initial,
            stale: 0,
        }
    }

    /// Records one round's parameter count; true once the search should stop.
    pub fn observe(&mut self, params: usize) -> bool {
        if params < self.last {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.last = params;
        self.stale >= self.patience
    }
}

/// Server-side architecture edit applied after each search-round aggregation.
pub trait ServerPruner {
    fn prune(&mut self, model: &ModelGraph) -> Result<(ModelGraph, PruneReport)>;
}

/// Statistical filter pruning with a fixed configuration.
pub struct FilterPruner(pub PruneConfig);

impl ServerPruner for FilterPruner {
    fn prune(&mut self, model: &ModelGraph) -> Result<(ModelGraph, PruneReport)> {
        prune_model(model, &self.0)
    }
}

/// Everything observed in one round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    /// 1-based, counted across both stages.
    pub round: usize,
    pub stage: Stage,
    pub selected: Vec<usize>,
    /// Parameters in the model broadcast at the start of the round.
    pub params_broadcast: usize,
    /// Parameters after the round's aggregation (and pruning, in search).
    pub params: usize,
    pub flops: u64,
    pub accuracy: f64,
    pub filter_counts: Vec<(String, usize)>,
    pub prune: Option<PruneReport>,
    pub wall_ms: u128,
}

/// Configuration plus mutable state of one federated run.
pub struct FederatedRun<'a> {
    pub config: FederationConfig,
    pub data: &'a FederatedDataset,
    pub global: ModelGraph,
    pub stage: Stage,
    pub round: usize,
    /// Global parameter count after every search round.
    pub param_history: Vec<usize>,
    pub history: Vec<RoundOutcome>,
    pub best_accuracy: f64,
    /// Round index at which each stage began (search, train).
    pub stage_starts: (usize, Option<usize>),
}

impl<'a> FederatedRun<'a> {
    pub fn new(config: FederationConfig, data: &'a FederatedDataset, mut global: ModelGraph) -> Result<Self> {
        config.validate()?;
        if data.clients.len() != config.clients {
            return Err(Error::Config(format!(
                "dataset has {} clients, configuration expects {}",
                data.clients.len(),
                config.clients
            )));
        }
        if let Some(c) = data.clients.iter().find(|c| c.is_empty()) {
            return Err(Error::Config(format!("client {} has no data", c.id)));
        }
        global.validate()?;
        global.round_to_f32();
        Ok(FederatedRun {
            config,
            data,
            global,
            stage: Stage::Search,
            round: 0,
            param_history: Vec::new(),
            history: Vec::new(),
            best_accuracy: 0.0,
            stage_starts: (0, None),
        })
    }

    pub fn select_clients(&self, round: usize) -> Vec<usize> {
        select_clients(self.config.clients, self.config.per_round(), self.config.seed, round)
    }

    /// Broadcast, local training and aggregation for one round.
    fn train_round(&self, round: usize, selected: &[usize]) -> Result<ModelGraph> {
        let global = &self.global;
        let local = &self.config.local;
        let seed = self.config.seed;
        let updates: Vec<LocalUpdate> = selected
            .par_iter()
            .map(|&id| {
                let s = derive_seed(seed, &[TRAIN_TAG, round as u64, id as u64]);
                let mut u = local_train(global, &self.data.clients[id], local, s)?;
                u.model.round_to_f32();
                Ok(u)
            })
            .collect::<Result<_>>()?;
        let locals: Vec<(ModelGraph, usize)> = updates.into_iter().map(|u| (u.model, u.samples)).collect();
        fedavg(&locals)
    }

    fn finish_round(&mut self, outcome_base: (usize, Vec<usize>, usize, Instant), prune: Option<PruneReport>) -> Result<()> {
        let (round, selected, params_broadcast, start) = outcome_base;
        let accuracy = evaluate(&self.global, &self.data.test)?;
        self.best_accuracy = self.best_accuracy.max(accuracy);
        let params = count_params(&self.global);
        log::info!(
            "round {round} [{}] params {params} acc {accuracy:.4} clients {}",
            self.stage,
            selected.len()
        );
        self.history.push(RoundOutcome {
            round,
            stage: self.stage,
            selected,
            params_broadcast,
            params,
            flops: count_flops(&self.global)?.total(),
            accuracy,
            filter_counts: self.global.filter_counts(),
            prune,
            wall_ms: start.elapsed().as_millis(),
        });
        Ok(())
    }

    /// One search round: train, aggregate, prune. Returns the new parameter count.
    pub fn search_round(&mut self, pruner: &mut dyn ServerPruner) -> Result<usize> {
        if self.stage != Stage::Search {
            return Err(Error::State("search round requested after the search stage ended".into()));
        }
        let start = Instant::now();
        self.round += 1;
        let round = self.round;
        let selected = self.select_clients(round);
        let params_broadcast = count_params(&self.global);
        let aggregated = self.train_round(round, &selected)?;
        let (mut pruned, report) = pruner.prune(&aggregated)?;
        pruned.round_to_f32();
        self.global = pruned;
        let params = report.params_after;
        self.param_history.push(params);
        self.finish_round((round, selected, params_broadcast, start), Some(report))?;
        Ok(params)
    }

    /// Runs the search stage to completion and moves the run to the training stage.
    /// Returns the number of search rounds executed.
    pub fn run_stage1_with(&mut self, patience: usize, pruner: &mut dyn ServerPruner) -> Result<usize> {
        if self.stage != Stage::Search {
            return Err(Error::State("search stage already completed".into()));
        }
        let mut stop = EarlyStop::new(patience, count_params(&self.global));
        let start_round = self.round;
        self.stage_starts.0 = start_round;
        while self.round - start_round < self.config.stage1_cap {
            let params = self.search_round(pruner)?;
            if stop.observe(params) {
                break;
            }
        }
        self.enter_training();
        Ok(self.round - start_round)
    }

    pub fn run_stage1(&mut self, pc: &PruneConfig) -> Result<(ModelGraph, usize)> {
        pc.validate()?;
        let rounds = self.run_stage1_with(pc.patience, &mut FilterPruner(*pc))?;
        Ok((self.global.clone(), rounds))
    }

    /// Moves to the training stage without searching, for unpruned baselines.
    pub fn skip_search(&mut self) -> Result<()> {
        if self.stage != Stage::Search {
            return Err(Error::State("search stage already completed".into()));
        }
        self.enter_training();
        Ok(())
    }

    fn enter_training(&mut self) {
        self.stage = Stage::Train;
        self.stage_starts.1 = Some(self.round);
    }

    /// `rounds` plain FedAvg rounds on the frozen architecture.
    pub fn run_stage2(&mut self, rounds: usize) -> Result<ModelGraph> {
        if self.stage != Stage::Train {
            return Err(Error::State("training stage requires a completed search stage".into()));
        }
        let frozen = count_params(&self.global);
        for _ in 0..rounds {
            let start = Instant::now();
            self.round += 1;
            let round = self.round;
            let selected = self.select_clients(round);
            let mut next = self.train_round(round, &selected)?;
            next.round_to_f32();
            if count_params(&next) != frozen {
                return Err(Error::Consistency(format!(
                    "parameter count changed during training: {frozen} -> {}",
                    count_params(&next)
                )));
            }
            self.global = next;
            self.finish_round((round, selected, frozen, start), None)?;
        }
        Ok(self.global.clone())
    }
}
