//! Statistical filter pruning.
//!
//! Each filter of a conv layer is scored by the sum of the absolute values
//! of all its weights. A filter survives when its score lies inside
//! `[mean − k·std, mean + k·std]` (population statistics, inclusive bounds).
//! Pruning a layer's filters also removes the matching input slices of
//! whatever consumes that layer's output, so the graph stays dense.
//!
//! All layers are scored on the same snapshot before any structural edit,
//! so removing input channels from a layer never changes its own scores
//! within one pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{count_flops, count_params, ActShape, ConvLayer, ModelGraph, Node};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Boundary scale.
    pub k: f64,
    /// Consecutive non-decreasing rounds before the search halts.
    pub patience: usize,
    /// Floor on surviving filters per layer.
    pub min_filters: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k: 2.0,
            patience: 3,
            min_filters: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be a finite value >= 0, got {}", self.k)));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.min_filters < 1 {
            return Err(Error::Config("min_filters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScoreSummary {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    /// Sorted surviving filter indices; empty until [`FilterScoreSummary::with_keep`].
    pub keep: Vec<usize>,
    /// Set when the `min_filters` floor overrode the boundary.
    pub guarded: bool,
}

/// Scores every filter of a `[N, C, K, K]` weight tensor.
pub fn score_filters(weights: &Tensor) -> Result<FilterScoreSummary> {
    let n = *weights
        .shape()
        .first()
        .ok_or_else(|| Error::shape("score", "weights have no filter axis"))?;
    if !weights.is_finite() {
        return Err(Error::NumericOverflow { op: "score_filters" });
    }
    let per = weights.len() / n;
    let scores: Vec<f64> = weights
        .data()
        .chunks_exact(per)
        .map(|f| f.iter().map(|v| v.abs()).sum())
        .collect();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(FilterScoreSummary {
        scores,
        mean,
        std: var.sqrt(),
        lower: mean,
        upper: mean,
        keep: Vec::new(),
        guarded: false,
    })
}

pub fn score_layer(layer: &ConvLayer) -> Result<FilterScoreSummary> {
    score_filters(&layer.weights)
}

/// Indices whose score lies inside the boundary for `cfg.k`.
///
/// When fewer than `cfg.min_filters` survive, the filters closest to the
/// mean are kept instead (ties to the lower index); the second value
/// reports whether that happened.
pub fn select_keep_set(summary: &FilterScoreSummary, cfg: &PruneConfig) -> (Vec<usize>, bool) {
    let (lower, upper) = bounds(summary, cfg.k);
    let keep: Vec<usize> = summary
        .scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| lower <= s && s <= upper)
        .map(|(i, _)| i)
        .collect();
    let floor = cfg.min_filters.min(summary.scores.len());
    if keep.len() >= floor {
        return (keep, false);
    }
    let mut order: Vec<usize> = (0..summary.scores.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (summary.scores[a] - summary.mean).abs();
        let db = (summary.scores[b] - summary.mean).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(floor).collect();
    keep.sort_unstable();
    (keep, true)
}

fn bounds(summary: &FilterScoreSummary, k: f64) -> (f64, f64) {
    let spread = k * summary.std;
    (summary.mean - spread, summary.mean + spread)
}

impl FilterScoreSummary {
    /// Fills the bounds and keep set for `cfg`.
    pub fn with_keep(mut self, cfg: &PruneConfig) -> Self {
        (self.lower, self.upper) = bounds(&self, cfg.k);
        (self.keep, self.guarded) = select_keep_set(&self, cfg);
        self
    }
}

/// Keep sets for every conv layer of one snapshot.
#[derive(Clone, Debug, Default)]
pub struct PrunePlan {
    keep: HashMap<String, Vec<usize>>,
}

impl PrunePlan {
    /// Keeps every filter of every layer.
    pub fn keep_all(model: &ModelGraph) -> Self {
        PrunePlan {
            keep: model
                .conv_layers()
                .into_iter()
                .map(|c| (c.name.clone(), (0..c.filters()).collect()))
                .collect(),
        }
    }

    pub fn set(&mut self, layer: &str, keep: Vec<usize>) {
        self.keep.insert(layer.to_string(), keep);
    }

    pub fn get(&self, layer: &str) -> Option<&[usize]> {
        self.keep.get(layer).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub name: String,
    pub prunable: bool,
    pub before: usize,
    pub after: usize,
    /// Present for prunable layers.
    pub summary: Option<FilterScoreSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPrune>,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl PruneReport {
    pub fn filters_removed(&self) -> usize {
        self.layers.iter().map(|l| l.before - l.after).sum()
    }

    /// Flat per-layer and global reductions, in percent.
    pub fn to_record(&self) -> PruneRecord {
        PruneRecord {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    name: l.name.clone(),
                    filters_before: l.before,
                    filters_after: l.after,
                    filter_reduction_pct: reduction_pct(l.before as f64, l.after as f64),
                })
                .collect(),
            params_before: self.params_before,
            params_after: self.params_after,
            params_reduction_pct: reduction_pct(self.params_before as f64, self.params_after as f64),
            flops_before: self.flops_before,
            flops_after: self.flops_after,
            flops_reduction_pct: reduction_pct(self.flops_before as f64, self.flops_after as f64),
        }
    }
}

fn reduction_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (before - after) / before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub filters_before: usize,
    pub filters_after: usize,
    pub filter_reduction_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub layers: Vec<LayerRecord>,
    pub params_before: usize,
    pub params_after: usize,
    pub params_reduction_pct: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_reduction_pct: f64,
}

/// Scores every prunable layer of `model` and derives its keep set.
pub fn plan_pruning(model: &ModelGraph, cfg: &PruneConfig) -> Result<(PrunePlan, Vec<LayerPrune>)> {
    let mut plan = PrunePlan::default();
    let mut layers = Vec::new();
    for conv in model.conv_layers() {
        let n = conv.filters();
        let (keep, summary) = if conv.prunable {
            let s = score_layer(conv)?.with_keep(cfg);
            if s.guarded {
                log::warn!(
                    "{}: boundary kept fewer than {} filters, retaining those nearest the mean",
                    conv.name,
                    cfg.min_filters
                );
            }
            (s.keep.clone(), Some(s))
        } else {
            ((0..n).collect(), None)
        };
        layers.push(LayerPrune {
            name: conv.name.clone(),
            prunable: conv.prunable,
            before: n,
            after: keep.len(),
            summary,
        });
        plan.set(&conv.name, keep);
    }
    Ok((plan, layers))
}

/// Live channel or feature indices (relative to the unpruned graph) of the
/// activation flowing between nodes.
#[derive(Clone, Debug)]
enum Live {
    All,
    Channels(Vec<usize>),
    Features(Vec<usize>),
}

fn consistency(e: Error) -> Error {
    match e {
        Error::Consistency(_) => e,
        other => Error::Consistency(format!("pruned graph is malformed: {other}")),
    }
}

/// Slices `conv` to the given input channels and output filters.
fn slice_conv(conv: &ConvLayer, inputs: &Live, outputs: Option<&[usize]>) -> Result<ConvLayer> {
    let mut out = conv.clone();
    match inputs {
        Live::All => {}
        Live::Channels(ch) => out.weights = out.weights.select(1, ch)?,
        Live::Features(_) => {
            return Err(Error::Consistency(format!("{} fed by a flat activation", conv.name)));
        }
    }
    if let Some(keep) = outputs {
        if keep.len() < conv.filters() {
            if !conv.prunable {
                return Err(Error::Consistency(format!(
                    "plan removes filters from non-prunable layer {}",
                    conv.name
                )));
            }
            out.weights = out.weights.select(0, keep)?;
            out.bias = out.bias.select(0, keep)?;
        }
    }
    Ok(out)
}

fn output_live(conv: &ConvLayer, plan: &PrunePlan) -> Result<(Option<Vec<usize>>, Live)> {
    let keep = plan
        .get(&conv.name)
        .ok_or_else(|| Error::Consistency(format!("plan has no entry for {}", conv.name)))?;
    if keep.is_empty() || keep.iter().any(|&i| i >= conv.filters()) || !keep.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Consistency(format!("invalid keep set for {}: {keep:?}", conv.name)));
    }
    if keep.len() == conv.filters() {
        Ok((None, Live::All))
    } else {
        Ok((Some(keep.to_vec()), Live::Channels(keep.to_vec())))
    }
}

/// Applies `plan` to `model`, rewiring every downstream consumer.
pub fn apply_plan(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    let (shapes, _) = model.infer()?;
    let [c0, h0, w0] = model.input_shape;
    let mut out = model.clone();
    let mut live = Live::All;
    for (i, node) in out.nodes.iter_mut().enumerate() {
        let input_shape = if i == 0 {
            ActShape::Map { c: c0, h: h0, w: w0 }
        } else {
            shapes[i - 1]
        };
        match node {
            Node::Conv(conv) => {
                let (keep, next) = output_live(conv, plan)?;
                *conv = slice_conv(conv, &live, keep.as_deref())?;
                live = next;
            }
            Node::Relu | Node::Pool(_) => {}
            Node::Flatten => {
                if let Live::Channels(ch) = &live {
                    let ActShape::Map { h, w, .. } = input_shape else {
                        return Err(Error::Consistency("flatten of a flat activation".into()));
                    };
                    let hw = h * w;
                    live = Live::Features(ch.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect());
                }
            }
            Node::Dense(d) => {
                match &live {
                    Live::All => {}
                    Live::Features(rows) => d.weights = d.weights.select(0, rows)?,
                    Live::Channels(_) => {
                        return Err(Error::Consistency(format!("{} fed by an unflattened map", d.name)));
                    }
                }
                live = Live::All;
            }
            Node::Residual(block) => {
                if !matches!(live, Live::All) {
                    return Err(Error::Consistency(format!(
                        "skip path into {} would lose channels",
                        block.conv1.name
                    )));
                }
                let (keep1, mid) = output_live(&block.conv1, plan)?;
                let (keep2, _) = output_live(&block.conv2, plan)?;
                if keep2.is_some() {
                    return Err(Error::Consistency(format!(
                        "plan removes filters from residual output {}",
                        block.conv2.name
                    )));
                }
                block.conv1 = slice_conv(&block.conv1, &Live::All, keep1.as_deref())?;
                block.conv2 = slice_conv(&block.conv2, &mid, None)?;
                live = Live::All;
            }
            Node::Inception(block) => {
                let mut merged = Vec::new();
                let mut offset = 0;
                let mut any_removed = false;
                for branch in &mut block.branches {
                    let width = branch.out_channels();
                    let mut branch_live = live.clone();
                    for conv in &mut branch.convs {
                        let (keep, next) = output_live(conv, plan)?;
                        *conv = slice_conv(conv, &branch_live, keep.as_deref())?;
                        branch_live = next;
                    }
                    match branch_live {
                        Live::All => merged.extend(offset..offset + width),
                        Live::Channels(ch) => {
                            any_removed = true;
                            merged.extend(ch.into_iter().map(|c| offset + c));
                        }
                        Live::Features(_) => unreachable!("conv outputs are maps"),
                    }
                    offset += width;
                }
                live = if any_removed { Live::Channels(merged) } else { Live::All };
            }
        }
    }
    out.validate().map_err(consistency)?;
    Ok(out)
}

/// Scores, selects and removes filters across the whole graph.
pub fn prune_model(model: &ModelGraph, cfg: &PruneConfig) -> Result<(ModelGraph, PruneReport)> {
    cfg.validate()?;
    let (plan, layers) = plan_pruning(model, cfg)?;
    let pruned = apply_plan(model, &plan)?;
    let report = PruneReport {
        layers,
        params_before: count_params(model),
        params_after: count_params(&pruned),
        flops_before: count_flops(model)?.total(),
        flops_after: count_flops(&pruned)?.total(),
    };
    Ok((pruned, report))
}
