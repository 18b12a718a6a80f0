//! Layer-adaptive expert pruning.
//!
//! Once the per-expert load ranking has settled, every layer is scanned
//! iteration by iteration. Experts are visited in ascending load order while
//! a running sum of their loads accumulates. An expert is flagged when the
//! running sum stays below `beta * total_slots` and its own load stays below
//! `alpha * total_slots / N`. Flags accumulate into per-expert markers. The
//! number of experts finally removed from a layer is the average number of
//! flags per iteration, and the experts removed are those with the most
//! markers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::stats::{spearman_u64, PrefixSums};
use crate::trace::ExpertTokenCounts;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StabilityRule {
    /// Loads are declared stable from iteration `k` on.
    FixedIteration(usize),
    /// Stable at the first iteration `t` where, in every layer, the loads of
    /// `[t - window, t)` rank-correlate with those of `[t - 2*window, t - window)`
    /// at `threshold` or above.
    RankCorrelation { threshold: f64, window: usize },
}

impl StabilityRule {
    /// Parses `fixed:<k>` or `rank:<threshold>:<window>`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::invalid(format!("bad stability rule `{text}` (use fixed:<k> or rank:<rho>:<w>)"));
        let rule = match parts.as_slice() {
            ["fixed", k] => StabilityRule::FixedIteration(k.parse().map_err(|_| bad())?),
            ["rank", rho, w] => StabilityRule::RankCorrelation {
                threshold: rho.parse().map_err(|_| bad())?,
                window: w.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if let StabilityRule::RankCorrelation { threshold, window } = *self {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(Error::invalid(format!(
                    "rank-correlation threshold must lie in (0, 1], got {threshold}"
                )));
            }
            if window == 0 {
                return Err(Error::invalid("rank-correlation window must be positive"));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for StabilityRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StabilityRule::FixedIteration(k) => write!(f, "fixed:{k}"),
            StabilityRule::RankCorrelation { threshold, window } => {
                write!(f, "rank:{threshold}:{window}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    /// One α per layer; `f64::INFINITY` disables the individual-load test.
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub stability: StabilityRule,
    /// Iterations after the stable point over which markers accumulate.
    pub marker_window: usize,
}

impl PruneConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.alpha.len() != num_layers {
            return Err(Error::DimensionMismatch {
                what: "alpha schedule length",
                expected: num_layers,
                actual: self.alpha.len(),
            });
        }
        if let Some(a) = self.alpha.iter().find(|a| a.is_nan() || **a < 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {a}")));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.marker_window == 0 {
            return Err(Error::invalid("marker window must be positive"));
        }
        self.stability.validate()
    }
}

/// α for the first and last `ceil(L/6)` layers is `alpha_edge`; `alpha_mid` elsewhere.
pub fn alpha_schedule_hybrid(num_layers: usize, alpha_edge: f64, alpha_mid: f64) -> Vec<f64> {
    let edge = num_layers.div_ceil(6);
    (0..num_layers)
        .map(|l| {
            if l < edge || l + edge >= num_layers {
                alpha_edge
            } else {
                alpha_mid
            }
        })
        .collect()
}

/// Ascending-load visiting order, ties broken by lower index.
fn ascending_order(loads: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by_key(|&i| (loads[i], i));
    order
}

/// `value < cap`, with caps within rounding distance of `value` counted as
/// equal, so `0.1 * 30` does not admit a load of 3.
fn strictly_below(value: u64, cap: f64) -> bool {
    let v = value as f64;
    v < cap && (cap.is_infinite() || cap - v > 1e-12 * cap.max(1.0))
}

/// Experts passing both load tests, in ascending-load order. No survivor guard.
fn flag_candidates(loads: &[u64], alpha: f64, beta: f64, total_slots: u64) -> Vec<usize> {
    let total = total_slots as f64;
    let cumulative_cap = total * beta;
    let individual_cap = if alpha.is_infinite() {
        f64::INFINITY
    } else {
        alpha * total / loads.len() as f64
    };
    let mut running = 0u64;
    let mut flagged = Vec::new();
    for e in ascending_order(loads) {
        running += loads[e];
        if strictly_below(running, cumulative_cap) && strictly_below(loads[e], individual_cap) {
            flagged.push(e);
        }
    }
    flagged
}

/// Experts of one layer that satisfy both pruning inequalities for one load
/// vector, sorted by index. Never returns all `N` experts: if every expert
/// would qualify, the most loaded candidate is kept.
pub fn prune_layer(loads: &[u64], alpha: f64, beta: f64, total_slots: u64) -> Result<Vec<usize>> {
    if loads.is_empty() {
        return Err(Error::Empty("load vector"));
    }
    let sum: u64 = loads.iter().sum();
    if sum != total_slots {
        return Err(Error::invalid(format!(
            "total_slots {total_slots} does not match the load sum {sum}"
        )));
    }
    if alpha.is_nan() || alpha < 0.0 || !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("invalid alpha {alpha} or beta {beta}")));
    }
    let mut flagged = flag_candidates(loads, alpha, beta, total_slots);
    if flagged.len() == loads.len() {
        flagged.pop();
    }
    flagged.sort_unstable();
    Ok(flagged)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Markers {
    /// `[layer][expert]` flag counts.
    pub markers: Vec<Vec<u64>>,
    /// Experts to remove per layer: total flags divided by the window length, floored.
    pub exp_dis: Vec<usize>,
}

pub fn accumulate_markers(
    trace: &ExpertTokenCounts,
    config: &PruneConfig,
    iter_begin: usize,
    iter_end: usize,
    exec: Execution,
) -> Result<Markers> {
    config.validate(trace.num_layers())?;
    if iter_begin >= iter_end {
        return Err(Error::Empty("marker window"));
    }
    if iter_end > trace.num_iters() {
        return Err(Error::OutOfRange(format!(
            "marker window [{iter_begin}, {iter_end}) of {} iterations",
            trace.num_iters()
        )));
    }
    let n = trace.num_experts();
    let window = (iter_end - iter_begin) as u64;
    let per_layer = par::map_range(trace.num_layers(), exec, |layer| {
        let mut markers = vec![0u64; n];
        let mut flags = 0u64;
        for iter in iter_begin..iter_end {
            let loads = trace.row(iter, layer);
            let total: u64 = loads.iter().sum();
            for e in flag_candidates(loads, config.alpha[layer], config.beta, total) {
                markers[e] += 1;
                flags += 1;
            }
        }
        (markers, (flags / window) as usize)
    });
    let (markers, exp_dis) = per_layer.into_iter().unzip();
    Ok(Markers { markers, exp_dis })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    pub pruned: Vec<usize>,
    pub markers: Vec<u64>,
    pub survivors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneDecision {
    pub layers: Vec<LayerDecision>,
}

impl PruneDecision {
    /// A decision that prunes nothing.
    pub fn keep_all(num_layers: usize, num_experts: usize) -> Self {
        PruneDecision {
            layers: (0..num_layers)
                .map(|layer| LayerDecision {
                    layer,
                    pruned: Vec::new(),
                    markers: vec![0; num_experts],
                    survivors: (0..num_experts).collect(),
                })
                .collect(),
        }
    }

    pub fn survivor_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.survivors.len()).collect()
    }

    pub fn pruned_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.pruned.len()).collect()
    }
}

/// Prunes the `exp_dis[layer]` experts with the most markers in each layer
/// (ties to the lower index). Survivors keep their original order.
pub fn select_pruned(markers: &[Vec<u64>], exp_dis: &[usize]) -> Result<PruneDecision> {
    if markers.len() != exp_dis.len() {
        return Err(Error::DimensionMismatch {
            what: "exp_dis length",
            expected: markers.len(),
            actual: exp_dis.len(),
        });
    }
    let layers = markers
        .iter()
        .zip(exp_dis)
        .enumerate()
        .map(|(layer, (m, &count))| {
            if count >= m.len() {
                return Err(Error::invalid(format!(
                    "layer {layer}: cannot prune {count} of {} experts",
                    m.len()
                )));
            }
            let mut order: Vec<usize> = (0..m.len()).collect();
            order.sort_by_key(|&e| (std::cmp::Reverse(m[e]), e));
            let mut pruned = order[..count].to_vec();
            pruned.sort_unstable();
            let survivors = (0..m.len()).filter(|e| pruned.binary_search(e).is_err()).collect();
            Ok(LayerDecision {
                layer,
                pruned,
                markers: m.clone(),
                survivors,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PruneDecision { layers })
}

/// First iteration at which the trace is considered stable under `rule`.
pub fn detect_stability(
    trace: &ExpertTokenCounts,
    rule: StabilityRule,
    exec: Execution,
) -> Result<usize> {
    rule.validate()?;
    match rule {
        StabilityRule::FixedIteration(k) => Ok(k),
        StabilityRule::RankCorrelation { threshold, window } => {
            let iters = trace.num_iters();
            if iters < 2 * window {
                return Err(Error::invalid(format!(
                    "trace of {iters} iterations holds fewer than two windows of {window}"
                )));
            }
            let prefix = PrefixSums::new(trace, exec);
            let candidates = 2 * window..=iters;
            let per_layer: Vec<Vec<bool>> = par::map_range(trace.num_layers(), exec, |layer| {
                candidates
                    .clone()
                    .map(|t| {
                        let recent = prefix.window(layer, t - window, t);
                        let earlier = prefix.window(layer, t - 2 * window, t - window);
                        spearman_u64(&recent, &earlier) >= threshold
                    })
                    .collect()
            });
            candidates
                .clone()
                .enumerate()
                .find(|(i, _)| per_layer.iter().all(|stable| stable[*i]))
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::NoStablePoint(format!(
                        "no iteration reaches rank correlation {threshold} over windows of {window}"
                    ))
                })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub decision: PruneDecision,
    pub stable_iteration: usize,
    pub window: (usize, usize),
    /// Per-layer removal counts before the survivor floor was applied.
    pub requested: Vec<usize>,
}

/// Full pipeline: detect the stable point, accumulate markers over the
/// following `marker_window` iterations, and select pruned experts while
/// keeping at least `min_survivors` experts per layer.
pub fn prune_trace(
    trace: &ExpertTokenCounts,
    config: &PruneConfig,
    min_survivors: usize,
    exec: Execution,
) -> Result<PruneOutcome> {
    config.validate(trace.num_layers())?;
    let min_survivors = min_survivors.max(1);
    if min_survivors > trace.num_experts() {
        return Err(Error::invalid(format!(
            "cannot keep {min_survivors} of {} experts",
            trace.num_experts()
        )));
    }
    let stable = detect_stability(trace, config.stability, exec)?;
    if stable >= trace.num_iters() {
        return Err(Error::NoStablePoint(format!(
            "stable point {stable} leaves no iterations in a trace of {}",
            trace.num_iters()
        )));
    }
    let end = (stable + config.marker_window).min(trace.num_iters());
    let m = accumulate_markers(trace, config, stable, end, exec)?;
    let cap = trace.num_experts() - min_survivors;
    let clamped: Vec<usize> = m.exp_dis.iter().map(|&c| c.min(cap)).collect();
    let decision = select_pruned(&m.markers, &clamped)?;
    Ok(PruneOutcome {
        decision,
        stable_iteration: stable,
        window: (stable, end),
        requested: m.exp_dis,
    })
}

/// Serialized form: `{"beta", "alpha", "layers", "window"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionFile {
    pub beta: f64,
    #[serde(serialize_with = "ser_alpha", deserialize_with = "de_alpha")]
    pub alpha: Vec<f64>,
    pub layers: Vec<LayerDecision>,
    /// Iteration window the markers were accumulated over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<MarkerWindow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerWindow {
    pub begin: usize,
    pub end: usize,
}

impl DecisionFile {
    pub fn new(config: &PruneConfig, outcome: &PruneOutcome) -> Self {
        DecisionFile {
            beta: config.beta,
            alpha: config.alpha.clone(),
            layers: outcome.decision.layers.clone(),
            window: Some(MarkerWindow {
                begin: outcome.window.0,
                end: outcome.window.1,
            }),
        }
    }

    pub fn decision(&self) -> PruneDecision {
        PruneDecision {
            layers: self.layers.clone(),
        }
    }

    /// Structural checks against a trace's shape.
    pub fn check_against(&self, num_layers: usize, num_experts: usize) -> Result<()> {
        if self.layers.len() != num_layers {
            return Err(Error::DimensionMismatch {
                what: "decision layers",
                expected: num_layers,
                actual: self.layers.len(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mut all: Vec<usize> = l.pruned.iter().chain(&l.survivors).copied().collect();
            all.sort_unstable();
            if l.layer != i || all != (0..num_experts).collect::<Vec<_>>() || l.survivors.is_empty() {
                return Err(Error::invalid(format!(
                    "decision layer {i} does not partition {num_experts} experts"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("decision serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: format!("parsing {}", path.display()),
            source,
        })
    }
}

fn ser_alpha<S: Serializer>(alpha: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Out<'a> {
        Num(f64),
        Text(&'a str),
    }
    s.collect_seq(alpha.iter().map(|&a| {
        if a.is_infinite() {
            Out::Text("inf")
        } else {
            Out::Num(a)
        }
    }))
}

fn de_alpha<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum In {
        Num(f64),
        Text(String),
    }
    Vec::<In>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            In::Num(x) => Ok(x),
            In::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
            In::Text(t) => Err(serde::de::Error::custom(format!("bad alpha `{t}`"))),
        })
        .collect()
}

/// Per-layer pruned counts keyed by layer, for summaries.
pub fn pruned_summary(decision: &PruneDecision) -> BTreeMap<usize, usize> {
    decision.layers.iter().map(|l| (l.layer, l.pruned.len())).collect()
}
