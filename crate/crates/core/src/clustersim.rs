//! Parameter accounting and a max-load step-time proxy.
//!
//! Step time is modeled as compute-bound and synchronous: each layer waits
//! for its most loaded device group, and layers run one after another. The
//! proxy is therefore `sum over layers of max over groups of group load`,
//! measured per iteration and averaged over a window. It claims ordinal
//! fidelity only.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::prune::{prune_trace, PruneConfig, PruneDecision};
use crate::rearrange::{contiguous_baseline, rearrange, GroupAssignment};
use crate::stats::PrefixSums;
use crate::trace::{ExpertTokenCounts, ModelStructure};

/// Total parameters with `experts_per_layer[l]` experts in layer `l`.
///
/// Per layer: attention `4 * hidden * heads * head_dim`, router
/// `hidden * N_original` (pruned columns stay allocated), and
/// `2 * hidden * ffn_hidden` per expert. `overhead` covers embeddings and heads.
pub fn count_params(structure: &ModelStructure, experts_per_layer: &[usize], overhead: u64) -> Result<u64> {
    if experts_per_layer.len() != structure.num_layers {
        return Err(Error::DimensionMismatch {
            what: "experts_per_layer length",
            expected: structure.num_layers,
            actual: experts_per_layer.len(),
        });
    }
    if let Some(l) = experts_per_layer.iter().position(|&e| e == 0) {
        return Err(Error::invalid(format!("layer {l} has zero experts")));
    }
    let h = structure.hidden_size as u64;
    let attention = 4 * h * (structure.num_attention_heads * structure.attention_hidden_size) as u64;
    let router = h * structure.experts_per_layer as u64;
    let expert = 2 * h * structure.ffn_hidden_size as u64;
    Ok(experts_per_layer
        .iter()
        .map(|&e| attention + router + e as u64 * expert)
        .sum::<u64>()
        + overhead)
}

/// Max group load for one layer. `loads` is indexed by expert id.
pub fn step_time(loads: &[u64], placement: &GroupAssignment) -> Result<u64> {
    step_time_in_layer(0, loads, placement)
}

fn step_time_in_layer(layer: usize, loads: &[u64], placement: &GroupAssignment) -> Result<u64> {
    let owner = placement.group_of(loads.len());
    let mut sums = vec![0u64; placement.groups.len()];
    for (expert, (&load, g)) in loads.iter().zip(&owner).enumerate() {
        match g {
            Some(g) => sums[*g] += load,
            None if load > 0 => return Err(Error::MissingFromPlacement { layer, expert, load }),
            None => {}
        }
    }
    Ok(sums.into_iter().max().unwrap_or(0))
}

/// Moves the load of experts outside `survivors` onto the survivors,
/// proportionally to their own load (equal shares when all are idle), using
/// largest-remainder rounding so the row total is preserved. Returns loads
/// indexed by expert id; pruned experts end at zero.
pub fn reroute_loads(loads: &[u64], survivors: &[usize]) -> Vec<u64> {
    let mut out = vec![0u64; loads.len()];
    let moved: u64 = loads.iter().sum::<u64>() - survivors.iter().map(|&e| loads[e]).sum::<u64>();
    let base: u64 = survivors.iter().map(|&e| loads[e]).sum();
    for &e in survivors {
        out[e] = loads[e];
    }
    if moved == 0 || survivors.is_empty() {
        return out;
    }
    let weight = |e: usize| if base > 0 { loads[e] as u128 } else { 1 };
    let denom: u128 = if base > 0 { base as u128 } else { survivors.len() as u128 };
    let mut given = 0u64;
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(survivors.len());
    for &e in survivors {
        let num = moved as u128 * weight(e);
        let share = (num / denom) as u64;
        out[e] += share;
        given += share;
        remainders.push((num % denom, e));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, e) in remainders.iter().take((moved - given) as usize) {
        out[e] += 1;
    }
    out
}

/// Mean per-iteration step time over `[begin, end)`, summed over layers.
pub fn mean_step_time(
    trace: &ExpertTokenCounts,
    decision: &PruneDecision,
    placements: &[GroupAssignment],
    window: (usize, usize),
    exec: Execution,
) -> Result<f64> {
    let (begin, end) = window;
    if begin >= end || end > trace.num_iters() {
        return Err(Error::OutOfRange(format!(
            "step-time window [{begin}, {end}) of {}",
            trace.num_iters()
        )));
    }
    if placements.len() != trace.num_layers() || decision.layers.len() != trace.num_layers() {
        return Err(Error::DimensionMismatch {
            what: "placement layers",
            expected: trace.num_layers(),
            actual: placements.len().min(decision.layers.len()),
        });
    }
    let per_iter = par::try_map_range(end - begin, exec, |i| {
        let iter = begin + i;
        let mut total = 0u64;
        for (layer, (d, p)) in decision.layers.iter().zip(placements).enumerate() {
            let loads = reroute_loads(trace.row(iter, layer), &d.survivors);
            total += step_time_in_layer(layer, &loads, p)?;
        }
        Ok::<u64, Error>(total)
    })?;
    Ok(per_iter.iter().map(|&t| t as f64).sum::<f64>() / per_iter.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub total_params: u64,
    pub experts_per_layer: Vec<usize>,
    pub mean_step_time: f64,
    pub relative_throughput: f64,
}

pub const SCENARIO_BASE: &str = "base";
pub const SCENARIO_PRUNED: &str = "pruned";
pub const SCENARIO_PRUNED_REARRANGED: &str = "pruned_rearranged";
pub const SCENARIO_UNIFORM_CONTROL: &str = "uniform_control";

/// Per-layer placement of a decision's survivors, from loads aggregated over
/// `window` after rerouting. `rearranged` selects the greedy placement over
/// the contiguous one.
pub fn survivor_placements(
    trace: &ExpertTokenCounts,
    decision: &PruneDecision,
    num_groups: usize,
    window: (usize, usize),
    rearranged: bool,
    exec: Execution,
) -> Result<Vec<GroupAssignment>> {
    let prefix = PrefixSums::new(trace, exec);
    par::try_map_range(trace.num_layers(), exec, |layer| {
        let survivors = &decision.layers[layer].survivors;
        let agg = reroute_loads(&prefix.window(layer, window.0, window.1), survivors);
        let loads: Vec<u64> = survivors.iter().map(|&e| agg[e]).collect();
        let a = if rearranged {
            rearrange(&loads, num_groups)?
        } else {
            contiguous_baseline(&loads, num_groups)?
        };
        Ok(a.relabel(survivors))
    })
}

/// Keeps the `keep` most loaded experts of every layer over `window`.
pub fn uniform_control_decision(
    trace: &ExpertTokenCounts,
    keep: usize,
    window: (usize, usize),
    exec: Execution,
) -> PruneDecision {
    let prefix = PrefixSums::new(trace, exec);
    let n = trace.num_experts();
    let markers: Vec<Vec<u64>> = (0..trace.num_layers())
        .map(|l| prefix.window(l, window.0, window.1))
        .collect();
    let mut decision = PruneDecision::keep_all(trace.num_layers(), n);
    for (d, loads) in decision.layers.iter_mut().zip(markers) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&e| (std::cmp::Reverse(loads[e]), e));
        let mut survivors = order[..keep.min(n)].to_vec();
        survivors.sort_unstable();
        d.pruned = (0..n).filter(|e| survivors.binary_search(e).is_err()).collect();
        d.survivors = survivors;
    }
    decision
}

#[derive(Clone, Debug)]
pub struct ScenarioInputs<'a> {
    pub trace: &'a ExpertTokenCounts,
    pub structure: &'a ModelStructure,
    pub decision: &'a PruneDecision,
    /// Rearranged survivor placement; computed with [`rearrange`] when absent.
    pub placement: Option<&'a [GroupAssignment]>,
    pub num_groups: usize,
    /// Window for placement loads and step-time averaging.
    pub window: (usize, usize),
    pub overhead: u64,
}

/// Base, pruned, pruned + rearranged, and a uniform control with every layer
/// cut to the largest survivor count. Throughput is relative to the base.
pub fn evaluate_scenarios(inputs: &ScenarioInputs<'_>, exec: Execution) -> Result<Vec<ScenarioReport>> {
    let ScenarioInputs {
        trace,
        structure,
        decision,
        num_groups,
        window,
        overhead,
        ..
    } = *inputs;
    if decision.layers.len() != trace.num_layers() {
        return Err(Error::DimensionMismatch {
            what: "decision layers",
            expected: trace.num_layers(),
            actual: decision.layers.len(),
        });
    }
    let n = trace.num_experts();
    let base = PruneDecision::keep_all(trace.num_layers(), n);
    let keep = decision.survivor_counts().into_iter().max().unwrap_or(n);
    let control = uniform_control_decision(trace, keep, window, exec);

    let rearranged = match inputs.placement {
        Some(p) => p.to_vec(),
        None => survivor_placements(trace, decision, num_groups, window, true, exec)?,
    };
    let scenarios: Vec<(&str, &PruneDecision, Vec<GroupAssignment>)> = vec![
        (
            SCENARIO_BASE,
            &base,
            survivor_placements(trace, &base, num_groups, window, false, exec)?,
        ),
        (
            SCENARIO_PRUNED,
            decision,
            survivor_placements(trace, decision, num_groups, window, false, exec)?,
        ),
        (SCENARIO_PRUNED_REARRANGED, decision, rearranged),
        (
            SCENARIO_UNIFORM_CONTROL,
            &control,
            survivor_placements(trace, &control, num_groups, window, false, exec)?,
        ),
    ];

    let times = par::try_map_slice(&scenarios, exec, |(_, d, p)| mean_step_time(trace, d, p, window, Execution::Sequential))?;
    let base_time = times[0];
    scenarios
        .iter()
        .zip(times)
        .map(|((name, d, _), time)| {
            let counts = d.survivor_counts();
            Ok(ScenarioReport {
                scenario: name.to_string(),
                total_params: count_params(structure, &counts, overhead)?,
                experts_per_layer: counts,
                mean_step_time: time,
                relative_throughput: if time > 0.0 { base_time / time } else { 1.0 },
            })
        })
        .collect()
}

/// Prunes with `config`, places survivors on `num_groups` groups, and
/// evaluates all four scenarios over the marker window.
pub fn compare_scenarios(
    trace: &ExpertTokenCounts,
    structure: &ModelStructure,
    config: &PruneConfig,
    num_groups: usize,
    exec: Execution,
) -> Result<Vec<ScenarioReport>> {
    let outcome = prune_trace(trace, config, structure.top_k, exec)?;
    evaluate_scenarios(
        &ScenarioInputs {
            trace,
            structure,
            decision: &outcome.decision,
            placement: None,
            num_groups,
            window: outcome.window,
            overhead: 0,
        },
        exec,
    )
}

pub fn reports_to_json(reports: &[ScenarioReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}

/// `scenario,total_params,mean_step_time,relative_throughput`
pub fn write_reports_csv<W: Write>(reports: &[ScenarioReport], w: &mut W) -> std::io::Result<()> {
    w.write_all(b"scenario,total_params,mean_step_time,relative_throughput\n")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{}",
            r.scenario, r.total_params, r.mean_step_time, r.relative_throughput
        )?;
    }
    Ok(())
}
