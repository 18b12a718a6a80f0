//! Greedy balanced placement of experts into equal-size device groups.
//!
//! Experts are taken in descending load order and each goes to the group
//! with the smallest running sum that still has room. When the expert count
//! is not a multiple of the group count, zero-load virtual experts pad the
//! list and are stripped from the result afterwards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub num_groups: usize,
    /// Slots per group, padding included.
    pub group_size: usize,
    /// Expert indices per group, in placement order.
    pub groups: Vec<Vec<usize>>,
    pub group_sums: Vec<u64>,
    /// Concatenation of `groups`.
    pub reordered: Vec<usize>,
}

impl GroupAssignment {
    fn from_groups(groups: Vec<Vec<usize>>, group_size: usize, loads: &[u64]) -> Self {
        let group_sums = groups
            .iter()
            .map(|g| g.iter().map(|&e| loads[e]).sum())
            .collect();
        let reordered = groups.iter().flatten().copied().collect();
        GroupAssignment {
            num_groups: groups.len(),
            group_size,
            groups,
            group_sums,
            reordered,
        }
    }

    /// Relabels positions `0..survivors.len()` into the expert ids in `survivors`.
    pub fn relabel(mut self, survivors: &[usize]) -> Self {
        for g in &mut self.groups {
            for e in g.iter_mut() {
                *e = survivors[*e];
            }
        }
        self.reordered = self.groups.iter().flatten().copied().collect();
        self
    }

    /// Group of every expert id, `None` for experts not placed.
    pub fn group_of(&self, num_experts: usize) -> Vec<Option<usize>> {
        let mut owner = vec![None; num_experts];
        for (g, members) in self.groups.iter().enumerate() {
            for &e in members {
                if e < num_experts {
                    owner[e] = Some(g);
                }
            }
        }
        owner
    }
}

fn check_inputs(loads: &[u64], num_groups: usize) -> Result<()> {
    if num_groups == 0 {
        return Err(Error::invalid("number of groups must be positive"));
    }
    if loads.is_empty() {
        return Err(Error::Empty("load vector"));
    }
    Ok(())
}

fn padded_group_size(n: usize, num_groups: usize) -> usize {
    n.div_ceil(num_groups)
}

pub fn rearrange(loads: &[u64], num_groups: usize) -> Result<GroupAssignment> {
    check_inputs(loads, num_groups)?;
    let n = loads.len();
    let group_size = padded_group_size(n, num_groups);
    let padded = group_size * num_groups;

    let load_of = |i: usize| if i < n { loads[i] } else { 0 };
    let mut order: Vec<usize> = (0..padded).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(load_of(i)), i));

    let mut groups: Vec<Vec<usize>> = vec![Vec::with_capacity(group_size); num_groups];
    let mut sums = vec![0u64; num_groups];
    for idx in order {
        let target = (0..num_groups)
            .filter(|&g| groups[g].len() < group_size)
            .min_by_key(|&g| (sums[g], g))
            .expect("padded slots match the expert count");
        groups[target].push(idx);
        sums[target] += load_of(idx);
    }
    for g in &mut groups {
        g.retain(|&e| e < n);
    }
    Ok(GroupAssignment::from_groups(groups, group_size, loads))
}

/// Default expert-parallel placement: consecutive experts fill group after group.
pub fn contiguous_baseline(loads: &[u64], num_groups: usize) -> Result<GroupAssignment> {
    check_inputs(loads, num_groups)?;
    let n = loads.len();
    let group_size = padded_group_size(n, num_groups);
    let groups = (0..num_groups)
        .map(|g| (g * group_size..((g + 1) * group_size).min(n)).collect())
        .collect();
    Ok(GroupAssignment::from_groups(groups, group_size, loads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceMetrics {
    pub max_group_sum: u64,
    pub min_group_sum: u64,
    /// Population variance of the group sums.
    pub variance: f64,
    /// `max / mean`; 1 when every group is empty.
    pub imbalance_ratio: f64,
}

pub fn balance_metrics(assignment: &GroupAssignment) -> BalanceMetrics {
    let sums = &assignment.group_sums;
    let n = sums.len() as f64;
    let max = sums.iter().copied().max().unwrap_or(0);
    let min = sums.iter().copied().min().unwrap_or(0);
    let mean = sums.iter().map(|&s| s as f64).sum::<f64>() / n;
    let variance = sums.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    BalanceMetrics {
        max_group_sum: max,
        min_group_sum: min,
        variance,
        imbalance_ratio: if mean > 0.0 { max as f64 / mean } else { 1.0 },
    }
}

/// One entry of a placement file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlacement {
    pub layer: usize,
    pub num_groups: usize,
    pub groups: Vec<Vec<usize>>,
    pub group_sums: Vec<u64>,
}

impl LayerPlacement {
    pub fn new(layer: usize, a: &GroupAssignment) -> Self {
        LayerPlacement {
            layer,
            num_groups: a.num_groups,
            groups: a.groups.clone(),
            group_sums: a.group_sums.clone(),
        }
    }

    pub fn assignment(&self) -> GroupAssignment {
        let group_size = self.groups.iter().map(Vec::len).max().unwrap_or(0);
        GroupAssignment {
            num_groups: self.num_groups,
            group_size,
            groups: self.groups.clone(),
            group_sums: self.group_sums.clone(),
            reordered: self.groups.iter().flatten().copied().collect(),
        }
    }
}

pub fn placement_to_json(layers: &[LayerPlacement]) -> String {
    serde_json::to_string_pretty(layers).expect("placement serializes") + "\n"
}

pub fn read_placement(path: &Path) -> Result<Vec<LayerPlacement>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("parsing {}", path.display()),
        source,
    })
}
