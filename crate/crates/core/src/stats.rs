//! Load statistics over expert token counts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::trace::ExpertTokenCounts;

/// Per-expert loads of one layer over some iteration window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadSnapshot {
    pub layer: usize,
    pub loads: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoadStats {
    pub mean: f64,
    pub coefficient_of_variation: f64,
    /// `f64::INFINITY` when the least loaded expert has zero load.
    pub max_min_ratio: f64,
    pub spearman_vs_previous: Option<f64>,
}

pub fn load_stats(snapshot: &LoadSnapshot, previous: Option<&LoadSnapshot>) -> Result<LoadStats> {
    let loads = &snapshot.loads;
    if loads.is_empty() {
        return Err(Error::Empty("load snapshot"));
    }
    let spearman_vs_previous = match previous {
        Some(p) if p.loads.len() != loads.len() => {
            return Err(Error::DimensionMismatch {
                what: "previous snapshot length",
                expected: loads.len(),
                actual: p.loads.len(),
            })
        }
        Some(p) => Some(spearman_u64(loads, &p.loads)),
        None => None,
    };
    let (mean, cov) = mean_cov(loads);
    Ok(LoadStats {
        mean,
        coefficient_of_variation: cov,
        max_min_ratio: max_min_ratio(loads),
        spearman_vs_previous,
    })
}

/// Arithmetic mean and population coefficient of variation (0 when the mean is 0).
pub fn mean_cov(loads: &[u64]) -> (f64, f64) {
    let n = loads.len() as f64;
    let mean = loads.iter().map(|&x| x as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return (0.0, 0.0);
    }
    let var = loads.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt() / mean)
}

pub fn max_min_ratio(loads: &[u64]) -> f64 {
    let max = loads.iter().copied().max().unwrap_or(0);
    let min = loads.iter().copied().min().unwrap_or(0);
    match (max, min) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        (max, min) => max as f64 / min as f64,
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
///
/// Two constant vectors correlate at 1; a constant against a non-constant at 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    if ra == rb {
        return 1.0;
    }
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    match (va == 0.0, vb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0),
    }
}

pub fn spearman_u64(a: &[u64], b: &[u64]) -> f64 {
    let fa: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    spearman(&fa, &fb)
}

/// Sums `counts[iter][layer][expert]` over `iter` in `[iter_begin, iter_end)`.
pub fn window_aggregate(
    trace: &ExpertTokenCounts,
    layer: usize,
    iter_begin: usize,
    iter_end: usize,
) -> Result<LoadSnapshot> {
    check_window(trace, layer, iter_begin, iter_end)?;
    let mut loads = vec![0u64; trace.num_experts()];
    for iter in iter_begin..iter_end {
        for (acc, &c) in loads.iter_mut().zip(trace.row(iter, layer)) {
            *acc += c;
        }
    }
    Ok(LoadSnapshot { layer, loads })
}

fn check_window(trace: &ExpertTokenCounts, layer: usize, begin: usize, end: usize) -> Result<()> {
    if layer >= trace.num_layers() {
        return Err(Error::OutOfRange(format!(
            "layer {layer} of {}",
            trace.num_layers()
        )));
    }
    if begin >= end || end > trace.num_iters() {
        return Err(Error::OutOfRange(format!(
            "iteration window [{begin}, {end}) of {}",
            trace.num_iters()
        )));
    }
    Ok(())
}

/// Per-layer prefix sums over iterations, for O(N) window queries.
#[derive(Clone, Debug)]
pub struct PrefixSums {
    num_iters: usize,
    num_experts: usize,
    /// `[layer][iter + 1][expert]`, flattened per layer.
    layers: Vec<Vec<u64>>,
}

impl PrefixSums {
    pub fn new(trace: &ExpertTokenCounts, exec: Execution) -> Self {
        let n = trace.num_experts();
        let layers = par::map_range(trace.num_layers(), exec, |layer| {
            let mut acc = vec![0u64; (trace.num_iters() + 1) * n];
            for iter in 0..trace.num_iters() {
                let (done, rest) = acc.split_at_mut((iter + 1) * n);
                let prev = &done[iter * n..];
                for ((out, p), c) in rest[..n].iter_mut().zip(prev).zip(trace.row(iter, layer)) {
                    *out = p + c;
                }
            }
            acc
        });
        PrefixSums {
            num_iters: trace.num_iters(),
            num_experts: n,
            layers,
        }
    }

    pub fn num_iters(&self) -> usize {
        self.num_iters
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn window(&self, layer: usize, begin: usize, end: usize) -> Vec<u64> {
        let n = self.num_experts;
        let p = &self.layers[layer];
        p[end * n..(end + 1) * n]
            .iter()
            .zip(&p[begin * n..(begin + 1) * n])
            .map(|(e, b)| e - b)
            .collect()
    }
}

/// Spearman correlation between consecutive non-overlapping windows of
/// length `window`, averaged over layers. Entry `i` compares windows
/// `[i*w, (i+1)*w)` and `[(i+1)*w, (i+2)*w)`.
pub fn consecutive_window_spearman(
    trace: &ExpertTokenCounts,
    window: usize,
    exec: Execution,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let windows = trace.num_iters() / window;
    if windows < 2 {
        return Err(Error::invalid(format!(
            "trace of {} iterations has fewer than two windows of {window}",
            trace.num_iters()
        )));
    }
    let prefix = PrefixSums::new(trace, exec);
    let layers = trace.num_layers();
    Ok(par::map_range(windows - 1, exec, |i| {
        let sum: f64 = (0..layers)
            .map(|l| {
                let a = prefix.window(l, i * window, (i + 1) * window);
                let b = prefix.window(l, (i + 1) * window, (i + 2) * window);
                spearman_u64(&a, &b)
            })
            .sum();
        sum / layers as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(loads: &[u64]) -> LoadSnapshot {
        LoadSnapshot {
            layer: 0,
            loads: loads.to_vec(),
        }
    }

    #[test]
    fn uniform_loads() {
        let s = load_stats(&snap(&[50, 50, 50, 50]), None).unwrap();
        assert_eq!(s.mean, 50.0);
        assert_eq!(s.coefficient_of_variation, 0.0);
        assert_eq!(s.max_min_ratio, 1.0);
        assert_eq!(s.spearman_vs_previous, None);
    }

    #[test]
    fn ratio_and_zero_min() {
        assert_eq!(load_stats(&snap(&[100, 10]), None).unwrap().max_min_ratio, 10.0);
        assert!(load_stats(&snap(&[100, 0]), None).unwrap().max_min_ratio.is_infinite());
    }

    #[test]
    fn spearman_of_scaled_copy() {
        // ranks of [3,1,2] are [3,1,2]; of [30,10,20] also [3,1,2]: d = 0, rho = 1.
        let s = load_stats(&snap(&[3, 1, 2]), Some(&snap(&[30, 10, 20]))).unwrap();
        assert_eq!(s.spearman_vs_previous, Some(1.0));
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // Classic d^2 formula without ties: [1,2,3,4] vs [1,3,2,4] -> 1 - 6*2/(4*15) = 0.8
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn stats_errors() {
        assert!(load_stats(&snap(&[]), None).is_err());
        assert!(load_stats(&snap(&[1, 2]), Some(&snap(&[1]))).is_err());
    }

    fn trace_2x1x2() -> ExpertTokenCounts {
        ExpertTokenCounts::from_rows(&[vec![vec![1, 2]], vec![vec![3, 0]]]).unwrap()
    }

    #[test]
    fn window_of_one_is_the_row() {
        let t = trace_2x1x2();
        assert_eq!(window_aggregate(&t, 0, 1, 2).unwrap().loads, vec![3, 0]);
    }

    #[test]
    fn window_adds_rows() {
        let t = ExpertTokenCounts::from_flat(2, 1, 2, 3, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(window_aggregate(&t, 0, 0, 2).unwrap().loads, vec![4, 6]);
    }

    #[test]
    fn window_range_errors() {
        let t = trace_2x1x2();
        assert!(window_aggregate(&t, 0, 1, 1).is_err());
        assert!(window_aggregate(&t, 0, 0, 3).is_err());
        assert!(window_aggregate(&t, 1, 0, 1).is_err());
    }

    fn arb_trace() -> impl Strategy<Value = ExpertTokenCounts> {
        (1usize..8, 1usize..4, 1usize..6).prop_flat_map(|(it, l, e)| {
            proptest::collection::vec(0u64..1000, it * l * e).prop_map(move |counts| {
                ExpertTokenCounts::from_flat(it, l, e, 0, counts).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn full_window_matches_naive_column_sums(t in arb_trace()) {
            let prefix = PrefixSums::new(&t, Execution::Parallel);
            for layer in 0..t.num_layers() {
                let mut naive = vec![0u64; t.num_experts()];
                for e in 0..t.num_experts() {
                    for i in 0..t.num_iters() {
                        naive[e] += t.get(i, layer, e);
                    }
                }
                let agg = window_aggregate(&t, layer, 0, t.num_iters()).unwrap();
                prop_assert_eq!(&agg.loads, &naive);
                prop_assert_eq!(prefix.window(layer, 0, t.num_iters()), naive);
            }
        }

        #[test]
        fn window_is_additive(t in arb_trace(), a in 0usize..8, b in 0usize..8, c in 0usize..8) {
            let mut v = [a % (t.num_iters() + 1), b % (t.num_iters() + 1), c % (t.num_iters() + 1)];
            v.sort();
            prop_assume!(v[0] < v[1] && v[1] < v[2]);
            let left = window_aggregate(&t, 0, v[0], v[1]).unwrap().loads;
            let right = window_aggregate(&t, 0, v[1], v[2]).unwrap().loads;
            let whole = window_aggregate(&t, 0, v[0], v[2]).unwrap().loads;
            let sum: Vec<u64> = left.iter().zip(&right).map(|(x, y)| x + y).collect();
            prop_assert_eq!(sum, whole);
        }

        #[test]
        fn spearman_self_and_reverse(mut xs in proptest::collection::hash_set(0u64..10_000, 2..30)) {
            let v: Vec<u64> = xs.drain().collect();
            prop_assert_eq!(spearman_u64(&v, &v), 1.0);
            let mut sorted = v.clone();
            sorted.sort();
            let reversed: Vec<u64> = sorted.iter().rev().copied().collect();
            prop_assert!((spearman_u64(&sorted, &reversed) + 1.0).abs() < 1e-12);
        }

        #[test]
        fn stats_are_permutation_invariant(v in proptest::collection::vec(0u64..500, 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut p = v.clone();
            p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = load_stats(&snap(&v), None).unwrap();
            let b = load_stats(&snap(&p), None).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
            prop_assert!((a.coefficient_of_variation - b.coefficient_of_variation).abs() < 1e-9);
            prop_assert_eq!(a.max_min_ratio, b.max_min_ratio);
        }
    }
}
