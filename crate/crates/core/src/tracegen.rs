//! Synthetic routing traces with controllable imbalance and dynamics.
//!
//! Each token picks `top_k` distinct experts, drawn one after another
//! proportionally to a per-layer share vector. Layers use independent
//! permutations of the share vector and independent random streams derived
//! from the seed, so generation is deterministic and parallel over layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};
use crate::kvfile::KvFile;
use crate::par::{self, Execution};
use crate::trace::{ExpertTokenCounts, ModelStructure};

pub use crate::trace::{read_trace, write_trace};

pub const DEFAULT_ZIPF_S: f64 = 1.2;
pub const DEFAULT_DRIFT: f64 = 0.05;

/// Standard deviation of the per-iteration log-share random walk during the
/// transition phase of a two-phase trace.
pub const TRANSITION_VOLATILITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum LoadShape {
    Uniform,
    Zipf { s: f64 },
    /// Volatile shares for `transition_iters` iterations, then a fixed
    /// zipf(`s`) share vector with bounded per-iteration jitter.
    TwoPhase {
        s: f64,
        transition_iters: usize,
        drift: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceGenSpec {
    pub structure: ModelStructure,
    pub num_iterations: usize,
    pub tokens_per_iter: u64,
    pub distribution: LoadShape,
    pub seed: u64,
}

impl TraceGenSpec {
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "experts",
        "top_k",
        "iterations",
        "tokens_per_iter",
        "distribution",
        "zipf_s",
        "transition_iters",
        "drift",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        if self.num_iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.tokens_per_iter == 0 {
            return Err(Error::invalid("tokens_per_iter must be positive"));
        }
        let check_s = |s: f64| {
            if s.is_finite() && s > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("zipf exponent must be positive, got {s}")))
            }
        };
        match self.distribution {
            LoadShape::Uniform => Ok(()),
            LoadShape::Zipf { s } => check_s(s),
            LoadShape::TwoPhase {
                s,
                transition_iters,
                drift,
            } => {
                check_s(s)?;
                if transition_iters >= self.num_iterations {
                    return Err(Error::invalid(format!(
                        "transition_iters {transition_iters} must be below iterations {}",
                        self.num_iterations
                    )));
                }
                if !(0.0..=1.0).contains(&drift) {
                    return Err(Error::invalid(format!("drift must lie in [0, 1], got {drift}")));
                }
                Ok(())
            }
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.deny_unknown(Self::KEYS)?;
        let structure = ModelStructure {
            num_layers: kv.require("layers")?,
            experts_per_layer: kv.require("experts")?,
            top_k: kv.require("top_k")?,
            hidden_size: 1,
            ffn_hidden_size: 1,
            num_attention_heads: 0,
            attention_hidden_size: 0,
        };
        let num_iterations: usize = kv.require("iterations")?;
        let s = kv.get_or("zipf_s", DEFAULT_ZIPF_S)?;
        let kind: String = kv.require("distribution")?;
        let distribution = match kind.as_str() {
            "uniform" => LoadShape::Uniform,
            "zipf" => LoadShape::Zipf { s },
            "two_phase" => LoadShape::TwoPhase {
                s,
                transition_iters: kv.get_or("transition_iters", num_iterations / 4)?,
                drift: kv.get_or("drift", DEFAULT_DRIFT)?,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown distribution `{other}` (expected uniform, zipf or two_phase)"
                )))
            }
        };
        let spec = TraceGenSpec {
            structure,
            num_iterations,
            tokens_per_iter: kv.require("tokens_per_iter")?,
            distribution,
            seed: kv.get_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    /// Fully resolved key/value view, defaults included.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let st = &self.structure;
        m.insert("layers".into(), st.num_layers.to_string());
        m.insert("experts".into(), st.experts_per_layer.to_string());
        m.insert("top_k".into(), st.top_k.to_string());
        m.insert("iterations".into(), self.num_iterations.to_string());
        m.insert("tokens_per_iter".into(), self.tokens_per_iter.to_string());
        m.insert("seed".into(), self.seed.to_string());
        match self.distribution {
            LoadShape::Uniform => {
                m.insert("distribution".into(), "uniform".into());
            }
            LoadShape::Zipf { s } => {
                m.insert("distribution".into(), "zipf".into());
                m.insert("zipf_s".into(), s.to_string());
            }
            LoadShape::TwoPhase {
                s,
                transition_iters,
                drift,
            } => {
                m.insert("distribution".into(), "two_phase".into());
                m.insert("zipf_s".into(), s.to_string());
                m.insert("transition_iters".into(), transition_iters.to_string());
                m.insert("drift".into(), drift.to_string());
            }
        }
        m
    }
}

/// Normalized zipf shares: `share[i] ∝ (i + 1)^(-s)`.
pub fn zipf_shares(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn generate(spec: &TraceGenSpec) -> Result<ExpertTokenCounts> {
    generate_with(spec, Execution::default())
}

pub fn generate_with(spec: &TraceGenSpec, exec: Execution) -> Result<ExpertTokenCounts> {
    spec.validate()?;
    let st = &spec.structure;
    let (iters, layers, n) = (spec.num_iterations, st.num_layers, st.experts_per_layer);

    let per_layer = par::map_range(layers, exec, |layer| generate_layer(spec, layer));

    let mut counts = vec![0u64; iters * layers * n];
    for (layer, rows) in per_layer.iter().enumerate() {
        for iter in 0..iters {
            let dst = (iter * layers + layer) * n;
            counts[dst..dst + n].copy_from_slice(&rows[iter * n..(iter + 1) * n]);
        }
    }
    ExpertTokenCounts::from_flat(iters, layers, n, spec.tokens_per_iter * st.top_k as u64, counts)
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

fn generate_layer(spec: &TraceGenSpec, layer: usize) -> Vec<u64> {
    let st = &spec.structure;
    let n = st.experts_per_layer;
    let mut rng = layer_rng(spec.seed, layer);
    let mut sampler = SlotSampler::new(n, st.top_k);
    let mut out = vec![0u64; spec.num_iterations * n];

    let permuted = |rng: &mut ChaCha8Rng, s: f64| {
        let mut shares = zipf_shares(n, s);
        shares.shuffle(rng);
        shares
    };

    match spec.distribution {
        LoadShape::Uniform => {
            sampler.set_shares(&vec![1.0; n]);
            for row in out.chunks_mut(n) {
                sampler.sample_iteration(&mut rng, spec.tokens_per_iter, row);
            }
        }
        LoadShape::Zipf { s } => {
            let shares = permuted(&mut rng, s);
            sampler.set_shares(&shares);
            for row in out.chunks_mut(n) {
                sampler.sample_iteration(&mut rng, spec.tokens_per_iter, row);
            }
        }
        LoadShape::TwoPhase {
            s,
            transition_iters,
            drift,
        } => {
            let stable = permuted(&mut rng, s);
            let mut log_shares: Vec<f64> = permuted(&mut rng, s).iter().map(|w| w.ln()).collect();
            let step = Normal::new(0.0, TRANSITION_VOLATILITY).expect("valid normal");
            let mut shares = vec![0.0; n];
            for (iter, row) in out.chunks_mut(n).enumerate() {
                if iter < transition_iters {
                    for (w, ls) in shares.iter_mut().zip(log_shares.iter_mut()) {
                        *ls += step.sample(&mut rng);
                        *w = ls.exp();
                    }
                } else {
                    for (w, base) in shares.iter_mut().zip(&stable) {
                        *w = base * (1.0 + drift * rng.random_range(-1.0..=1.0));
                    }
                }
                sampler.set_shares(&shares);
                sampler.sample_iteration(&mut rng, spec.tokens_per_iter, row);
            }
        }
    }
    out
}

/// Draws `top_k` distinct experts per token, successively proportional to shares.
struct SlotSampler {
    top_k: usize,
    shares: Vec<f64>,
    cumulative: Vec<f64>,
    chosen: Vec<usize>,
}

impl SlotSampler {
    const MAX_REJECTIONS: usize = 16;

    fn new(n: usize, top_k: usize) -> Self {
        SlotSampler {
            top_k,
            shares: vec![0.0; n],
            cumulative: vec![0.0; n],
            chosen: Vec::with_capacity(top_k),
        }
    }

    fn set_shares(&mut self, shares: &[f64]) {
        let mut acc = 0.0;
        for (i, &w) in shares.iter().enumerate() {
            self.shares[i] = w;
            acc += w;
            self.cumulative[i] = acc;
        }
    }

    fn sample_iteration(&mut self, rng: &mut ChaCha8Rng, tokens: u64, row: &mut [u64]) {
        let n = row.len();
        if self.top_k == n {
            row.iter_mut().for_each(|c| *c += tokens);
            return;
        }
        for _ in 0..tokens {
            self.chosen.clear();
            for _ in 0..self.top_k {
                let e = self.draw_distinct(rng);
                self.chosen.push(e);
                row[e] += 1;
            }
        }
    }

    fn draw_distinct(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty shares");
        let n = self.cumulative.len();
        // Rejection is exact for successive sampling; the linear scan after
        // repeated rejections samples the same conditional distribution.
        for _ in 0..Self::MAX_REJECTIONS {
            let u = rng.random::<f64>() * total;
            let e = self.cumulative.partition_point(|&c| c <= u).min(n - 1);
            if !self.chosen.contains(&e) {
                return e;
            }
        }
        let remaining: f64 = (0..n)
            .filter(|e| !self.chosen.contains(e))
            .map(|e| self.shares[e])
            .sum();
        let mut u = rng.random::<f64>() * remaining;
        let mut last = n;
        for e in (0..n).filter(|e| !self.chosen.contains(e)) {
            last = e;
            if u < self.shares[e] {
                return e;
            }
            u -= self.shares[e];
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{max_min_ratio, spearman_u64, window_aggregate};
    use crate::trace::validate_trace;

    fn spec(layers: usize, experts: usize, top_k: usize, iters: usize, s: u64, d: LoadShape) -> TraceGenSpec {
        TraceGenSpec {
            structure: ModelStructure {
                num_layers: layers,
                experts_per_layer: experts,
                top_k,
                hidden_size: 1,
                ffn_hidden_size: 1,
                num_attention_heads: 0,
                attention_hidden_size: 0,
            },
            num_iterations: iters,
            tokens_per_iter: s,
            distribution: d,
            seed: 42,
        }
    }

    #[test]
    fn uniform_rows_conserve_and_center_on_expectation() {
        let sp = spec(2, 4, 2, 400, 100, LoadShape::Uniform);
        let t = generate(&sp).unwrap();
        validate_trace(&t, &sp.structure).unwrap();
        assert_eq!(t.slots_per_iter(), 200);
        for layer in 0..2 {
            let agg = window_aggregate(&t, layer, 0, 400).unwrap();
            for &l in &agg.loads {
                let mean = l as f64 / 400.0;
                // expected 50 per iteration; sd of the 400-iteration mean is ~0.25
                assert!((mean - 50.0).abs() < 1.5, "mean {mean}");
            }
        }
    }

    #[test]
    fn zipf_aggregate_is_orders_of_magnitude_imbalanced() {
        let shares = zipf_shares(64, 1.2);
        // Independent check of the target shape: head/tail share ratio 64^1.2.
        let ratio = shares[0] / shares[63];
        assert!((ratio - 64f64.powf(1.2)).abs() < 1e-9);
        assert!(ratio > 147.0 && ratio < 148.0);

        let sp = spec(3, 64, 2, 200, 1024, LoadShape::Zipf { s: 1.2 });
        let t = generate(&sp).unwrap();
        validate_trace(&t, &sp.structure).unwrap();
        for layer in 0..3 {
            let agg = window_aggregate(&t, layer, 0, 200).unwrap();
            let r = max_min_ratio(&agg.loads);
            assert!(r > 50.0, "layer {layer} ratio {r}");
        }
    }

    #[test]
    fn layers_get_different_permutations() {
        let sp = spec(2, 16, 2, 50, 512, LoadShape::Zipf { s: 1.2 });
        let t = generate(&sp).unwrap();
        let a = window_aggregate(&t, 0, 0, 50).unwrap().loads;
        let b = window_aggregate(&t, 1, 0, 50).unwrap().loads;
        assert!(spearman_u64(&a, &b) < 0.9);
    }

    #[test]
    fn two_phase_correlation_profile() {
        let d = LoadShape::TwoPhase {
            s: 1.2,
            transition_iters: 200,
            drift: DEFAULT_DRIFT,
        };
        let sp = spec(2, 16, 2, 600, 512, d);
        let t = generate(&sp).unwrap();
        validate_trace(&t, &sp.structure).unwrap();
        let snap = |layer, t0: usize| window_aggregate(&t, layer, t0, t0 + 50).unwrap().loads;
        for layer in 0..2 {
            let early = (0..150).step_by(10).any(|t0| spearman_u64(&snap(layer, t0), &snap(layer, t0 + 50)) < 0.8);
            assert!(early, "layer {layer}: no volatile early window");
            for t0 in (400..500).step_by(10) {
                let r = spearman_u64(&snap(layer, t0), &snap(layer, t0 + 50));
                assert!(r > 0.95, "layer {layer} t {t0}: {r}");
            }
        }
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let d = LoadShape::TwoPhase {
            s: 1.0,
            transition_iters: 10,
            drift: 0.1,
        };
        let sp = spec(4, 8, 2, 40, 64, d);
        let a = generate_with(&sp, Execution::Parallel).unwrap();
        let b = generate_with(&sp, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let mut other = sp.clone();
        other.seed += 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn top_k_equal_to_experts_fills_every_slot() {
        let sp = spec(1, 3, 3, 5, 10, LoadShape::Zipf { s: 2.0 });
        let t = generate(&sp).unwrap();
        assert!(t.as_flat().iter().all(|&c| c == 10));
    }

    #[test]
    fn invalid_specs() {
        let mut sp = spec(1, 4, 2, 10, 10, LoadShape::Zipf { s: 0.0 });
        assert!(generate(&sp).is_err());
        sp.distribution = LoadShape::TwoPhase {
            s: 1.0,
            transition_iters: 10,
            drift: 0.1,
        };
        assert!(generate(&sp).is_err());
        sp.distribution = LoadShape::Uniform;
        sp.structure.experts_per_layer = 0;
        assert!(generate(&sp).is_err());
        sp.structure.experts_per_layer = 4;
        sp.num_iterations = 0;
        assert!(generate(&sp).is_err());
    }

    #[test]
    fn spec_file_parsing() {
        let text = "layers = 2\nexperts = 8\ntop_k = 2\niterations = 30\ntokens_per_iter = 64\ndistribution = two_phase\ntransition_iters = 10\nseed = 9\n";
        let kv = KvFile::parse(Path::new("spec.txt"), text).unwrap();
        let sp = TraceGenSpec::from_kv(&kv).unwrap();
        assert_eq!(
            sp.distribution,
            LoadShape::TwoPhase {
                s: DEFAULT_ZIPF_S,
                transition_iters: 10,
                drift: DEFAULT_DRIFT
            }
        );
        assert_eq!(sp.to_map()["drift"], DEFAULT_DRIFT.to_string());

        let missing = KvFile::parse(Path::new("spec.txt"), "layers = 2\ntop_k = 2\n").unwrap();
        let err = TraceGenSpec::from_kv(&missing).unwrap_err();
        assert!(matches!(err, Error::MissingKey { ref key, .. } if key == "experts"), "{err}");
    }
}
