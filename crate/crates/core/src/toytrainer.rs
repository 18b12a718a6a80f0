//! A desk-scale MoE classifier whose routing trace can be recorded.
//!
//! The model is `input projection -> L residual MoE layers -> output head`.
//! Each MoE layer routes every token to its top-k experts by softmax gate
//! probability; expert outputs are combined with the selected gates
//! renormalized to sum to one. Experts are two-matrix tanh MLPs with no
//! capacity limit. The auxiliary balancing term is summed over layers.
//! Gradients are derived by hand and checked against
//! central finite differences by [`grad_check`]. The discrete top-k choice
//! is treated as a constant when differentiating.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kvfile::KvFile;
use crate::par::{self, Execution};
use crate::trace::{ExpertTokenCounts, ModelStructure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLoss {
    None,
    /// `c * N * sum_i f_i * P_i` over the whole batch.
    TokenLevel,
    /// The token-level expression per sequence, averaged over sequences.
    SequenceWise,
}

impl std::str::FromStr for AuxLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AuxLoss::None),
            "token_level" => Ok(AuxLoss::TokenLevel),
            "sequence_wise" => Ok(AuxLoss::SequenceWise),
            other => Err(format!("unknown aux loss `{other}` (none, token_level, sequence_wise)")),
        }
    }
}

impl std::fmt::Display for AuxLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxLoss::None => "none",
            AuxLoss::TokenLevel => "token_level",
            AuxLoss::SequenceWise => "sequence_wise",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub structure: ModelStructure,
    pub aux_loss: AuxLoss,
    pub aux_coefficient: f64,
    pub learning_rate: f64,
    /// Tokens per iteration.
    pub batch_tokens: usize,
    pub sequence_length: usize,
    pub num_iterations: usize,
    pub seed: u64,
    /// Norm of every initial router column.
    pub router_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            structure: ModelStructure {
                num_layers: 4,
                experts_per_layer: 16,
                top_k: 4,
                hidden_size: 16,
                ffn_hidden_size: 32,
                num_attention_heads: 0,
                attention_hidden_size: 0,
            },
            aux_loss: AuxLoss::None,
            aux_coefficient: 0.0,
            learning_rate: 0.02,
            batch_tokens: 64,
            sequence_length: 16,
            num_iterations: 2000,
            seed: 7,
            router_init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "experts",
        "top_k",
        "hidden_size",
        "ffn_hidden_size",
        "aux_loss",
        "aux_coefficient",
        "learning_rate",
        "batch_tokens",
        "sequence_length",
        "iterations",
        "seed",
        "router_init_scale",
        "num_classes",
        "noise_scale",
        "task_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        if !(self.aux_coefficient >= 0.0 && self.aux_coefficient.is_finite()) {
            return Err(Error::invalid(format!(
                "aux_coefficient must be a finite value >= 0, got {}",
                self.aux_coefficient
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_tokens == 0 || self.sequence_length == 0 {
            return Err(Error::invalid("batch_tokens and sequence_length must be positive"));
        }
        if !self.batch_tokens.is_multiple_of(self.sequence_length) {
            return Err(Error::invalid(format!(
                "sequence_length {} does not divide batch_tokens {}",
                self.sequence_length, self.batch_tokens
            )));
        }
        if !(self.router_init_scale >= 0.0 && self.router_init_scale.is_finite()) {
            return Err(Error::invalid("router_init_scale must be >= 0"));
        }
        Ok(())
    }

    /// Reads a training config plus the synthetic task it trains on.
    /// Every key is optional and falls back to the defaults.
    pub fn from_kv(kv: &KvFile) -> Result<(Self, TaskSpec)> {
        kv.deny_unknown(Self::KEYS)?;
        let d = TrainConfig::default();
        let ds = &d.structure;
        let structure = ModelStructure {
            num_layers: kv.get_or("layers", ds.num_layers)?,
            experts_per_layer: kv.get_or("experts", ds.experts_per_layer)?,
            top_k: kv.get_or("top_k", ds.top_k)?,
            hidden_size: kv.get_or("hidden_size", ds.hidden_size)?,
            ffn_hidden_size: kv.get_or("ffn_hidden_size", ds.ffn_hidden_size)?,
            num_attention_heads: 0,
            attention_hidden_size: 0,
        };
        let cfg = TrainConfig {
            structure,
            aux_loss: kv.get_or("aux_loss", d.aux_loss)?,
            aux_coefficient: kv.get_or("aux_coefficient", d.aux_coefficient)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            batch_tokens: kv.get_or("batch_tokens", d.batch_tokens)?,
            sequence_length: kv.get_or("sequence_length", d.sequence_length)?,
            num_iterations: kv.get_or("iterations", d.num_iterations)?,
            seed: kv.get_or("seed", d.seed)?,
            router_init_scale: kv.get_or("router_init_scale", d.router_init_scale)?,
        };
        cfg.validate()?;
        let td = TaskSpec::default();
        let task = TaskSpec {
            num_classes: kv.get_or("num_classes", td.num_classes)?,
            noise_scale: kv.get_or("noise_scale", td.noise_scale)?,
            seed: kv.get_or("task_seed", td.seed)?,
        };
        Ok((cfg, task))
    }

    pub fn read(path: &Path) -> Result<(Self, TaskSpec)> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_map(&self, task: &TaskSpec) -> BTreeMap<String, String> {
        let st = &self.structure;
        [
            ("layers", st.num_layers.to_string()),
            ("experts", st.experts_per_layer.to_string()),
            ("top_k", st.top_k.to_string()),
            ("hidden_size", st.hidden_size.to_string()),
            ("ffn_hidden_size", st.ffn_hidden_size.to_string()),
            ("aux_loss", self.aux_loss.to_string()),
            ("aux_coefficient", self.aux_coefficient.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("sequence_length", self.sequence_length.to_string()),
            ("iterations", self.num_iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("router_init_scale", self.router_init_scale.to_string()),
            ("num_classes", task.num_classes.to_string()),
            ("noise_scale", task.noise_scale.to_string()),
            ("task_seed", task.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Parameters from which a [`SyntheticTask`] is built.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 32,
            noise_scale: 1.0,
            seed: 11,
        }
    }
}

/// Gaussian clusters in `hidden_size` dimensions, one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub cluster_centers: Array2<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(spec: &TaskSpec, hidden_size: usize) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::invalid("the synthetic task needs at least two classes"));
        }
        if !(spec.noise_scale > 0.0 && spec.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers = Array2::from_shape_fn((spec.num_classes, hidden_size), |_| {
            StandardNormal.sample(&mut rng)
        });
        let task = SyntheticTask {
            num_classes: spec.num_classes,
            cluster_centers: centers,
            noise_scale: spec.noise_scale,
            seed: spec.seed,
        };
        task.validate(hidden_size)?;
        Ok(task)
    }

    pub fn validate(&self, hidden_size: usize) -> Result<()> {
        if self.cluster_centers.dim() != (self.num_classes, hidden_size) {
            return Err(Error::invalid("cluster centers do not match num_classes x hidden_size"));
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.cluster_centers.row(a) == self.cluster_centers.row(b) {
                    return Err(Error::invalid(format!("cluster centers {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }

    /// `tokens` samples: uniformly drawn class, center plus Gaussian noise.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, tokens: usize) -> (Array2<f64>, Vec<usize>) {
        let hidden = self.cluster_centers.ncols();
        let mut x = Array2::zeros((tokens, hidden));
        let mut labels = Vec::with_capacity(tokens);
        for mut row in x.rows_mut() {
            let class = rng.random_range(0..self.num_classes);
            labels.push(class);
            for (v, c) in row.iter_mut().zip(self.cluster_centers.row(class)) {
                let z: f64 = StandardNormal.sample(rng);
                *v = c + self.noise_scale * z;
            }
        }
        (x, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// `[hidden × ffn_hidden]`
    pub up: Array2<f64>,
    /// `[ffn_hidden × hidden]`
    pub down: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `[hidden × N]`
    pub router: Array2<f64>,
    pub experts: Vec<Expert>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyMoEState {
    /// `[hidden × hidden]`
    pub input_projection: Array2<f64>,
    pub layers: Vec<MoeLayer>,
    /// `[hidden × num_classes]`
    pub output_head: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Rescales every column to the same norm so no expert starts favored.
fn equal_norm_columns(mut m: Array2<f64>, norm: f64) -> Array2<f64> {
    for mut col in m.columns_mut() {
        let len = col.dot(&col).sqrt();
        if len > 0.0 {
            col.mapv_inplace(|v| v * norm / len);
        }
    }
    m
}

impl ToyMoEState {
    pub fn init(config: &TrainConfig, num_classes: usize) -> Self {
        let st = &config.structure;
        let (h, f, n) = (st.hidden_size, st.ffn_hidden_size, st.experts_per_layer);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let inv = |d: usize| 1.0 / (d as f64).sqrt();
        let input_projection = gaussian(&mut rng, h, h, inv(h));
        let layers = (0..st.num_layers)
            .map(|_| MoeLayer {
                router: equal_norm_columns(gaussian(&mut rng, h, n, 1.0), config.router_init_scale),
                experts: (0..n)
                    .map(|_| Expert {
                        up: gaussian(&mut rng, h, f, inv(h)),
                        down: gaussian(&mut rng, f, h, 0.5 * inv(f)),
                    })
                    .collect(),
            })
            .collect();
        let output_head = gaussian(&mut rng, h, num_classes, inv(h));
        ToyMoEState {
            input_projection,
            layers,
            output_head,
        }
    }

    /// A state of the same shape filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        ToyMoEState {
            input_projection: z(&self.input_projection),
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    router: z(&l.router),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| Expert {
                            up: z(&e.up),
                            down: z(&e.down),
                        })
                        .collect(),
                })
                .collect(),
            output_head: z(&self.output_head),
        }
    }

    /// Parameter matrices in a fixed order.
    pub fn matrices(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.input_projection];
        for l in &self.layers {
            out.push(&l.router);
            for e in &l.experts {
                out.push(&e.up);
                out.push(&e.down);
            }
        }
        out.push(&self.output_head);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.input_projection];
        for l in &mut self.layers {
            out.push(&mut l.router);
            for e in &mut l.experts {
                out.push(&mut e.up);
                out.push(&mut e.down);
            }
        }
        out.push(&mut self.output_head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for m in self.matrices_mut() {
            if index < m.len() {
                let cols = m.ncols();
                return &mut m[(index / cols, index % cols)];
            }
            index -= m.len();
        }
        panic!("parameter index out of range");
    }

    fn param(&self, mut index: usize) -> f64 {
        for m in self.matrices() {
            if index < m.len() {
                return m[(index / m.ncols(), index % m.ncols())];
            }
            index -= m.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    fn sgd_step(&mut self, grad: &ToyMoEState, lr: f64) {
        for (p, g) in self.matrices_mut().into_iter().zip(grad.matrices()) {
            p.scaled_add(-lr, g);
        }
    }
}

/// Per-token routing: top-k expert indices (descending gate order) and the
/// full softmax gate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub assignments: Vec<Vec<usize>>,
    pub gate_probs: Array2<f64>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Top-k of each gate row, ties to the lower expert index.
pub fn top_k_indices(gate_probs: &Array2<f64>, top_k: usize) -> Vec<Vec<usize>> {
    gate_probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(top_k);
            idx
        })
        .collect()
}

pub fn route(hidden_states: ArrayView2<'_, f64>, router_weights: &Array2<f64>, top_k: usize) -> Result<Routing> {
    if hidden_states.ncols() != router_weights.nrows() {
        return Err(Error::DimensionMismatch {
            what: "router input width",
            expected: router_weights.nrows(),
            actual: hidden_states.ncols(),
        });
    }
    if top_k == 0 || top_k > router_weights.ncols() {
        return Err(Error::invalid(format!(
            "top_k {top_k} outside 1..={}",
            router_weights.ncols()
        )));
    }
    let logits = hidden_states.dot(router_weights);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router logits"));
    }
    let gate_probs = softmax_rows(&logits);
    Ok(Routing {
        assignments: top_k_indices(&gate_probs, top_k),
        gate_probs,
    })
}

/// Fraction of (token, slot) assignments per expert.
fn slot_fractions(assignments: &[Vec<usize>], n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n];
    let slots: usize = assignments.iter().map(Vec::len).sum();
    for a in assignments {
        for &e in a {
            f[e] += 1.0;
        }
    }
    if slots > 0 {
        f.iter_mut().for_each(|v| *v /= slots as f64);
    }
    f
}

fn check_aux_inputs(gate_probs: &Array2<f64>, assignments: &[Vec<usize>], n: usize) -> Result<()> {
    if gate_probs.ncols() != n || gate_probs.nrows() != assignments.len() {
        return Err(Error::DimensionMismatch {
            what: "gate matrix",
            expected: n,
            actual: gate_probs.ncols(),
        });
    }
    if gate_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gate probabilities"));
    }
    Ok(())
}

fn token_level_value(gate_probs: ArrayView2<'_, f64>, assignments: &[Vec<usize>], c: f64, n: usize) -> f64 {
    let f = slot_fractions(assignments, n);
    let p = gate_probs.mean_axis(Axis(0)).expect("non-empty batch");
    c * n as f64 * f.iter().zip(p.iter()).map(|(f, p)| f * p).sum::<f64>()
}

pub fn aux_loss_token_level(gate_probs: &Array2<f64>, assignments: &[Vec<usize>], c: f64, n: usize) -> Result<f64> {
    check_aux_inputs(gate_probs, assignments, n)?;
    if assignments.is_empty() {
        return Err(Error::Empty("batch"));
    }
    Ok(token_level_value(gate_probs.view(), assignments, c, n))
}

pub fn aux_loss_sequence_wise(
    gate_probs: &Array2<f64>,
    assignments: &[Vec<usize>],
    c: f64,
    n: usize,
    sequence_length: usize,
) -> Result<f64> {
    check_aux_inputs(gate_probs, assignments, n)?;
    let s = assignments.len();
    if s == 0 {
        return Err(Error::Empty("batch"));
    }
    if sequence_length == 0 || !s.is_multiple_of(sequence_length) {
        return Err(Error::invalid(format!(
            "sequence_length {sequence_length} does not divide {s} tokens"
        )));
    }
    let sequences = s / sequence_length;
    let total: f64 = (0..sequences)
        .map(|q| {
            let r = q * sequence_length..(q + 1) * sequence_length;
            token_level_value(gate_probs.slice(s![r.clone(), ..]), &assignments[r], c, n)
        })
        .sum();
    Ok(total / sequences as f64)
}

/// Per-token coefficient rows `d aux / d gate_prob[t, i]` for one layer.
fn aux_gate_grad(config: &TrainConfig, assignments: &[Vec<usize>]) -> Option<Array2<f64>> {
    let n = config.structure.experts_per_layer;
    let c = config.aux_coefficient;
    let s = assignments.len();
    let group = match config.aux_loss {
        AuxLoss::None => return None,
        _ if c == 0.0 => return None,
        AuxLoss::TokenLevel => s,
        AuxLoss::SequenceWise => config.sequence_length,
    };
    let groups = s / group;
    let mut g = Array2::zeros((s, n));
    for q in 0..groups {
        let r = q * group..(q + 1) * group;
        let f = slot_fractions(&assignments[r.clone()], n);
        // d/dg[t,i] of c*N*sum f_i * mean_t g[t,i], averaged over groups
        let scale = c * n as f64 / (group as f64 * groups as f64);
        for t in r {
            for i in 0..n {
                g[(t, i)] = scale * f[i];
            }
        }
    }
    Some(g)
}

struct ExpertCache {
    tokens: Vec<usize>,
    /// Position of this expert in each token's assignment list.
    slots: Vec<usize>,
    input: Array2<f64>,
    act: Array2<f64>,
    out: Array2<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    routing: Routing,
    /// Renormalized gates of the selected experts, parallel to `assignments`.
    combine: Vec<Vec<f64>>,
    experts: Vec<ExpertCache>,
}

struct ForwardPass {
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    final_hidden: Array2<f64>,
    probs: Array2<f64>,
    task_loss: f64,
    aux_loss: f64,
}

fn forward(
    state: &ToyMoEState,
    config: &TrainConfig,
    x: &Array2<f64>,
    labels: &[usize],
    fixed_routing: Option<&[LayerAssignments]>,
    exec: Execution,
) -> Result<ForwardPass> {
    let st = &config.structure;
    let n = st.experts_per_layer;
    let mut hidden = x.dot(&state.input_projection);
    let mut layers = Vec::with_capacity(state.layers.len());
    let mut aux_total = 0.0;

    for (l, layer) in state.layers.iter().enumerate() {
        let mut routing = route(hidden.view(), &layer.router, st.top_k)?;
        if let Some(fixed) = fixed_routing {
            routing.assignments = fixed[l].clone();
        }
        let combine: Vec<Vec<f64>> = routing
            .assignments
            .iter()
            .enumerate()
            .map(|(t, sel)| {
                let z: f64 = sel.iter().map(|&e| routing.gate_probs[(t, e)]).sum();
                sel.iter().map(|&e| routing.gate_probs[(t, e)] / z).collect()
            })
            .collect();

        let mut token_lists = vec![(Vec::new(), Vec::new()); n];
        for (t, sel) in routing.assignments.iter().enumerate() {
            for (slot, &e) in sel.iter().enumerate() {
                token_lists[e].0.push(t);
                token_lists[e].1.push(slot);
            }
        }
        let experts = par::map_range(n, exec, |e| {
            let (tokens, slots) = token_lists[e].clone();
            let input = hidden.select(Axis(0), &tokens);
            let act = input.dot(&layer.experts[e].up).mapv(f64::tanh);
            let out = act.dot(&layer.experts[e].down);
            ExpertCache {
                tokens,
                slots,
                input,
                act,
                out,
            }
        });

        let mut next = hidden.clone();
        for ec in &experts {
            for (r, (&t, &slot)) in ec.tokens.iter().zip(&ec.slots).enumerate() {
                let g = combine[t][slot];
                next.row_mut(t).scaled_add(g, &ec.out.row(r));
            }
        }

        aux_total += match config.aux_loss {
            AuxLoss::None => 0.0,
            _ if config.aux_coefficient == 0.0 => 0.0,
            AuxLoss::TokenLevel => {
                token_level_value(routing.gate_probs.view(), &routing.assignments, config.aux_coefficient, n)
            }
            AuxLoss::SequenceWise => aux_loss_sequence_wise(
                &routing.gate_probs,
                &routing.assignments,
                config.aux_coefficient,
                n,
                config.sequence_length,
            )?,
        };

        layers.push(LayerCache {
            input: std::mem::replace(&mut hidden, next),
            routing,
            combine,
            experts,
        });
    }

    let logits = hidden.dot(&state.output_head);
    let probs = softmax_rows(&logits);
    let task_loss = -labels
        .iter()
        .enumerate()
        .map(|(t, &y)| probs[(t, y)].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;

    Ok(ForwardPass {
        x: x.clone(),
        layers,
        final_hidden: hidden,
        probs,
        task_loss,
        aux_loss: aux_total,
    })
}

struct ExpertGrad {
    up: Array2<f64>,
    down: Array2<f64>,
    d_input: Array2<f64>,
    /// `d loss / d combine[t][slot]` per routed row.
    d_combine: Vec<f64>,
}

fn backward(
    state: &ToyMoEState,
    config: &TrainConfig,
    pass: &ForwardPass,
    labels: &[usize],
    exec: Execution,
) -> ToyMoEState {
    let s = labels.len() as f64;
    let mut grad = state.zeros_like();

    let mut d_logits = pass.probs.clone();
    for (t, &y) in labels.iter().enumerate() {
        d_logits[(t, y)] -= 1.0;
    }
    d_logits.mapv_inplace(|v| v / s);
    grad.output_head = pass.final_hidden.t().dot(&d_logits);
    let mut d_hidden = d_logits.dot(&state.output_head.t());

    for (l, cache) in pass.layers.iter().enumerate().rev() {
        let layer = &state.layers[l];
        let dy = &d_hidden;
        let expert_grads = par::map_range(cache.experts.len(), exec, |e| {
            let ec = &cache.experts[e];
            let rows = ec.tokens.len();
            let mut d_out = Array2::zeros((rows, ec.out.ncols()));
            let mut d_combine = Vec::with_capacity(rows);
            for (r, (&t, &slot)) in ec.tokens.iter().zip(&ec.slots).enumerate() {
                let dyt = dy.row(t);
                d_combine.push(dyt.dot(&ec.out.row(r)));
                d_out.row_mut(r).scaled_add(cache.combine[t][slot], &dyt);
            }
            let down = ec.act.t().dot(&d_out);
            let mut d_act = d_out.dot(&layer.experts[e].down.t());
            d_act.zip_mut_with(&ec.act, |d, a| *d *= 1.0 - a * a);
            let up = ec.input.t().dot(&d_act);
            let d_input = d_act.dot(&layer.experts[e].up.t());
            ExpertGrad {
                up,
                down,
                d_input,
                d_combine,
            }
        });

        let mut d_in = d_hidden.clone();
        let assignments = &cache.routing.assignments;
        let mut d_comb: Vec<Vec<f64>> = assignments.iter().map(|a| vec![0.0; a.len()]).collect();
        for (e, (ec, eg)) in cache.experts.iter().zip(&expert_grads).enumerate() {
            grad.layers[l].experts[e].up = eg.up.clone();
            grad.layers[l].experts[e].down = eg.down.clone();
            for (r, (&t, &slot)) in ec.tokens.iter().zip(&ec.slots).enumerate() {
                d_in.row_mut(t).scaled_add(1.0, &eg.d_input.row(r));
                d_comb[t][slot] = eg.d_combine[r];
            }
        }

        // Renormalized gates: combine_j = g_j / Z over the selected set.
        let gates = &cache.routing.gate_probs;
        let n = gates.ncols();
        let mut d_gates = Array2::<f64>::zeros((gates.nrows(), n));
        for (t, sel) in assignments.iter().enumerate() {
            let z: f64 = sel.iter().map(|&e| gates[(t, e)]).sum();
            let weighted: f64 = cache.combine[t].iter().zip(&d_comb[t]).map(|(c, d)| c * d).sum();
            for (slot, &e) in sel.iter().enumerate() {
                d_gates[(t, e)] = (d_comb[t][slot] - weighted) / z;
            }
        }
        if let Some(aux) = aux_gate_grad(config, assignments) {
            d_gates += &aux;
        }
        let mut d_router_logits = d_gates;
        for (mut dl, g) in d_router_logits.rows_mut().into_iter().zip(gates.rows()) {
            let inner: f64 = dl.iter().zip(g.iter()).map(|(d, g)| d * g).sum();
            dl.zip_mut_with(&g, |d, g| *d = g * (*d - inner));
        }
        grad.layers[l].router = cache.input.t().dot(&d_router_logits);
        d_in += &d_router_logits.dot(&layer.router.t());
        d_hidden = d_in;
    }

    grad.input_projection = pass.x.t().dot(&d_hidden);
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: ToyMoEState,
    pub trace: ExpertTokenCounts,
    pub losses: Vec<LossRecord>,
}

impl TrainOutput {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.losses.iter().map(|r| r.total_loss).collect()
    }
}

fn data_rng(config: &TrainConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    rng
}

pub fn train(config: &TrainConfig, task: &SyntheticTask) -> Result<TrainOutput> {
    train_with(config, task, Execution::default())
}

pub fn train_with(config: &TrainConfig, task: &SyntheticTask, exec: Execution) -> Result<TrainOutput> {
    config.validate()?;
    task.validate(config.structure.hidden_size)?;
    let st = &config.structure;
    let (layers, n) = (st.num_layers, st.experts_per_layer);
    let mut state = ToyMoEState::init(config, task.num_classes);
    let mut rng = data_rng(config);
    let mut counts = Vec::with_capacity(config.num_iterations * layers * n);
    let mut losses = Vec::with_capacity(config.num_iterations);

    for iter in 0..config.num_iterations {
        let (x, labels) = task.sample_batch(&mut rng, config.batch_tokens);
        let pass = forward(&state, config, &x, &labels, None, exec).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                iter,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let total = pass.task_loss + pass.aux_loss;
        if !total.is_finite() {
            return Err(Error::Divergence { iter, loss: total });
        }
        losses.push(LossRecord {
            task_loss: pass.task_loss,
            aux_loss: pass.aux_loss,
            total_loss: total,
        });
        for cache in &pass.layers {
            counts.extend(cache.experts.iter().map(|ec| ec.tokens.len() as u64));
        }
        let grad = backward(&state, config, &pass, &labels, exec);
        state.sgd_step(&grad, config.learning_rate);
        if !state.is_finite() {
            return Err(Error::Divergence { iter, loss: total });
        }
    }

    let trace = ExpertTokenCounts::from_flat(
        config.num_iterations,
        layers,
        n,
        (config.batch_tokens * st.top_k) as u64,
        counts,
    )?;
    Ok(TrainOutput {
        state,
        trace,
        losses,
    })
}

/// Per-token top-k experts of one layer.
pub type LayerAssignments = Vec<Vec<usize>>;

/// Total loss, its analytic gradient, and the routing chosen on one batch.
pub fn loss_and_grad(
    state: &ToyMoEState,
    config: &TrainConfig,
    x: &Array2<f64>,
    labels: &[usize],
    exec: Execution,
) -> Result<(f64, ToyMoEState, Vec<LayerAssignments>)> {
    let pass = forward(state, config, x, labels, None, exec)?;
    let grad = backward(state, config, &pass, labels, exec);
    let routing = pass.layers.iter().map(|c| c.routing.assignments.clone()).collect();
    Ok((pass.task_loss + pass.aux_loss, grad, routing))
}

fn frozen_loss(
    state: &ToyMoEState,
    config: &TrainConfig,
    x: &Array2<f64>,
    labels: &[usize],
    routing: &[LayerAssignments],
) -> Result<f64> {
    let pass = forward(state, config, x, labels, Some(routing), Execution::Sequential)?;
    Ok(pass.task_loss + pass.aux_loss)
}

pub const FINITE_DIFFERENCE_STEP: f64 = 1e-4;
/// Magnitude floor in the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`; a sign flip scores 2.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradProbe {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Analytic vs central-difference gradients at `num_probes` random parameters.
pub fn grad_probes(
    state: &ToyMoEState,
    config: &TrainConfig,
    task: &SyntheticTask,
    num_probes: usize,
) -> Result<Vec<GradProbe>> {
    if num_probes == 0 {
        return Err(Error::invalid("num_probes must be at least 1"));
    }
    config.validate()?;
    let mut rng = data_rng(config);
    rng.set_stream(2);
    let (x, labels) = task.sample_batch(&mut rng, config.batch_tokens);
    let (_, grad, routing) = loss_and_grad(state, config, &x, &labels, Execution::Sequential)?;
    let total = state.num_params();
    let picks: Vec<usize> = (0..num_probes).map(|_| rng.random_range(0..total)).collect();
    par::try_map_slice(&picks, Execution::default(), |&param| {
        let mut probe = state.clone();
        let orig = probe.param(param);
        *probe.param_mut(param) = orig + FINITE_DIFFERENCE_STEP;
        let up = frozen_loss(&probe, config, &x, &labels, &routing)?;
        *probe.param_mut(param) = orig - FINITE_DIFFERENCE_STEP;
        let down = frozen_loss(&probe, config, &x, &labels, &routing)?;
        Ok(GradProbe {
            param,
            analytic: grad.param(param),
            numeric: (up - down) / (2.0 * FINITE_DIFFERENCE_STEP),
        })
    })
}

/// Max relative error between analytic and finite-difference gradients.
pub fn grad_check(state: &ToyMoEState, config: &TrainConfig, task: &SyntheticTask, num_probes: usize) -> Result<f64> {
    Ok(grad_probes(state, config, task, num_probes)?
        .iter()
        .map(|p| relative_error(p.analytic, p.numeric))
        .fold(0.0, f64::max))
}

/// `iter,task_loss,aux_loss,total_loss`
pub fn write_loss_csv<W: std::io::Write>(losses: &[LossRecord], w: &mut W) -> std::io::Result<()> {
    w.write_all(b"iter,task_loss,aux_loss,total_loss\n")?;
    for (i, r) in losses.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", r.task_loss, r.aux_loss, r.total_loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_config() -> (TrainConfig, SyntheticTask) {
        let mut cfg = TrainConfig::default();
        cfg.num_iterations = 40;
        cfg.structure.num_layers = 2;
        cfg.structure.experts_per_layer = 6;
        cfg.structure.top_k = 2;
        cfg.structure.hidden_size = 6;
        cfg.structure.ffn_hidden_size = 5;
        cfg.batch_tokens = 32;
        cfg.sequence_length = 8;
        let task = SyntheticTask::new(&TaskSpec { num_classes: 4, noise_scale: 0.5, seed: 3 }, 6).unwrap();
        (cfg, task)
    }

    #[test]
    fn route_zero_logits_tie_breaks_low() {
        let h = Array2::<f64>::ones((3, 5));
        let r = route(h.view(), &Array2::zeros((5, 4)), 2).unwrap();
        for row in r.gate_probs.rows() {
            assert!(row.iter().all(|&g| (g - 0.25).abs() < 1e-15));
        }
        assert!(r.assignments.iter().all(|a| a == &vec![0, 1]));
    }

    #[test]
    fn route_orders_by_logit() {
        let r = route(array![[1.0]].view(), &array![[2.0, 1.0, 0.0, -1.0]], 2).unwrap();
        assert_eq!(r.assignments, vec![vec![0, 1]]);
        let r = route(array![[1.0]].view(), &array![[-1.0, 0.0, 3.0, 1.0]], 3).unwrap();
        assert_eq!(r.assignments, vec![vec![2, 3, 1]]);
    }

    #[test]
    fn route_errors() {
        let h = Array2::<f64>::ones((2, 3));
        assert!(matches!(route(h.view(), &Array2::zeros((4, 4)), 1), Err(Error::DimensionMismatch { .. })));
        assert!(route(h.view(), &Array2::zeros((3, 4)), 0).is_err());
        assert!(route(h.view(), &Array2::zeros((3, 4)), 5).is_err());
        let mut w = Array2::zeros((3, 4));
        w[(0, 0)] = f64::NAN;
        assert!(matches!(route(h.view(), &w, 1), Err(Error::NonFinite(_))));
    }

    fn uniform_batch(n: usize) -> (Array2<f64>, Vec<Vec<usize>>) {
        (Array2::from_elem((n, n), 1.0 / n as f64), (0..n).map(|t| vec![t]).collect())
    }

    fn concentrated(s: usize, n: usize, expert: usize) -> (Array2<f64>, Vec<Vec<usize>>) {
        let mut g = Array2::zeros((s, n));
        g.column_mut(expert).fill(1.0);
        (g, vec![vec![expert]; s])
    }

    #[test]
    fn aux_token_level_examples() {
        for n in [2, 4, 7] {
            let (g, a) = uniform_batch(n);
            assert!((aux_loss_token_level(&g, &a, 0.3, n).unwrap() - 0.3).abs() < 1e-12);
        }
        let (g, a) = concentrated(5, 4, 0);
        assert!((aux_loss_token_level(&g, &a, 0.01, 4).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn aux_sequence_wise_examples() {
        let (g, a) = concentrated(6, 4, 2);
        let tl = aux_loss_token_level(&g, &a, 0.5, 4).unwrap();
        assert_eq!(aux_loss_sequence_wise(&g, &a, 0.5, 4, 6).unwrap(), tl);

        let (u, ua) = uniform_batch(4);
        let g2 = ndarray::concatenate![Axis(0), u, u];
        let a2 = [ua.clone(), ua].concat();
        assert!((aux_loss_sequence_wise(&g2, &a2, 0.2, 4, 4).unwrap() - 0.2).abs() < 1e-12);

        let (c0, a0) = concentrated(3, 4, 0);
        let (c1, a1) = concentrated(3, 4, 1);
        let g3 = ndarray::concatenate![Axis(0), c0, c1];
        let a3 = [a0, a1].concat();
        assert!((aux_loss_sequence_wise(&g3, &a3, 0.01, 4, 3).unwrap() - 0.04).abs() < 1e-15);
        // mixed over the whole batch the same assignments are only 2c
        assert!((aux_loss_token_level(&g3, &a3, 0.01, 4).unwrap() - 0.02).abs() < 1e-15);

        assert!(aux_loss_sequence_wise(&g3, &a3, 0.01, 4, 4).is_err());
        assert!(aux_loss_sequence_wise(&g3, &a3, 0.01, 4, 0).is_err());
    }

    fn naive_aux(g: &Array2<f64>, a: &[Vec<usize>], c: f64, n: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let mut routed = 0usize;
            let mut slots = 0usize;
            for sel in a {
                slots += sel.len();
                routed += sel.iter().filter(|&&e| e == i).count();
            }
            let p: f64 = (0..g.nrows()).map(|t| g[(t, i)]).sum::<f64>() / g.nrows() as f64;
            total += routed as f64 / slots as f64 * p;
        }
        c * n as f64 * total
    }

    proptest! {
        #[test]
        fn aux_matches_naive_and_is_linear(
            logits in proptest::collection::vec(-3.0f64..3.0, 24..=24),
            c in 0.0f64..2.0,
        ) {
            let (s, n) = (6, 4);
            let r = route(Array2::eye(s).view(), &Array2::from_shape_vec((s, n), logits).unwrap(), 2).unwrap();
            let v = aux_loss_token_level(&r.gate_probs, &r.assignments, c, n).unwrap();
            prop_assert!((v - naive_aux(&r.gate_probs, &r.assignments, c, n)).abs() < 1e-12);
            prop_assert!(v >= 0.0);
            let v2 = aux_loss_token_level(&r.gate_probs, &r.assignments, 2.0 * c, n).unwrap();
            prop_assert!((v2 - 2.0 * v).abs() < 1e-12);
            let sw = aux_loss_sequence_wise(&r.gate_probs, &r.assignments, c, n, 3).unwrap();
            let halves: f64 = [0..3, 3..6].into_iter().map(|rg| {
                naive_aux(&r.gate_probs.slice(s![rg.clone(), ..]).to_owned(), &r.assignments[rg], c, n)
            }).sum::<f64>() / 2.0;
            prop_assert!((sw - halves).abs() < 1e-12);
        }

        #[test]
        fn route_matches_full_sort(
            logits in proptest::collection::vec(-5.0f64..5.0, 35..=35),
            k in 1usize..=7,
        ) {
            let r = route(Array2::eye(5).view(), &Array2::from_shape_vec((5, 7), logits).unwrap(), k).unwrap();
            for (t, row) in r.gate_probs.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
                pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let want: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
                prop_assert_eq!(&r.assignments[t], &want);
            }
        }
    }

    #[test]
    fn zero_coefficient_equals_no_aux() {
        let (mut cfg, task) = small_config();
        let none = train(&cfg, &task).unwrap();
        for variant in [AuxLoss::TokenLevel, AuxLoss::SequenceWise] {
            cfg.aux_loss = variant;
            cfg.aux_coefficient = 0.0;
            let zero = train(&cfg, &task).unwrap();
            assert_eq!(zero.loss_curve(), none.loss_curve());
            assert_eq!(zero.trace, none.trace);
        }
    }

    #[test]
    fn training_is_deterministic_and_conserving() {
        let (mut cfg, task) = small_config();
        cfg.aux_loss = AuxLoss::SequenceWise;
        cfg.aux_coefficient = 0.05;
        let a = train_with(&cfg, &task, Execution::Sequential).unwrap();
        let b = train_with(&cfg, &task, Execution::Parallel).unwrap();
        assert_eq!(a.loss_curve(), b.loss_curve());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.state, b.state);
        assert_eq!(a.losses.len(), cfg.num_iterations);
        a.trace.check_conservation().unwrap();
        assert_eq!(a.trace.slots_per_iter(), 64);
        for r in &a.losses {
            assert_eq!(r.total_loss, r.task_loss + r.aux_loss);
            assert!(r.aux_loss > 0.0);
        }
        assert!(a.losses.last().unwrap().task_loss < a.losses[0].task_loss);
    }

    #[test]
    fn divergence_reports_iteration() {
        let (mut cfg, task) = small_config();
        cfg.learning_rate = 1e12;
        match train(&cfg, &task) {
            Err(Error::Divergence { iter, .. }) => assert!(iter < cfg.num_iterations),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_default_structure() {
        let (cfg, task) = small_config();
        let state = ToyMoEState::init(&cfg, task.num_classes);
        assert!(grad_check(&state, &cfg, &task, 300).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_with_aux_terms() {
        let (mut cfg, task) = small_config();
        let state = train(&cfg, &task).unwrap().state;
        cfg.aux_coefficient = 0.1;
        for variant in [AuxLoss::TokenLevel, AuxLoss::SequenceWise] {
            cfg.aux_loss = variant;
            assert!(grad_check(&state, &cfg, &task, 300).unwrap() < 1e-4, "{variant}");
        }
    }

    #[test]
    fn grad_check_single_expert_is_tight() {
        let (mut cfg, task) = small_config();
        cfg.structure.experts_per_layer = 1;
        cfg.structure.top_k = 1;
        let state = ToyMoEState::init(&cfg, task.num_classes);
        assert!(grad_check(&state, &cfg, &task, 200).unwrap() < 1e-6);
    }

    #[test]
    fn sign_flip_scores_two() {
        let (cfg, task) = small_config();
        let state = ToyMoEState::init(&cfg, task.num_classes);
        let probes = grad_probes(&state, &cfg, &task, 50).unwrap();
        let p = probes.iter().max_by(|a, b| a.analytic.abs().total_cmp(&b.analytic.abs())).unwrap();
        assert!((relative_error(-p.analytic, p.numeric) - 2.0).abs() < 1e-4);
        assert!(grad_probes(&state, &cfg, &task, 0).is_err());
    }

    #[test]
    fn config_parsing() {
        let kv = KvFile::parse(Path::new("t.cfg"), "aux_loss = token_level\naux_coefficient = 0.01\niterations = 5\nnum_classes = 3\n").unwrap();
        let (cfg, task) = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.aux_loss, AuxLoss::TokenLevel);
        assert_eq!(cfg.num_iterations, 5);
        assert_eq!(task.num_classes, 3);
        assert_eq!(TrainConfig::from_kv(&KvFile::parse(Path::new("t"), "").unwrap()).unwrap().0, TrainConfig::default());

        for bad in ["sequence_length = 7", "aux_loss = bogus", "aux_coefficient = -1", "learning_rate = 0", "bogus = 1"] {
            assert!(TrainConfig::from_kv(&KvFile::parse(Path::new("t"), bad).unwrap()).is_err(), "{bad}");
        }
        let (cfg, task) = small_config();
        let map = cfg.to_map(&TaskSpec { num_classes: task.num_classes, noise_scale: 0.5, seed: 3 });
        assert_eq!(map["aux_loss"], "none");
        assert_eq!(map.len(), TrainConfig::KEYS.len());
    }

    #[test]
    fn task_validation() {
        assert!(SyntheticTask::new(&TaskSpec { num_classes: 1, ..TaskSpec::default() }, 4).is_err());
        assert!(SyntheticTask::new(&TaskSpec { noise_scale: 0.0, ..TaskSpec::default() }, 4).is_err());
        let mut t = SyntheticTask::new(&TaskSpec::default(), 4).unwrap();
        let row = t.cluster_centers.row(0).to_owned();
        t.cluster_centers.row_mut(1).assign(&row);
        assert!(t.validate(4).is_err());
        assert!(t.validate(5).is_err());
    }

    #[test]
    fn loss_csv_layout() {
        let mut out = Vec::new();
        let rec = LossRecord { task_loss: 1.5, aux_loss: 0.25, total_loss: 1.75 };
        write_loss_csv(&[rec, rec], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "iter,task_loss,aux_loss,total_loss\n0,1.5,0.25,1.75\n1,1.5,0.25,1.75\n");
    }
}
