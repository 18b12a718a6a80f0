//! Model structure, routed-token traces, and the trace CSV format.
//!
//! A trace records how many routing slots each expert received in every
//! layer of every training iteration. With `S` tokens per iteration and
//! top-k routing, each `(iteration, layer)` row sums to `S * top_k`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvfile::KvFile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub num_layers: usize,
    /// Experts per layer before pruning.
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub hidden_size: usize,
    pub ffn_hidden_size: usize,
    /// Zero for attention-free models.
    pub num_attention_heads: usize,
    /// Zero for attention-free models.
    pub attention_hidden_size: usize,
}

impl ModelStructure {
    pub const KEYS: &'static [&'static str] = &[
        "layers",
        "experts",
        "top_k",
        "hidden_size",
        "ffn_hidden_size",
        "attention_heads",
        "attention_hidden_size",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("experts_per_layer", self.experts_per_layer),
            ("top_k", self.top_k),
            ("hidden_size", self.hidden_size),
            ("ffn_hidden_size", self.ffn_hidden_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidStructure(format!("{name} must be at least 1")));
            }
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::InvalidStructure(format!(
                "top_k {} exceeds experts_per_layer {}",
                self.top_k, self.experts_per_layer
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let s = ModelStructure {
            num_layers: kv.require("layers")?,
            experts_per_layer: kv.require("experts")?,
            top_k: kv.require("top_k")?,
            hidden_size: kv.get_or("hidden_size", 1)?,
            ffn_hidden_size: kv.get_or("ffn_hidden_size", 1)?,
            num_attention_heads: kv.get_or("attention_heads", 0)?,
            attention_hidden_size: kv.get_or("attention_hidden_size", 0)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KvFile::read(path)?;
        kv.deny_unknown(Self::KEYS)?;
        Self::from_kv(&kv)
    }
}

/// Routed-token counts indexed `[iteration][layer][expert]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertTokenCounts {
    num_iters: usize,
    num_layers: usize,
    num_experts: usize,
    /// `S * top_k`: routing slots per layer per iteration.
    slots_per_iter: u64,
    counts: Vec<u64>,
}

impl ExpertTokenCounts {
    /// Wraps a flat row-major buffer. Conservation is not checked here; see
    /// [`validate_trace`] and [`ExpertTokenCounts::check_conservation`].
    pub fn from_flat(
        num_iters: usize,
        num_layers: usize,
        num_experts: usize,
        slots_per_iter: u64,
        counts: Vec<u64>,
    ) -> Result<Self> {
        let expected = num_iters * num_layers * num_experts;
        if counts.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "count buffer length",
                expected,
                actual: counts.len(),
            });
        }
        Ok(ExpertTokenCounts {
            num_iters,
            num_layers,
            num_experts,
            slots_per_iter,
            counts,
        })
    }

    /// Builds a trace from nested rows, inferring the slot total from the first row.
    pub fn from_rows(rows: &[Vec<Vec<u64>>]) -> Result<Self> {
        let num_iters = rows.len();
        let num_layers = rows.first().map_or(0, Vec::len);
        let num_experts = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut counts = Vec::with_capacity(num_iters * num_layers * num_experts);
        for it in rows {
            if it.len() != num_layers {
                return Err(Error::DimensionMismatch {
                    what: "layers",
                    expected: num_layers,
                    actual: it.len(),
                });
            }
            for row in it {
                if row.len() != num_experts {
                    return Err(Error::DimensionMismatch {
                        what: "experts",
                        expected: num_experts,
                        actual: row.len(),
                    });
                }
                counts.extend_from_slice(row);
            }
        }
        let slots = counts[..num_experts.min(counts.len())].iter().sum();
        Self::from_flat(num_iters, num_layers, num_experts, slots, counts)
    }

    pub fn num_iters(&self) -> usize {
        self.num_iters
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn slots_per_iter(&self) -> u64 {
        self.slots_per_iter
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn row(&self, iter: usize, layer: usize) -> &[u64] {
        let start = (iter * self.num_layers + layer) * self.num_experts;
        &self.counts[start..start + self.num_experts]
    }

    pub fn get(&self, iter: usize, layer: usize, expert: usize) -> u64 {
        self.row(iter, layer)[expert]
    }

    pub fn as_flat(&self) -> &[u64] {
        &self.counts
    }

    /// First `(iter, layer)` whose row does not sum to `slots_per_iter`.
    pub fn check_conservation(&self) -> Result<()> {
        for iter in 0..self.num_iters {
            for layer in 0..self.num_layers {
                let actual: u64 = self.row(iter, layer).iter().sum();
                if actual != self.slots_per_iter {
                    return Err(Error::Conservation {
                        iter,
                        layer,
                        expected: self.slots_per_iter,
                        actual,
                    });
                }
            }
        }
        Ok(())
    }

    /// Keeps only iterations in `[begin, end)`.
    pub fn slice_iters(&self, begin: usize, end: usize) -> Result<Self> {
        if begin >= end || end > self.num_iters {
            return Err(Error::OutOfRange(format!(
                "iteration range [{begin}, {end}) of {}",
                self.num_iters
            )));
        }
        let stride = self.num_layers * self.num_experts;
        Self::from_flat(
            end - begin,
            self.num_layers,
            self.num_experts,
            self.slots_per_iter,
            self.counts[begin * stride..end * stride].to_vec(),
        )
    }
}

/// Checks dimensions against `structure` and the per-row conservation law.
pub fn validate_trace(trace: &ExpertTokenCounts, structure: &ModelStructure) -> Result<()> {
    structure.validate()?;
    if trace.num_layers != structure.num_layers {
        return Err(Error::DimensionMismatch {
            what: "layers",
            expected: structure.num_layers,
            actual: trace.num_layers,
        });
    }
    if trace.num_experts != structure.experts_per_layer {
        return Err(Error::DimensionMismatch {
            what: "experts",
            expected: structure.experts_per_layer,
            actual: trace.num_experts,
        });
    }
    if trace.num_iters == 0 {
        return Err(Error::Empty("trace"));
    }
    if !trace.slots_per_iter.is_multiple_of(structure.top_k as u64) {
        return Err(Error::invalid(format!(
            "slots per iteration {} is not a multiple of top_k {}",
            trace.slots_per_iter, structure.top_k
        )));
    }
    trace.check_conservation()
}

/// Writes the trace as `iter,layer,expert,tokens` CSV with LF line endings.
pub fn write_trace(trace: &ExpertTokenCounts, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    write_trace_to(trace, &mut w).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn write_trace_to<W: Write>(trace: &ExpertTokenCounts, w: &mut W) -> std::io::Result<()> {
    w.write_all(b"iter,layer,expert,tokens\n")?;
    for iter in 0..trace.num_iters {
        for layer in 0..trace.num_layers {
            for (expert, tokens) in trace.row(iter, layer).iter().enumerate() {
                writeln!(w, "{iter},{layer},{expert},{tokens}")?;
            }
        }
    }
    Ok(())
}

/// Reads a trace CSV. Rows must form the complete `(iter, layer, expert)`
/// grid in sorted order, and every row must sum to the same slot total.
pub fn read_trace(path: &Path) -> Result<ExpertTokenCounts> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    read_trace_from(file, path)
}

pub fn read_trace_from<R: std::io::Read>(reader: R, path: &Path) -> Result<ExpertTokenCounts> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::None)
        .from_reader(reader);

    let mut records = rdr.records();
    match records.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        Some(Ok(h)) => {
            if h.iter().collect::<Vec<_>>() != ["iter", "layer", "expert", "tokens"] {
                return Err(parse_err(1, "expected header `iter,layer,expert,tokens`".into()));
            }
        }
    }

    let mut rows: Vec<[u64; 4]> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", rec.len())));
        }
        let mut vals = [0u64; 4];
        for (slot, field) in vals.iter_mut().zip(rec.iter()) {
            *slot = field
                .parse::<u64>()
                .map_err(|_| parse_err(line, format!("not a non-negative integer: `{field}`")))?;
        }
        if let Some(prev) = rows.last() {
            if prev[..3] >= vals[..3] {
                return Err(parse_err(line, "rows are not sorted by (iter, layer, expert)".into()));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Empty("trace"));
    }

    let dim = |k: usize| rows.iter().map(|r| r[k]).max().unwrap_or(0) as usize + 1;
    let (num_iters, num_layers, num_experts) = (dim(0), dim(1), dim(2));
    // Sorted + strictly increasing + complete grid means row i sits at its flat index.
    for (i, r) in rows.iter().enumerate() {
        let flat = (r[0] as usize * num_layers + r[1] as usize) * num_experts + r[2] as usize;
        if flat != i {
            return Err(parse_err(i + 2, "trace grid is incomplete".into()));
        }
    }
    if rows.len() != num_iters * num_layers * num_experts {
        return Err(parse_err(rows.len() + 1, "trace grid is incomplete".into()));
    }
    let counts: Vec<u64> = rows.iter().map(|r| r[3]).collect();
    let slots = counts[..num_experts].iter().sum();
    let trace = ExpertTokenCounts::from_flat(num_iters, num_layers, num_experts, slots, counts)?;
    trace.check_conservation()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn structure(layers: usize, experts: usize, top_k: usize) -> ModelStructure {
        ModelStructure {
            num_layers: layers,
            experts_per_layer: experts,
            top_k,
            hidden_size: 8,
            ffn_hidden_size: 16,
            num_attention_heads: 0,
            attention_hidden_size: 0,
        }
    }

    fn uniform(iters: usize, layers: usize, experts: usize, per: u64) -> ExpertTokenCounts {
        let counts = vec![per; iters * layers * experts];
        ExpertTokenCounts::from_flat(iters, layers, experts, per * experts as u64, counts).unwrap()
    }

    #[test]
    fn valid_trace_passes() {
        let t = uniform(3, 12, 4, 50);
        validate_trace(&t, &structure(12, 4, 2)).unwrap();
    }

    #[test]
    fn short_row_is_a_conservation_violation() {
        let mut counts = vec![50u64; 3 * 2 * 4];
        counts[(1 * 2 + 1) * 4 + 2] = 49;
        let t = ExpertTokenCounts::from_flat(3, 2, 4, 200, counts).unwrap();
        match validate_trace(&t, &structure(2, 4, 2)) {
            Err(Error::Conservation {
                iter: 1,
                layer: 1,
                expected: 200,
                actual: 199,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_count_mismatch() {
        let t = uniform(2, 11, 4, 50);
        assert!(matches!(
            validate_trace(&t, &structure(12, 4, 2)),
            Err(Error::DimensionMismatch {
                what: "layers",
                expected: 12,
                actual: 11
            })
        ));
    }

    #[test]
    fn structure_rejects_top_k_above_experts() {
        assert!(structure(2, 2, 3).validate().is_err());
        let mut s = structure(2, 4, 2);
        s.hidden_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn header_only_is_empty() {
        let err = read_trace_from("iter,layer,expert,tokens\n".as_bytes(), Path::new("t.csv")).unwrap_err();
        assert!(matches!(err, Error::Empty("trace")));
    }

    #[test]
    fn negative_count_reports_line() {
        let text = "iter,layer,expert,tokens\n0,0,0,3\n0,0,1,-1\n";
        match read_trace_from(text.as_bytes(), Path::new("t.csv")) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unequal_rows_rejected_on_read() {
        let text = "iter,layer,expert,tokens\n0,0,0,3\n0,0,1,1\n1,0,0,2\n1,0,1,1\n";
        assert!(matches!(
            read_trace_from(text.as_bytes(), Path::new("t.csv")),
            Err(Error::Conservation { iter: 1, layer: 0, .. })
        ));
    }

    #[test]
    fn unsorted_and_gappy_rows_rejected() {
        let unsorted = "iter,layer,expert,tokens\n0,0,1,3\n0,0,0,1\n";
        assert!(read_trace_from(unsorted.as_bytes(), Path::new("t")).is_err());
        let gap = "iter,layer,expert,tokens\n0,0,0,3\n0,0,2,1\n";
        assert!(read_trace_from(gap.as_bytes(), Path::new("t")).is_err());
    }

    #[test]
    fn write_then_read_is_identity() {
        let t = ExpertTokenCounts::from_rows(&[
            vec![vec![3, 1, 0], vec![2, 2, 0]],
            vec![vec![0, 0, 4], vec![1, 1, 2]],
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_trace_to(&t, &mut buf).unwrap();
        assert!(!buf.contains(&b'\r'));
        let back = read_trace_from(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }
}
