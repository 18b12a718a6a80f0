//! Command-line front end.
//!
//! Every command writes its artifacts plus a `*.manifest.json` (or
//! `manifest.json` inside an output directory) that records the resolved
//! configuration. Re-running a command with the same manifest reproduces its
//! outputs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::clustersim::{count_params, evaluate_scenarios, reports_to_json, write_reports_csv, ScenarioInputs};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::prune::{alpha_schedule_hybrid, prune_trace, DecisionFile, MarkerWindow, PruneConfig, StabilityRule};
use crate::rearrange::{balance_metrics, placement_to_json, read_placement, LayerPlacement};
use crate::stats::{max_min_ratio, PrefixSums};
use crate::toytrainer::{train, write_loss_csv, SyntheticTask, TrainConfig};
use crate::trace::{read_trace, validate_trace, write_trace_to, ExpertTokenCounts, ModelStructure};
use crate::tracegen::{generate, TraceGenSpec};
use crate::{clustersim, prune};

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "laep", version, about = "Layer-adaptive expert pruning for MoE routing traces")]
pub struct Cli {
    /// Overrides the seed of `gen` and `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory (per command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model structure file (key = value).
    #[arg(long, global = true)]
    pub structure: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace from a spec file. Default out: trace.csv
    Gen { spec: PathBuf },
    /// Train the toy MoE and record its routing trace. Default out: train_out/
    Train { config: PathBuf },
    /// Decide which experts to prune. Default out: decision.json
    Prune(PruneArgs),
    /// Place surviving experts on device groups. Default out: placement.json
    Rearrange {
        trace: PathBuf,
        decision: PathBuf,
        #[arg(long)]
        groups: usize,
    },
    /// Compare base, pruned, rearranged and control scenarios. Default out: simulate_out/
    Simulate {
        trace: PathBuf,
        decision: PathBuf,
        placement: PathBuf,
        /// Non-expert parameters added to every total.
        #[arg(long, default_value_t = 0)]
        overhead: u64,
    },
    /// Per-layer evolution and stable-phase histogram CSVs. Default out: report_out/
    Report {
        trace: PathBuf,
        /// Stable-phase rule; the last quarter of the trace when absent.
        #[arg(long)]
        stability: Option<String>,
        /// Stable-phase length in iterations; to the end of the trace when absent.
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    pub trace: PathBuf,
    /// Constant α for every layer (`inf` disables the individual-load test).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// α for the first and last ceil(L/6) layers.
    #[arg(long)]
    pub alpha_edge: Option<f64>,
    /// α for the remaining layers.
    #[arg(long)]
    pub alpha_mid: Option<f64>,
    #[arg(long)]
    pub beta: f64,
    /// `fixed:<k>` or `rank:<rho>:<w>`.
    #[arg(long, default_value = "fixed:0")]
    pub stability: String,
    /// Marker window in iterations; to the end of the trace when absent.
    #[arg(long)]
    pub window: Option<usize>,
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_file(path, text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_trace_file(trace: &ExpertTokenCounts, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_trace_to(trace, &mut bytes).map_err(|e| Error::io("formatting trace", e))?;
    write_file(path, &bytes)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn format_alpha(alpha: &[f64]) -> String {
    alpha
        .iter()
        .map(|a| if a.is_infinite() { "inf".to_string() } else { a.to_string() })
        .collect::<Vec<_>>()
        .join(",")
}

fn decision_window(file: &DecisionFile, trace: &ExpertTokenCounts) -> (usize, usize) {
    match file.window {
        Some(MarkerWindow { begin, end }) => (begin, end),
        None => (0, trace.num_iters()),
    }
}

/// Parses arguments, runs the command, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    let structure = cli.structure.as_deref().map(ModelStructure::read).transpose()?;
    match &cli.command {
        Command::Gen { spec } => cmd_gen(spec, cli.seed, structure.as_ref(), &out("trace.csv"), cli),
        Command::Train { config } => cmd_train(config, cli.seed, &out("train_out"), cli),
        Command::Prune(args) => cmd_prune(args, structure.as_ref(), &out("decision.json"), cli),
        Command::Rearrange { trace, decision, groups } => {
            cmd_rearrange(trace, decision, *groups, &out("placement.json"), cli)
        }
        Command::Simulate {
            trace,
            decision,
            placement,
            overhead,
        } => {
            let structure = structure
                .ok_or_else(|| Error::invalid("simulate needs --structure for parameter counts"))?;
            cmd_simulate(trace, decision, placement, &structure, *overhead, &out("simulate_out"), cli)
        }
        Command::Report {
            trace,
            stability,
            window,
        } => cmd_report(trace, stability.as_deref(), *window, &out("report_out"), cli),
    }
}

fn base_manifest(name: &str, cli: &Cli) -> RunManifest {
    let mut m = RunManifest::new(name, cli.seed);
    if let Some(s) = &cli.structure {
        m.input("structure", s);
    }
    m
}

fn cmd_gen(
    spec_path: &Path,
    seed: Option<u64>,
    structure: Option<&ModelStructure>,
    out: &Path,
    cli: &Cli,
) -> Result<()> {
    let mut spec = TraceGenSpec::read(spec_path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let trace = generate(&spec)?;
    if let Some(st) = structure {
        validate_trace(&trace, st)?;
    }
    write_trace_file(&trace, out)?;

    let mut m = base_manifest("gen", cli);
    m.seed = Some(spec.seed);
    m.config = spec.to_map();
    m.input("spec", spec_path);
    m.outputs.push(out.display().to_string());
    m.write(&sidecar(out))?;
    say!(
        "wrote {} ({} iterations, {} layers, {} experts)",
        out.display(),
        trace.num_iters(),
        trace.num_layers(),
        trace.num_experts()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, seed: Option<u64>, out: &Path, cli: &Cli) -> Result<()> {
    let (mut config, task_spec) = TrainConfig::read(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let task = SyntheticTask::new(&task_spec, config.structure.hidden_size)?;
    let result = train(&config, &task)?;

    create_dir(out)?;
    let trace_path = out.join("trace.csv");
    let loss_path = out.join("loss.csv");
    write_trace_file(&result.trace, &trace_path)?;
    let mut loss = Vec::new();
    write_loss_csv(&result.losses, &mut loss).map_err(|e| Error::io("formatting loss.csv", e))?;
    write_file(&loss_path, &loss)?;

    let mut m = base_manifest("train", cli);
    m.seed = Some(config.seed);
    m.config = config.to_map(&task_spec);
    m.input("config", config_path);
    m.outputs = vec![trace_path.display().to_string(), loss_path.display().to_string()];
    m.write(&out.join("manifest.json"))?;
    let last = result.losses.last().map(|r| r.total_loss).unwrap_or(f64::NAN);
    say!(
        "trained {} iterations, final loss {last:.4}; wrote {}",
        config.num_iterations,
        out.display()
    );
    Ok(())
}

fn resolve_alpha(args: &PruneArgs, num_layers: usize) -> Result<Vec<f64>> {
    match (args.alpha, args.alpha_edge, args.alpha_mid) {
        (Some(a), None, None) => Ok(vec![a; num_layers]),
        (None, Some(edge), Some(mid)) => Ok(alpha_schedule_hybrid(num_layers, edge, mid)),
        (Some(_), _, _) => Err(Error::invalid("--alpha conflicts with --alpha-edge/--alpha-mid")),
        _ => Err(Error::invalid(
            "give either --alpha or both --alpha-edge and --alpha-mid",
        )),
    }
}

fn cmd_prune(args: &PruneArgs, structure: Option<&ModelStructure>, out: &Path, cli: &Cli) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    if let Some(st) = structure {
        validate_trace(&trace, st)?;
    }
    let config = PruneConfig {
        alpha: resolve_alpha(args, trace.num_layers())?,
        beta: args.beta,
        stability: StabilityRule::parse(&args.stability)?,
        marker_window: args.window.unwrap_or(trace.num_iters()),
    };
    let min_survivors = structure.map_or(1, |s| s.top_k);
    let outcome = prune_trace(&trace, &config, min_survivors, Execution::default())?;
    let file = DecisionFile::new(&config, &outcome);
    write_file(out, file.to_json().as_bytes())?;

    let mut m = base_manifest("prune", cli);
    m.set("alpha", format_alpha(&config.alpha));
    m.set("beta", config.beta);
    m.set("stability", config.stability);
    m.set("marker_window", config.marker_window);
    m.set("min_survivors", min_survivors);
    m.set("stable_iteration", outcome.stable_iteration);
    m.input("trace", &args.trace);
    m.outputs.push(out.display().to_string());
    m.write(&sidecar(out))?;

    let counts = outcome.decision.pruned_counts();
    say!(
        "stable from iteration {}; markers over [{}, {})",
        outcome.stable_iteration, outcome.window.0, outcome.window.1
    );
    for (layer, pruned) in prune::pruned_summary(&outcome.decision) {
        say!("layer {layer}: pruned {pruned} of {}", trace.num_experts());
    }
    say!("total pruned: {}", counts.iter().sum::<usize>());
    if let Some(st) = structure {
        let before = count_params(st, &vec![trace.num_experts(); trace.num_layers()], 0)?;
        let after = count_params(st, &outcome.decision.survivor_counts(), 0)?;
        say!("params: {before} -> {after}");
    }
    Ok(())
}

fn cmd_rearrange(trace_path: &Path, decision_path: &Path, groups: usize, out: &Path, cli: &Cli) -> Result<()> {
    let trace = read_trace(trace_path)?;
    let file = DecisionFile::read(decision_path)?;
    file.check_against(trace.num_layers(), trace.num_experts())?;
    let window = decision_window(&file, &trace);
    let placements =
        clustersim::survivor_placements(&trace, &file.decision(), groups, window, true, Execution::default())?;
    let layers: Vec<LayerPlacement> = placements
        .iter()
        .enumerate()
        .map(|(l, a)| LayerPlacement::new(l, a))
        .collect();
    write_file(out, placement_to_json(&layers).as_bytes())?;

    let mut m = base_manifest("rearrange", cli);
    m.set("groups", groups);
    m.set("window", format!("{},{}", window.0, window.1));
    m.input("trace", trace_path);
    m.input("decision", decision_path);
    m.outputs.push(out.display().to_string());
    m.write(&sidecar(out))?;
    for (l, a) in placements.iter().enumerate() {
        say!(
            "layer {l}: group sums {:?}, imbalance {:.4}",
            a.group_sums,
            balance_metrics(a).imbalance_ratio
        );
    }
    Ok(())
}

fn cmd_simulate(
    trace_path: &Path,
    decision_path: &Path,
    placement_path: &Path,
    structure: &ModelStructure,
    overhead: u64,
    out: &Path,
    cli: &Cli,
) -> Result<()> {
    let trace = read_trace(trace_path)?;
    validate_trace(&trace, structure)?;
    let file = DecisionFile::read(decision_path)?;
    file.check_against(trace.num_layers(), trace.num_experts())?;
    let placement: Vec<_> = read_placement(placement_path)?.iter().map(LayerPlacement::assignment).collect();
    if placement.len() != trace.num_layers() {
        return Err(Error::DimensionMismatch {
            what: "placement layers",
            expected: trace.num_layers(),
            actual: placement.len(),
        });
    }
    let num_groups = placement[0].num_groups;
    let window = decision_window(&file, &trace);
    let decision = file.decision();
    let reports = evaluate_scenarios(
        &ScenarioInputs {
            trace: &trace,
            structure,
            decision: &decision,
            placement: Some(&placement),
            num_groups,
            window,
            overhead,
        },
        Execution::default(),
    )?;

    create_dir(out)?;
    let json_path = out.join("report.json");
    let csv_path = out.join("report.csv");
    write_file(&json_path, reports_to_json(&reports).as_bytes())?;
    let mut csv = Vec::new();
    write_reports_csv(&reports, &mut csv).map_err(|e| Error::io("formatting report.csv", e))?;
    write_file(&csv_path, &csv)?;

    let mut m = base_manifest("simulate", cli);
    m.set("groups", num_groups);
    m.set("overhead", overhead);
    m.set("window", format!("{},{}", window.0, window.1));
    m.input("trace", trace_path);
    m.input("decision", decision_path);
    m.input("placement", placement_path);
    m.outputs = vec![json_path.display().to_string(), csv_path.display().to_string()];
    m.write(&out.join("manifest.json"))?;
    for r in &reports {
        say!(
            "{:<18} params {:>14}  step {:>12.2}  throughput {:.4}",
            r.scenario, r.total_params, r.mean_step_time, r.relative_throughput
        );
    }
    Ok(())
}

/// Stable-phase window of a report: the rule's stable point (or the last
/// quarter of the trace) up to `window` iterations long.
fn report_window(trace: &ExpertTokenCounts, stability: Option<&str>, window: Option<usize>) -> Result<(usize, usize)> {
    let n = trace.num_iters();
    let begin = match stability {
        Some(rule) => prune::detect_stability(trace, StabilityRule::parse(rule)?, Execution::default())?,
        None => n - (n / 4).max(1),
    };
    if begin >= n {
        return Err(Error::OutOfRange(format!("stable point {begin} of a {n}-iteration trace")));
    }
    match window {
        Some(0) => Err(Error::invalid("--window must be positive")),
        Some(w) => Ok((begin, (begin + w).min(n))),
        None => Ok((begin, n)),
    }
}

fn cmd_report(
    trace_path: &Path,
    stability: Option<&str>,
    window: Option<usize>,
    out: &Path,
    cli: &Cli,
) -> Result<()> {
    let trace = read_trace(trace_path)?;
    let (begin, end) = report_window(&trace, stability, window)?;
    let prefix = PrefixSums::new(&trace, Execution::default());
    create_dir(out)?;
    let mut outputs = Vec::new();
    for layer in 0..trace.num_layers() {
        let mut evo = Vec::with_capacity(trace.num_iters() * trace.num_experts() * 8);
        evo.extend_from_slice(b"iter,expert,tokens\n");
        for iter in 0..trace.num_iters() {
            for (e, c) in trace.row(iter, layer).iter().enumerate() {
                writeln!(evo, "{iter},{e},{c}").expect("writing to memory");
            }
        }
        let evo_path = out.join(format!("layer_{layer}_evolution.csv"));
        write_file(&evo_path, &evo)?;

        let loads = prefix.window(layer, begin, end);
        let mean = loads.iter().sum::<u64>() as f64 / loads.len() as f64;
        let ratio = max_min_ratio(&loads);
        let mut hist = b"expert,tokens,mean_tokens,max_min_ratio\n".to_vec();
        for (e, t) in loads.iter().enumerate() {
            writeln!(hist, "{e},{t},{mean},{ratio}").expect("writing to memory");
        }
        let hist_path = out.join(format!("layer_{layer}_stable_hist.csv"));
        write_file(&hist_path, &hist)?;
        say!("layer {layer}: stable max/min {ratio:.2}");
        outputs.push(evo_path.display().to_string());
        outputs.push(hist_path.display().to_string());
    }

    let mut m = base_manifest("report", cli);
    m.set("stability", stability.unwrap_or("last_quarter"));
    m.set("window", format!("{begin},{end}"));
    m.input("trace", trace_path);
    m.outputs = outputs;
    m.write(&out.join("manifest.json"))?;
    Ok(())
}
