//! The `skd` command line: dataset synthesis, sample selection, the two
//! student training stages, evaluation and benchmarking.
//!
//! Every command that writes a file also writes `<out>.config.json`, the
//! fully resolved arguments. `skd rerun <out>.config.json` repeats the run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use skd_core::distiller::{
    evaluate_identification, evaluate_retrieval, evaluate_verification, finetune, init_student, load_checkpoint,
    pretrain_student, save_checkpoint, transfer_student, verification_pairs, write_metrics, Architecture,
    EpochMetrics, Supervision, Tap, TrainConfig, DEFAULT_IDENTITY_DIM,
};
use skd_core::mincut::{lambda_sweep, load_mask, parse_grid, save_mask};
use skd_core::{
    build_selection_graph, class_centroids, load_student_set, minimize, save_student_set, synthesize, Error,
    Measure, SelectionGraph, StudentSet, SynthConfig,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;
pub const EXIT_DIVERGED: i32 = 6;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  I/O error (missing or unwritable file)
  4  format violation in an input file
  5  invariant violation (invalid data, parameters or architecture)
  6  training diverged or produced non-finite activations

Failures print one JSON object to stderr:
  {\"error\":<kind>,\"exit_code\":<n>,\"message\":<text>}";

#[derive(Debug, Parser)]
#[command(name = "skd", version, about = "Selective knowledge distillation pipeline", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic student set with planted outliers.
    Synth(SynthArgs),
    /// Solve the selection at one lambda and write a mask.
    Select(SelectArgs),
    /// Solve the selection over a lambda grid and write a CSV.
    Sweep(SweepArgs),
    /// Inspect the selection graph.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Stage one: classification-only training of a fresh student.
    Pretrain(PretrainArgs),
    /// Stage three: teacher-supervised fine-tuning of a checkpoint.
    Finetune(FinetuneArgs),
    /// Freeze the trunk of a checkpoint and attach a fresh head.
    Transfer(TransferArgs),
    /// Report verification AUC, identification error and rank-1 retrieval.
    Eval(EvalArgs),
    /// Report inference throughput and parameter counts.
    Bench(BenchArgs),
    /// Repeat a run from its `.config.json` echo.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum GraphCommand {
    /// Write node unaries and intra-class edge weights.
    Dump(GraphArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 30)]
    pub per_class: usize,
    /// Teacher feature dimension.
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    /// Student input dimension.
    #[arg(long, default_value_t = 32)]
    pub input_dim: usize,
    /// Degraded versions per record.
    #[arg(long, default_value_t = 16)]
    pub versions: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 6)]
    pub active_dims: usize,
    #[arg(long, default_value_t = 3.0)]
    pub off_support_margin: f64,
    #[arg(long, default_value_t = 0.1)]
    pub input_noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub projection_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            class_count: self.classes,
            per_class_count: self.per_class,
            feature_dim: self.feature_dim,
            input_dim: self.input_dim,
            versions: self.versions,
            noise_scale: self.noise_scale,
            active_dims: self.active_dims,
            off_support_margin: self.off_support_margin,
            input_noise: self.input_noise,
            outlier_fraction: self.outlier_fraction,
            seed: self.seed,
            projection_seed: self.projection_seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    /// Student set file.
    #[arg(long)]
    pub set: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = Measure::CosSim)]
    pub measure: Measure,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub set: PathBuf,
    /// `pow2:<lo>..<hi>` or a comma-separated list.
    #[arg(long, default_value = "pow2:-8192..0", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, default_value_t = Measure::CosSim)]
    pub measure: Measure,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GraphArgs {
    #[arg(long)]
    pub set: PathBuf,
    #[arg(long, default_value_t = Measure::CosSim)]
    pub measure: Measure,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optimizer settings shared by both training stages.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SgdArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Seeds initialization and the sample order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub set: PathBuf,
    /// Hidden trunk widths before the mimic layer.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_IDENTITY_DIM)]
    pub identity_dim: usize,
    #[command(flatten)]
    pub sgd: SgdArgs,
    /// Checkpoint path; metrics go to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub set: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = Supervision::Sc)]
    pub supervision: Supervision,
    /// Selection mask; required for `s` and `sc`, ignored by `c` and `dc`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub reg_scale: f64,
    /// Regress onto unit-length teacher features.
    #[arg(long)]
    pub normalize_targets: bool,
    /// Recorded with the run; the mask decides which samples regress.
    #[arg(long, default_value_t = Measure::CosSim)]
    pub measure: Measure,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TransferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Class count of the new head.
    #[arg(long)]
    pub classes: usize,
    /// Seeds the re-initialized identity layer and head.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub set: PathBuf,
    /// Positive and negative verification pairs, each.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub pair_seed: u64,
    /// Features used for verification.
    #[arg(long, default_value_t = Tap::Identity)]
    pub tap: Tap,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// A `.config.json` echo written by an earlier run.
    pub config: PathBuf,
}

/// A failed command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            exit_code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.kind, "exit_code": self.exit_code, "message": self.message}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, exit_code) = match &e {
            Error::Io { .. } => ("io", EXIT_IO),
            Error::Parse { .. } => ("format", EXIT_FORMAT),
            Error::Diverged { .. } | Error::NonFiniteActivation { .. } => ("diverged", EXIT_DIVERGED),
            _ => ("invariant", EXIT_INVARIANT),
        };
        Self {
            kind,
            exit_code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `<path>.<suffix>` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn echo_config(command: &Command, out: &Path) -> CliResult<()> {
    let value = serde_json::to_value(command).expect("arguments serialize");
    write_json(&sidecar(out, "config.json"), &value)
}

fn selection_graph(set_path: &Path, measure: Measure) -> CliResult<(StudentSet, SelectionGraph)> {
    let set = load_student_set(set_path)?;
    let graph = build_selection_graph(&set, &class_centroids(&set)?, measure)?;
    Ok((set, graph))
}

fn train_config(sgd: &SgdArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: sgd.learning_rate,
        batch_size: sgd.batch_size,
        epochs: sgd.epochs,
        seed: sgd.seed,
        ..TrainConfig::default()
    }
}

fn save_metrics(history: &[EpochMetrics], out: &Path) -> CliResult<()> {
    let path = sidecar(out, "metrics.jsonl");
    let mut w = create(&path)?;
    write_metrics(history, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))
}

/// Runs one command and returns its JSON summary for stdout.
pub fn run(command: &Command) -> CliResult<serde_json::Value> {
    match command {
        Command::Synth(a) => {
            let set = synthesize(&a.config())?;
            save_student_set(&set, &a.out)?;
            echo_config(command, &a.out)?;
            let outliers = set.records().iter().filter(|r| r.outlier_flag == Some(true)).count();
            Ok(json!({"records": set.len(), "classes": set.class_count(), "outliers": outliers}))
        }
        Command::Select(a) => {
            let (_, graph) = selection_graph(&a.set, a.measure)?;
            let (mask, energy) = minimize(&graph, a.lambda)?;
            save_mask(&mask, a.lambda, &a.out)?;
            echo_config(command, &a.out)?;
            Ok(json!({"lambda": a.lambda, "selected": mask.selected_count(), "faces": mask.len(), "energy": energy}))
        }
        Command::Sweep(a) => {
            let grid = parse_grid(&a.grid)?;
            let (_, graph) = selection_graph(&a.set, a.measure)?;
            let sweep = lambda_sweep(&graph, &grid)?;
            let mut w = create(&a.out)?;
            sweep.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&a.out, e))?;
            echo_config(command, &a.out)?;
            Ok(json!({"lambdas": sweep.entries.len()}))
        }
        Command::Graph(GraphCommand::Dump(a)) => {
            let (_, graph) = selection_graph(&a.set, a.measure)?;
            let mut w = create(&a.out)?;
            graph.write_dump(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&a.out, e))?;
            echo_config(command, &a.out)?;
            Ok(json!({
                "nodes": graph.node_count(),
                "intra_edges": graph.intra_edge_count(),
                "folded_connections": graph.folded_connection_count(),
            }))
        }
        Command::Pretrain(a) => {
            let set = load_student_set(&a.set)?;
            let mut arch = Architecture::with_hidden(set.input_dim(), &a.hidden, set.feature_dim(), set.class_count());
            arch.identity_dim = a.identity_dim;
            let mut model = init_student(&arch, a.sgd.seed)?;
            let history = pretrain_student(&mut model, &set, &train_config(&a.sgd))?;
            save_checkpoint(&model, &a.out)?;
            save_metrics(&history, &a.out)?;
            echo_config(command, &a.out)?;
            Ok(json!({"epochs": history.len(), "final": history.last(), "params": model.param_count()}))
        }
        Command::Finetune(a) => {
            let set = load_student_set(&a.set)?;
            let mut model = load_checkpoint(&a.model)?;
            let mask = match (&a.mask, a.supervision.needs_mask()) {
                (Some(path), true) => Some(load_mask(path)?),
                (None, true) => {
                    return Err(CliError::usage(format!("--supervision {} needs --mask", a.supervision)));
                }
                (_, false) => None,
            };
            let config = TrainConfig {
                supervision: a.supervision,
                lambda: mask.as_ref().map_or(0.0, |m| m.1),
                reg_scale: a.reg_scale,
                normalize_targets: a.normalize_targets,
                measure: a.measure,
                ..train_config(&a.sgd)
            };
            let history = finetune(&mut model, &set, mask.as_ref().map(|m| &m.0), &config)?;
            save_checkpoint(&model, &a.out)?;
            save_metrics(&history, &a.out)?;
            echo_config(command, &a.out)?;
            Ok(json!({"epochs": history.len(), "final": history.last()}))
        }
        Command::Transfer(a) => {
            let model = transfer_student(&load_checkpoint(&a.model)?, a.classes, a.seed)?;
            save_checkpoint(&model, &a.out)?;
            echo_config(command, &a.out)?;
            Ok(json!({"classes": a.classes, "trainable_params": model.trainable_param_count()}))
        }
        Command::Eval(a) => {
            let report = evaluate(a)?;
            if let Some(out) = &a.out {
                write_json(out, &report)?;
                echo_config(command, out)?;
            }
            Ok(report)
        }
        Command::Bench(a) => bench(a),
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
            let inner: Command = serde_json::from_str(&text).map_err(|e| {
                CliError::from(Error::Parse {
                    line: e.line(),
                    kind: skd_core::ParseErrorKind::Structure(e.to_string()),
                })
            })?;
            if matches!(inner, Command::Rerun(_)) {
                return Err(CliError::usage("a rerun echo cannot point at another rerun"));
            }
            run(&inner)
        }
    }
}

fn evaluate(a: &EvalArgs) -> CliResult<serde_json::Value> {
    let model = load_checkpoint(&a.model)?;
    let set = load_student_set(&a.set)?;
    model.check_compatible(&set).or_else(|e| {
        // Held-out identities may outnumber the head; only the input and
        // mimic shapes must agree.
        if model.input_dim() == set.input_dim() && model.mimic_dim() == set.feature_dim() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let pairs = verification_pairs(&set, a.pairs, a.pair_seed)?;
    let auc = evaluate_verification(&model, &pairs, a.tap)?;
    let identification = if set.class_count() <= model.class_count() {
        Some(evaluate_identification(&model, &set)?)
    } else {
        None
    };

    // Gallery: the first record of every class, by its teacher feature.
    // Probes: every degraded input of the remaining records.
    let mut gallery: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut probes = Vec::new();
    for r in set.records() {
        if gallery.iter().any(|g| g.0 == r.label) {
            probes.extend(r.degraded_inputs.iter().map(|x| (r.label, x.clone())));
        } else {
            gallery.push((r.label, r.teacher_feature.clone()));
        }
    }
    let rank1 = if probes.is_empty() {
        None
    } else {
        Some(evaluate_retrieval(&model, &gallery, &probes, Tap::Mimic)?)
    };
    Ok(json!({
        "verification_auc": auc,
        "tap": a.tap,
        "pairs": pairs.len(),
        "top1_error": identification.map(|r| r.top1_error),
        "top5_error": identification.map(|r| r.top5_error),
        "rank1_accuracy": rank1,
    }))
}

fn bench(a: &BenchArgs) -> CliResult<serde_json::Value> {
    if a.iterations == 0 {
        return Err(CliError::usage("--iterations must be positive"));
    }
    let model = load_checkpoint(&a.model)?;
    let x: Vec<f64> = (0..model.input_dim()).map(|k| ((k % 7) as f64 - 3.0) / 3.0).collect();
    let start = Instant::now();
    let mut sink = 0.0;
    for _ in 0..a.iterations {
        sink += model.forward(&x)?.1[0];
    }
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    Ok(json!({
        "params": model.param_count(),
        "trainable_params": model.trainable_param_count(),
        "bytes_f64": model.param_count() * 8,
        "iterations": a.iterations,
        "inferences_per_sec": a.iterations as f64 / secs,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/model.json"), "config.json"), PathBuf::from("out/model.json.config.json"));
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).exit_code;
        let parse = Error::Parse {
            line: 3,
            kind: skd_core::ParseErrorKind::UnexpectedEof,
        };
        assert_eq!(code(parse), EXIT_FORMAT);
        assert_eq!(code(Error::PositiveLambda(1.0)), EXIT_INVARIANT);
        assert_eq!(code(Error::Diverged { epoch: 1, loss: f64::INFINITY }), EXIT_DIVERGED);
        assert_eq!(code(Error::NonFiniteActivation { layer: 0 }), EXIT_DIVERGED);
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(code(io), EXIT_IO);
    }

    #[test]
    fn echo_round_trips_through_serde() {
        let cli = Cli::try_parse_from(["skd", "select", "--set", "s", "--lambda", "-4", "--measure", "cosdist", "--out", "m"]).unwrap();
        let text = serde_json::to_string(&cli.command).unwrap();
        let back: Command = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(text.contains("\"measure\":\"cosdist\""));
    }
}
