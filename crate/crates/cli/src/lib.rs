//! `mcmklr` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
//! Reports are JSON lines: one object per Newton iteration, then one summary object.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mcm_klr::data_io::{
    generate_blobs, generate_checkerboard, generate_fig1_synthetic, load_model, read_sparse_file,
    save_model, Dataset, MinMaxScaler, ModelFile, SavedModel,
};
use mcm_klr::dense_oracle::train_exact;
use mcm_klr::kernel::{GridSpec, RadialKernel};
use mcm_klr::klr_fast::{train, BinaryModel, GridChoice, SolverKind, TrainConfig, TrainDiagnostics};
use mcm_klr::metrics::{accuracy, macro_f1, mcc, roc_auc, ConfusionMatrix};
use mcm_klr::multiclass::train_ova_with;
use mcm_klr::tensor_fft::LevelOrder;
use mcm_klr::KlrError;

#[derive(Debug, Parser)]
#[command(name = "mcmklr", version, about = "Kernel logistic regression on multilevel circulant matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a sparse text dataset.
    Train(TrainArgs),
    /// Write predicted labels (and scores for binary models).
    Predict(PredictArgs),
    /// Evaluate a model on a labelled dataset.
    Eval(EvalArgs),
    /// Generate a synthetic dataset in sparse text format.
    Generate(GenerateArgs),
    /// Measure seconds per Newton iteration and peak heap over a size ladder.
    BenchScaling(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Mcm,
    Exact,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Gaussian width: g(r) = exp(-sigma r²).
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub lambda: f64,
    /// Comma-separated level order, or `auto:q`.
    #[arg(long, default_value = "auto:3")]
    pub levels: String,
    /// Lattice step: one value for all levels or one per level.
    #[arg(long, value_delimiter = ',')]
    pub h: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    pub tmax: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 20)]
    pub max_backtracks: usize,
    #[arg(long, value_enum, default_value_t = Solver::Mcm)]
    pub solver: Solver,
    /// One-vs-all over every label value in the data.
    #[arg(long)]
    pub multiclass: bool,
    /// Min-max scale features to [0, 1] (stored with the model).
    #[arg(long)]
    pub scale: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Classes trained concurrently in one-vs-all mode.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Checkerboard,
    Fig1,
    Blobs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: Generator,
    /// Training points (fig1 defaults to 3375 when absent).
    #[arg(long)]
    pub n: Option<usize>,
    /// Test points for fig1 (default 625).
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Where fig1 writes its test split.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Generator::Checkerboard)]
    pub generator: Generator,
    /// Newton iterations per run (the gradient test is disabled).
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value = "auto:3")]
    pub levels: String,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<KlrError> for CliError {
    fn from(e: KlrError) -> Self {
        let code = match &e {
            KlrError::InvalidParameter(_) => 1,
            KlrError::Diverged(_) | KlrError::Numerical(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        KlrError::Io(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

// Heap accounting, fed by the binary's global allocator.
static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static TRACKING: AtomicBool = AtomicBool::new(false);

/// Allocation hooks for a counting global allocator.
pub fn note_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
    TRACKING.store(true, Ordering::Relaxed);
}

pub fn note_dealloc(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Peak live heap bytes since the last reset, if a counting allocator is installed.
fn peak_heap() -> Option<usize> {
    TRACKING.load(Ordering::Relaxed).then(|| PEAK.load(Ordering::Relaxed))
}

/// Parses `args` (including the program name) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::BenchScaling(a) => cmd_bench_scaling(&a),
    }
}

/// `auto:q` or a comma list of level sizes.
pub fn parse_levels(spec: &str, h: &[f64]) -> CliResult<GridChoice> {
    if let Some(q) = spec.strip_prefix("auto:") {
        let levels: usize = q
            .parse()
            .map_err(|_| CliError::usage(format!("bad level count in --levels {spec:?}")))?;
        return Ok(GridChoice::Auto {
            levels,
            h: h.to_vec(),
        });
    }
    let order: LevelOrder = spec
        .parse()
        .map_err(|e: KlrError| CliError::usage(format!("--levels {spec:?}: {e}")))?;
    let steps = match h.len() {
        0 => vec![1.0; order.q()],
        1 => vec![h[0]; order.q()],
        _ => h.to_vec(),
    };
    let grid = GridSpec::new(steps, order).map_err(|e| CliError::usage(e.to_string()))?;
    Ok(GridChoice::Fixed(grid))
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let kernel = RadialKernel::gaussian(a.sigma).map_err(|e| CliError::usage(e.to_string()))?;
    let config = TrainConfig {
        lambda: a.lambda,
        kernel,
        grid: parse_levels(&a.levels, &a.h)?,
        t_max: a.tmax,
        eps: a.eps,
        armijo_delta: a.delta,
        armijo_beta: a.beta,
        max_backtracks: a.max_backtracks,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if a.jobs == Some(0) {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    Ok(config)
}

fn iteration_lines(d: &TrainDiagnostics, class: Option<f64>) -> Vec<Value> {
    (0..d.objective_trace.len())
        .map(|t| {
            let mut v = json!({
                "type": "iteration",
                "iteration": t,
                "objective": d.objective_trace[t],
                "grad_norm": d.grad_norm_trace[t],
                "step": if t == 0 { Value::Null } else { json!(d.step_trace[t - 1]) },
                "backtracks": if t == 0 { Value::Null } else { json!(d.backtrack_trace[t - 1]) },
                "seconds": if t == 0 { json!(d.setup_seconds) } else { json!(d.iteration_seconds[t - 1]) },
            });
            if let Some(c) = class {
                v["class"] = json!(c);
            }
            v
        })
        .collect()
}

fn diagnostics_json(d: &TrainDiagnostics) -> Value {
    json!({
        "iterations": d.iterations,
        "converged": d.converged,
        "final_grad_norm": d.final_grad_norm,
        "train_seconds": d.train_seconds(),
        "setup_seconds": d.setup_seconds,
        "clamp_count": d.clamp_count,
        "line_search_stalls": d.line_search_stalls,
        "spectrum_relative_imag": d.spectrum_imag,
        "transforms": {"forward": d.transforms.forward, "adjoint": d.transforms.adjoint},
    })
}

fn write_report(path: Option<&Path>, lines: &[Value]) -> CliResult<()> {
    let Some(path) = path else { return Ok(()) };
    let mut w = BufWriter::new(File::create(path)?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let config = train_config(a)?;
    let raw = read_sparse_file(&a.data)?;
    let scaler = a.scale.then(|| MinMaxScaler::fit(raw.x()));
    let data = match &scaler {
        Some(s) => s.transform(&raw)?,
        None => raw,
    };
    let solver = match a.solver {
        Solver::Mcm => SolverKind::Mcm,
        Solver::Exact => SolverKind::Exact,
    };
    let start = Instant::now();
    let (model, lines) = if a.multiclass {
        let m = train_ova_with(&data, &config, solver, a.jobs)?;
        let mut lines = Vec::new();
        for (c, b) in m.classes.iter().zip(&m.models) {
            lines.extend(iteration_lines(&b.diagnostics, Some(*c)));
        }
        let per_class: Vec<Value> = m
            .classes
            .iter()
            .zip(&m.models)
            .map(|(c, b)| {
                let mut v = diagnostics_json(&b.diagnostics);
                v["class"] = json!(c);
                v
            })
            .collect();
        let pred = m.predict(data.x())?;
        let acc = accuracy(data.y(), &pred)?;
        lines.push(json!({
            "type": "summary",
            "command": "train",
            "kind": "multiclass",
            "solver": solver.name(),
            "n": data.n(),
            "d": data.d(),
            "classes": m.classes,
            "levels": m.models[0].order.dims(),
            "wall_seconds": start.elapsed().as_secs_f64(),
            "iterations": m.models.iter().map(|b| b.diagnostics.iterations).max(),
            "train_accuracy": acc,
            "per_class": per_class,
        }));
        (SavedModel::Multiclass(m), lines)
    } else {
        if data.n_classes() != 2 {
            return Err(KlrError::Validation(format!(
                "binary training needs exactly two label values, found {}; use --multiclass",
                data.n_classes()
            ))
            .into());
        }
        let m: BinaryModel = match solver {
            SolverKind::Mcm => train(&data, &config)?,
            SolverKind::Exact => train_exact(&data, &config)?,
        };
        let mut lines = iteration_lines(&m.diagnostics, None);
        let pred = m.predict_class(data.x())?;
        let mut summary = json!({
            "type": "summary",
            "command": "train",
            "kind": "binary",
            "solver": solver.name(),
            "n": data.n(),
            "N": m.alpha.len(),
            "d": data.d(),
            "classes": m.classes,
            "levels": m.order.dims(),
            "wall_seconds": start.elapsed().as_secs_f64(),
            "train_accuracy": accuracy(data.y(), &pred)?,
        });
        if let (Value::Object(s), Value::Object(d)) = (&mut summary, diagnostics_json(&m.diagnostics)) {
            s.extend(d);
        }
        lines.push(summary);
        (SavedModel::Binary(m), lines)
    };
    save_model(&ModelFile { model, scaler }, &a.out)?;
    write_report(a.report.as_deref(), &lines)?;
    let summary = lines.last().expect("summary line");
    println!(
        "trained {} model: n={} iterations={} train_accuracy={:.6}",
        summary["kind"].as_str().unwrap_or(""),
        summary["n"],
        summary["iterations"],
        summary["train_accuracy"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Loads the data in the model's feature space (dimension and scaling).
fn model_and_data(model_path: &Path, data_path: &Path) -> CliResult<(ModelFile, Dataset)> {
    let file = load_model(model_path)?;
    let raw = read_sparse_file(data_path)?;
    let d = file.model.d();
    if raw.d() > d {
        return Err(KlrError::Dimension(format!(
            "model expects {d} features, data has {}",
            raw.d()
        ))
        .into());
    }
    let raw = raw.with_dimension(d)?;
    let data = match &file.scaler {
        Some(s) => s.transform(&raw)?,
        None => raw,
    };
    Ok((file, data))
}

/// Canonical model class of each sample, via the label values.
fn model_classes(classes: &[f64], data: &Dataset) -> CliResult<Vec<usize>> {
    data.y()
        .iter()
        .map(|&c| {
            let v = data.meta().label_values[c];
            classes.iter().position(|&k| k == v).ok_or_else(|| {
                KlrError::Validation(format!("label {v} does not occur in the model's classes"))
                    .into()
            })
        })
        .collect()
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let (file, data) = model_and_data(&a.model, &a.data)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    match &file.model {
        SavedModel::Binary(m) => {
            for s in m.predict(data.x())? {
                let label = m.classes[usize::from(s >= 0.5)];
                writeln!(out, "{label} {s:.17e}")?;
            }
        }
        SavedModel::Multiclass(m) => {
            for label in m.predict_labels(data.x())? {
                writeln!(out, "{label}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (file, data) = model_and_data(&a.model, &a.data)?;
    let truth = model_classes(file.model.classes(), &data)?;
    let summary = match &file.model {
        SavedModel::Binary(m) => {
            let scores = m.predict(data.x())?;
            let pred: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
            let acc = accuracy(&truth, &pred)?;
            let auc = roc_auc(&truth, &scores).ok();
            println!("accuracy {acc:.6}");
            match auc {
                Some(v) => println!("auc {v:.6}"),
                None => println!("auc undefined"),
            }
            json!({"type": "summary", "command": "eval", "kind": "binary", "n": data.n(),
                   "accuracy": acc, "auc": auc})
        }
        SavedModel::Multiclass(m) => {
            let pred = m.predict(data.x())?;
            let cm = ConfusionMatrix::from_labels(&truth, &pred, m.n_classes())?;
            let (acc, f1, r) = (cm.accuracy(), macro_f1(&cm), mcc(&cm));
            println!("accuracy {acc:.6}");
            println!("macro_f1 {f1:.6}");
            println!("mcc {r:.6}");
            json!({"type": "summary", "command": "eval", "kind": "multiclass", "n": data.n(),
                   "accuracy": acc, "macro_f1": f1, "mcc": r})
        }
    };
    write_report(a.report.as_deref(), &[summary])
}

/// Writes a dataset in sparse text format; zero features are omitted.
pub fn write_sparse_text(data: &Dataset, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..data.n() {
        write!(w, "{}", data.meta().label_values[data.y()[i]])?;
        for (j, v) in data.x().row(i).iter().enumerate() {
            if *v != 0.0 {
                write!(w, " {}:{v}", j + 1)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    match a.kind {
        Generator::Checkerboard => {
            let n = a.n.ok_or_else(|| CliError::usage("--n is required"))?;
            write_sparse_text(&generate_checkerboard(n, a.seed)?, &a.out)
        }
        Generator::Blobs => {
            let n = a.n.ok_or_else(|| CliError::usage("--n is required"))?;
            write_sparse_text(&generate_blobs(n, a.classes, a.seed)?, &a.out)
        }
        Generator::Fig1 => {
            let test_out = a
                .test_out
                .as_ref()
                .ok_or_else(|| CliError::usage("fig1 needs --test-out for the test split"))?;
            let (train, test) = generate_fig1_synthetic(
                a.n.unwrap_or(mcm_klr::data_io::FIG1_N_TRAIN),
                a.n_test.unwrap_or(mcm_klr::data_io::FIG1_N_TEST),
                a.seed,
            )?;
            write_sparse_text(&train, &a.out)?;
            write_sparse_text(&test, test_out)
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn cmd_bench_scaling(a: &BenchArgs) -> CliResult<()> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(CliError::usage("--sizes needs at least one positive size"));
    }
    if a.reps < 3 {
        return Err(CliError::usage("--reps must be at least 3"));
    }
    if a.iters == 0 {
        return Err(CliError::usage("--iters must be at least 1"));
    }
    let kernel = RadialKernel::gaussian(a.sigma).map_err(|e| CliError::usage(e.to_string()))?;
    let mut config = TrainConfig::new(a.lambda, kernel);
    config.grid = parse_levels(&a.levels, &[])?;
    config.t_max = a.iters;
    // fixed iteration count: the gradient test never fires
    config.eps = f64::MIN_POSITIVE;
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let mut lines = Vec::new();
    let mut prev: Option<f64> = None;
    println!("n\tN\tseconds_per_iteration\tratio\tpeak_heap_bytes");
    for &n in &a.sizes {
        let data = match a.generator {
            Generator::Checkerboard => generate_checkerboard(n, a.seed)?,
            Generator::Fig1 => generate_fig1_synthetic(n, 1, a.seed)?.0,
            Generator::Blobs => {
                let ds = generate_blobs(n, 2, a.seed)?;
                if ds.n_classes() != 2 {
                    return Err(CliError::usage("blobs benchmark needs n >= 2"));
                }
                ds
            }
        };
        let mut per_iter = Vec::with_capacity(a.reps);
        let mut peak = 0usize;
        let mut big_n = 0usize;
        let mut backtracks = 0usize;
        for _ in 0..a.reps {
            reset_peak();
            let base = CURRENT.load(Ordering::Relaxed);
            let m = train(&data, &config)?;
            peak = peak.max(peak_heap().unwrap_or(0).saturating_sub(base));
            big_n = m.alpha.len();
            let d = &m.diagnostics;
            backtracks = d.backtrack_trace.iter().sum();
            // per-run median, so a stalled line search after convergence is not
            // mistaken for a slower transform
            let mut secs = d.iteration_seconds.clone();
            per_iter.push(median(&mut secs));
        }
        // best of the repetitions: scheduler noise on a shared machine only ever adds time
        let sec = per_iter.iter().cloned().fold(f64::INFINITY, f64::min);
        let ratio = prev.map(|p| sec / p);
        prev = Some(sec);
        let peak = peak_heap().map(|_| peak);
        println!(
            "{n}\t{big_n}\t{sec:.6e}\t{}\t{}",
            ratio.map_or("-".to_string(), |r| format!("{r:.3}")),
            peak.map_or("-".to_string(), |p| p.to_string())
        );
        lines.push(json!({
            "type": "bench",
            "n": n,
            "N": big_n,
            "seconds_per_iteration": sec,
            "ratio": ratio,
            "peak_heap_bytes": peak,
            "reps": a.reps,
            "iterations": a.iters,
            "backtracks": backtracks,
        }));
    }
    write_report(a.report.as_deref(), &lines)
}
