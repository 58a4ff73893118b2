//! `covpool`: gradient checks, toy training and geometry tables.
//!
//! Machine-readable results go to standard output, diagnostics to standard
//! error. Exit codes: 0 success, 1 runtime or numerical failure, 2 usage
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covpool::geometry::{self, LambdaGrid, SpectrumHistogram, HIST_RANGE};
use covpool::gradcheck::{run_grid, GradCheckOptions};
use covpool::io::checkpoint::Checkpoint;
use covpool::io::{atomic_write, tensorfile::TensorReader};
use covpool::trainer::{evaluate, history_csv, train, ExperimentConfig, InitMode, SyntheticSpec};
use covpool::{BackwardMethod, Error, NormalizationSpec, Precision, Variant};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "covpool", version, about = "Matrix power normalized covariance pooling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic vs finite-difference gradients of the pooling layer.
    Gradcheck(GradcheckArgs),
    /// Train a toy network from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a synthetic split.
    Eval(EvalArgs),
    /// Pow-E vs Log-E distance on a random SPD pair.
    Metric(MetricArgs),
    /// Eigenvalue histogram of a stream of feature matrices.
    Spectrum(SpectrumArgs),
    /// Square-root and logarithm tabulated over a λ grid.
    Shrinkage(ShrinkageArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Eigen,
    Fused,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Variant name, or `all` for every variant.
    #[arg(long, default_value = "mpn")]
    variant: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5", allow_negative_numbers = true)]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Prec,
    #[arg(long, value_enum, default_value = "eigen")]
    method: Method,
    /// Finite-difference step.
    #[arg(long, default_value_t = covpool::gradcheck::DEFAULT_H)]
    h: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON with `net`, `train` and `data`).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; the history CSV goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config or bare synthetic data spec.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    d: usize,
}

#[derive(Args)]
struct SpectrumArgs {
    /// TensorFile stream of 2-D feature matrices (`d × N`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    bins: usize,
}

#[derive(Args)]
struct ShrinkageArgs {
    /// `lo:hi:log|lin:count`.
    #[arg(long, default_value = "1e-5:10:log:200")]
    lambda_grid: String,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Writes to standard output; a closed pipe ends the command quietly.
fn emit(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(format!("writing output: {e}"))),
        _ => Ok(()),
    }
}

fn json_line<T: Serialize>(value: &T) -> CmdResult {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    s.push('\n');
    emit(&s)
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse().map_err(usage)?]
    };
    for &v in &variants {
        for &alpha in &a.alpha {
            NormalizationSpec::new(v).with_alpha(alpha).validate().map_err(usage)?;
        }
    }
    if a.d < 2 || a.n < 2 || 2 * a.n < a.d {
        return Err(usage(format!("need d ≥ 2, n ≥ 2 and n ≥ d/2, got d={} n={}", a.d, a.n)));
    }
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(usage(format!("--h must be positive, got {}", a.h)));
    }
    let opts = GradCheckOptions {
        h: a.h,
        precision: match a.precision {
            Prec::F32 => Precision::F32,
            Prec::F64 => Precision::F64,
        },
        method: match a.method {
            Method::Eigen => BackwardMethod::Eigen,
            Method::Fused => BackwardMethod::Fused,
        },
        ..GradCheckOptions::default()
    };
    let reports = run_grid(&variants, &a.alpha, &a.seed, a.d, a.n, &opts)?;
    json_line(&reports)?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!(
            "FAIL {} alpha={} seed={}: max_rel_err {:e} ≥ {:e}",
            r.variant, r.alpha, r.seed, r.max_rel_err, r.threshold
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} checks failed", failed.len(), reports.len())))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    final_record: Option<covpool::trainer::EpochRecord>,
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg: ExperimentConfig = read_config(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(usage)?;
    let warm = match (&cfg.train.init, &cfg.train.warm_source) {
        (InitMode::Warm, Some(src)) => {
            let src = if src.is_relative() {
                a.config.parent().unwrap_or(Path::new(".")).join(src)
            } else {
                src.clone()
            };
            Some(Checkpoint::load(&src)?.to_network()?)
        }
        _ => None,
    };
    let (tr, te) = cfg.datasets()?;
    let out = train(&cfg.net, &cfg.train, &tr, &te, warm.as_ref()).map_err(|e| match e {
        Error::NonFiniteLoss { epoch } => Failure::Runtime(format!("training diverged: non-finite loss at epoch {epoch}")),
        other => other.into(),
    })?;
    for r in &out.history {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train {:.4}/{:.3}  test {:.4}/{:.3}",
            r.epoch, r.lr, r.train_loss, r.train_err, r.test_loss, r.test_err
        );
    }
    Checkpoint::from_outcome(&out).save(&a.out)?;
    atomic_write(&sibling(&a.out, ".history.csv"), history_csv(&out.history).as_bytes())?;
    json_line(&TrainSummary {
        epochs: out.epoch,
        final_record: out.history.last().cloned(),
    })
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let text = fs::read_to_string(&a.data).map_err(|e| usage(format!("cannot read {}: {e}", a.data.display())))?;
    let spec: SyntheticSpec = match serde_json::from_str::<ExperimentConfig>(&text) {
        Ok(c) => c.data,
        Err(_) => serde_json::from_str(&text).map_err(|e| usage(format!("invalid data spec {}: {e}", a.data.display())))?,
    };
    spec.validate().map_err(usage)?;
    let net = Checkpoint::load(&a.checkpoint)?.to_network()?;
    let (tr, te) = covpool::trainer::generate_synthetic(&spec)?;
    let data = match a.split {
        Split::Train => tr,
        Split::Test => te,
    };
    json_line(&evaluate(&net, &data)?)
}

fn metric(a: MetricArgs) -> CmdResult {
    if let Some(bad) = a.alpha.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
        return Err(usage(format!("alpha must be positive, got {bad}")));
    }
    if a.d == 0 {
        return Err(usage("--d must be positive"));
    }
    let (p, q) = geometry::random_spd_pair(a.seed, a.d);
    let log_e = geometry::log_euclidean_dist(&p, &q)?;
    let mut out = String::from("alpha,pow_e,log_e,rel_gap\n");
    for &alpha in &a.alpha {
        let pow_e = geometry::pow_euclidean_dist(&p, &q, alpha)?;
        out.push_str(&format!("{alpha:e},{pow_e:e},{log_e:e},{:e}\n", (pow_e - log_e).abs() / log_e));
    }
    emit(&out)
}

fn spectrum(a: SpectrumArgs) -> CmdResult {
    let mut hist = SpectrumHistogram::new(a.bins, HIST_RANGE).map_err(usage)?;
    let file = fs::File::open(&a.input).map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", a.input.display())))?;
    let mut reader = TensorReader::new(std::io::BufReader::new(file));
    while let Some(t) = reader.next_tensor()? {
        let offset = reader.offset();
        let x = t.to_matrix().map_err(|e| Failure::Runtime(format!("tensor ending at byte {offset}: {e}")))?;
        hist.add_features(&x, Precision::F32)?;
    }
    eprintln!("{} matrices, {} eigenvalues, {} zero", hist.n_matrices, hist.total(), hist.zero_count);
    emit(&hist.to_csv())
}

fn shrinkage(a: ShrinkageArgs) -> CmdResult {
    let grid: LambdaGrid = a.lambda_grid.parse().map_err(usage)?;
    let rows = geometry::shrinkage_table(&grid.values())?;
    emit(&geometry::shrinkage_csv(&rows))
}

fn configure_threads() -> CmdResult {
    if let Ok(v) = std::env::var("COVPOOL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("COVPOOL_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Metric(a) => metric(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Shrinkage(a) => shrinkage(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `covpool --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
