//! `otdr`: dataset generation, training, evaluation and trace analysis.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otdr_core::inference::predictions_jsonl;
use otdr_core::pipeline::{
    emit_report, read_trace_csv, write_trace_csv, EvalFilter, EvalReport, FaultVariant, Method, Run, RunConfig,
};
use otdr_core::CoreError;

#[derive(Debug, Parser)]
#[command(name = "otdr", version, about = "OTDR trace denoising and fault analysis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated SNR buckets in dB (eval, report).
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// Method name, or comma-separated names where a stage accepts several.
    #[arg(long, global = true, value_name = "NAME", value_delimiter = ',')]
    method: Option<Vec<String>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate traces and write the labeled dataset.
    Gen,
    /// Train the convolutional denoising autoencoder.
    TrainDcae,
    /// Train the fault networks (`--method clean|noisy`, both by default).
    TrainFaultnet,
    /// Tune the classical filters and train the reference denoisers.
    TrainBaselines,
    /// Denoise a trace CSV (`index,distance_m,power`).
    Denoise {
        input: PathBuf,
        /// Window stride; overlapping windows are averaged.
        #[arg(long, default_value_t = 50)]
        stride: usize,
    },
    /// Report the events found in a trace CSV as JSON lines.
    Analyze { input: PathBuf },
    /// Evaluate every trained model on the test split.
    Eval,
    /// Train one autoencoder per depth, kernel size and input length.
    Sweep,
    /// Re-emit the evaluation tables, filtered by `--snr` and `--method`.
    Report,
}

/// Failure with the process exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Invalid(_) | CoreError::Config(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn methods(names: &Option<Vec<String>>) -> Result<Vec<Method>, Failure> {
    names
        .iter()
        .flatten()
        .map(|n| Method::parse(n).ok_or_else(|| usage(format!("unknown method '{n}'"))))
        .collect()
}

fn variants(names: &Option<Vec<String>>) -> Result<Vec<FaultVariant>, Failure> {
    match names {
        None => Ok(FaultVariant::ALL.to_vec()),
        Some(list) => list
            .iter()
            .map(|n| FaultVariant::parse(n).ok_or_else(|| usage(format!("unknown fault network '{n}' (clean, noisy)"))))
            .collect(),
    }
}

fn single<T: Copy>(list: Vec<T>, default: T, what: &str) -> Result<T, Failure> {
    match list.as_slice() {
        [] => Ok(default),
        [one] => Ok(*one),
        _ => Err(usage(format!("{what} takes a single --method"))),
    }
}

fn output_path(run: &Run, input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    run.paths.dir.join(format!("{stem}.{suffix}"))
}

fn load_run(c: &Common) -> Result<Run, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    Ok(Run::new(cfg)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", dir.display()),
    })
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let run = load_run(&cli.common)?;
    let c = &cli.common;
    let stderr = &mut std::io::stderr();
    match cli.command {
        Command::Gen => {
            let ds = run.generate()?;
            let _ = writeln!(
                stderr,
                "wrote {} ({} train, {} val, {} test windows from {} traces)",
                run.paths.dataset().display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                ds.meta.traces_used
            );
        }
        Command::TrainDcae => {
            let log = run.train_dcae()?;
            let _ = writeln!(stderr, "best epoch {} val mse {:.6}", log.best_epoch, log.best_val_loss);
        }
        Command::TrainFaultnet => {
            for v in variants(&c.method)? {
                let log = run.train_faultnet(v)?;
                let _ = writeln!(stderr, "{}: best epoch {} val loss {:.4}", v.name(), log.best_epoch, log.best_val_loss);
            }
        }
        Command::TrainBaselines => run.train_baselines(&methods(&c.method)?)?,
        Command::Denoise { input, stride } => {
            let method = single(methods(&c.method)?, Method::Dcae, "denoise")?;
            let trace = read_trace_csv(&input)?;
            let out = run.denoise_trace_with(method, &trace, stride)?;
            create_dir(&run.paths.dir)?;
            let path = output_path(&run, &input, "denoised.csv");
            write_trace_csv(&path, &out)?;
            let _ = writeln!(stderr, "wrote {}", path.display());
        }
        Command::Analyze { input } => {
            let variant = single(variants(&c.method.clone().or(Some(vec!["clean".into()])))?, FaultVariant::Clean, "analyze")?;
            let trace = read_trace_csv(&input)?;
            let text = predictions_jsonl(&run.analyze(variant, &trace)?)?;
            create_dir(&run.paths.dir)?;
            let path = output_path(&run, &input, "events.jsonl");
            std::fs::write(&path, &text).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}", path.display()),
            })?;
            print!("{text}");
        }
        Command::Eval => {
            let m = methods(&c.method)?;
            let filter = EvalFilter {
                snr: c.snr.clone(),
                methods: (!m.is_empty()).then_some(m),
            };
            let report = run.evaluate(&filter)?;
            let _ = writeln!(
                stderr,
                "wrote {} ({} denoising rows, {} detection rows)",
                run.paths.eval().display(),
                report.denoising.len(),
                report.detection.len()
            );
        }
        Command::Sweep => {
            let report = run.sweep()?;
            let _ = writeln!(stderr, "wrote {} ({} points)", run.paths.sweep().display(), report.rows.len());
        }
        Command::Report => {
            let path = run.paths.eval();
            let bytes = std::fs::read(&path).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}; run `otdr eval` first", path.display()),
            })?;
            let mut report: EvalReport = serde_json::from_slice(&bytes).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {e}", path.display()),
            })?;
            if report.provenance.config_hash != run.hash {
                return Err(usage(format!(
                    "{} was produced under configuration {}, current configuration is {}",
                    path.display(),
                    report.provenance.config_hash,
                    run.hash
                )));
            }
            filter_report(&mut report, c.snr.as_deref(), &methods(&c.method)?);
            let dir = run.paths.dir.join("report");
            create_dir(&dir)?;
            emit_report(&dir, &report)?;
            let _ = writeln!(stderr, "wrote tables to {}", dir.display());
        }
    }
    Ok(())
}

fn filter_report(report: &mut EvalReport, snr: Option<&[f64]>, methods: &[Method]) {
    let keep = |b: f64| snr.is_none_or(|list| list.iter().any(|s| (s - b).abs() < 1e-9));
    report.denoising.retain(|r| {
        keep(r.snr_bucket) && (methods.is_empty() || methods.iter().any(|m| m.name() == r.method))
    });
    report.detection.retain(|r| keep(r.snr_bucket));
    report.confusion.retain(|r| keep(r.snr_bucket));
    report.gaps.retain(|b| keep(*b));
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
