//! Command-line front end: `gen-data`, `train`, `eval` and `verify`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed
//! verification or training divergence, 3 I/O or file-format error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use amorlip::amortization::{DivergenceGenerator, Objective};
use amorlip::data::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use amorlip::eval::evaluate;
use amorlip::trainer::{self, EvalModel, JsonlSink, Method, MetricsSink, NullSink, TrainConfig};
use amorlip::verify::{run_suite, Suite, VerifyOptions};
use amorlip::Error;

#[derive(Parser)]
#[command(name = "amorlip", version, about = "Amortized contrastive training on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Amorlip,
    Clip,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    L2log,
    Fdiv,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Kl,
    #[value(name = "kl_affine")]
    KlAffine,
    Js,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradcheck,
    Spectral,
    Schedules,
    Equivalence,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic APDS1 dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        classes: usize,
        #[arg(long = "dim-a", default_value_t = 64)]
        dim_a: usize,
        #[arg(long = "dim-b", default_value_t = 48)]
        dim_b: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train encoders with AmorLIP or the contrastive baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long, value_enum)]
        generator: Option<GeneratorArg>,
        /// Flat JSON object with TrainConfig fields; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL metrics output.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// AMCK1 checkpoint written when training finishes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a verification suite; prints one JSON line per check.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        /// Random features per map (spectral suite).
        #[arg(long, default_value_t = 200_000)]
        features: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Contract(_) | Error::Domain(_) | Error::Degenerate(_) => 1,
            Error::Divergence(_) | Error::NonFinite(_) | Error::Oracle { .. } => 2,
            Error::Io(_) | Error::Format { .. } => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn gen_data(out: &Path, spec: SyntheticSpec) -> Result<(), Failure> {
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, out).map_err(|e| match e {
        Error::Io(io) => io_failure(out, io),
        e => e.into(),
    })?;
    println!(
        "{}",
        json!({
            "n": spec.n,
            "classes": spec.num_classes,
            "dims": [spec.dim_a, spec.dim_b],
            "path": out.display().to_string(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    method: Option<MethodArg>,
    objective: Option<ObjectiveArg>,
    generator: Option<GeneratorArg>,
    config: Option<&Path>,
    metrics: Option<&Path>,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = method {
        cfg.method = match m {
            MethodArg::Amorlip => Method::Amorlip,
            MethodArg::Clip => Method::Clip,
        };
    }
    if let Some(o) = objective {
        cfg.objective = match o {
            ObjectiveArg::L2log => Objective::L2log,
            ObjectiveArg::Fdiv => Objective::Fdiv,
        };
    }
    if let Some(g) = generator {
        cfg.generator = match g {
            GeneratorArg::Kl => DivergenceGenerator::Kl,
            GeneratorArg::KlAffine => DivergenceGenerator::KlAffine,
            GeneratorArg::Js => DivergenceGenerator::Js,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.method == Method::Clip && (objective.is_some() || generator.is_some()) {
        eprintln!("warning: --method clip ignores amortization flags (--objective, --generator)");
    }
    cfg.validate()?;

    let ds = load_dataset(data).map_err(|e| match e {
        Error::Io(io) => io_failure(data, io),
        e => e.into(),
    })?;
    let state = match metrics {
        Some(p) => {
            let file = File::create(p).map_err(|e| io_failure(p, e))?;
            let mut sink = JsonlSink::new(BufWriter::new(file));
            let state = trainer::run(&cfg, &ds, &mut sink as &mut dyn MetricsSink)?;
            sink.into_inner().flush().map_err(|e| io_failure(p, e))?;
            state
        }
        None => trainer::run(&cfg, &ds, &mut NullSink)?,
    };
    if let Some(p) = checkpoint {
        state.save_checkpoint(p).map_err(|e| match e {
            Error::Io(io) => io_failure(p, io),
            e => e.into(),
        })?;
    }
    println!(
        "{}",
        json!({
            "method": cfg.method,
            "steps": state.progress.step,
            "epochs": state.progress.epochs_done,
            "gather_count": state.progress.gather_count,
            "tau": state.temperature.tau(),
        })
    );
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, report: &Path) -> Result<(), Failure> {
    let model = EvalModel::load(checkpoint).map_err(|e| match e {
        Error::Io(io) => io_failure(checkpoint, io),
        e => e.into(),
    })?;
    let ds = load_dataset(data).map_err(|e| match e {
        Error::Io(io) => io_failure(data, io),
        e => e.into(),
    })?;
    let rep = evaluate(&model, &ds)?;
    let text = serde_json::to_string(&rep).expect("report serializes");
    std::fs::write(report, format!("{text}\n")).map_err(|e| io_failure(report, e))?;
    println!("{text}");
    Ok(())
}

fn verify(suite: SuiteArg, opts: VerifyOptions) -> Result<(), Failure> {
    let suite = match suite {
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::Spectral => Suite::Spectral,
        SuiteArg::Schedules => Suite::Schedules,
        SuiteArg::Equivalence => Suite::Equivalence,
    };
    let checks = run_suite(suite, &opts)?;
    for c in &checks {
        println!("{}", serde_json::to_string(c).expect("check serializes"));
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Failure {
            code: 2,
            message: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            classes,
            dim_a,
            dim_b,
            noise,
            seed,
        } => gen_data(
            &out,
            SyntheticSpec {
                n,
                num_classes: classes,
                dim_a,
                dim_b,
                noise_sigma: noise,
                seed,
            },
        ),
        Command::Train {
            data,
            method,
            objective,
            generator,
            config,
            metrics,
            checkpoint,
            seed,
        } => train(
            &data,
            method,
            objective,
            generator,
            config.as_deref(),
            metrics.as_deref(),
            checkpoint.as_deref(),
            seed,
        ),
        Command::Eval {
            data,
            checkpoint,
            report,
        } => eval(&data, &checkpoint, &report),
        Command::Verify {
            suite,
            features,
            trials,
            instances,
            seed,
        } => verify(
            suite,
            VerifyOptions {
                features,
                trials,
                instances,
                seed,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
