//! `vssl` command-line driver.
//!
//! Machine-readable output goes to stdout as JSON; progress and diagnostics go
//! to stderr. Exit status is 0 on success, 1 for invalid input and 2 for
//! failures at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vssl::data::Dataset;
use vssl::eval::{
    extract_features, knn_probe, linear_probe, FeatureLayer, DEFAULT_PROBE_EPOCHS, DEFAULT_PROBE_LR,
};
use vssl::networks::{load_checkpoint, read_raw, weights_checksum, Side};
use vssl::suite::{grad_suite, kl_suite, GRAD_INSTANCES, KL_DEFAULT_SEED};
use vssl::training::{train_with, RunConfig};
use vssl::Error;

const THREADS_ENV: &str = "VSSL_THREADS";

#[derive(Parser)]
#[command(name = "vssl", version, about = "Decoder-free variational self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe frozen features of a checkpoint on an exported dataset.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding data.bin and meta.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        probe: ProbeArg,
        #[arg(long, value_enum, default_value = "backbone")]
        layer: LayerArg,
        #[arg(long, value_enum, default_value = "student")]
        side: SideArg,
        /// Neighbours for the k-NN probe.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_PROBE_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_PROBE_LR)]
        lr: f64,
    },
    /// Compare analytic and finite-difference gradients for every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GRAD_INSTANCES)]
        instances: usize,
    },
    /// Compare closed-form and Monte-Carlo Gaussian KL.
    Klcheck {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = KL_DEFAULT_SEED)]
        seed: u64,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Linear,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Backbone,
    ProjectedMu,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Student,
    Teacher,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn check_threads() -> Outcome {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Failure::Validation(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(()),
    }
}

fn cmd_train(config: PathBuf, out: PathBuf) -> Outcome {
    let cfg = RunConfig::from_json_file(&config)?;
    let report_every = 100;
    let outcome = train_with(&cfg, &out, |rec| {
        if rec.step % report_every == 0 {
            eprintln!(
                "step {:>6}  loss {:>10.5}  align {:.4}  lr {:.5}",
                rec.step, rec.loss, rec.align, rec.lr
            );
        }
    })?;
    emit(json!({
        "steps": outcome.steps,
        "final_loss": outcome.final_loss,
        "final_align": outcome.final_align,
        "first_align": outcome.first_align,
        "checkpoint": outcome.checkpoint_dir,
        "init_checkpoint": outcome.init_checkpoint_dir,
        "metrics": outcome.metrics_path,
        "data": outcome.data_dir,
        "checksum": outcome.checksum,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    checkpoint: PathBuf,
    data: PathBuf,
    probe: ProbeArg,
    layer: LayerArg,
    side: SideArg,
    k: usize,
    epochs: usize,
    lr: f64,
) -> Outcome {
    if !checkpoint.is_dir() {
        return Err(Failure::Validation(format!(
            "checkpoint directory {} does not exist",
            checkpoint.display()
        )));
    }
    let data = Dataset::import(&data)?;
    let mut model = load_checkpoint(&checkpoint)?;
    if model.arch().input_dim != data.input_dim() {
        return Err(Failure::Validation(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            model.arch().input_dim,
            data.input_dim()
        )));
    }
    let layer = match layer {
        LayerArg::Backbone => FeatureLayer::Backbone,
        LayerArg::ProjectedMu => FeatureLayer::ProjectedMu,
    };
    let side = match side {
        SideArg::Student => Side::Student,
        SideArg::Teacher => Side::Teacher,
    };
    let ftr = extract_features(&mut model, &data.train_samples(), side, layer)?;
    let fte = extract_features(&mut model, &data.test_samples(), side, layer)?;
    let (ytr, yte) = (data.train_labels(), data.test_labels());
    let result = match probe {
        ProbeArg::Linear => linear_probe(&ftr, ytr, &fte, yte, epochs, lr)?,
        ProbeArg::Knn => knn_probe(&ftr, ytr, &fte, yte, k)?,
    };
    eprintln!("accuracy {:.4} on {} test samples", result.accuracy, result.n_test);
    emit(serde_json::to_value(&result).expect("probe result serializes"));
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize) -> Outcome {
    if instances == 0 {
        return Err(Failure::Validation("--instances must be positive".into()));
    }
    let report = grad_suite(seed, instances);
    for op in &report.ops {
        eprintln!(
            "{:<42} {:>9.2e}  {}",
            op.op,
            op.max_rel_err,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    emit(serde_json::to_value(&report).expect("report serializes"));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient mismatch in {}",
            report.failed_ops().join(", ")
        )))
    }
}

fn cmd_klcheck(n: usize, seed: u64) -> Outcome {
    let report = kl_suite(n, seed)?;
    for inst in &report.instances {
        eprintln!(
            "#{:<2} closed {:>10.6}  mc {:>10.6} ± {:.2e}  ({:.2} se){}",
            inst.index,
            inst.closed_form,
            inst.mc.mean,
            inst.mc.std_err,
            inst.z,
            if inst.passed { "" } else { "  FAIL" }
        );
    }
    emit(serde_json::to_value(&report).expect("report serializes"));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime("Monte-Carlo KL outside 3 standard errors".into()))
    }
}

fn cmd_inspect(checkpoint: PathBuf) -> Outcome {
    if !checkpoint.is_dir() {
        return Err(Failure::Validation(format!(
            "checkpoint directory {} does not exist",
            checkpoint.display()
        )));
    }
    let (manifest, bytes) = read_raw(&checkpoint)?;
    let model = load_checkpoint(&checkpoint)?;
    let student = model.student.num_scalars();
    let teacher = model.teacher.num_scalars();
    let buffers: usize = model
        .student
        .buffers()
        .chain(model.teacher.buffers())
        .map(|(_, b)| b.numel())
        .sum();
    emit(json!({
        "arch": model.arch(),
        "tensors": manifest,
        "student_parameters": student,
        "teacher_parameters": teacher,
        "parameter_count": student + teacher,
        "buffer_count": buffers,
        "checksum": weights_checksum(&bytes),
    }));
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    check_threads()?;
    match cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Probe {
            checkpoint,
            data,
            probe,
            layer,
            side,
            k,
            epochs,
            lr,
        } => cmd_probe(checkpoint, data, probe, layer, side, k, epochs, lr),
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances),
        Command::Klcheck { n, seed } => cmd_klcheck(n, seed),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
