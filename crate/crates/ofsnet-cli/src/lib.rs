//! Experiment runner: gradient checks, training runs, exhaustive size
//! sweeps, dataset generation, and checkpoint inspection, driven by a JSON
//! configuration.
//!
//! Exit codes: 0 on success, 1 for experiment-level failures (a failed
//! gradient check, training divergence), 2 for usage and configuration
//! errors.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ofsnet::data::{save_tensor, Dataset};
use ofsnet::gradcheck::{check_report, CheckOptions};
use ofsnet::network::{
    evaluate, exhaustive_sweep, train_network, Metrics, Network, SweepRow, TrainingTrace,
};
use ofsnet::tensor::Tensor;

use config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_EXPERIMENT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "ofsnet", version, about = "Learned-filter-size experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config's optimizer.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Train one network and emit trace.csv, manifest.json, and a checkpoint.
    Train(CommonArgs),
    /// Exhaustive fixed-size sweep plus the learned-size variant.
    Sweep(CommonArgs),
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Print the learned-size state stored in a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Generate the configured planted dataset into tensor files.
    Generate(CommonArgs),
}

/// Run manifest: everything needed to reproduce and locate a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub status: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
    pub final_metrics: Option<Metrics>,
    pub converged_sizes: Vec<f64>,
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; its exit code for usage errors
            // is already 2.
            return match e.print() {
                _ => ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK }),
            };
        }
    };
    let outcome = match cli.command {
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Dataset { action } => match action {
            DatasetAction::Generate(args) => cmd_dataset_generate(&args),
        },
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CmdError::Experiment(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_EXPERIMENT_FAILED)
        }
    }
}

enum CmdError {
    /// Bad invocation or configuration: exit 2.
    Usage(String),
    /// The experiment itself failed: exit 1.
    Experiment(String),
}

type CmdResult = Result<u8, CmdError>;

fn usage<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn experiment<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Experiment(e.to_string())
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct LoadedRun {
    cfg: RunConfig,
    train_data: Dataset,
    eval_data: Dataset,
    out_dir: PathBuf,
}

fn load_run(args: &CommonArgs) -> Result<LoadedRun, CmdError> {
    let mut cfg = RunConfig::from_file(&args.config).map_err(CmdError::Usage)?;
    if let Some(seed) = args.seed {
        cfg.optimizer.seed = seed;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    cfg.optimizer.validate().map_err(usage)?;
    let (train_data, eval_data) = cfg.data.load().map_err(usage)?;
    fs::create_dir_all(&out_dir).map_err(usage)?;
    Ok(LoadedRun {
        cfg,
        train_data,
        eval_data,
        out_dir,
    })
}

fn manifest_skeleton(command: &str, cfg: &RunConfig, started: u64) -> Result<RunManifest, CmdError> {
    Ok(RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        status: "ok".to_string(),
        seed: cfg.optimizer.seed,
        started_unix: started,
        finished_unix: 0,
        config: serde_json::to_value(cfg).map_err(usage)?,
        outputs: BTreeMap::new(),
        final_metrics: None,
        converged_sizes: vec![],
    })
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CmdError> {
    let text = serde_json::to_string_pretty(manifest).map_err(experiment)?;
    fs::write(path, text).map_err(experiment)
}

/// Trace CSV with a mandatory header: `iteration,loss`, then per learned
/// layer `layer{j}_k,layer{j}_k_minus,layer{j}_k_plus,layer{j}_alpha`.
pub fn trace_to_csv(trace: &TrainingTrace, learned_layers: usize) -> String {
    let mut out = String::from("iteration,loss");
    for j in 0..learned_layers {
        out.push_str(&format!(
            ",layer{j}_k,layer{j}_k_minus,layer{j}_k_plus,layer{j}_alpha"
        ));
    }
    out.push('\n');
    for r in &trace.records {
        out.push_str(&format!("{},{}", r.iteration, r.loss));
        for s in &r.sizes {
            out.push_str(&format!(",{},{},{},{}", s.k, s.k_minus, s.k_plus, s.alpha));
        }
        out.push('\n');
    }
    out
}

/// Sweep CSV: data rows first (one per configuration and seed), then the
/// per-configuration aggregate rows with `mean` in the seed column.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("config,seed,status,f1,two_afc,accuracy,converged_sizes\n");
    for r in rows {
        let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let sizes = r
            .converged_sizes
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.config,
            seed,
            r.status,
            opt(r.f1),
            opt(r.two_afc),
            opt(r.accuracy),
            sizes
        ));
    }
    out
}

fn cmd_train(args: &CommonArgs) -> CmdResult {
    let run = load_run(args)?;
    let started = now_unix();
    let spec = run.cfg.network.to_spec(run.train_data.resolution());
    spec.validate().map_err(usage)?;
    let mut network = Network::new(&spec, run.cfg.optimizer.seed).map_err(usage)?;
    let learned = network.learned_size_layers().len();

    let trace_path = run.out_dir.join("trace.csv");
    let manifest_path = run.out_dir.join("manifest.json");
    let checkpoint_path = run.out_dir.join("checkpoint.ofsc");
    let mut manifest = manifest_skeleton("train", &run.cfg, started)?;
    manifest.outputs.insert("trace".into(), trace_path.display().to_string());
    manifest.outputs.insert("manifest".into(), manifest_path.display().to_string());
    manifest.outputs.insert("checkpoint".into(), checkpoint_path.display().to_string());

    match train_network(&mut network, &run.cfg.optimizer, &run.train_data) {
        Ok(mut trace) => {
            let metrics = evaluate(&mut network, &run.eval_data, 0.5).map_err(experiment)?;
            trace.final_metrics = Some(metrics);
            fs::write(&trace_path, trace_to_csv(&trace, learned)).map_err(experiment)?;
            checkpoint::write_checkpoint(&checkpoint_path, &checkpoint::network_state(&network))
                .map_err(experiment)?;
            manifest.final_metrics = Some(metrics);
            manifest.converged_sizes = trace.converged_sizes(run.cfg.optimizer.report_iteration);
            manifest.finished_unix = now_unix();
            write_manifest(&manifest_path, &manifest)?;
            println!(
                "train: {} iterations, final loss {}, f1 {:.4} -> {}",
                trace.records.len(),
                trace.records.last().map_or(f64::NAN, |r| r.loss),
                metrics.f1,
                run.out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Err(ofsnet::Error::Diverged { iteration, trace }) => {
            // Preserve the partial trace for postmortems.
            fs::write(&trace_path, trace_to_csv(&trace, learned)).map_err(experiment)?;
            manifest.status = format!("diverged at iteration {iteration}");
            manifest.finished_unix = now_unix();
            write_manifest(&manifest_path, &manifest)?;
            Err(experiment(format!(
                "training diverged at iteration {iteration}; partial trace kept at {}",
                trace_path.display()
            )))
        }
        Err(e) => Err(experiment(e)),
    }
}

fn cmd_sweep(args: &CommonArgs) -> CmdResult {
    let run = load_run(args)?;
    let started = now_unix();
    let template = run.cfg.network.to_spec(run.train_data.resolution());
    template.validate().map_err(usage)?;

    let rows = exhaustive_sweep(
        &template,
        &run.cfg.sweep.sizes,
        &run.cfg.sweep.seeds,
        &run.cfg.optimizer,
        &run.train_data,
        &run.eval_data,
        args.threads,
    )
    .map_err(usage)?;

    let sweep_path = run.out_dir.join("sweep.csv");
    fs::write(&sweep_path, sweep_to_csv(&rows)).map_err(experiment)?;

    let mut manifest = manifest_skeleton("sweep", &run.cfg, started)?;
    manifest.outputs.insert("sweep".into(), sweep_path.display().to_string());
    manifest.finished_unix = now_unix();
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        manifest.status = format!("{failed} row(s) failed");
    }
    write_manifest(&run.out_dir.join("manifest.json"), &manifest)?;
    println!("sweep: {} rows -> {}", rows.len(), sweep_path.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &CommonArgs) -> CmdResult {
    let run = load_run(args)?;
    let started = now_unix();
    let spec = run.cfg.network.to_spec(run.train_data.resolution());
    spec.validate().map_err(usage)?;
    let mut network = Network::new(&spec, run.cfg.optimizer.seed).map_err(usage)?;

    let gc = &run.cfg.gradcheck;
    let (x, y) = config::head_batch(&run.train_data, gc.batch);
    let opts = CheckOptions {
        h: gc.h,
        tolerance: gc.tolerance,
        weight_samples: gc.weight_samples,
        input_samples: gc.input_samples,
        seed: run.cfg.optimizer.seed,
        corrupt_size_grad: gc.corrupt_size_grad,
    };
    let report = check_report(&mut network, &x, &y, &opts).map_err(usage)?;

    let report_path = run.out_dir.join("gradcheck.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(experiment)?,
    )
    .map_err(experiment)?;

    let mut manifest = manifest_skeleton("gradcheck", &run.cfg, started)?;
    manifest.outputs.insert("report".into(), report_path.display().to_string());
    manifest.status = if report.pass { "ok".into() } else { "gradcheck failed".into() };
    manifest.finished_unix = now_unix();
    write_manifest(&run.out_dir.join("manifest.json"), &manifest)?;

    println!(
        "gradcheck: {} targets checked, {} skipped, max rel err {:.3e} (tolerance {:.1e}) -> {}",
        report.checked,
        report.skipped,
        report.max_rel_err,
        report.tolerance,
        if report.pass { "pass" } else { "FAIL" }
    );
    if report.pass {
        Ok(EXIT_OK)
    } else {
        Err(experiment(format!(
            "gradient check failed: worst target {} at rel err {:.3e} (report: {})",
            report.worst_target.as_deref().unwrap_or("?"),
            report.max_rel_err,
            report_path.display()
        )))
    }
}

fn cmd_dataset_generate(args: &CommonArgs) -> CmdResult {
    let run = load_run(args)?;
    let started = now_unix();
    let images_path = run.out_dir.join("images.ofst");
    let labels_path = run.out_dir.join("labels.ofst");
    save_tensor(&images_path, &run.train_data.samples).map_err(experiment)?;
    let labels = Tensor {
        shape: vec![run.train_data.labels.len()],
        data: run.train_data.labels.iter().map(|&l| f64::from(l)).collect(),
    };
    save_tensor(&labels_path, &labels).map_err(experiment)?;

    let mut manifest = manifest_skeleton("dataset-generate", &run.cfg, started)?;
    manifest.outputs.insert("images".into(), images_path.display().to_string());
    manifest.outputs.insert("labels".into(), labels_path.display().to_string());
    manifest.finished_unix = now_unix();
    write_manifest(&run.out_dir.join("manifest.json"), &manifest)?;
    println!(
        "dataset: {} samples ({}) -> {}",
        run.train_data.len(),
        run.train_data.metadata.source,
        run.out_dir.display()
    );
    Ok(EXIT_OK)
}

fn cmd_inspect(path: &Path) -> CmdResult {
    let map = checkpoint::read_checkpoint(path).map_err(usage)?;
    let mut any = false;
    for (name, tensor) in &map {
        if name.ends_with(".k") || name.ends_with(".alpha") || name.ends_with(".k_minus")
            || name.ends_with(".k_plus")
        {
            println!("{name} = {}", tensor.data[0]);
            any = true;
        }
    }
    if !any {
        println!("no learned-size layers in {}", path.display());
    }
    Ok(EXIT_OK)
}
