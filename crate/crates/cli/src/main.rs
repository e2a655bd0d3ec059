use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attractor_core::cells::{Architecture, CellKind};
use attractor_core::experiment::{
    self, class_sweep_checks, l2_sweep_checks, pipeline_checks, Check, Datasets, ExperimentConfig, Stages,
};
use attractor_core::lsa::{build_count_matrix, ingest_count_csv, lsa_analyze, write_count_csv};
use attractor_core::persistence::{export_report, load_checkpoint_as, save_checkpoint, Checkpoint};
use attractor_core::synth_data::write_jsonl;
use attractor_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "attractors", version, about = "Train gated RNNs on synthetic text tasks and map their attractors")]
struct Cli {
    /// TOML experiment config; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    arch: Option<ArchArg>,
    /// Evaluate expectations on the results and exit with status 4 if any fail.
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Ugrnn,
    Gru,
    Lstm,
}

impl From<ArchArg> for CellKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Ugrnn => CellKind::Ugrnn,
            ArchArg::Gru => CellKind::Gru,
            ArchArg::Lstm => CellKind::Lstm,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/test datasets (JSON lines) and the class-token count matrix.
    GenData,
    /// Train a network and save its checkpoint.
    Train,
    /// Locate fixed points of a trained network.
    FixedPoints(CheckpointArg),
    /// Linearize around fixed points and count integration modes.
    Spectra(CheckpointArg),
    /// Readout geometry, token deflections and dimensionality estimates.
    Geometry(CheckpointArg),
    /// Speed field on slices of the fixed-point PCA space.
    SpeedGrid(CheckpointArg),
    /// Latent semantic analysis of the generated training set.
    Lsa,
    /// Run every stage end to end.
    Pipeline,
    /// Fixed-point dimensionality as a function of class count.
    SweepClasses,
    /// Accuracy and dimensionality as a function of ℓ2 penalty.
    SweepL2,
    /// Latent semantic analysis of a class-by-token count CSV.
    IngestCounts {
        /// CSV with a `class` header column followed by one column per token.
        path: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct CheckpointArg {
    /// Defaults to `<out>/checkpoint.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Stage(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            e => Failure::Stage(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Stage(Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(3)
        }
        Err(Failure::Checks) => ExitCode::from(4),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(a) = cli.arch {
        cfg.model.arch = a.into();
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("out"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir.clone().expect("set by load_config");
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Stage(Error::Format(e.to_string())))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report_checks(checks: &[Check]) -> Result<(), Failure> {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = out_dir(&cfg)?;
    match &cli.command {
        Command::GenData => {
            let data = experiment::make_datasets(&cfg)?;
            for (name, set) in [("train.jsonl", &data.train), ("test.jsonl", &data.test)] {
                let mut buf = Vec::new();
                write_jsonl(set, &mut buf)?;
                fs::write(dir.join(name), buf)?;
                println!("wrote {} ({} phrases)", dir.join(name).display(), set.len());
            }
            let mut buf = Vec::new();
            write_count_csv(&build_count_matrix(&data.train)?, &mut buf)?;
            fs::write(dir.join("counts.csv"), buf)?;
            println!("wrote {}", dir.join("counts.csv").display());
        }
        Command::Train => {
            let data = experiment::make_datasets(&cfg)?;
            let report = experiment::train_model(&cfg, &data)?;
            println!(
                "train accuracy {:.4}, test accuracy {:.4}, shuffled test accuracy {:.4}",
                report.train_accuracy, report.test_accuracy, report.shuffled_test_accuracy
            );
            let mut ck = Checkpoint::new(report.params.clone());
            ck.seed = cfg.seed;
            ck.train_config = Some(cfg.train);
            ck.metrics.insert("train_accuracy".into(), report.train_accuracy);
            ck.metrics.insert("test_accuracy".into(), report.test_accuracy);
            ck.metrics.insert("shuffled_test_accuracy".into(), report.shuffled_test_accuracy);
            let path = dir.join("checkpoint.ckpt");
            save_checkpoint(&ck, &path)?;
            println!("wrote {}", path.display());
            write_json(&dir.join("losses.json"), &report.losses)?;
        }
        Command::FixedPoints(ck) => {
            let out = analyze_checkpoint(&cfg, &dir, ck, Stages { fixed_points: true, ..Stages::NONE })?;
            let fps = &out.bundle.fixed_points;
            println!(
                "{} candidates, {} converged, {} kept after dedup",
                fps.diagnostics.candidates,
                fps.diagnostics.converged,
                fps.len()
            );
            write_json(&dir.join("fixed_points.json"), fps)?;
        }
        Command::Spectra(ck) => {
            let stages = Stages {
                fixed_points: true,
                spectra: true,
                ..Stages::NONE
            };
            let out = analyze_checkpoint(&cfg, &dir, ck, stages)?;
            if let Some(ic) = &out.bundle.integration_modes {
                println!("integration modes per point {:?}, median {}", ic.per_point, ic.median);
            }
            write_json(&dir.join("spectra.json"), &out.bundle.linearizations)?;
        }
        Command::Geometry(ck) => {
            let stages = Stages {
                fixed_points: true,
                geometry: true,
                ..Stages::NONE
            };
            let out = analyze_checkpoint(&cfg, &dir, ck, stages)?;
            if let Some(r) = &out.bundle.readouts {
                let angles: Vec<String> = r.pairwise_angles.iter().map(|a| format!("{:.1}", a.degrees)).collect();
                println!("readout angles [{}], Λ = {:.4}", angles.join(", "), r.subspace_percentage);
            }
            export_report(&out.bundle, &dir)?;
        }
        Command::SpeedGrid(ck) => {
            let stages = Stages {
                fixed_points: true,
                speed_grid: true,
                ..Stages::NONE
            };
            let out = analyze_checkpoint(&cfg, &dir, ck, stages)?;
            if let Some(f) = out.bundle.metrics.get("slow_contour_fraction") {
                println!("fraction of converged fixed points inside the slow contour: {f:.3}");
            }
            export_report(&out.bundle, &dir)?;
        }
        Command::Lsa => {
            let data = experiment::make_datasets(&cfg)?;
            let counts = build_count_matrix(&data.train)?;
            let a = &cfg.analysis;
            let report = lsa_analyze(&counts, a.lsa_center, a.lsa_normalization)?;
            println!("top-2 variance fraction {:.4}", report.top_fraction(2));
            write_json(&dir.join("lsa.json"), &report)?;
        }
        Command::IngestCounts { path } => {
            let file = fs::File::open(path)?;
            let counts = ingest_count_csv(std::io::BufReader::new(file))?;
            let a = &cfg.analysis;
            let report = lsa_analyze(&counts, a.lsa_center, a.lsa_normalization)?;
            println!(
                "{} classes × {} tokens, top-2 variance fraction {:.4}",
                counts.class_names.len(),
                counts.token_names.len(),
                report.top_fraction(2)
            );
            write_json(&dir.join("lsa.json"), &report)?;
        }
        Command::Pipeline => {
            let out = experiment::run_pipeline(&cfg)?;
            for (k, v) in &out.bundle.metrics {
                println!("{k} = {v:.6}");
            }
            if cli.check {
                report_checks(&pipeline_checks(&cfg, &out.bundle))?;
            }
        }
        Command::SweepClasses => {
            let sweep = experiment::run_class_sweep(&cfg)?;
            for s in &sweep.summary {
                println!(
                    "N={} accuracy {:.4} hidden PR {:.3} fixed-point PR {:.3} dim95 {:.2} ({} of {} ok)",
                    s.classes,
                    s.mean_test_accuracy,
                    s.mean_hidden_pr,
                    s.mean_fixed_point_pr,
                    s.mean_fixed_point_dim95,
                    s.replicates_ok,
                    cfg.sweep.seeds_per_cell
                );
            }
            if cli.check {
                report_checks(&class_sweep_checks(&sweep, cfg.sweep.seeds_per_cell))?;
            }
        }
        Command::SweepL2 => {
            let sweep = experiment::run_l2_sweep(&cfg)?;
            for s in &sweep.summary {
                println!(
                    "λ={:e} accuracy {:.4} shuffled {:.4} hidden PR {:.3}",
                    s.l2, s.mean_test_accuracy, s.mean_shuffled_test_accuracy, s.mean_hidden_pr
                );
            }
            if cli.check {
                report_checks(&l2_sweep_checks(&sweep))?;
            }
        }
    }
    Ok(())
}

fn analyze_checkpoint(
    cfg: &ExperimentConfig,
    dir: &Path,
    arg: &CheckpointArg,
    stages: Stages,
) -> Result<experiment::PipelineOutput, Failure> {
    let path = arg.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.ckpt"));
    let data: Datasets = experiment::make_datasets(cfg)?;
    let arch = Architecture::new(cfg.model.arch, cfg.model.hidden_dim, data.train.vocabulary.len())?;
    let ck = load_checkpoint_as(&path, arch)?;
    let report = experiment::evaluate(cfg, ck.params, &data);
    Ok(experiment::analyze_stages(cfg, report, data, stages)?)
}
