//! End-to-end pipelines: generate → train → find fixed points → linearize →
//! measure geometry → LSA → export, plus class-count and ℓ2 sweeps.
//!
//! Every random stage draws its seed from the master seed and a stage label,
//! so a run is reproducible from `seed` alone; the `seed` fields inside the
//! training and fixed-point sections are overwritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cells::{Architecture, CellKind, RnnParams};
use crate::error::{Error, Result};
use crate::fixed_points::{
    find_fixed_points, fraction_inside_slow_contour, harvest_seeds, speed_grid, FixedPointConfig, FixedPointSet,
    GridSpec,
};
use crate::geometry::{
    deflection_stats, dimensionality_report, participation_ratio, readout_geometry, variance_threshold_dim,
    DEFAULT_LOCAL_PR_K, DEFAULT_LOCAL_PR_TRIALS, DEFAULT_MLE_K,
};
use crate::linalg::{pca, Matrix, PcaBasis};
use crate::lsa::{build_count_matrix, lsa_analyze, Normalization};
use crate::persistence::{
    export_report, fnv1a, params_fingerprint, save_checkpoint, AnalysisBundle, Checkpoint, PointLinearization, TrajectoryProjection,
};
use crate::spectra::{count_integration_modes, linearize, DEFAULT_ALIGNMENT_THRESHOLD};
use crate::synth_data::{generate, write_jsonl, Grammar, Label, LabeledDataset, SamplingMode};
use crate::training::{accuracy, batch_states, shuffled_accuracy, train, LossKind, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub grammar: Grammar,
    pub length: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub sampling: SamplingMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            grammar: Grammar::Categorical { classes: 3 },
            length: 40,
            train_size: 10_000,
            test_size: 600,
            sampling: SamplingMode::UniformOverScores,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: CellKind,
    pub hidden_dim: usize,
    pub readout_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: CellKind::Gru,
            hidden_dim: 128,
            readout_bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub alignment_threshold: f64,
    /// Defaults to the mean training phrase length.
    pub tau_threshold: Option<f64>,
    /// Dimension of the fixed-point subspace used for mode alignment;
    /// defaults to the grammar's expected manifold dimension.
    pub manifold_dim: Option<usize>,
    pub local_pr_k: usize,
    pub local_pr_trials: usize,
    pub mle_k: usize,
    /// Hidden states subsampled for the neighbour-based estimators.
    pub max_dimensionality_points: usize,
    /// Upper bound on converged fixed points that get linearized.
    pub max_linearized: usize,
    pub grid_resolution: usize,
    pub grid_slices: usize,
    pub grid_margin: f64,
    pub lsa_center: bool,
    pub lsa_normalization: Normalization,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alignment_threshold: DEFAULT_ALIGNMENT_THRESHOLD,
            tau_threshold: None,
            manifold_dim: None,
            local_pr_k: DEFAULT_LOCAL_PR_K,
            local_pr_trials: DEFAULT_LOCAL_PR_TRIALS,
            mle_k: DEFAULT_MLE_K,
            max_dimensionality_points: 2000,
            max_linearized: 100,
            grid_resolution: 60,
            grid_slices: 9,
            grid_margin: 0.1,
            lsa_center: true,
            lsa_normalization: Normalization::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub classes: Vec<usize>,
    pub l2: Vec<f64>,
    pub seeds_per_cell: usize,
    /// Training steps per cell; the main training setting when absent.
    pub steps: Option<usize>,
    /// Hidden width per cell; the main model setting when absent.
    pub hidden_dim: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            classes: vec![2, 3, 4, 5],
            l2: vec![0.0, 5e-4, 5e-3, 5e-2],
            seeds_per_cell: 3,
            steps: None,
            hidden_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fixed_points: FixedPointConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            workers: 1,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fixed_points: FixedPointConfig::default(),
            analysis: AnalysisConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task.grammar.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.task.length == 0 || self.task.train_size == 0 || self.task.test_size == 0 {
            return bad("task length, train_size and test_size must be positive".into());
        }
        if self.model.hidden_dim == 0 {
            return bad("model.hidden_dim must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let a = &self.analysis;
        if !(0.0..=1.0).contains(&a.alignment_threshold) {
            return bad(format!("alignment_threshold {} outside [0, 1]", a.alignment_threshold));
        }
        if a.mle_k < 2 || a.local_pr_k == 0 || a.local_pr_trials == 0 || a.grid_resolution == 0 || a.grid_slices == 0 {
            return bad("analysis neighbour counts, trials and grid sizes must be positive (mle_k ≥ 2)".into());
        }
        if self.sweep.seeds_per_cell == 0 {
            return bad("sweep.seeds_per_cell must be at least 1".into());
        }
        if self.sweep.classes.iter().any(|&n| n < 2) {
            return bad("sweep.classes entries must be at least 2".into());
        }
        if self.sweep.l2.iter().any(|&l| !(l >= 0.0)) {
            return bad("sweep.l2 entries must be nonnegative".into());
        }
        Ok(())
    }

    fn loss_kind(&self) -> LossKind {
        if self.task.grammar.is_multilabel() {
            LossKind::SigmoidBce
        } else {
            LossKind::SoftmaxXent
        }
    }

    fn manifold_dim(&self) -> usize {
        self.analysis
            .manifold_dim
            .unwrap_or_else(|| expected_manifold_dim(&self.task.grammar))
    }
}

/// Dimension of the attractor the grammar calls for: N−1 for N exclusive
/// categories, one per tracked score otherwise.
pub fn expected_manifold_dim(grammar: &Grammar) -> usize {
    match *grammar {
        Grammar::Categorical { classes } => classes - 1,
        Grammar::OrderedSentiment { .. } => 1,
        Grammar::SentimentIntensity => 2,
        Grammar::Multilabel { labels } => labels,
    }
}

/// Seed for one stage, derived from the master seed.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.as_bytes());
    fnv1a(&bytes)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn make_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let t = &config.task;
    Ok(Datasets {
        train: generate(
            t.grammar.clone(),
            t.length,
            t.train_size,
            t.sampling,
            derive_seed(config.seed, "train_data"),
        )?,
        test: generate(
            t.grammar.clone(),
            t.length,
            t.test_size,
            t.sampling,
            derive_seed(config.seed, "test_data"),
        )?,
    })
}

fn train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(config.seed, "train"),
        loss_kind: config.loss_kind(),
        ..config.train
    }
}

fn fixed_point_config(config: &ExperimentConfig) -> FixedPointConfig {
    FixedPointConfig {
        seed: derive_seed(config.seed, "fixed_points"),
        ..config.fixed_points.clone()
    }
}

pub fn train_model(config: &ExperimentConfig, data: &Datasets) -> Result<TrainReport> {
    let arch = Architecture::new(config.model.arch, config.model.hidden_dim, data.train.vocabulary.len())?;
    let cfg = train_config(config);
    if config.model.readout_bias {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let init = RnnParams::init(arch, data.train.num_outputs(), true, &mut rng);
        crate::training::train_from(init, &data.train, &data.test, &cfg, &mut rng)
    } else {
        train(arch, &data.train, &data.test, &cfg)
    }
}

/// Accuracies of an already trained network, for re-analysing a checkpoint.
/// The loss history is left empty.
pub fn evaluate(config: &ExperimentConfig, params: RnnParams, data: &Datasets) -> TrainReport {
    let kind = config.loss_kind();
    TrainReport {
        losses: Vec::new(),
        train_accuracy: accuracy(&params, &data.train.phrases, kind),
        test_accuracy: accuracy(&params, &data.test.phrases, kind),
        shuffled_test_accuracy: shuffled_accuracy(&params, &data.test.phrases, kind, derive_seed(config.seed, "shuffle")),
        params,
    }
}

/// Test-set hidden states at t = 1..=T, one matrix per timestep.
fn visited_states(params: &RnnParams, data: &LabeledDataset) -> Vec<Matrix> {
    let seqs: Vec<&[usize]> = data.phrases.iter().map(|p| p.tokens.as_slice()).collect();
    let mut states = batch_states(params, &seqs);
    states.remove(0);
    states
}

fn rows_of(states: &[Matrix]) -> Vec<&[f64]> {
    states.iter().flat_map(|m| (0..m.rows()).map(move |r| m.row(r))).collect()
}

/// Deterministic subsample of at most `max` rows, evenly strided.
fn stride_sample<'a>(rows: &[&'a [f64]], max: usize) -> Vec<&'a [f64]> {
    if rows.len() <= max {
        return rows.to_vec();
    }
    (0..max).map(|i| rows[i * rows.len() / max]).collect()
}

fn label_name(grammar: &Grammar, label: &Label) -> String {
    match label {
        Label::Class(c) => grammar.class_names().get(*c).cloned().unwrap_or_else(|| c.to_string()),
        Label::Multi(bits) => bits.iter().map(|b| if *b { '1' } else { '0' }).collect(),
    }
}

/// Everything a pipeline run produced.
pub struct PipelineOutput {
    pub bundle: AnalysisBundle,
    pub params: RnnParams,
    pub datasets: Datasets,
    pub train_report: TrainReport,
    pub hidden_basis: PcaBasis,
    pub fixed_point_basis: Option<PcaBasis>,
}

/// Run every stage. When `output_dir` is set, datasets and the checkpoint
/// are written as soon as they exist, then the report and tables.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    stage("config", config.validate())?;
    let out = config.output_dir.as_deref();
    if let Some(dir) = out {
        stage("config", fs::create_dir_all(dir).map_err(Error::from))?;
    }
    let data = stage("data", make_datasets(config))?;
    if let Some(dir) = out {
        stage("data", write_dataset(&data.train, &dir.join("train.jsonl")))?;
        stage("data", write_dataset(&data.test, &dir.join("test.jsonl")))?;
    }
    let report = stage("train", train_model(config, &data))?;
    if let Some(dir) = out {
        let mut ck = Checkpoint::new(report.params.clone());
        ck.seed = config.seed;
        ck.train_config = Some(train_config(config));
        ck.metrics.insert("test_accuracy".into(), report.test_accuracy);
        ck.metrics.insert("train_accuracy".into(), report.train_accuracy);
        stage("train", save_checkpoint(&ck, dir.join("checkpoint.ckpt")))?;
    }
    let output = stage("analysis", analyze(config, report, data))?;
    if let Some(dir) = out {
        stage("export", export_report(&output.bundle, dir).map(|_| ()))?;
    }
    Ok(output)
}

fn write_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(data, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Optional analysis stages. Hidden-state PCA, trajectories and headline
/// metrics always run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub fixed_points: bool,
    /// Needs `fixed_points`.
    pub spectra: bool,
    pub geometry: bool,
    pub lsa: bool,
    pub speed_grid: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        fixed_points: true,
        spectra: true,
        geometry: true,
        lsa: true,
        speed_grid: true,
    };
    pub const NONE: Stages = Stages {
        fixed_points: false,
        spectra: false,
        geometry: false,
        lsa: false,
        speed_grid: false,
    };
}

/// All analysis stages on an already trained network.
pub fn analyze(config: &ExperimentConfig, report: TrainReport, data: Datasets) -> Result<PipelineOutput> {
    analyze_stages(config, report, data, Stages::ALL)
}

pub fn analyze_stages(
    config: &ExperimentConfig,
    report: TrainReport,
    data: Datasets,
    stages: Stages,
) -> Result<PipelineOutput> {
    let params = report.params.clone();
    let a = &config.analysis;
    let grammar = &config.task.grammar;
    let mean_length = data.train.mean_length();
    let tau_threshold = a.tau_threshold.unwrap_or(mean_length);

    let states = visited_states(&params, &data.test);
    let rows = rows_of(&states);
    let hidden_basis = stage("hidden_pca", pca(&rows))?;

    let fp_cfg = fixed_point_config(config);
    let seeds = harvest_seeds(&states, fp_cfg.max_seeds, derive_seed(config.seed, "seeds"));
    let fixed_points = if stages.fixed_points {
        stage("fixed_points", find_fixed_points(&params, &seeds, &fp_cfg))?
    } else {
        FixedPointSet {
            points: Vec::new(),
            dedup_radius: fp_cfg.dedup_radius,
            params_hash: params_fingerprint(&params),
            diagnostics: Default::default(),
        }
    };
    let converged = fixed_points.converged_states();
    let fixed_point_basis = if converged.len() >= 2 {
        Some(stage("fixed_point_pca", pca(&converged))?)
    } else {
        None
    };

    let mut bundle = AnalysisBundle::empty(&params, fixed_points);
    bundle.provenance.config = Some(serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?);

    // Linearization and integration modes.
    let k = config.manifold_dim();
    let mut reports = Vec::new();
    let mut indices = Vec::new();
    for (i, fp) in bundle.fixed_points.points.iter().enumerate() {
        if stages.spectra && fp.converged && reports.len() < a.max_linearized {
            reports.push(stage("spectra", linearize(&params, fp))?);
            indices.push(i);
        }
    }
    if let Some(fb) = &fixed_point_basis {
        if !reports.is_empty() {
            bundle.integration_modes = Some(stage(
                "spectra",
                count_integration_modes(&mut reports, fb, k, tau_threshold, a.alignment_threshold),
            )?);
        }
    }
    bundle.linearizations = indices
        .iter()
        .zip(&reports)
        .map(|(&i, r)| PointLinearization {
            fixed_point: i,
            summary: r.summary(),
        })
        .collect();

    let sample = stride_sample(&rows, a.max_dimensionality_points);
    if stages.geometry {
        geometry_stage(config, &params, &mut bundle, &data, &hidden_basis, &sample, &converged)?;
    }
    if stages.lsa {
        let counts = stage("lsa", build_count_matrix(&data.train))?;
        bundle.lsa = Some(stage("lsa", lsa_analyze(&counts, a.lsa_center, a.lsa_normalization))?);
    }

    let grid_basis = fixed_point_basis.as_ref().unwrap_or(&hidden_basis);
    let grid_points: Vec<&[f64]> = if converged.is_empty() {
        rows.clone()
    } else {
        converged.iter().map(|h| h.as_slice()).collect()
    };
    if stages.speed_grid && grid_basis.components.len() >= 3 {
        let spec = stage(
            "speed_grid",
            GridSpec::covering(grid_basis, &grid_points, a.grid_resolution, a.grid_slices, a.grid_margin),
        )?;
        let grid = stage("speed_grid", speed_grid(&params, grid_basis, &spec, mean_length))?;
        if !converged.is_empty() {
            bundle.metrics.insert(
                "slow_contour_fraction".into(),
                fraction_inside_slow_contour(&grid, grid_basis, &converged),
            );
        }
        bundle.speed_grid = Some(grid);
    }

    bundle.trajectories = data
        .test
        .phrases
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let mut coords = vec![hidden_basis.project(&vec![0.0; params.state_dim()], 3)];
            coords.extend(states.iter().take(p.tokens.len()).map(|m| hidden_basis.project(m.row(b), 3)));
            TrajectoryProjection {
                phrase: b,
                label: label_name(grammar, &p.label),
                coords,
            }
        })
        .collect();

    let m = &mut bundle.metrics;
    m.insert("test_accuracy".into(), report.test_accuracy);
    m.insert("train_accuracy".into(), report.train_accuracy);
    m.insert("shuffled_test_accuracy".into(), report.shuffled_test_accuracy);
    m.insert("mean_length".into(), mean_length);
    m.insert("hidden_top2_fraction".into(), hidden_basis.fraction_explained(2));
    m.insert("converged_fixed_points".into(), converged.len() as f64);
    if let Some(fb) = &fixed_point_basis {
        m.insert("fixed_point_top2_fraction".into(), fb.fraction_explained(2));
        m.insert("fixed_point_dim95".into(), variance_threshold_dim(&fb.variances, 0.95)? as f64);
    }
    if let Some(ic) = &bundle.integration_modes {
        m.insert("integration_modes_median".into(), ic.median);
    }
    if let Some(r) = &bundle.readouts {
        m.insert("subspace_percentage".into(), r.subspace_percentage);
    }
    bundle.hidden_basis = Some(hidden_basis.clone());
    bundle.fixed_point_basis = fixed_point_basis.clone();

    Ok(PipelineOutput {
        bundle,
        params,
        datasets: data,
        train_report: report,
        hidden_basis,
        fixed_point_basis,
    })
}

fn geometry_stage(
    config: &ExperimentConfig,
    params: &RnnParams,
    bundle: &mut AnalysisBundle,
    data: &Datasets,
    hidden_basis: &PcaBasis,
    sample: &[&[f64]],
    converged: &[Vec<f64>],
) -> Result<()> {
    let a = &config.analysis;
    let classes = params.num_classes();
    bundle.hidden_dimensionality = dimensionality_report(
        sample,
        classes,
        a.local_pr_k,
        a.local_pr_trials,
        a.mle_k,
        derive_seed(config.seed, "hidden_dims"),
    )
    .ok();
    if converged.len() > a.mle_k {
        bundle.fixed_point_dimensionality = dimensionality_report(
            converged,
            classes,
            a.local_pr_k,
            a.local_pr_trials,
            a.mle_k,
            derive_seed(config.seed, "fixed_point_dims"),
        )
        .ok();
    }
    bundle.readouts = Some(stage("geometry", readout_geometry(params, Some(hidden_basis), 3))?);
    bundle.deflections = Some(stage(
        "geometry",
        deflection_stats(params, &data.test.vocabulary, &data.test.phrases, hidden_basis, 2),
    )?);
    Ok(())
}

/// Run `f` over `0..count` on up to `workers` threads, keeping results in
/// index order.
fn parallel_map<T: Send>(count: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

fn cell_config(config: &ExperimentConfig, label: &str) -> ExperimentConfig {
    let mut c = config.clone();
    c.seed = derive_seed(config.seed, label);
    c.output_dir = None;
    if let Some(steps) = config.sweep.steps {
        c.train.steps = steps;
    }
    if let Some(h) = config.sweep.hidden_dim {
        c.model.hidden_dim = h;
    }
    c
}

fn with_classes(grammar: &Grammar, n: usize) -> Grammar {
    match grammar {
        Grammar::OrderedSentiment { .. } => Grammar::OrderedSentiment { classes: n },
        Grammar::Multilabel { .. } => Grammar::Multilabel { labels: n },
        _ => Grammar::Categorical { classes: n },
    }
}

/// Train and locate fixed points; the reduced analysis the sweeps need.
struct CellResult {
    report: TrainReport,
    hidden_pr: f64,
    fixed_points: FixedPointSet,
}

fn run_cell(config: &ExperimentConfig) -> Result<CellResult> {
    let data = stage("data", make_datasets(config))?;
    let report = stage("train", train_model(config, &data))?;
    let states = visited_states(&report.params, &data.test);
    let basis = stage("hidden_pca", pca(&rows_of(&states)))?;
    let hidden_pr = stage("geometry", participation_ratio(&basis.variances))?;
    let fp_cfg = fixed_point_config(config);
    let seeds = harvest_seeds(&states, fp_cfg.max_seeds, derive_seed(config.seed, "seeds"));
    let fixed_points = stage("fixed_points", find_fixed_points(&report.params, &seeds, &fp_cfg))?;
    Ok(CellResult {
        report,
        hidden_pr,
        fixed_points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSweepRow {
    pub classes: usize,
    pub replicate: usize,
    pub test_accuracy: Option<f64>,
    pub hidden_pr: Option<f64>,
    pub fixed_point_pr: Option<f64>,
    pub fixed_point_dim95: Option<usize>,
    pub converged_fixed_points: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSweepSummary {
    pub classes: usize,
    pub mean_test_accuracy: f64,
    pub mean_hidden_pr: f64,
    pub mean_fixed_point_pr: f64,
    pub mean_fixed_point_dim95: f64,
    /// Replicates whose 95%-variance fixed-point dimension equals the
    /// grammar's expected manifold dimension.
    pub replicates_matching_dim: usize,
    pub replicates_ok: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSweep {
    pub rows: Vec<ClassSweepRow>,
    pub summary: Vec<ClassSweepSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Train `seeds_per_cell` networks for each class count and measure the
/// dimensionality of hidden states and fixed points. A failing cell is
/// recorded and the sweep carries on.
pub fn run_class_sweep(config: &ExperimentConfig) -> Result<ClassSweep> {
    config.validate()?;
    if config.sweep.classes.is_empty() {
        return Err(Error::Config("class sweep needs a nonempty sweep.classes list".into()));
    }
    let reps = config.sweep.seeds_per_cell;
    let cells: Vec<(usize, usize)> = config
        .sweep
        .classes
        .iter()
        .flat_map(|&n| (0..reps).map(move |r| (n, r)))
        .collect();
    let rows = parallel_map(cells.len(), config.workers, |i| {
        let (n, r) = cells[i];
        let mut c = cell_config(config, &format!("class_sweep/{n}/{r}"));
        c.task.grammar = with_classes(&config.task.grammar, n);
        c.analysis.manifold_dim = None;
        match run_cell(&c) {
            Ok(cell) => {
                let conv = cell.fixed_points.converged_states();
                let basis = if conv.len() >= 2 { pca(&conv).ok() } else { None };
                ClassSweepRow {
                    classes: n,
                    replicate: r,
                    test_accuracy: Some(cell.report.test_accuracy),
                    hidden_pr: Some(cell.hidden_pr),
                    fixed_point_pr: basis.as_ref().and_then(|b| participation_ratio(&b.variances).ok()),
                    fixed_point_dim95: basis.as_ref().and_then(|b| variance_threshold_dim(&b.variances, 0.95).ok()),
                    converged_fixed_points: conv.len(),
                    error: None,
                }
            }
            Err(e) => ClassSweepRow {
                classes: n,
                replicate: r,
                test_accuracy: None,
                hidden_pr: None,
                fixed_point_pr: None,
                fixed_point_dim95: None,
                converged_fixed_points: 0,
                error: Some(e.to_string()),
            },
        }
    });
    let summary = config
        .sweep
        .classes
        .iter()
        .map(|&n| {
            let mine: Vec<&ClassSweepRow> = rows.iter().filter(|r| r.classes == n).collect();
            let expected = expected_manifold_dim(&with_classes(&config.task.grammar, n));
            ClassSweepSummary {
                classes: n,
                mean_test_accuracy: mean(mine.iter().filter_map(|r| r.test_accuracy)),
                mean_hidden_pr: mean(mine.iter().filter_map(|r| r.hidden_pr)),
                mean_fixed_point_pr: mean(mine.iter().filter_map(|r| r.fixed_point_pr)),
                mean_fixed_point_dim95: mean(mine.iter().filter_map(|r| r.fixed_point_dim95.map(|d| d as f64))),
                replicates_matching_dim: mine.iter().filter(|r| r.fixed_point_dim95 == Some(expected)).count(),
                replicates_ok: mine.iter().filter(|r| r.error.is_none()).count(),
            }
        })
        .collect();
    let sweep = ClassSweep { rows, summary };
    if let Some(dir) = &config.output_dir {
        write_sweep(dir, "class_sweep", &sweep)?;
    }
    Ok(sweep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2SweepRow {
    pub l2: f64,
    pub replicate: usize,
    pub test_accuracy: Option<f64>,
    pub shuffled_test_accuracy: Option<f64>,
    pub hidden_pr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2SweepSummary {
    pub l2: f64,
    pub mean_test_accuracy: f64,
    pub mean_shuffled_test_accuracy: f64,
    pub mean_hidden_pr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Sweep {
    pub rows: Vec<L2SweepRow>,
    /// Sorted by λ.
    pub summary: Vec<L2SweepSummary>,
    /// Whether mean PR at the largest λ is at most its value at the smallest.
    pub pr_nonincreasing: bool,
    /// Whether the smallest λ has the highest (or tied) mean accuracy.
    pub smallest_l2_most_accurate: bool,
}

/// Participation ratio of the states visited on `data`. Heavy decay can
/// collapse every state onto one point, which has no extent, so that case is
/// reported as zero rather than undefined.
fn hidden_participation_ratio(params: &RnnParams, data: &LabeledDataset) -> Result<f64> {
    let states = visited_states(params, data);
    let basis = stage("hidden_pca", pca(&rows_of(&states)))?;
    match participation_ratio(&basis.variances) {
        Err(Error::Undefined(_)) => Ok(0.0),
        other => stage("geometry", other),
    }
}

/// Train `seeds_per_cell` networks per ℓ2 coefficient and record accuracy
/// and hidden-state participation ratio.
pub fn run_l2_sweep(config: &ExperimentConfig) -> Result<L2Sweep> {
    config.validate()?;
    if config.sweep.l2.is_empty() {
        return Err(Error::Config("ℓ2 sweep needs a nonempty sweep.l2 list".into()));
    }
    let reps = config.sweep.seeds_per_cell;
    let cells: Vec<(f64, usize)> = config
        .sweep
        .l2
        .iter()
        .flat_map(|&l| (0..reps).map(move |r| (l, r)))
        .collect();
    let rows = parallel_map(cells.len(), config.workers, |i| {
        let (l2, r) = cells[i];
        // Replicate r shares its data and initialization across λ values.
        let mut c = cell_config(config, &format!("l2_sweep/{r}"));
        c.train.l2_penalty = l2;
        let result = (|| -> Result<(TrainReport, f64)> {
            let data = stage("data", make_datasets(&c))?;
            let report = stage("train", train_model(&c, &data))?;
            let pr = hidden_participation_ratio(&report.params, &data.test)?;
            Ok((report, pr))
        })();
        match result {
            Ok((report, pr)) => L2SweepRow {
                l2,
                replicate: r,
                test_accuracy: Some(report.test_accuracy),
                shuffled_test_accuracy: Some(report.shuffled_test_accuracy),
                hidden_pr: Some(pr),
                error: None,
            },
            Err(e) => L2SweepRow {
                l2,
                replicate: r,
                test_accuracy: None,
                shuffled_test_accuracy: None,
                hidden_pr: None,
                error: Some(e.to_string()),
            },
        }
    });
    let mut lambdas = config.sweep.l2.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let summary: Vec<L2SweepSummary> = lambdas
        .iter()
        .map(|&l| {
            let mine: Vec<&L2SweepRow> = rows.iter().filter(|r| r.l2 == l).collect();
            L2SweepSummary {
                l2: l,
                mean_test_accuracy: mean(mine.iter().filter_map(|r| r.test_accuracy)),
                mean_shuffled_test_accuracy: mean(mine.iter().filter_map(|r| r.shuffled_test_accuracy)),
                mean_hidden_pr: mean(mine.iter().filter_map(|r| r.hidden_pr)),
            }
        })
        .collect();
    let first = &summary[0];
    let last = &summary[summary.len() - 1];
    let best_acc = summary.iter().map(|s| s.mean_test_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let sweep = L2Sweep {
        pr_nonincreasing: last.mean_hidden_pr <= first.mean_hidden_pr,
        smallest_l2_most_accurate: first.mean_test_accuracy >= best_acc,
        rows,
        summary,
    };
    if let Some(dir) = &config.output_dir {
        write_sweep(dir, "l2_sweep", &sweep)?;
    }
    Ok(sweep)
}

fn write_sweep<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    json.push(b'\n');
    fs::write(dir.join(format!("{name}.json")), json)?;
    Ok(())
}

/// One pass/fail expectation evaluated on a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn at_least(name: &str, value: Option<f64>, min: f64) -> Self {
        match value {
            Some(v) => Check::new(name, v >= min, format!("{v:.4} (need ≥ {min})")),
            None => Check::new(name, false, "not computed".into()),
        }
    }
}

/// Expectations for a single pipeline run, chosen by grammar.
pub fn pipeline_checks(config: &ExperimentConfig, bundle: &AnalysisBundle) -> Vec<Check> {
    let m = |k: &str| bundle.metrics.get(k).copied();
    let mut checks = Vec::new();
    match config.task.grammar {
        Grammar::Categorical { classes } => {
            checks.push(Check::at_least("test_accuracy", m("test_accuracy"), 0.95));
            if classes == 3 {
                checks.push(Check::at_least("hidden_top2_fraction", m("hidden_top2_fraction"), 0.95));
                checks.push(Check::at_least("fixed_point_top2_fraction", m("fixed_point_top2_fraction"), 0.9));
            }
            let dim = m("fixed_point_dim95");
            checks.push(Check::new(
                "fixed_point_dim95",
                dim == Some((classes - 1) as f64),
                format!("{dim:?} (need {})", classes - 1),
            ));
        }
        Grammar::SentimentIntensity => {
            checks.push(Check::at_least("fixed_point_top2_fraction", m("fixed_point_top2_fraction"), 0.9));
        }
        Grammar::OrderedSentiment { .. } => {
            checks.push(Check::at_least("test_accuracy", m("test_accuracy"), 0.9));
        }
        Grammar::Multilabel { labels } => {
            checks.push(Check::at_least("fixed_point_top2_fraction", m("fixed_point_top2_fraction"), 0.9));
            if labels == 2 {
                let lam = m("subspace_percentage");
                checks.push(Check::new(
                    "readouts_independent",
                    lam.is_some_and(|l| l < 0.5),
                    format!("Λ = {lam:?} (need < 0.5)"),
                ));
            }
        }
    }
    checks
}

/// The class sweep passes when, for every N, a majority of replicates put
/// the fixed points in N−1 dimensions.
pub fn class_sweep_checks(sweep: &ClassSweep, seeds_per_cell: usize) -> Vec<Check> {
    sweep
        .summary
        .iter()
        .map(|s| {
            let need = seeds_per_cell / 2 + 1;
            Check::new(
                &format!("dim95_N{}", s.classes),
                s.replicates_matching_dim >= need,
                format!("{} of {} replicates at N−1 (need {need})", s.replicates_matching_dim, seeds_per_cell),
            )
        })
        .collect()
}

pub fn l2_sweep_checks(sweep: &L2Sweep) -> Vec<Check> {
    vec![
        Check::new("pr_nonincreasing", sweep.pr_nonincreasing, format!("{:?}", summary_pr(sweep))),
        Check::new(
            "smallest_l2_most_accurate",
            sweep.smallest_l2_most_accurate,
            format!("{:?}", sweep.summary.iter().map(|s| s.mean_test_accuracy).collect::<Vec<_>>()),
        ),
    ]
}

fn summary_pr(sweep: &L2Sweep) -> Vec<(f64, f64)> {
    sweep.summary.iter().map(|s| (s.l2, s.mean_hidden_pr)).collect()
}
