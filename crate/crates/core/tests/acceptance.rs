//! Exit criteria for the toolkit. Every criterion runs at its stated
//! tolerance and prints one PASS/FAIL line; the test fails if any does.
//!
//! Trained networks are shared between criteria where they use the same
//! configuration. A full run trains seven networks at the default size plus
//! the class sweep and takes roughly an hour on one core.

use std::f64::consts::TAU;
use std::fs;
use std::time::{Duration, Instant};

use attractor_core::cells::{jacobians, step, Architecture, CellKind, RnnParams};
use attractor_core::experiment::{
    analyze_stages, make_datasets, run_class_sweep, run_l2_sweep, run_pipeline, train_model, ExperimentConfig,
    PipelineOutput, Stages,
};
use attractor_core::geometry::{correlation_dimension, mle_dimension, participation_ratio};
use attractor_core::lsa::{build_count_matrix, lsa_analyze, Normalization};
use attractor_core::persistence::{load_checkpoint, save_checkpoint, Checkpoint};
use attractor_core::synth_data::{gen_categorical, gen_multilabel, Grammar, Phrase, SamplingMode};
use attractor_core::training::{loss_and_grads, LossKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

struct Runner {
    outcomes: Vec<Outcome>,
}

impl Runner {
    fn record(&mut self, id: usize, name: &'static str, start: Instant, result: (bool, String)) {
        let o = Outcome {
            id,
            name,
            passed: result.0,
            detail: result.1,
            elapsed: start.elapsed(),
        };
        println!(
            "criterion {:>2} {} {}: {} [{:.1}s]",
            o.id,
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.elapsed.as_secs_f64()
        );
        self.outcomes.push(o);
    }
}

const KINDS: [CellKind; 3] = [CellKind::Ugrnn, CellKind::Gru, CellKind::Lstm];

fn perturbed_params(kind: CellKind, hidden: usize, input: usize, classes: usize, rng: &mut ChaCha8Rng) -> RnnParams {
    let arch = Architecture::new(kind, hidden, input).unwrap();
    let mut p = RnnParams::init(arch, classes, false, rng);
    for s in p.slices_mut() {
        s.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    p
}

fn jacobian_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        for _ in 0..100 {
            let p = perturbed_params(kind, 6, 4, 3, &mut rng);
            let n = p.state_dim();
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (j_rec, j_inp) = jacobians(&p, &h, &x).unwrap();
            for j in 0..n {
                let (mut up, mut down) = (h.clone(), h.clone());
                up[j] += eps;
                down[j] -= eps;
                let (fu, fd) = (step(&p, &up, &x).unwrap(), step(&p, &down, &x).unwrap());
                for i in 0..n {
                    worst = worst.max((j_rec[(i, j)] - (fu[i] - fd[i]) / (2.0 * eps)).abs());
                }
            }
            for j in 0..4 {
                let (mut up, mut down) = (x.clone(), x.clone());
                up[j] += eps;
                down[j] -= eps;
                let (fu, fd) = (step(&p, &h, &up).unwrap(), step(&p, &h, &down).unwrap());
                for i in 0..n {
                    worst = worst.max((j_inp[(i, j)] - (fu[i] - fd[i]) / (2.0 * eps)).abs());
                }
            }
        }
    }
    (worst <= 1e-5, format!("max entrywise error {worst:.2e} (need ≤ 1e-5)"))
}

fn gradient_error(p: &RnnParams, batch: &[&Phrase], cfg: &TrainConfig) -> f64 {
    let (_, grads) = loss_and_grads(p, batch, cfg).unwrap();
    let analytic = grads.to_flat();
    let theta = p.to_flat();
    let eps = 1e-5;
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += eps;
        q.set_flat(&t).unwrap();
        let up = loss_and_grads(&q, batch, cfg).unwrap().0;
        t[i] -= 2.0 * eps;
        q.set_flat(&t).unwrap();
        let down = loss_and_grads(&q, batch, cfg).unwrap().0;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6));
    }
    worst
}

fn gradient_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cat = gen_categorical(3, 6, 2, SamplingMode::UniformOverScores, 4).unwrap();
    let ml = gen_multilabel(2, 5, 2, 6).unwrap();
    let xent = TrainConfig::default();
    let bce = TrainConfig {
        loss_kind: LossKind::SigmoidBce,
        ..TrainConfig::default()
    };
    let mut worst: f64 = 0.0;
    for kind in KINDS {
        let batch: Vec<&Phrase> = cat.phrases.iter().collect();
        let p = perturbed_params(kind, 8, cat.vocabulary.len(), 3, &mut rng);
        worst = worst.max(gradient_error(&p, &batch, &xent));
        let batch: Vec<&Phrase> = ml.phrases.iter().collect();
        let p = perturbed_params(kind, 8, ml.vocabulary.len(), 2, &mut rng);
        worst = worst.max(gradient_error(&p, &batch, &bce));
    }
    (worst <= 1e-4, format!("max relative error {worst:.2e} (need ≤ 1e-4)"))
}

fn metric(out: &PipelineOutput, key: &str) -> f64 {
    out.bundle.metrics.get(key).copied().unwrap_or(f64::NAN)
}

fn simplex_geometry(out: &PipelineOutput) -> (bool, String) {
    let acc = metric(out, "test_accuracy");
    let top2 = metric(out, "hidden_top2_fraction");
    let fp_top2 = metric(out, "fixed_point_top2_fraction");
    let readouts = out.bundle.readouts.as_ref().unwrap();
    let angles: Vec<f64> = readouts.pairwise_angles.iter().map(|a| a.degrees).collect();
    let lambda = readouts.subspace_percentage;
    let ok = acc > 0.95
        && top2 >= 0.95
        && fp_top2 >= 0.90
        && angles.iter().all(|a| (a - 120.0).abs() <= 15.0)
        && lambda >= 0.9;
    let angles: Vec<String> = angles.iter().map(|a| format!("{a:.1}")).collect();
    (
        ok,
        format!(
            "accuracy {acc:.4}, hidden top-2 {top2:.4}, fixed-point top-2 {fp_top2:.4}, angles [{}], Λ {lambda:.4}",
            angles.join(", ")
        ),
    )
}

fn class_sweep_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
seed = 1
[train]
steps = 1500
[sweep]
classes = [2, 3, 4, 5]
seeds_per_cell = 3
hidden_dim = 64
"#,
    )
    .unwrap();
    cfg.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg
}

fn dimensionality_law() -> (bool, String) {
    let cfg = class_sweep_config();
    let start = Instant::now();
    let sweep = run_class_sweep(&cfg).unwrap();
    let elapsed = start.elapsed();
    let mut ok = elapsed < Duration::from_secs(30 * 60);
    let mut parts = Vec::new();
    for s in &sweep.summary {
        ok &= s.replicates_matching_dim >= 2;
        let dims: Vec<String> = sweep
            .rows
            .iter()
            .filter(|r| r.classes == s.classes)
            .map(|r| r.fixed_point_dim95.map_or("-".into(), |d| d.to_string()))
            .collect();
        parts.push(format!("N={}: dims [{}]", s.classes, dims.join(",")));
    }
    (ok, format!("{} in {:.0}s", parts.join("; "), elapsed.as_secs_f64()))
}

/// Train with the default settings for `grammar` and run the spectral stages.
fn spectral_run(grammar: Grammar, seed: u64) -> PipelineOutput {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.task.grammar = grammar;
    let data = make_datasets(&cfg).unwrap();
    let report = train_model(&cfg, &data).unwrap();
    let stages = Stages {
        fixed_points: true,
        spectra: true,
        ..Stages::NONE
    };
    analyze_stages(&cfg, report, data, stages).unwrap()
}

fn integration_modes(cat3: &PipelineOutput) -> (bool, String) {
    let median = |o: &PipelineOutput| o.bundle.integration_modes.as_ref().map_or(f64::NAN, |c| c.median);
    let cat4 = spectral_run(Grammar::Categorical { classes: 4 }, 0);
    let ord5 = spectral_run(Grammar::SentimentIntensity, 0);
    let got = [median(cat3), median(&cat4), median(&ord5)];
    let want = [2.0, 3.0, 2.0];
    (
        got == want,
        format!(
            "medians: categorical N=3 {} (need 2), N=4 {} (need 3), sentiment+intensity {} (need 2)",
            got[0], got[1], got[2]
        ),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn multilabel_square() -> (bool, String) {
    let mut cfg = ExperimentConfig::default();
    cfg.task.grammar = Grammar::Multilabel { labels: 2 };
    cfg.task.length = 30;
    let data = make_datasets(&cfg).unwrap();
    let report = train_model(&cfg, &data).unwrap();
    let stages = Stages {
        fixed_points: true,
        geometry: true,
        ..Stages::NONE
    };
    let out = analyze_stages(&cfg, report, data, stages).unwrap();
    let fp_top2 = metric(&out, "fixed_point_top2_fraction");
    let defl = out.bundle.deflections.as_ref().unwrap();
    let mean = |t: &str| defl.get(t).unwrap().mean.clone();
    let mut worst_cos: f64 = 0.0;
    for a in ["good_1", "bad_1"] {
        for b in ["good_2", "bad_2"] {
            worst_cos = worst_cos.max(cosine(&mean(a), &mean(b)).abs());
        }
    }

    let mut sweep_cfg = cfg.clone();
    sweep_cfg.sweep.l2 = vec![0.0, 5e-4, 5e-2];
    sweep_cfg.sweep.seeds_per_cell = 1;
    sweep_cfg.sweep.steps = Some(1500);
    let sweep = run_l2_sweep(&sweep_cfg).unwrap();
    let prs: Vec<String> = sweep
        .summary
        .iter()
        .map(|s| format!("λ={:e}: {:.3}", s.l2, s.mean_hidden_pr))
        .collect();
    let ok = fp_top2 >= 0.9 && worst_cos < 0.3 && sweep.pr_nonincreasing;
    (
        ok,
        format!(
            "fixed-point top-2 {fp_top2:.4}, max |cos| across families {worst_cos:.3}, PR [{}]",
            prs.join(", ")
        ),
    )
}

fn lsa_agreement() -> (bool, String) {
    let top2 = |grammar: Grammar, sampling: SamplingMode| {
        let mut cfg = ExperimentConfig::default();
        cfg.task.grammar = grammar;
        cfg.task.sampling = sampling;
        let data = make_datasets(&cfg).unwrap();
        let counts = build_count_matrix(&data.train).unwrap();
        lsa_analyze(&counts, true, Normalization::None).unwrap().top_fraction(2)
    };
    let cat = top2(Grammar::Categorical { classes: 3 }, SamplingMode::UniformOverScores);
    let ord = top2(Grammar::SentimentIntensity, SamplingMode::UniformOverScores);
    // Reported for comparison only; the pass condition uses the default sampling.
    let ord_iid = top2(Grammar::SentimentIntensity, SamplingMode::IidWords);
    (
        cat > 0.95 && ord > 0.90,
        format!(
            "categorical N=3 {cat:.4} (need > 0.95), sentiment+intensity {ord:.4} (need > 0.90); \
             sentiment+intensity with iid words {ord_iid:.4} (not scored)"
        ),
    )
}

fn known_manifolds() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let circle: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            let t: f64 = rng.random_range(0.0..TAU);
            vec![t.cos(), t.sin(), 0.0]
        })
        .collect();
    let square: Vec<Vec<f64>> = (0..2000)
        .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0])
        .collect();
    let mle_c = mle_dimension(&circle, 10).unwrap().dimension;
    let cor_c = correlation_dimension(&circle, None).unwrap().estimate;
    let mle_s = mle_dimension(&square, 10).unwrap().dimension;
    let cor_s = correlation_dimension(&square, None).unwrap().estimate;
    let mut ok = (mle_c - 1.0).abs() <= 0.25
        && (cor_c - 1.0).abs() <= 0.25
        && (mle_s - 2.0).abs() <= 0.35
        && (cor_s - 2.0).abs() <= 0.35;

    let mut pr_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let vars: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let pr = participation_ratio(&vars).unwrap();
        let scaled = participation_ratio(&vars.iter().map(|v| v * c).collect::<Vec<_>>()).unwrap();
        pr_ok &= (pr - scaled).abs() <= 1e-12 * pr && (1.0 - 1e-12..=n as f64 + 1e-12).contains(&pr);
    }
    pr_ok &= participation_ratio(&[3.0; 7]).unwrap() == 7.0 && participation_ratio(&[2.0, 0.0, 0.0]).unwrap() == 1.0;
    ok &= pr_ok;
    (
        ok,
        format!(
            "circle MLE {mle_c:.3} corr {cor_c:.3}; square MLE {mle_s:.3} corr {cor_s:.3}; PR properties {}",
            if pr_ok { "hold" } else { "violated" }
        ),
    )
}

fn speed_field(out: &PipelineOutput) -> (bool, String) {
    let frac = metric(out, "slow_contour_fraction");
    let Some(grid) = out.bundle.speed_grid.as_ref() else {
        return (false, "no speed grid".into());
    };
    let level = grid.contour_levels[0];
    let slow_cells = grid.log_speed.iter().flatten().flatten().filter(|v| **v < level).count();
    (
        slow_cells > 0 && frac >= 0.9,
        format!("{slow_cells} grid cells below 1/T_av, fraction of converged fixed points inside {frac:.3} (need ≥ 0.9)"),
    )
}

fn small_pipeline_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
seed = 21
[task]
length = 10
train_size = 300
test_size = 20
[model]
hidden_dim = 8
[train]
steps = 60
batch_size = 32
[fixed_points]
max_seeds = 10
noise_copies = 1
max_iters = 500
tol = 1e-6
[analysis]
local_pr_k = 5
local_pr_trials = 4
mle_k = 3
max_dimensionality_points = 100
grid_resolution = 8
grid_slices = 2
"#,
    )
    .unwrap();
    cfg.output_dir = Some(dir.to_path_buf());
    cfg
}

fn determinism(cat3: &PipelineOutput) -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&small_pipeline_config(&a)).unwrap();
    run_pipeline(&small_pipeline_config(&b)).unwrap();
    let mut tables = 0;
    let mut identical = true;
    for entry in fs::read_dir(&a).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            tables += 1;
            identical &= fs::read(&path).unwrap() == fs::read(b.join(path.file_name().unwrap())).unwrap();
        }
    }

    let mut lossless = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nets: Vec<RnnParams> = KINDS.iter().map(|&k| perturbed_params(k, 5, 3, 2, &mut rng)).collect();
    nets.push(cat3.params.clone());
    for (i, p) in nets.iter().enumerate() {
        let path = tmp.path().join(format!("net{i}.ckpt"));
        save_checkpoint(&Checkpoint::new(p.clone()), &path).unwrap();
        let back = load_checkpoint(&path).unwrap().params;
        lossless &= back.to_flat().iter().zip(p.to_flat()).all(|(x, y)| x.to_bits() == y.to_bits())
            && back.arch == p.arch;
    }
    (
        identical && tables == 7 && lossless,
        format!(
            "{tables} tables {}; checkpoint round trip {}",
            if identical { "byte-identical" } else { "differ" },
            if lossless { "bit-exact" } else { "lossy" }
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut r = Runner { outcomes: Vec::new() };

    let t = Instant::now();
    let res = jacobian_check();
    let in_time = t.elapsed() < Duration::from_secs(30);
    r.record(1, "Jacobians match finite differences", t, (res.0 && in_time, res.1));

    let t = Instant::now();
    let res = gradient_check();
    let in_time = t.elapsed() < Duration::from_secs(60);
    r.record(2, "BPTT gradients match finite differences", t, (res.0 && in_time, res.1));

    let t = Instant::now();
    let cat3 = run_pipeline(&ExperimentConfig::default()).unwrap();
    r.record(3, "simplex geometry for three categories", t, simplex_geometry(&cat3));

    let t = Instant::now();
    r.record(4, "fixed-point dimension N−1 across class counts", t, dimensionality_law());

    let t = Instant::now();
    r.record(5, "integration-mode counts", t, integration_modes(&cat3));

    let t = Instant::now();
    r.record(6, "two-label square and ℓ2 compression", t, multilabel_square());

    let t = Instant::now();
    r.record(7, "LSA semantic-space dimension", t, lsa_agreement());

    let t = Instant::now();
    r.record(8, "dimension estimators on known manifolds", t, known_manifolds());

    let t = Instant::now();
    r.record(9, "slow region of the speed field", t, speed_field(&cat3));

    let t = Instant::now();
    r.record(10, "determinism and checkpoint round trip", t, determinism(&cat3));

    let failed: Vec<usize> = r.outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        r.outcomes.len() - failed.len(),
        r.outcomes.len()
    );
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
