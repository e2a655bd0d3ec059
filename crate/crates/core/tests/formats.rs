//! On-disk formats against frozen golden files, and exported tables against
//! an independent re-projection. Set `UPDATE_GOLDEN=1` to rewrite the
//! golden files after an intentional format change.

use std::fs;
use std::path::PathBuf;

use attractor_core::cells::{Architecture, CellKind, RnnParams};
use attractor_core::experiment::{run_pipeline, ExperimentConfig};
use attractor_core::lsa::{ingest_count_csv, write_count_csv, CountMatrix};
use attractor_core::persistence::{Checkpoint, TABLE_SCHEMAS};
use attractor_core::synth_data::{generate, read_jsonl, write_jsonl, Grammar, SamplingMode};
use attractor_core::training::TrainConfig;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, actual: &[u8]) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(
        expected == actual,
        "{name} differs from golden:\n{}",
        String::from_utf8_lossy(actual)
    );
}

fn tiny_params() -> RnnParams {
    let arch = Architecture::new(CellKind::Ugrnn, 2, 3).unwrap();
    let mut p = RnnParams::zeros(arch, 2, false);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|i| (i as f64 - 7.0) / 8.0).collect();
    p.set_flat(&flat).unwrap();
    p
}

#[test]
fn checkpoint_matches_golden() {
    let mut ck = Checkpoint::new(tiny_params());
    ck.seed = 9;
    ck.train_config = Some(TrainConfig::default());
    ck.metrics.insert("test_accuracy".into(), 0.5);
    let bytes = ck.to_bytes().unwrap();
    check_golden("ugrnn_tiny.ckpt", &bytes);
    let back = Checkpoint::from_bytes(&fs::read(golden("ugrnn_tiny.ckpt")).unwrap()).unwrap();
    assert_eq!(back.params.to_flat(), tiny_params().to_flat());
    assert_eq!(back.seed, 9);
    assert_eq!(back.metrics["test_accuracy"], 0.5);
}

#[test]
fn dataset_jsonl_matches_golden() {
    let ds = generate(Grammar::Categorical { classes: 2 }, 5, 4, SamplingMode::UniformOverScores, 0).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&ds, &mut buf).unwrap();
    check_golden("categorical_small.jsonl", &buf);
    assert_eq!(read_jsonl(&buf[..]).unwrap(), ds);
}

#[test]
fn count_csv_matches_golden() {
    let m = CountMatrix::new(
        vec!["class_1".into(), "class_2".into()],
        vec!["evid_1".into(), "evid_2".into(), "neutral".into()],
        vec![vec![2, 0, 0], vec![0, 1, 0]],
    )
    .unwrap();
    let mut buf = Vec::new();
    write_count_csv(&m, &mut buf).unwrap();
    check_golden("counts_small.csv", &buf);
    assert_eq!(ingest_count_csv(&buf[..]).unwrap(), m);
}

fn small_config(dir: Option<PathBuf>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
seed = 4
[task]
length = 8
train_size = 200
test_size = 12
[model]
hidden_dim = 6
[train]
steps = 40
batch_size = 16
[fixed_points]
max_seeds = 8
noise_copies = 1
max_iters = 400
tol = 1e-6
[analysis]
local_pr_k = 5
local_pr_trials = 3
mle_k = 3
max_dimensionality_points = 60
grid_resolution = 6
grid_slices = 2
"#,
    )
    .unwrap();
    cfg.output_dir = dir;
    cfg
}

fn read_table(path: &std::path::Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let (schema, rest) = text.split_once('\n').unwrap();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (schema.to_string(), header, rows)
}

#[test]
fn report_tables_carry_schema_headers() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(Some(tmp.path().to_path_buf()))).unwrap();
    let mut headers = String::new();
    for (name, columns) in TABLE_SCHEMAS {
        let (schema, header, _) = read_table(&tmp.path().join(format!("{name}.csv")));
        assert_eq!(header, columns.iter().map(|c| c.to_string()).collect::<Vec<_>>());
        headers.push_str(&schema);
        headers.push('\n');
        headers.push_str(&header.join(","));
        headers.push('\n');
    }
    check_golden("table_headers.txt", headers.as_bytes());
}

#[test]
fn exported_fixed_points_reproject_from_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(Some(tmp.path().to_path_buf()))).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    let floats = |v: &serde_json::Value| -> Vec<f64> { v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let basis = &report["hidden_basis"];
    let mean = floats(&basis["mean"]);
    let comps: Vec<Vec<f64>> = basis["components"].as_array().unwrap().iter().map(floats).collect();
    let points = report["fixed_points"]["points"].as_array().unwrap();
    let (_, _, rows) = read_table(&tmp.path().join("fixed_point_pca.csv"));
    assert_eq!(rows.len(), points.len());
    assert!(!rows.is_empty());
    for (row, fp) in rows.iter().zip(points) {
        let h = floats(&fp["h_star"]);
        for k in 0..3 {
            let expected: f64 = comps[k].iter().zip(h.iter().zip(&mean)).map(|(c, (x, m))| c * (x - m)).sum();
            let got: f64 = row[6 + k].parse().unwrap();
            assert!((got - expected).abs() < 1e-12, "pc{}: {got} vs {expected}", k + 1);
        }
    }
}
