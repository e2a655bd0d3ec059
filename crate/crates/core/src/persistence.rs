//! Checkpoints, analysis bundles and flat report tables.
//!
//! A checkpoint file is one header line followed by a JSON body:
//!
//! ```text
//! RNNCKPT v1 fnv1a=<16 hex digits> len=<body bytes>
//! {"format_version":1,"architecture":{...},"arrays":[...],...}
//! ```
//!
//! The checksum covers the body bytes exactly. Array payloads are base64 of
//! little-endian `f64`, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::cells::{Architecture, RnnParams};
use crate::error::{Error, Result};
use crate::fixed_points::{FixedPointSet, SpeedGrid};
use crate::geometry::{DeflectionStats, DimensionalityReport, ReadoutGeometry};
use crate::linalg::PcaBasis;
use crate::lsa::LsaReport;
use crate::spectra::{IntegrationModeCounts, LinearizationSummary};
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "RNNCKPT";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Architecture, tensor names and little-endian parameter values, in a fixed
/// order.
pub fn canonical_params_bytes(params: &RnnParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * params.num_parameters() + 256);
    out.extend_from_slice(params.arch.kind.name().as_bytes());
    for d in [params.arch.hidden_dim, params.arch.input_dim, params.num_classes()] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (name, slice) in params.tensor_names().iter().zip(params.slices()) {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(slice.len() as u64).to_le_bytes());
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn params_fingerprint(params: &RnnParams) -> u64 {
    fnv1a(&canonical_params_bytes(params))
}

pub fn format_hash(h: u64) -> String {
    format!("{h:016x}")
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of little-endian f64, row-major.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: RnnParams,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    format_version: u32,
    architecture: Architecture,
    num_classes: usize,
    readout_bias: bool,
    arrays: Vec<NamedArray>,
    train_config: Option<TrainConfig>,
    seed: u64,
    metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(params: RnnParams) -> Self {
        Checkpoint {
            params,
            train_config: None,
            seed: 0,
            metrics: BTreeMap::new(),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        params_fingerprint(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let arrays = p
            .tensor_names()
            .into_iter()
            .zip(p.tensor_shapes())
            .zip(p.slices())
            .map(|((name, shape), data)| NamedArray {
                name,
                shape,
                data: encode_f64s(data),
            })
            .collect();
        let body = CheckpointBody {
            format_version: CHECKPOINT_VERSION,
            architecture: p.arch,
            num_classes: p.num_classes(),
            readout_bias: p.readout_bias.is_some(),
            arrays,
            train_config: self.train_config,
            seed: self.seed,
            metrics: self.metrics.clone(),
        };
        let body = serde_json::to_vec(&body).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = format!(
            "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} fnv1a={} len={}\n",
            format_hash(fnv1a(&body)),
            body.len()
        )
        .into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Parse and verify a checkpoint, building parameters for the
    /// architecture it declares.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verified_body(bytes)?;
        let arch = body.architecture;
        build(body, arch)
    }

    /// Like [`from_bytes`](Self::from_bytes) but insists on `arch`; arrays
    /// the expected cell needs and the file lacks are reported by name.
    pub fn from_bytes_as(bytes: &[u8], arch: Architecture) -> Result<Self> {
        build(verified_body(bytes)?, arch)
    }
}

fn verified_body(bytes: &[u8]) -> Result<CheckpointBody> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checksum("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("unrecognized checkpoint header '{header}'")));
    }
    let version: u32 = fields[1]
        .strip_prefix('v')
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad version field '{}'", fields[1])))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = fields[2]
        .strip_prefix("fnv1a=")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Format(format!("bad checksum field '{}'", fields[2])))?;
    let len: usize = fields[3]
        .strip_prefix("len=")
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad length field '{}'", fields[3])))?;
    let body = &bytes[nl + 1..];
    if body.len() != len {
        return Err(Error::Checksum(format!("body is {} bytes, header declares {len}", body.len())));
    }
    let actual = fnv1a(body);
    if actual != hash {
        return Err(Error::Checksum(format!(
            "body hashes to {}, header declares {}",
            format_hash(actual),
            format_hash(hash)
        )));
    }
    let parsed: CheckpointBody = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
    if parsed.format_version != version {
        return Err(Error::Version {
            found: parsed.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(parsed)
}

fn build(body: CheckpointBody, arch: Architecture) -> Result<Checkpoint> {
    if body.architecture != arch {
        // Still try array-by-array so the error names what is missing.
        let declared = body.architecture.kind;
        let mut params = RnnParams::zeros(arch, body.num_classes, body.readout_bias);
        fill_arrays(&mut params, &body.arrays)?;
        return Err(Error::Shape(format!(
            "checkpoint declares {declared} but {} was requested",
            arch.kind
        )));
    }
    let mut params = RnnParams::zeros(arch, body.num_classes, body.readout_bias);
    fill_arrays(&mut params, &body.arrays)?;
    if let Some(extra) = body
        .arrays
        .iter()
        .find(|a| !params.tensor_names().contains(&a.name))
    {
        return Err(Error::Shape(format!("unexpected array {} for {}", extra.name, arch.kind)));
    }
    params.validate()?;
    Ok(Checkpoint {
        params,
        train_config: body.train_config,
        seed: body.seed,
        metrics: body.metrics,
    })
}

fn fill_arrays(params: &mut RnnParams, arrays: &[NamedArray]) -> Result<()> {
    let names = params.tensor_names();
    let shapes = params.tensor_shapes();
    for ((name, shape), slot) in names.iter().zip(shapes).zip(params.slices_mut()) {
        let array = arrays
            .iter()
            .find(|a| &a.name == name)
            .ok_or_else(|| Error::Shape(format!("missing array {name}")))?;
        if array.shape != shape {
            return Err(Error::Shape(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                array.shape
            )));
        }
        let values = decode_f64s(&array.data)?;
        if values.len() != slot.len() {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} needs {} values, payload has {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(&values);
    }
    Ok(())
}

/// Write to a sibling temp file then rename, so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn load_checkpoint_as(path: impl AsRef<Path>, arch: Architecture) -> Result<Checkpoint> {
    Checkpoint::from_bytes_as(&fs::read(path)?, arch)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}


// ---------------------------------------------------------------------------
// Analysis bundles and report tables

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// FNV-1a fingerprint of the analysed parameters, 16 hex digits.
    pub checkpoint_hash: String,
    /// The configuration that produced the bundle, if any.
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProjection {
    pub phrase: usize,
    pub label: String,
    /// `coords[t]` is h_t in the hidden-state PCA basis, t = 0..=T.
    pub coords: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLinearization {
    /// Index into `fixed_points.points`.
    pub fixed_point: usize,
    #[serde(flatten)]
    pub summary: LinearizationSummary,
}

/// Everything one pipeline run produces, in a form that can be written out
/// as a JSON document plus flat tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub provenance: Provenance,
    pub metrics: BTreeMap<String, f64>,
    pub hidden_basis: Option<PcaBasis>,
    pub fixed_point_basis: Option<PcaBasis>,
    pub trajectories: Vec<TrajectoryProjection>,
    pub fixed_points: FixedPointSet,
    pub linearizations: Vec<PointLinearization>,
    pub integration_modes: Option<IntegrationModeCounts>,
    pub hidden_dimensionality: Option<DimensionalityReport>,
    pub fixed_point_dimensionality: Option<DimensionalityReport>,
    pub readouts: Option<ReadoutGeometry>,
    pub deflections: Option<DeflectionStats>,
    pub lsa: Option<LsaReport>,
    pub speed_grid: Option<SpeedGrid>,
}

impl AnalysisBundle {
    /// A bundle with no analysis results, tied to `params`.
    pub fn empty(params: &RnnParams, fixed_points: FixedPointSet) -> Self {
        AnalysisBundle {
            provenance: Provenance {
                checkpoint_hash: format_hash(params_fingerprint(params)),
                config: None,
            },
            metrics: BTreeMap::new(),
            hidden_basis: None,
            fixed_point_basis: None,
            trajectories: Vec::new(),
            fixed_points,
            linearizations: Vec::new(),
            integration_modes: None,
            hidden_dimensionality: None,
            fixed_point_dimensionality: None,
            readouts: None,
            deflections: None,
            lsa: None,
            speed_grid: None,
        }
    }

    /// Check the provenance hash against the parameters it claims to
    /// describe.
    pub fn verify_provenance(&self, params: &RnnParams) -> Result<()> {
        let expected = format_hash(params_fingerprint(params));
        if self.provenance.checkpoint_hash != expected {
            return Err(Error::Checksum(format!(
                "bundle was produced from {}, parameters hash to {expected}",
                self.provenance.checkpoint_hash
            )));
        }
        Ok(())
    }
}

pub const TABLE_VERSION: u32 = 1;
pub const REPORT_DOCUMENT: &str = "report.json";

/// Names and columns of the flat tables written by [`export_report`].
pub const TABLE_SCHEMAS: [(&str, &[&str]); 7] = [
    ("trajectory_pca", &["phrase", "t", "label", "pc1", "pc2", "pc3"]),
    (
        "fixed_point_pca",
        &["index", "candidate", "converged", "label", "q_loss", "speed", "pc1", "pc2", "pc3"],
    ),
    (
        "spectrum",
        &["fixed_point", "mode", "re", "im", "magnitude", "tau", "plane_fraction"],
    ),
    ("variance_explained", &["source", "component", "fraction", "cumulative"]),
    (
        "deflections",
        &["token", "phrase", "position", "start_pc1", "start_pc2", "delta_pc1", "delta_pc2", "norm"],
    ),
    ("speed_grid", &["slice", "offset", "iy", "ix", "x", "y", "log10_speed"]),
    ("readouts", &["class", "magnitude", "pc1", "pc2", "pc3"]),
];

fn schema_columns(name: &str) -> &'static [&'static str] {
    TABLE_SCHEMAS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .expect("known schema")
}

/// Shortest text that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Entry `i` of `v`, or an empty cell.
fn cell(v: &[f64], i: usize) -> String {
    v.get(i).map_or_else(String::new, |x| num(*x))
}

struct Table {
    name: &'static str,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str) -> Self {
        Table { name, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), schema_columns(self.name).len(), "{}", self.name);
        self.rows.push(row);
    }

    fn render(&self) -> Result<Vec<u8>> {
        let mut out = format!("# schema={} v{TABLE_VERSION}\n", self.name).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(schema_columns(self.name)).map_err(csv_err)?;
            for r in &self.rows {
                w.write_record(r).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Ok(out)
    }
}

fn project3(basis: &PcaBasis, h: &[f64]) -> Vec<f64> {
    basis.project(h, 3.min(basis.components.len()))
}

fn build_tables(bundle: &AnalysisBundle) -> Vec<Table> {
    let mut trajectory = Table::new("trajectory_pca");
    for tr in &bundle.trajectories {
        for (t, c) in tr.coords.iter().enumerate() {
            trajectory.push(vec![
                tr.phrase.to_string(),
                t.to_string(),
                tr.label.clone(),
                cell(c, 0),
                cell(c, 1),
                cell(c, 2),
            ]);
        }
    }

    let mut fixed = Table::new("fixed_point_pca");
    for (i, fp) in bundle.fixed_points.points.iter().enumerate() {
        let c = bundle
            .hidden_basis
            .as_ref()
            .map(|b| project3(b, &fp.h_star))
            .unwrap_or_default();
        fixed.push(vec![
            i.to_string(),
            fp.candidate.to_string(),
            fp.converged.to_string(),
            fp.predicted_label.to_string(),
            num(fp.q_loss),
            num(fp.speed),
            cell(&c, 0),
            cell(&c, 1),
            cell(&c, 2),
        ]);
    }

    let mut spectrum = Table::new("spectrum");
    for lin in &bundle.linearizations {
        let s = &lin.summary;
        for a in 0..s.time_constants.len() {
            let (re, im) = (s.eigenvalues_re[a], s.eigenvalues_im[a]);
            spectrum.push(vec![
                lin.fixed_point.to_string(),
                a.to_string(),
                num(re),
                num(im),
                num(re.hypot(im)),
                num(s.time_constants[a]),
                s.plane_fractions[a].map_or_else(String::new, num),
            ]);
        }
    }

    let mut variance = Table::new("variance_explained");
    let mut curve = |source: &str, fractions: &[f64]| {
        let mut cum = 0.0;
        for (k, f) in fractions.iter().enumerate() {
            cum += f;
            variance.push(vec![source.to_string(), (k + 1).to_string(), num(*f), num(cum)]);
        }
    };
    if let Some(b) = &bundle.hidden_basis {
        curve("hidden", &b.explained_fractions());
    }
    if let Some(b) = &bundle.fixed_point_basis {
        curve("fixed_points", &b.explained_fractions());
    }
    if let Some(l) = &bundle.lsa {
        curve("lsa", &l.variance_fractions);
    }

    let mut deflections = Table::new("deflections");
    if let Some(d) = &bundle.deflections {
        for tok in &d.tokens {
            for s in &tok.samples {
                deflections.push(vec![
                    tok.token.clone(),
                    s.phrase.to_string(),
                    s.position.to_string(),
                    cell(&s.start_pca, 0),
                    cell(&s.start_pca, 1),
                    cell(&s.delta_pca, 0),
                    cell(&s.delta_pca, 1),
                    num(s.norm),
                ]);
            }
        }
    }

    let mut grid = Table::new("speed_grid");
    if let Some(g) = &bundle.speed_grid {
        for (k, slice) in g.log_speed.iter().enumerate() {
            for (iy, row) in slice.iter().enumerate() {
                for (ix, v) in row.iter().enumerate() {
                    grid.push(vec![
                        k.to_string(),
                        num(g.spec.offsets[k]),
                        iy.to_string(),
                        ix.to_string(),
                        num(g.xs[ix]),
                        num(g.ys[iy]),
                        num(*v),
                    ]);
                }
            }
        }
    }

    let mut readouts = Table::new("readouts");
    if let Some(r) = &bundle.readouts {
        for (i, m) in r.magnitudes.iter().enumerate() {
            let c = r.pca_coordinates.get(i).cloned().unwrap_or_default();
            readouts.push(vec![i.to_string(), num(*m), cell(&c, 0), cell(&c, 1), cell(&c, 2)]);
        }
    }

    vec![trajectory, fixed, spectrum, variance, deflections, grid, readouts]
}

/// Paths written by [`export_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub document: PathBuf,
    pub tables: Vec<PathBuf>,
}

/// Write `report.json` and one CSV per table kind into `dir`. Every table
/// starts with a `# schema=<name> v1` line followed by its header row.
/// Deflection samples go to the `deflections` table only.
pub fn export_report(bundle: &AnalysisBundle, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut doc = bundle.clone();
    if let Some(d) = doc.deflections.as_mut() {
        for t in d.tokens.iter_mut() {
            t.samples.clear();
        }
    }
    let mut json = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    json.push(b'\n');
    let document = dir.join(REPORT_DOCUMENT);
    write_atomic(&document, &json)?;
    let mut tables = Vec::new();
    for t in build_tables(bundle) {
        let path = dir.join(format!("{}.csv", t.name));
        write_atomic(&path, &t.render()?)?;
        tables.push(path);
    }
    Ok(ReportFiles { document, tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: CellKind) -> Checkpoint {
        let arch = Architecture::new(kind, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ck = Checkpoint::new(RnnParams::init(arch, 2, true, &mut rng));
        ck.seed = 42;
        ck.train_config = Some(TrainConfig::default());
        ck.metrics.insert("test_accuracy".into(), 0.875);
        ck
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [CellKind::Ugrnn, CellKind::Gru, CellKind::Lstm] {
            let ck = sample(kind);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
            let a = ck.params.to_flat();
            let b = back.params.to_flat();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample(CellKind::Gru).to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checksum(_))));
        }
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let mut bytes = sample(CellKind::Gru).to_bytes().unwrap();
        let i = bytes.len() - 20;
        bytes[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let bytes = sample(CellKind::Gru).to_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen("RNNCKPT v1", "RNNCKPT v7", 1);
        assert!(matches!(
            Checkpoint::from_bytes(text.as_bytes()),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn ugrnn_loaded_as_gru_names_missing_matrix() {
        let ck = sample(CellKind::Ugrnn);
        let gru = Architecture::new(CellKind::Gru, 5, 3).unwrap();
        match Checkpoint::from_bytes_as(&ck.to_bytes().unwrap(), gru) {
            Err(Error::Shape(msg)) => assert!(msg.contains("W_rh"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
