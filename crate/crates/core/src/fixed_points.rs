//! Approximate fixed points of the input-free dynamics `h ↦ F(h, 0)`, found
//! by minimizing `½‖h − F(h, 0)‖²`, plus the speed field `‖h − F(h, 0)‖`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cells::batch::{backward_into, forward_into, BackwardScratch, BatchInput, StepCache};
use crate::cells::{logits, step, HiddenState, RnnParams};
use crate::error::{Error, Result};
use crate::linalg::{distance, Matrix, PcaBasis};
use crate::persistence::params_fingerprint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Convergence threshold on q = (1/n)‖h − F(h,0)‖².
    pub tol: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Expected norm of the isotropic perturbation added to seed copies; the
    /// per-coordinate standard deviation is `noise_scale / √n`.
    pub noise_scale: f64,
    pub noise_copies: usize,
    pub dedup_radius: f64,
    /// Upper bound on seeds drawn from visited states.
    pub max_seeds: usize,
    pub seed: u64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-9,
            max_iters: 10_000,
            learning_rate: 0.01,
            noise_scale: 0.5,
            noise_copies: 4,
            dedup_radius: 0.05,
            max_seeds: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub h_star: HiddenState,
    /// (1/n)‖h − F(h,0)‖².
    pub q_loss: f64,
    /// ‖h − F(h,0)‖₂.
    pub speed: f64,
    /// Readout argmax at `h_star`.
    pub predicted_label: usize,
    pub converged: bool,
    /// Index of the candidate (seed or perturbed copy) it came from.
    pub candidate: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub candidates: usize,
    pub converged: usize,
    pub diverged: usize,
    /// Candidates removed by deduplication.
    pub duplicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    /// Ordered by (q_loss, candidate index).
    pub points: Vec<FixedPoint>,
    pub dedup_radius: f64,
    pub params_hash: u64,
    pub diagnostics: SearchDiagnostics,
}

impl FixedPointSet {
    pub fn converged(&self) -> impl Iterator<Item = &FixedPoint> {
        self.points.iter().filter(|p| p.converged)
    }

    pub fn converged_states(&self) -> Vec<HiddenState> {
        self.converged().map(|p| p.h_star.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One-step displacement `h − F(h, 0)`.
fn residual(params: &RnnParams, h: &[f64]) -> Result<Vec<f64>> {
    let x = vec![0.0; params.arch.input_dim];
    let f = step(params, h, &x)?;
    Ok(h.iter().zip(&f).map(|(a, b)| a - b).collect())
}

/// `S(h) = ‖h − F(h, 0)‖₂`.
pub fn speed(params: &RnnParams, h: &[f64]) -> Result<f64> {
    Ok(residual(params, h)?.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `q(h) = (1/n)‖h − F(h, 0)‖²`.
pub fn q_loss(params: &RnnParams, h: &[f64]) -> Result<f64> {
    let r = residual(params, h)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// Up to `max_seeds` states drawn without replacement from the rows of the
/// given state matrices (for example every timestep of a test batch).
pub fn harvest_seeds(states: &[Matrix], max_seeds: usize, seed: u64) -> Vec<HiddenState> {
    let all: Vec<&[f64]> = states.iter().flat_map(|m| (0..m.rows()).map(move |r| m.row(r))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, all.len(), max_seeds.min(all.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| all[i].to_vec()).collect()
}

struct Evaluation {
    q: Vec<f64>,
    grad: Matrix,
}

#[derive(Default)]
struct Evaluator {
    cache: StepCache,
    f: Matrix,
    res: Matrix,
    jt_res: Matrix,
    scratch: BackwardScratch,
}

impl Evaluator {
    /// q per row and the gradient of ½‖h − F(h,0)‖², `res − Jᵀres`.
    fn eval(&mut self, params: &RnnParams, h: &Matrix) -> Evaluation {
        let n = h.cols();
        forward_into(params, h, BatchInput::Zero, &mut self.cache, &mut self.f);
        self.res.reset(h.rows(), n);
        for ((r, a), b) in self.res.data_mut().iter_mut().zip(h.data()).zip(self.f.data()) {
            *r = a - b;
        }
        backward_into(params, h, &self.cache, &self.res, &mut self.jt_res, None, &mut self.scratch);
        let mut grad = self.res.clone();
        for (g, j) in grad.data_mut().iter_mut().zip(self.jt_res.data()) {
            *g -= j;
        }
        let q = (0..h.rows())
            .map(|r| self.res.row(r).iter().map(|v| v * v).sum::<f64>() / n as f64)
            .collect();
        Evaluation { q, grad }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// A candidate whose step size has been halved this far below the initial
/// rate has stalled.
const MIN_LR_FRACTION: f64 = 1e-9;

struct Candidate {
    h: Vec<f64>,
    q: f64,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    iterations: usize,
    done: bool,
}

/// Minimize `½‖h − F(h,0)‖²` from every seed and from `noise_copies`
/// Gaussian-perturbed replicas of each seed, using Adam with monotone
/// acceptance: a step that would increase q is rejected and that
/// candidate's step size halved. The result is deduplicated.
pub fn find_fixed_points(params: &RnnParams, seeds: &[HiddenState], config: &FixedPointConfig) -> Result<FixedPointSet> {
    if seeds.is_empty() {
        return Err(Error::InsufficientData("fixed-point search needs at least one seed".into()));
    }
    if !(config.tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {}", config.tol)));
    }
    if !(config.noise_scale >= 0.0 && config.learning_rate > 0.0) {
        return Err(Error::Parameter("noise_scale must be ≥ 0 and learning_rate > 0".into()));
    }
    let n = params.state_dim();
    for (i, s) in seeds.iter().enumerate() {
        if s.len() != n {
            return Err(Error::dim(format!("seed {i}"), n, s.len()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = (config.noise_scale / (n as f64).sqrt()).max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut starts: Vec<Vec<f64>> = seeds.to_vec();
    for s in seeds {
        for _ in 0..config.noise_copies {
            let noise_on = config.noise_scale > 0.0;
            starts.push(
                s.iter()
                    .map(|v| v + if noise_on { normal.sample(&mut rng) } else { 0.0 })
                    .collect(),
            );
        }
    }

    let mut evaluator = Evaluator::default();
    let start_m = Matrix::from_rows(&starts)?;
    let first = evaluator.eval(params, &start_m);
    let mut cands: Vec<Candidate> = starts
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let q = first.q[i];
            Candidate {
                h,
                q,
                grad: first.grad.row(i).to_vec(),
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
                lr: config.learning_rate,
                iterations: 0,
                done: !q.is_finite() || q <= config.tol,
            }
        })
        .collect();

    let mut trial = Matrix::default();
    let mut active: Vec<usize> = Vec::new();
    let mut proposals: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for _ in 0..config.max_iters {
        active.clear();
        active.extend((0..cands.len()).filter(|&i| !cands[i].done));
        if active.is_empty() {
            break;
        }
        trial.reset(active.len(), n);
        proposals.clear();
        for (row, &i) in active.iter().enumerate() {
            let c = &cands[i];
            let t = c.t + 1;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            let mut m = c.m.clone();
            let mut v = c.v.clone();
            let out = trial.row_mut(row);
            for k in 0..n {
                let g = c.grad[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
                out[k] = c.h[k] - c.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
            proposals.push((m, v));
        }
        let ev = evaluator.eval(params, &trial);
        for (row, (&i, (m, v))) in active.iter().zip(proposals.drain(..)).enumerate() {
            let c = &mut cands[i];
            c.iterations += 1;
            let q_new = ev.q[row];
            if q_new.is_finite() && q_new <= c.q {
                c.h.copy_from_slice(trial.row(row));
                c.q = q_new;
                c.grad.copy_from_slice(ev.grad.row(row));
                c.m = m;
                c.v = v;
                c.t += 1;
            } else {
                c.lr *= 0.5;
            }
            if c.q <= config.tol || c.lr < config.learning_rate * MIN_LR_FRACTION {
                c.done = true;
            }
        }
    }

    let mut points = Vec::with_capacity(cands.len());
    let mut diverged = 0;
    for (i, c) in cands.into_iter().enumerate() {
        if !c.h.iter().all(|v| v.is_finite()) {
            diverged += 1;
            continue;
        }
        let r = residual(params, &c.h)?;
        let sq: f64 = r.iter().map(|v| v * v).sum();
        if !sq.is_finite() {
            diverged += 1;
            continue;
        }
        let q = sq / n as f64;
        let z = logits(params, &c.h)?;
        points.push(FixedPoint {
            predicted_label: argmax(&z),
            q_loss: q,
            speed: sq.sqrt(),
            converged: q <= config.tol,
            candidate: i,
            iterations: c.iterations,
            h_star: c.h,
        });
    }
    let total = points.len() + diverged;
    let before = points.len();
    let points = dedup(points, config.dedup_radius);
    Ok(FixedPointSet {
        diagnostics: SearchDiagnostics {
            candidates: total,
            converged: points.iter().filter(|p| p.converged).count(),
            diverged,
            duplicates: before - points.len(),
        },
        points,
        dedup_radius: config.dedup_radius,
        params_hash: params_fingerprint(params),
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy deduplication in (q_loss, candidate) order: a point is dropped if
/// a retained point with the same predicted label lies within `radius`.
pub fn dedup(mut points: Vec<FixedPoint>, radius: f64) -> Vec<FixedPoint> {
    points.sort_by(|a, b| a.q_loss.total_cmp(&b.q_loss).then(a.candidate.cmp(&b.candidate)));
    let mut kept: Vec<FixedPoint> = Vec::with_capacity(points.len());
    for p in points {
        let close = kept
            .iter()
            .any(|k| k.predicted_label == p.predicted_label && distance(&k.h_star, &p.h_star) < radius);
        if !close {
            kept.push(p);
        }
    }
    kept
}

/// Planar slices of the speed field in PCA coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// PCA component indices spanning the slice.
    pub plane: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Points per axis.
    pub resolution: usize,
    /// Component along which slices are offset.
    pub offset_dim: usize,
    pub offsets: Vec<f64>,
}

impl GridSpec {
    /// Slices in the plane of the top two components covering the
    /// projections of `points` with a relative `margin` on each side, offset
    /// along the third component at `slices` evenly spaced values spanning
    /// the points' third coordinates.
    pub fn covering<P: AsRef<[f64]>>(
        basis: &PcaBasis,
        points: &[P],
        resolution: usize,
        slices: usize,
        margin: f64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InsufficientData("grid extent needs at least one point".into()));
        }
        if basis.components.len() < 3 || slices == 0 {
            return Err(Error::Parameter("grid needs three components and at least one slice".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            let c = basis.project(p.as_ref(), 3);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let pad = |a: usize| {
            let w = (hi[a] - lo[a]).max(1e-6);
            (lo[a] - margin * w, hi[a] + margin * w)
        };
        Ok(GridSpec {
            plane: (0, 1),
            x_range: pad(0),
            y_range: pad(1),
            resolution,
            offset_dim: 2,
            offsets: linspace(lo[2], hi[2], slices),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedGrid {
    pub spec: GridSpec,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `log10 S` indexed `[offset][iy][ix]`.
    pub log_speed: Vec<Vec<Vec<f64>>>,
    /// Contour levels `log10(1/T_av)` and `log10(1/(10·T_av))`.
    pub contour_levels: [f64; 2],
}

impl SpeedGrid {
    /// Grid cell nearest to the given plane coordinates.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        (nearest_index(&self.ys, y), nearest_index(&self.xs, x))
    }
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Evaluate `log10 S(h)` on grid points `mean + x·e_i + y·e_j + o·e_k`,
/// where the e's are PCA components.
pub fn speed_grid(params: &RnnParams, basis: &PcaBasis, spec: &GridSpec, mean_length: f64) -> Result<SpeedGrid> {
    let n = params.state_dim();
    if basis.dim() != n {
        return Err(Error::dim("pca basis", n, basis.dim()));
    }
    let (i, j) = spec.plane;
    let k = spec.offset_dim;
    if i.max(j).max(k) >= basis.components.len() || i == j {
        return Err(Error::Parameter(format!(
            "grid components ({i}, {j}, {k}) invalid for a basis with {} components",
            basis.components.len()
        )));
    }
    if spec.resolution == 0 || !(mean_length > 0.0) {
        return Err(Error::Parameter("grid resolution and mean length must be positive".into()));
    }
    let xs = linspace(spec.x_range.0, spec.x_range.1, spec.resolution);
    let ys = linspace(spec.y_range.0, spec.y_range.1, spec.resolution);
    let offsets = if spec.offsets.is_empty() { vec![0.0] } else { spec.offsets.clone() };
    let mut cache = StepCache::default();
    let mut f = Matrix::default();
    let mut log_speed = Vec::with_capacity(offsets.len());
    for &o in &offsets {
        let mut h = Matrix::zeros(xs.len() * ys.len(), n);
        for (iy, y) in ys.iter().enumerate() {
            for (ix, x) in xs.iter().enumerate() {
                let row = h.row_mut(iy * xs.len() + ix);
                row.copy_from_slice(&basis.mean);
                for d in 0..n {
                    row[d] += x * basis.components[i][d] + y * basis.components[j][d] + o * basis.components[k][d];
                }
            }
        }
        forward_into(params, &h, BatchInput::Zero, &mut cache, &mut f);
        let slice = (0..ys.len())
            .map(|iy| {
                (0..xs.len())
                    .map(|ix| {
                        let r = iy * xs.len() + ix;
                        let s: f64 = h.row(r).iter().zip(f.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                        s.sqrt().log10()
                    })
                    .collect()
            })
            .collect();
        log_speed.push(slice);
    }
    Ok(SpeedGrid {
        spec: GridSpec {
            offsets,
            ..spec.clone()
        },
        xs,
        ys,
        log_speed,
        contour_levels: [(1.0 / mean_length).log10(), (1.0 / (10.0 * mean_length)).log10()],
    })
}

/// Fraction of the given states lying in a grid cell slower than `1/T_av`.
/// Each state is matched to the slice whose offset is nearest its own
/// coordinate along the offset component, then to the nearest cell within
/// that slice.
pub fn fraction_inside_slow_contour(grid: &SpeedGrid, basis: &PcaBasis, states: &[HiddenState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let level = grid.contour_levels[0];
    let (i, j) = grid.spec.plane;
    let k = grid.spec.offset_dim;
    let inside = states
        .iter()
        .filter(|h| {
            let coords = basis.project(h, i.max(j).max(k) + 1);
            let (iy, ix) = grid.nearest_cell(coords[i], coords[j]);
            let slice = nearest_index(&grid.spec.offsets, coords[k]);
            grid.log_speed[slice][iy][ix] < level
        })
        .count();
    inside as f64 / states.len() as f64
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, a) in axis.iter().enumerate() {
        if (a - v).abs() < (axis[best] - v).abs() {
            best = i;
        }
    }
    best
}
