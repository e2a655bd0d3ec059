//! Dimensionality estimates, readout geometry and token deflections.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::RnnParams;
use crate::error::{Error, Result};
use crate::linalg::{distance, dot, norm, pca, PcaBasis};
use crate::synth_data::{Phrase, Vocabulary};
use crate::training::batch_states;

pub const DEFAULT_LOCAL_PR_K: usize = 30;
pub const DEFAULT_LOCAL_PR_TRIALS: usize = 50;
pub const DEFAULT_MLE_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionalityReport {
    pub ambient_dim: usize,
    pub dim_90: usize,
    pub dim_95: usize,
    /// Threshold N/(N+1) for N classes.
    pub dim_class_threshold: usize,
    pub class_threshold: f64,
    pub global_pr: f64,
    pub local_pr: f64,
    pub local_pr_k: usize,
    pub mle_dim: f64,
    pub mle_k: usize,
    pub corr_dim: f64,
    pub corr_fit_range: (f64, f64),
}

/// Smallest k whose leading variances reach `threshold` of the total; 0 when
/// the total variance is zero.
pub fn variance_threshold_dim(variances: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("variance threshold must lie in (0, 1), got {threshold}")));
    }
    let total: f64 = variances.iter().sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (i, v) in variances.iter().enumerate() {
        acc += v;
        // Relative slack so that (0.5, 0.5) hits 1.0 despite rounding.
        if acc / total >= threshold - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(variances.len())
}

/// `(Σμ)² / Σμ²`.
pub fn participation_ratio(variances: &[f64]) -> Result<f64> {
    if variances.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Parameter("variances must be finite and nonnegative".into()));
    }
    let s: f64 = variances.iter().sum();
    let s2: f64 = variances.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return Err(Error::Undefined("participation ratio of all-zero variances".into()));
    }
    Ok(s * s / s2)
}

/// Indices of the `k` nearest points to `points[i]` (self excluded), nearest
/// first, ties broken by index, with their distances.
fn nearest_neighbors<P: AsRef<[f64]>>(points: &[P], i: usize, k: usize) -> Vec<(f64, usize)> {
    let q = points[i].as_ref();
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, p)| (distance(q, p.as_ref()), j))
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, by);
        d.truncate(k);
    }
    d.sort_by(by);
    d
}

/// Mean participation ratio of local PCA over the k-neighborhoods (point plus
/// k neighbours) of `trials` randomly chosen points.
pub fn local_participation_ratio<P: AsRef<[f64]>>(points: &[P], k: usize, trials: usize, seed: u64) -> Result<f64> {
    if k == 0 || k + 1 > points.len() {
        return Err(Error::InsufficientData(format!(
            "local PR with k = {k} needs at least {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    if trials == 0 {
        return Err(Error::Parameter("local PR needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<usize> = if trials >= points.len() {
        (0..points.len()).collect()
    } else {
        index::sample(&mut rng, points.len(), trials).into_vec()
    };
    let mut total = 0.0;
    let mut used = 0;
    for &c in &centers {
        let mut hood: Vec<&[f64]> = vec![points[c].as_ref()];
        hood.extend(nearest_neighbors(points, c, k).into_iter().map(|(_, j)| points[j].as_ref()));
        let basis = pca(&hood)?;
        if let Ok(pr) = participation_ratio(&basis.variances) {
            total += pr;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Undefined("every sampled neighbourhood was a single point".into()));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleEstimate {
    pub dimension: f64,
    pub k: usize,
    pub duplicates_dropped: usize,
}

/// Levina–Bickel maximum-likelihood dimension, averaging the per-point
/// inverse estimates. Exact duplicate points are removed first.
pub fn mle_dimension<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<MleEstimate> {
    if k < 2 {
        return Err(Error::Parameter(format!("MLE dimension needs k ≥ 2, got {k}")));
    }
    let (unique, dropped) = drop_duplicates(points);
    if unique.len() < k + 1 {
        return Err(Error::InsufficientData(format!(
            "MLE with k = {k} needs {} distinct points, got {}",
            k + 1,
            unique.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..unique.len() {
        let nn = nearest_neighbors(&unique, i, k);
        let tk = nn[k - 1].0;
        let s: f64 = nn[..k - 1].iter().map(|(t, _)| (tk / t).ln()).sum();
        if s > 0.0 {
            total += (k - 1) as f64 / s;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Undefined("all neighbourhoods are equidistant".into()));
    }
    Ok(MleEstimate {
        dimension: total / used as f64,
        k,
        duplicates_dropped: dropped,
    })
}

fn drop_duplicates<P: AsRef<[f64]>>(points: &[P]) -> (Vec<&[f64]>, usize) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    let key = |i: usize| points[i].as_ref();
    order.sort_by(|&a, &b| {
        key(a)
            .iter()
            .zip(key(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; points.len()];
    for w in order.windows(2) {
        if key(w[0]) == key(w[1]) {
            keep[w[1]] = false;
        }
    }
    let unique: Vec<&[f64]> = (0..points.len()).filter(|&i| keep[i]).map(key).collect();
    let dropped = points.len() - unique.len();
    (unique, dropped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDimension {
    pub estimate: f64,
    /// Radii bounding the fitted region.
    pub fit_range: (f64, f64),
    pub radii: Vec<f64>,
    pub c_values: Vec<f64>,
}

const CORR_FIT_LOW: f64 = 0.01;
const CORR_FIT_HIGH: f64 = 0.5;
const DEFAULT_CORR_RADII: usize = 64;

/// Grassberger–Procaccia correlation dimension: the least-squares slope of
/// `ln C(r)` against `ln r` over radii where `C` lies in [1%, 50%]. With no
/// grid given, radii are log-spaced between the smallest and largest pairwise
/// distance.
pub fn correlation_dimension<P: AsRef<[f64]>>(points: &[P], r_grid: Option<&[f64]>) -> Result<CorrelationDimension> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData("correlation dimension needs at least two points".into()));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(distance(points[i].as_ref(), points[j].as_ref()));
        }
    }
    d.sort_by(f64::total_cmp);
    let max = *d.last().expect("nonempty");
    let min_pos = d.iter().copied().find(|&x| x > 0.0);
    let radii: Vec<f64> = match (r_grid, min_pos) {
        (Some(g), _) => {
            if g.is_empty() || g.iter().any(|r| !(*r > 0.0)) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Parameter("radius grid must be positive and strictly ascending".into()));
            }
            g.to_vec()
        }
        (None, Some(lo)) if max > lo => {
            let (a, b) = (lo.ln(), max.ln());
            (0..DEFAULT_CORR_RADII)
                .map(|i| (a + (b - a) * i as f64 / (DEFAULT_CORR_RADII - 1) as f64).exp())
                .collect()
        }
        _ => return Err(Error::Range("all pairwise distances are equal".into())),
    };
    let pairs = d.len() as f64;
    let c_values: Vec<f64> = radii.iter().map(|&r| d.partition_point(|&x| x < r) as f64 / pairs).collect();
    let fit: Vec<(f64, f64)> = radii
        .iter()
        .zip(&c_values)
        .filter(|(_, &c)| (CORR_FIT_LOW..=CORR_FIT_HIGH).contains(&c))
        .map(|(&r, &c)| (r.ln(), c.ln()))
        .collect();
    if fit.len() < 2 {
        return Err(Error::Range(format!(
            "only {} radii have C(r) between {CORR_FIT_LOW} and {CORR_FIT_HIGH}",
            fit.len()
        )));
    }
    let m = fit.len() as f64;
    let mx = fit.iter().map(|p| p.0).sum::<f64>() / m;
    let my = fit.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = fit.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = fit.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(CorrelationDimension {
        estimate: sxy / sxx,
        fit_range: (fit[0].0.exp(), fit[fit.len() - 1].0.exp()),
        radii,
        c_values,
    })
}

/// All five measures for a point set; `classes` sets the N/(N+1) threshold.
pub fn dimensionality_report<P: AsRef<[f64]>>(
    points: &[P],
    classes: usize,
    local_k: usize,
    local_trials: usize,
    mle_k: usize,
    seed: u64,
) -> Result<DimensionalityReport> {
    let basis = pca(points)?;
    let class_threshold = classes as f64 / (classes as f64 + 1.0);
    let corr = correlation_dimension(points, None)?;
    let ambient = basis.dim() as f64;
    Ok(DimensionalityReport {
        ambient_dim: basis.dim(),
        dim_90: variance_threshold_dim(&basis.variances, 0.90)?,
        dim_95: variance_threshold_dim(&basis.variances, 0.95)?,
        dim_class_threshold: variance_threshold_dim(&basis.variances, class_threshold)?,
        class_threshold,
        global_pr: participation_ratio(&basis.variances)?,
        local_pr: local_participation_ratio(points, local_k.min(points.len() - 1), local_trials, seed)?,
        local_pr_k: local_k.min(points.len() - 1),
        mle_dim: mle_dimension(points, mle_k)?.dimension.min(ambient),
        mle_k,
        corr_dim: corr.estimate.clamp(0.0, ambient),
        corr_fit_range: corr.fit_range,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutAngle {
    pub i: usize,
    pub j: usize,
    pub degrees: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutGeometry {
    pub magnitudes: Vec<f64>,
    /// Pairs of nonzero readouts, i < j.
    pub pairwise_angles: Vec<ReadoutAngle>,
    pub theta_theory: f64,
    /// Mean over nonzero readouts of the fraction of r_i inside the span of
    /// the other readouts.
    pub subspace_percentage: f64,
    pub zero_readouts: Vec<usize>,
    /// Readout vectors in PCA coordinates (leading components only, no mean
    /// shift).
    pub pca_coordinates: Vec<Vec<f64>>,
}

/// Angle between regular-simplex vertex directions, `arccos(−1/(N−1))`.
pub fn theta_theory(classes: usize) -> f64 {
    (-1.0 / (classes as f64 - 1.0)).acos().to_degrees()
}

/// Fraction `‖P v‖ / ‖v‖` of `v` lying in the span of `others`.
pub fn span_fraction(v: &[f64], others: &[&[f64]]) -> f64 {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for o in others {
        let mut u = o.to_vec();
        for _ in 0..2 {
            for b in &q {
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nu = norm(&u);
        if nu > 1e-12 * norm(o).max(f64::MIN_POSITIVE) {
            q.push(u.into_iter().map(|x| x / nu).collect());
        }
    }
    let proj: f64 = q.iter().map(|b| dot(v, b).powi(2)).sum();
    (proj.sqrt() / norm(v)).min(1.0)
}

pub fn readout_geometry(params: &RnnParams, basis: Option<&PcaBasis>, pca_dims: usize) -> Result<ReadoutGeometry> {
    let n = params.num_classes();
    if n < 2 {
        return Err(Error::Parameter("readout geometry needs at least two readouts".into()));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| params.readout.row(i)).collect();
    let magnitudes: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
    let zero_readouts: Vec<usize> = (0..n).filter(|&i| magnitudes[i] == 0.0).collect();
    let live: Vec<usize> = (0..n).filter(|&i| magnitudes[i] > 0.0).collect();
    let mut pairwise_angles = Vec::new();
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            let c = (dot(rows[i], rows[j]) / (magnitudes[i] * magnitudes[j])).clamp(-1.0, 1.0);
            pairwise_angles.push(ReadoutAngle {
                i,
                j,
                degrees: c.acos().to_degrees(),
            });
        }
    }
    let subspace_percentage = if live.is_empty() {
        0.0
    } else {
        live.iter()
            .map(|&i| {
                let others: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| rows[j]).collect();
                span_fraction(rows[i], &others)
            })
            .sum::<f64>()
            / live.len() as f64
    };
    let pca_coordinates = match basis {
        Some(b) => rows
            .iter()
            .map(|r| b.components.iter().take(pca_dims).map(|c| dot(c, r)).collect())
            .collect(),
        None => Vec::new(),
    };
    Ok(ReadoutGeometry {
        magnitudes,
        pairwise_angles,
        theta_theory: theta_theory(n),
        subspace_percentage,
        zero_readouts,
        pca_coordinates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeflectionSample {
    pub phrase: usize,
    /// Timestep t ≥ 1 of the token causing `h_t − h_{t−1}`.
    pub position: usize,
    /// `h_{t−1}` in PCA coordinates.
    pub start_pca: Vec<f64>,
    /// `Δh_t` in PCA coordinates (no mean shift).
    pub delta_pca: Vec<f64>,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDeflection {
    pub token: String,
    pub count: usize,
    /// Empty when the token never occurs.
    pub mean: Vec<f64>,
    pub mean_norm: f64,
    /// Cosine of the mean deflection with each readout vector.
    pub readout_cosines: Vec<f64>,
    /// Mean deflection in PCA coordinates.
    pub plane_projection: Vec<f64>,
    pub samples: Vec<DeflectionSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeflectionStats {
    pub tokens: Vec<TokenDeflection>,
}

impl DeflectionStats {
    pub fn get(&self, token: &str) -> Option<&TokenDeflection> {
        self.tokens.iter().find(|t| t.token == token)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Collect `Δh_t = h_t − h_{t−1}` for every token occurrence along the
/// trajectories of `phrases` from h0 = 0.
pub fn deflection_stats(
    params: &RnnParams,
    vocabulary: &Vocabulary,
    phrases: &[Phrase],
    basis: &PcaBasis,
    pca_dims: usize,
) -> Result<DeflectionStats> {
    if phrases.is_empty() {
        return Err(Error::InsufficientData("deflection statistics need at least one phrase".into()));
    }
    if basis.dim() != params.state_dim() {
        return Err(Error::dim("PCA basis", params.state_dim(), basis.dim()));
    }
    let n = params.state_dim();
    let seqs: Vec<&[usize]> = phrases.iter().map(|p| p.tokens.as_slice()).collect();
    let states = batch_states(params, &seqs);
    let mut sums = vec![vec![0.0; n]; vocabulary.len()];
    let mut samples: Vec<Vec<DeflectionSample>> = vec![Vec::new(); vocabulary.len()];
    let comps: Vec<&Vec<f64>> = basis.components.iter().take(pca_dims).collect();
    for (b, phrase) in phrases.iter().enumerate() {
        for (t, &tok) in phrase.tokens.iter().enumerate() {
            if tok >= vocabulary.len() {
                return Err(Error::Parameter(format!("token index {tok} outside the vocabulary")));
            }
            let prev = states[t].row(b);
            let next = states[t + 1].row(b);
            let delta: Vec<f64> = next.iter().zip(prev).map(|(a, p)| a - p).collect();
            sums[tok].iter_mut().zip(&delta).for_each(|(s, d)| *s += d);
            samples[tok].push(DeflectionSample {
                phrase: b,
                position: t + 1,
                start_pca: basis.project(prev, pca_dims),
                delta_pca: comps.iter().map(|c| dot(c, &delta)).collect(),
                norm: norm(&delta),
            });
        }
    }
    let tokens = vocabulary
        .tokens
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let count = samples[v].len();
            if count == 0 {
                return TokenDeflection {
                    token: name.clone(),
                    count,
                    mean: Vec::new(),
                    mean_norm: 0.0,
                    readout_cosines: Vec::new(),
                    plane_projection: Vec::new(),
                    samples: Vec::new(),
                };
            }
            let mean: Vec<f64> = sums[v].iter().map(|s| s / count as f64).collect();
            TokenDeflection {
                token: name.clone(),
                count,
                mean_norm: norm(&mean),
                readout_cosines: (0..params.num_classes()).map(|i| cosine(&mean, params.readout.row(i))).collect(),
                plane_projection: comps.iter().map(|c| dot(c, &mean)).collect(),
                mean,
                samples: std::mem::take(&mut samples[v]),
            }
        })
        .collect();
    Ok(DeflectionStats { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{Architecture, CellKind};
    use crate::linalg::Matrix;
    use crate::synth_data::{gen_categorical, Grammar, SamplingMode};

    #[test]
    fn threshold_examples() {
        assert_eq!(variance_threshold_dim(&[1.0, 0.0, 0.0], 0.95).unwrap(), 1);
        assert_eq!(variance_threshold_dim(&[0.5, 0.5, 0.0], 0.95).unwrap(), 2);
        assert_eq!(variance_threshold_dim(&[0.6, 0.3, 0.1], 0.9).unwrap(), 2);
        assert_eq!(variance_threshold_dim(&[0.0, 0.0], 0.9).unwrap(), 0);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(participation_ratio(&[1.0, 1.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(participation_ratio(&[1.0; 4]).unwrap(), 4.0);
        assert!((participation_ratio(&[4.0, 1.0]).unwrap() - 25.0 / 17.0).abs() < 1e-15);
        assert!(participation_ratio(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn theta_values() {
        let want = [(2, 180.0), (3, 120.0), (4, 109.471_220_634_490_7), (10, 96.379_370_208_442_8)];
        for (n, deg) in want {
            assert!((theta_theory(n) - deg).abs() < 1e-6, "{n}: {}", theta_theory(n));
        }
    }

    fn readouts(rows: &[[f64; 3]]) -> RnnParams {
        let arch = Architecture::new(CellKind::Gru, 3, 2).unwrap();
        let mut p = RnnParams::zeros(arch, rows.len(), false);
        p.readout = Matrix::from_rows(rows).unwrap();
        p
    }

    #[test]
    fn coplanar_simplex_readouts() {
        let s = 3f64.sqrt() / 2.0;
        let p = readouts(&[[1.0, 0.0, 0.0], [-0.5, s, 0.0], [-0.5, -s, 0.0]]);
        let g = readout_geometry(&p, None, 2).unwrap();
        assert!((g.subspace_percentage - 1.0).abs() < 1e-12);
        for a in &g.pairwise_angles {
            assert!((a.degrees - 120.0).abs() < 1e-9);
        }
        assert!((g.theta_theory - 120.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_readouts_have_zero_lambda() {
        let p = readouts(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]]);
        let g = readout_geometry(&p, None, 2).unwrap();
        assert!(g.subspace_percentage.abs() < 1e-12);
    }

    #[test]
    fn zero_readout_is_flagged() {
        let p = readouts(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let g = readout_geometry(&p, None, 2).unwrap();
        assert_eq!(g.zero_readouts, vec![1]);
        assert_eq!(g.pairwise_angles.len(), 1);
    }

    #[test]
    fn zero_parameters_give_zero_deflections() {
        let g = Grammar::Categorical { classes: 3 };
        let ds = gen_categorical(3, 6, 20, SamplingMode::UniformOverScores, 1).unwrap();
        let arch = Architecture::new(CellKind::Gru, 4, 4).unwrap();
        let p = RnnParams::zeros(arch, 3, false);
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 0.0, 1.0, -(i as f64)]).collect();
        let basis = pca(&pts).unwrap();
        let stats = deflection_stats(&p, &g.vocabulary(), &ds.phrases, &basis, 2).unwrap();
        for t in &stats.tokens {
            assert!(t.count > 0);
            assert_eq!(t.mean_norm, 0.0);
            assert!(t.samples.iter().all(|s| s.norm == 0.0));
        }
    }

    #[test]
    fn duplicates_are_dropped() {
        let mut pts: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1, (i * i) as f64 * 0.01]).collect();
        pts.push(pts[3].clone());
        pts.push(pts[3].clone());
        let est = mle_dimension(&pts, 5).unwrap();
        assert_eq!(est.duplicates_dropped, 2);
        assert!(est.dimension.is_finite());
    }

    #[test]
    fn two_points_is_an_error() {
        assert!(mle_dimension(&[vec![0.0, 0.0], vec![1.0, 0.0]], 2).is_err());
    }

    #[test]
    fn duplicate_cluster_is_a_range_error() {
        let pts = vec![vec![1.0, 2.0]; 50];
        assert!(matches!(correlation_dimension(&pts, None), Err(Error::Range(_))));
    }
}
