//! Linearization of the autonomous dynamics around fixed points.
//!
//! Near a fixed point h*, `F(h* + δ, x) ≈ h* + J_rec·δ + J_inp·x`. Each
//! eigenmode of `J_rec` decays (or grows) with time constant
//! `τ_a = 1 / |ln |λ_a||` tokens; modes with long time constants lying in the
//! fixed-point manifold are the ones that integrate evidence.

use serde::{Deserialize, Serialize};

use crate::cells::{jacobians, step, HiddenState, RnnParams};
use crate::error::{Error, Result};
use crate::fixed_points::FixedPoint;
use crate::linalg::{eig_nonsymmetric, norm, Complex64, ComplexSpectrum, Matrix, PcaBasis};

pub const DEFAULT_ALIGNMENT_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug)]
pub struct SpectrumMode {
    pub eigenvalue: Complex64,
    pub time_constant: f64,
    /// |λ| > 1.
    pub unstable: bool,
    pub right_vector: Vec<Complex64>,
    pub left_vector: Vec<Complex64>,
    /// Set by [`LinearizationReport::align`].
    pub plane_fraction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearizationReport {
    pub h_star: HiddenState,
    pub j_rec: Matrix,
    pub j_inp: Matrix,
    /// Ordered by decreasing |λ|. Empty when the eigensolver failed.
    pub modes: Vec<SpectrumMode>,
    /// max_a ‖J_rec·r_a − λ_a r_a‖.
    pub max_residual: f64,
    /// Eigensolver failure or a numerically defective `J_rec`.
    pub flagged: bool,
    pub integration_mode_count: Option<usize>,
}

/// Compact, serializable view of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationSummary {
    pub eigenvalues_re: Vec<f64>,
    pub eigenvalues_im: Vec<f64>,
    pub time_constants: Vec<f64>,
    pub plane_fractions: Vec<Option<f64>>,
    pub flagged: bool,
    pub integration_mode_count: Option<usize>,
}

/// `1 / |ln r|` for a magnitude r; `+∞` at exactly r = 1.
pub fn time_constant(magnitude: f64) -> f64 {
    let l = magnitude.ln().abs();
    if l == 0.0 {
        f64::INFINITY
    } else {
        1.0 / l
    }
}

/// Time constants of every eigenvalue, sorted descending.
pub fn mode_timescales(spectrum: &ComplexSpectrum) -> Vec<f64> {
    let mut taus: Vec<f64> = spectrum.eigenvalues.iter().map(|l| time_constant(l.norm())).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus
}

/// Fraction of a (possibly complex) direction lying in the span of the first
/// `k` principal components. Real and imaginary parts are treated as one
/// stacked real vector, which makes the result independent of the complex
/// phase of the eigenvector.
pub fn plane_alignment(vector: &[Complex64], basis: &PcaBasis, k: usize) -> Result<f64> {
    if vector.len() != basis.dim() {
        return Err(Error::dim("mode vector", basis.dim(), vector.len()));
    }
    let total: f64 = vector.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return Err(Error::Undefined("alignment of a zero vector".into()));
    }
    let projected: f64 = basis
        .components
        .iter()
        .take(k)
        .map(|c| {
            let re: f64 = c.iter().zip(vector).map(|(ci, z)| ci * z.re).sum();
            let im: f64 = c.iter().zip(vector).map(|(ci, z)| ci * z.im).sum();
            re * re + im * im
        })
        .sum();
    Ok((projected / total).sqrt().min(1.0))
}

/// Linearize around a converged fixed point.
pub fn linearize(params: &RnnParams, fp: &FixedPoint) -> Result<LinearizationReport> {
    if !fp.converged {
        return Err(Error::Parameter(format!(
            "fixed point from candidate {} did not converge; use linearize_at to override",
            fp.candidate
        )));
    }
    linearize_at(params, &fp.h_star)
}

/// Linearize around an arbitrary state with zero input.
pub fn linearize_at(params: &RnnParams, h: &[f64]) -> Result<LinearizationReport> {
    let x = vec![0.0; params.arch.input_dim];
    let (j_rec, j_inp) = jacobians(params, h, &x)?;
    let (modes, max_residual, flagged) = match eig_nonsymmetric(&j_rec) {
        Ok(spec) => {
            let residual = spec.max_residual(&j_rec);
            let modes = spec
                .eigenvalues
                .iter()
                .zip(spec.right_vectors.iter().zip(&spec.left_vectors))
                .map(|(&eigenvalue, (r, l))| SpectrumMode {
                    eigenvalue,
                    time_constant: time_constant(eigenvalue.norm()),
                    unstable: eigenvalue.norm() > 1.0,
                    right_vector: r.clone(),
                    left_vector: l.clone(),
                    plane_fraction: None,
                })
                .collect();
            (modes, residual, spec.near_defective)
        }
        Err(Error::Convergence { .. }) => (Vec::new(), f64::NAN, true),
        Err(e) => return Err(e),
    };
    Ok(LinearizationReport {
        h_star: h.to_vec(),
        j_rec,
        j_inp,
        modes,
        max_residual,
        flagged,
        integration_mode_count: None,
    })
}

impl LinearizationReport {
    /// Fill in each mode's plane fraction against the top-`k` subspace.
    pub fn align(&mut self, basis: &PcaBasis, k: usize) -> Result<()> {
        for m in self.modes.iter_mut() {
            m.plane_fraction = Some(plane_alignment(&m.right_vector, basis, k)?);
        }
        Ok(())
    }

    /// Modes with `τ ≥ tau_threshold` and plane fraction at least
    /// `alignment_threshold`. Requires [`align`](Self::align) first.
    pub fn count_integration_modes(&mut self, tau_threshold: f64, alignment_threshold: f64) -> Result<usize> {
        let mut count = 0;
        for m in &self.modes {
            let frac = m
                .plane_fraction
                .ok_or_else(|| Error::Parameter("modes have not been aligned to a basis".into()))?;
            if m.time_constant >= tau_threshold && frac >= alignment_threshold {
                count += 1;
            }
        }
        self.integration_mode_count = Some(count);
        Ok(count)
    }

    /// `ℓ_aᵀ J_inp x` for every mode: how strongly input `x` drives each mode.
    pub fn mode_input_drive(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let drive = self.j_inp.matvec(x)?;
        Ok(self
            .modes
            .iter()
            .map(|m| m.left_vector.iter().zip(&drive).map(|(l, d)| l * d).sum())
            .collect())
    }

    /// `‖F(h + δ, 0) − F(h, 0) − J_rec·δ‖`. At an exact fixed point this is the
    /// error of the linear prediction `h* + J_rec·δ`; subtracting `F(h, 0)`
    /// rather than `h` keeps the residual speed of an approximate fixed point
    /// out of the measurement.
    pub fn prediction_error(&self, params: &RnnParams, delta: &[f64]) -> Result<f64> {
        let x = vec![0.0; params.arch.input_dim];
        let shifted: Vec<f64> = self.h_star.iter().zip(delta).map(|(a, b)| a + b).collect();
        let f_shift = step(params, &shifted, &x)?;
        let f0 = step(params, &self.h_star, &x)?;
        let jd = self.j_rec.matvec(delta)?;
        let err: Vec<f64> = (0..f0.len()).map(|i| f_shift[i] - f0[i] - jd[i]).collect();
        Ok(norm(&err))
    }

    /// Ratio of prediction errors at `δ` and `δ/2`; close to 4 when the
    /// linearization is correct.
    pub fn richardson_ratio(&self, params: &RnnParams, delta: &[f64]) -> Result<f64> {
        let half: Vec<f64> = delta.iter().map(|d| 0.5 * d).collect();
        let coarse = self.prediction_error(params, delta)?;
        let fine = self.prediction_error(params, &half)?;
        if fine == 0.0 {
            return Err(Error::Undefined("prediction error vanished at δ/2".into()));
        }
        Ok(coarse / fine)
    }

    pub fn summary(&self) -> LinearizationSummary {
        LinearizationSummary {
            eigenvalues_re: self.modes.iter().map(|m| m.eigenvalue.re).collect(),
            eigenvalues_im: self.modes.iter().map(|m| m.eigenvalue.im).collect(),
            time_constants: self.modes.iter().map(|m| m.time_constant).collect(),
            plane_fractions: self.modes.iter().map(|m| m.plane_fraction).collect(),
            flagged: self.flagged,
            integration_mode_count: self.integration_mode_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationModeCounts {
    pub per_point: Vec<usize>,
    pub median: f64,
}

/// Align every report to the top-`k` fixed-point subspace and count its
/// integration modes. Flagged reports are skipped.
pub fn count_integration_modes(
    reports: &mut [LinearizationReport],
    basis: &PcaBasis,
    k: usize,
    tau_threshold: f64,
    alignment_threshold: f64,
) -> Result<IntegrationModeCounts> {
    let mut per_point = Vec::with_capacity(reports.len());
    for r in reports.iter_mut().filter(|r| !r.flagged) {
        r.align(basis, k)?;
        per_point.push(r.count_integration_modes(tau_threshold, alignment_threshold)?);
    }
    if per_point.is_empty() {
        return Err(Error::InsufficientData("no usable linearization reports".into()));
    }
    let mut sorted = per_point.clone();
    sorted.sort_unstable();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) as f64
    };
    Ok(IntegrationModeCounts { per_point, median })
}
