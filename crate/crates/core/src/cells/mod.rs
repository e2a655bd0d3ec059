//! Gated recurrent cells: the update map `h_t = F(h_{t−1}, x_t)`, its
//! Jacobians, and the affine readout.
//!
//! Parameter layout per architecture (gate letters as in the cell equations):
//!
//! | kind  | gates (in order) | state dim |
//! |-------|------------------|-----------|
//! | UGRNN | c, g             | n         |
//! | GRU   | c, g, r          | n         |
//! | LSTM  | h, c, i, f       | 2n        |
//!
//! Each gate owns `W_{gate}h`, `W_{gate}x` and `b_{gate}`. For the LSTM the
//! exposed state is `[c ; h̃]`; the output, input and forget gates read the
//! whole state, the cell candidate reads `h̃` only.

pub mod batch;
mod fastmath;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Ugrnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Ugrnn => &["c", "g"],
            CellKind::Gru => &["c", "g", "r"],
            CellKind::Lstm => &["h", "c", "i", "f"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Ugrnn => "ugrnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ugrnn" => Ok(CellKind::Ugrnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Parameter(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: CellKind,
    /// Gate width. Equals the state dimension except for the LSTM.
    pub hidden_dim: usize,
    pub input_dim: usize,
}

impl Architecture {
    pub fn new(kind: CellKind, hidden_dim: usize, input_dim: usize) -> Result<Self> {
        if hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Parameter("hidden_dim and input_dim must be positive".into()));
        }
        Ok(Architecture {
            kind,
            hidden_dim,
            input_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 2 * self.hidden_dim,
            _ => self.hidden_dim,
        }
    }

    /// Columns of `W_{gate}h`.
    fn recurrent_fan_in(&self, gate: usize) -> usize {
        match (self.kind, gate) {
            (CellKind::Lstm, 1) => self.hidden_dim,
            _ => self.state_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub wh: Matrix,
    pub wx: Matrix,
    pub b: Vec<f64>,
}

impl GateParams {
    fn zeros(rows: usize, h_cols: usize, x_cols: usize) -> Self {
        GateParams {
            wh: Matrix::zeros(rows, h_cols),
            wx: Matrix::zeros(rows, x_cols),
            b: vec![0.0; rows],
        }
    }

    /// `W_h·h + W_x·x + b`.
    fn preactivation(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|i| dot(self.wh.row(i), h) + dot(self.wx.row(i), x) + self.b[i])
            .collect()
    }
}

/// Trainable parameters of one cell plus its linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub arch: Architecture,
    pub gates: Vec<GateParams>,
    /// N × state_dim; row i is the readout vector r_i.
    pub readout: Matrix,
    pub readout_bias: Option<Vec<f64>>,
}

pub type HiddenState = Vec<f64>;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RnnParams {
    pub fn zeros(arch: Architecture, num_classes: usize, readout_bias: bool) -> Self {
        let gates = (0..arch.kind.gate_names().len())
            .map(|g| GateParams::zeros(arch.hidden_dim, arch.recurrent_fan_in(g), arch.input_dim))
            .collect();
        RnnParams {
            arch,
            gates,
            readout: Matrix::zeros(num_classes, arch.state_dim()),
            readout_bias: readout_bias.then(|| vec![0.0; num_classes]),
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, num_classes: usize, readout_bias: bool, rng: &mut R) -> Self {
        let mut p = RnnParams::zeros(arch, num_classes, readout_bias);
        let fill = |m: &mut Matrix, rng: &mut R| {
            let bound = 1.0 / (m.cols() as f64).sqrt();
            for v in m.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        for gate in p.gates.iter_mut() {
            fill(&mut gate.wh, rng);
            fill(&mut gate.wx, rng);
        }
        fill(&mut p.readout, rng);
        p
    }

    pub fn num_classes(&self) -> usize {
        self.readout.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.arch.state_dim()
    }

    pub fn zeros_like(&self) -> Self {
        RnnParams::zeros(self.arch, self.num_classes(), self.readout_bias.is_some())
    }

    /// Tensor names in canonical order, matching [`slices`](Self::slices).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for g in self.arch.kind.gate_names() {
            names.push(format!("W_{g}h"));
            names.push(format!("W_{g}x"));
            names.push(format!("b_{g}"));
        }
        names.push("readout_W".to_string());
        if self.readout_bias.is_some() {
            names.push("readout_b".to_string());
        }
        names
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for g in &self.gates {
            shapes.push(vec![g.wh.rows(), g.wh.cols()]);
            shapes.push(vec![g.wx.rows(), g.wx.cols()]);
            shapes.push(vec![g.b.len()]);
        }
        shapes.push(vec![self.readout.rows(), self.readout.cols()]);
        if let Some(b) = &self.readout_bias {
            shapes.push(vec![b.len()]);
        }
        shapes
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.gates {
            out.push(g.wh.data());
            out.push(g.wx.data());
            out.push(&g.b);
        }
        out.push(self.readout.data());
        if let Some(b) = &self.readout_bias {
            out.push(b);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for g in self.gates.iter_mut() {
            out.push(g.wh.data_mut());
            out.push(g.wx.data_mut());
            out.push(&mut g.b);
        }
        out.push(self.readout.data_mut());
        if let Some(b) = self.readout_bias.as_mut() {
            out.push(b);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::dim("flat parameter vector", self.num_parameters(), flat.len()));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.slices().iter().map(|s| dot(s, s)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Verify every tensor shape against the architecture.
    pub fn validate(&self) -> Result<()> {
        let expected = RnnParams::zeros(self.arch, self.num_classes(), self.readout_bias.is_some());
        if self.gates.len() != expected.gates.len() {
            return Err(Error::Shape(format!(
                "{} expects {} gates, found {}",
                self.arch.kind,
                expected.gates.len(),
                self.gates.len()
            )));
        }
        let names = self.tensor_names();
        for ((name, want), got) in names.iter().zip(expected.tensor_shapes()).zip(self.tensor_shapes()) {
            if want != got {
                return Err(Error::Shape(format!("{name}: expected {want:?}, found {got:?}")));
            }
        }
        if !self.is_finite() {
            return Err(Error::Parameter("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    fn check_state(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.state_dim() {
            return Err(Error::dim("hidden state h", self.state_dim(), h.len()));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::dim("input x", self.arch.input_dim, x.len()));
        }
        Ok(())
    }
}

/// One application of the update map.
pub fn step(params: &RnnParams, h: &[f64], x: &[f64]) -> Result<HiddenState> {
    params.check_state(h)?;
    params.check_input(x)?;
    let out = match params.arch.kind {
        CellKind::Ugrnn => {
            let c: Vec<f64> = params.gates[0].preactivation(h, x).into_iter().map(f64::tanh).collect();
            let g: Vec<f64> = params.gates[1].preactivation(h, x).into_iter().map(sigmoid).collect();
            (0..h.len()).map(|i| g[i] * h[i] + (1.0 - g[i]) * c[i]).collect()
        }
        CellKind::Gru => {
            let g: Vec<f64> = params.gates[1].preactivation(h, x).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = params.gates[2].preactivation(h, x).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = params.gates[0].preactivation(&rh, x).into_iter().map(f64::tanh).collect();
            (0..h.len()).map(|i| g[i] * h[i] + (1.0 - g[i]) * c[i]).collect()
        }
        CellKind::Lstm => {
            let m = params.arch.hidden_dim;
            let (cell, ht) = h.split_at(m);
            let o: Vec<f64> = params.gates[0].preactivation(h, x).into_iter().map(sigmoid).collect();
            let u: Vec<f64> = params.gates[1].preactivation(ht, x).into_iter().map(sigmoid).collect();
            let i: Vec<f64> = params.gates[2].preactivation(h, x).into_iter().map(sigmoid).collect();
            let f: Vec<f64> = params.gates[3].preactivation(h, x).into_iter().map(sigmoid).collect();
            let c_new: Vec<f64> = (0..m).map(|k| f[k] * cell[k] + i[k] * u[k]).collect();
            let h_new: Vec<f64> = (0..m).map(|k| c_new[k].tanh() * o[k]).collect();
            [c_new, h_new].concat()
        }
    };
    Ok(out)
}

/// Trajectory `[h0, h1, …, hT]`.
pub fn run<X: AsRef<[f64]>>(params: &RnnParams, h0: &[f64], inputs: &[X]) -> Result<Vec<HiddenState>> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData("run needs a nonempty input sequence".into()));
    }
    params.check_state(h0)?;
    let mut traj = Vec::with_capacity(inputs.len() + 1);
    traj.push(h0.to_vec());
    for x in inputs {
        let next = step(params, traj.last().expect("nonempty"), x.as_ref())?;
        traj.push(next);
    }
    Ok(traj)
}

/// `y = W·h + b`.
pub fn logits(params: &RnnParams, h: &[f64]) -> Result<Vec<f64>> {
    params.check_state(h)?;
    let mut y = params.readout.matvec(h)?;
    if let Some(b) = &params.readout_bias {
        for (yi, bi) in y.iter_mut().zip(b) {
            *yi += bi;
        }
    }
    Ok(y)
}

/// Recurrent (`∂F/∂h`, state × state) and input (`∂F/∂x`, state × input)
/// Jacobians at `(h, x)`.
pub fn jacobians(params: &RnnParams, h: &[f64], x: &[f64]) -> Result<(Matrix, Matrix)> {
    params.check_state(h)?;
    params.check_input(x)?;
    let n = params.state_dim();
    let d = params.arch.input_dim;
    let mut jr = Matrix::zeros(n, n);
    let mut ji = Matrix::zeros(n, d);
    match params.arch.kind {
        CellKind::Ugrnn => {
            let (gc, gg) = (&params.gates[0], &params.gates[1]);
            let c: Vec<f64> = gc.preactivation(h, x).into_iter().map(f64::tanh).collect();
            let g: Vec<f64> = gg.preactivation(h, x).into_iter().map(sigmoid).collect();
            for i in 0..n {
                let dg = (h[i] - c[i]) * g[i] * (1.0 - g[i]);
                let dc = (1.0 - g[i]) * (1.0 - c[i] * c[i]);
                for j in 0..n {
                    jr[(i, j)] = dg * gg.wh[(i, j)] + dc * gc.wh[(i, j)];
                }
                jr[(i, i)] += g[i];
                for j in 0..d {
                    ji[(i, j)] = dg * gg.wx[(i, j)] + dc * gc.wx[(i, j)];
                }
            }
        }
        CellKind::Gru => {
            let (gc, gg, gr) = (&params.gates[0], &params.gates[1], &params.gates[2]);
            let g: Vec<f64> = gg.preactivation(h, x).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = gr.preactivation(h, x).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = gc.preactivation(&rh, x).into_iter().map(f64::tanh).collect();
            // ∂(r∘h)/∂h = diag(r) + diag(h·r(1−r))·W_rh, ∂(r∘h)/∂x = diag(h·r(1−r))·W_rx
            let mut drh_dh = Matrix::zeros(n, n);
            let mut drh_dx = Matrix::zeros(n, d);
            for k in 0..n {
                let s = h[k] * r[k] * (1.0 - r[k]);
                for j in 0..n {
                    drh_dh[(k, j)] = s * gr.wh[(k, j)];
                }
                drh_dh[(k, k)] += r[k];
                for j in 0..d {
                    drh_dx[(k, j)] = s * gr.wx[(k, j)];
                }
            }
            let wc_drh_dh = gc.wh.matmul(&drh_dh)?;
            let wc_drh_dx = gc.wh.matmul(&drh_dx)?;
            for i in 0..n {
                let dg = (h[i] - c[i]) * g[i] * (1.0 - g[i]);
                let dc = (1.0 - g[i]) * (1.0 - c[i] * c[i]);
                for j in 0..n {
                    jr[(i, j)] = dg * gg.wh[(i, j)] + dc * wc_drh_dh[(i, j)];
                }
                jr[(i, i)] += g[i];
                for j in 0..d {
                    ji[(i, j)] = dg * gg.wx[(i, j)] + dc * (wc_drh_dx[(i, j)] + gc.wx[(i, j)]);
                }
            }
        }
        CellKind::Lstm => {
            let m = params.arch.hidden_dim;
            let (cell, ht) = h.split_at(m);
            let (go, gu, gi, gf) = (&params.gates[0], &params.gates[1], &params.gates[2], &params.gates[3]);
            let o: Vec<f64> = go.preactivation(h, x).into_iter().map(sigmoid).collect();
            let u: Vec<f64> = gu.preactivation(ht, x).into_iter().map(sigmoid).collect();
            let ig: Vec<f64> = gi.preactivation(h, x).into_iter().map(sigmoid).collect();
            let f: Vec<f64> = gf.preactivation(h, x).into_iter().map(sigmoid).collect();
            for k in 0..m {
                let c_new = f[k] * cell[k] + ig[k] * u[k];
                let tc = c_new.tanh();
                let sf = cell[k] * f[k] * (1.0 - f[k]);
                let si = u[k] * ig[k] * (1.0 - ig[k]);
                let su = ig[k] * u[k] * (1.0 - u[k]);
                let so = tc * o[k] * (1.0 - o[k]);
                let dh_dc = o[k] * (1.0 - tc * tc);
                for j in 0..n {
                    let mut dc = sf * gf.wh[(k, j)] + si * gi.wh[(k, j)];
                    if j == k {
                        dc += f[k];
                    }
                    if j >= m {
                        dc += su * gu.wh[(k, j - m)];
                    }
                    jr[(k, j)] = dc;
                    jr[(m + k, j)] = dh_dc * dc + so * go.wh[(k, j)];
                }
                for j in 0..d {
                    let dc = sf * gf.wx[(k, j)] + si * gi.wx[(k, j)] + su * gu.wx[(k, j)];
                    ji[(k, j)] = dc;
                    ji[(m + k, j)] = dh_dc * dc + so * go.wx[(k, j)];
                }
            }
        }
    }
    Ok((jr, ji))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: CellKind, seed: u64) -> RnnParams {
        let arch = Architecture::new(kind, 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = RnnParams::init(arch, 3, true, &mut rng);
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()
    }

    #[test]
    fn zero_gru_halves_state() {
        let arch = Architecture::new(CellKind::Gru, 4, 2).unwrap();
        let p = RnnParams::zeros(arch, 2, false);
        let v = vec![0.4, -1.0, 0.2, 3.0];
        let out = step(&p, &v, &[0.7, -2.0]).unwrap();
        for (o, h) in out.iter().zip(&v) {
            assert_eq!(*o, 0.5 * h);
        }
        let (jr, ji) = jacobians(&p, &v, &[0.7, -2.0]).unwrap();
        assert!(jr.sub(&Matrix::identity(4).scaled(0.5)).unwrap().frobenius_norm() == 0.0);
        assert!(ji.frobenius_norm() == 0.0);
    }

    #[test]
    fn zero_ugrnn_halves_state() {
        let arch = Architecture::new(CellKind::Ugrnn, 3, 2).unwrap();
        let p = RnnParams::zeros(arch, 2, false);
        let out = step(&p, &[1.0, -0.5, 0.25], &[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, -0.25, 0.125]);
    }

    /// Straight-line GRU transcription, written against plain arrays.
    fn gru_reference(p: &RnnParams, h: &[f64], x: &[f64]) -> Vec<f64> {
        let n = h.len();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut out = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let mut a = p.gates[2].b[i];
            for j in 0..n {
                a += p.gates[2].wh[(i, j)] * h[j];
            }
            for j in 0..x.len() {
                a += p.gates[2].wx[(i, j)] * x[j];
            }
            r[i] = sig(a);
        }
        for i in 0..n {
            let mut ag = p.gates[1].b[i];
            let mut ac = p.gates[0].b[i];
            for j in 0..n {
                ag += p.gates[1].wh[(i, j)] * h[j];
                ac += p.gates[0].wh[(i, j)] * (r[j] * h[j]);
            }
            for j in 0..x.len() {
                ag += p.gates[1].wx[(i, j)] * x[j];
                ac += p.gates[0].wx[(i, j)] * x[j];
            }
            let g = sig(ag);
            out[i] = g * h[i] + (1.0 - g) * ac.tanh();
        }
        out
    }

    #[test]
    fn gru_matches_reference_transcription() {
        let p = small(CellKind::Gru, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = random_vec(5, &mut rng);
            let x = random_vec(3, &mut rng);
            let a = step(&p, &h, &x).unwrap();
            let b = gru_reference(&p, &h, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn run_composes_steps() {
        let p = small(CellKind::Gru, 3);
        let xs = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let h0 = vec![0.0; 5];
        let traj = run(&p, &h0, &xs).unwrap();
        assert_eq!(traj.len(), 4);
        let manual = step(&p, &step(&p, &step(&p, &h0, &xs[0]).unwrap(), &xs[1]).unwrap(), &xs[2]).unwrap();
        assert_eq!(traj[3], manual);
        let one = run(&p, &h0, &xs[..1]).unwrap();
        assert_eq!(one[1], step(&p, &h0, &xs[0]).unwrap());
        assert!(run::<Vec<f64>>(&p, &h0, &[]).is_err());
    }

    #[test]
    fn logits_affine() {
        let arch = Architecture::new(CellKind::Gru, 3, 1).unwrap();
        let mut p = RnnParams::zeros(arch, 2, true);
        p.readout[(0, 0)] = 1.0;
        p.readout[(1, 2)] = 1.0;
        assert_eq!(logits(&p, &[0.3, 0.4, -0.5]).unwrap(), vec![0.3, -0.5]);
        assert_eq!(logits(&p, &[0.0; 3]).unwrap(), vec![0.0, 0.0]);
        p.readout_bias = Some(vec![1.0, 2.0]);
        assert_eq!(logits(&p, &[0.0; 3]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn dimension_errors_name_the_tensor() {
        let p = small(CellKind::Ugrnn, 4);
        let err = step(&p, &[0.0; 4], &[0.0; 3]).unwrap_err().to_string();
        assert!(err.contains("hidden state"), "{err}");
        let err = step(&p, &[0.0; 5], &[0.0; 2]).unwrap_err().to_string();
        assert!(err.contains("input x"), "{err}");
    }

    fn fd_jacobians(p: &RnnParams, h: &[f64], x: &[f64]) -> (Matrix, Matrix) {
        let eps = 1e-5;
        let n = h.len();
        let d = x.len();
        let mut jr = Matrix::zeros(n, n);
        let mut ji = Matrix::zeros(n, d);
        for j in 0..n {
            let mut hp = h.to_vec();
            let mut hm = h.to_vec();
            hp[j] += eps;
            hm[j] -= eps;
            let (fp, fm) = (step(p, &hp, x).unwrap(), step(p, &hm, x).unwrap());
            for i in 0..n {
                jr[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += eps;
            xm[j] -= eps;
            let (fp, fm) = (step(p, h, &xp).unwrap(), step(p, h, &xm).unwrap());
            for i in 0..n {
                ji[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
        (jr, ji)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for kind in [CellKind::Ugrnn, CellKind::Gru, CellKind::Lstm] {
            let p = small(kind, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            for _ in 0..5 {
                let h = random_vec(p.state_dim(), &mut rng);
                let x = random_vec(3, &mut rng);
                let (jr, ji) = jacobians(&p, &h, &x).unwrap();
                let (fr, fi) = fd_jacobians(&p, &h, &x);
                for (a, b) in jr.data().iter().zip(fr.data()) {
                    assert!((a - b).abs() < 1e-8, "{kind}");
                }
                for (a, b) in ji.data().iter().zip(fi.data()) {
                    assert!((a - b).abs() < 1e-8, "{kind}");
                }
            }
        }
    }

    #[test]
    fn lstm_cell_block_has_forget_diagonal() {
        let arch = Architecture::new(CellKind::Lstm, 2, 1).unwrap();
        let mut p = RnnParams::zeros(arch, 2, false);
        p.gates[3].b = vec![2.0, -1.0];
        let (jr, _) = jacobians(&p, &[0.3, -0.2, 0.1, 0.4], &[0.0]).unwrap();
        assert!((jr[(0, 0)] - sigmoid(2.0)).abs() < 1e-15);
        assert!((jr[(1, 1)] - sigmoid(-1.0)).abs() < 1e-15);
        assert_eq!(jr[(0, 1)], 0.0);
    }

    #[test]
    fn gated_states_stay_bounded() {
        for kind in [CellKind::Ugrnn, CellKind::Gru] {
            let p = small(kind, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..100 {
                let h = random_vec(5, &mut rng);
                let out = step(&p, &h, &random_vec(3, &mut rng)).unwrap();
                assert!(out.iter().all(|v| v.abs() < 1.0));
            }
        }
    }

    #[test]
    fn flat_round_trip_and_validation() {
        let p = small(CellKind::Lstm, 13);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.validate().is_ok());
        q.gates[1].wh = Matrix::zeros(5, 10);
        let err = q.validate().unwrap_err().to_string();
        assert!(err.contains("W_ch"), "{err}");
        assert_eq!(p.tensor_names().len(), p.slices().len());
    }
}
