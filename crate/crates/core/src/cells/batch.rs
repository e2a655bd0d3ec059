//! Batched cell step with a reverse-mode backward pass. Rows are examples.
//!
//! The `_into` variants write into caller-owned buffers so that long unrolls
//! and optimization loops do not allocate per step.

use super::fastmath::{sigmoid, tanh};
use super::{CellKind, GateParams, RnnParams};
use crate::linalg::{gemm, Matrix, Trans};

#[derive(Clone, Copy, Debug)]
pub enum BatchInput<'a> {
    /// x = 0 for every row.
    Zero,
    /// One-hot rows; `None` is the pad token (zero input).
    Tokens(&'a [Option<usize>]),
    /// Dense B × input_dim matrix.
    Dense(&'a Matrix),
}

#[derive(Clone, Debug, Default)]
enum StoredInput {
    #[default]
    Zero,
    Tokens(Vec<Option<usize>>),
    Dense(Matrix),
}

impl StoredInput {
    fn store(&mut self, input: BatchInput<'_>) {
        match input {
            BatchInput::Zero => *self = StoredInput::Zero,
            BatchInput::Tokens(t) => match self {
                StoredInput::Tokens(v) => {
                    v.clear();
                    v.extend_from_slice(t);
                }
                _ => *self = StoredInput::Tokens(t.to_vec()),
            },
            BatchInput::Dense(m) => *self = StoredInput::Dense(m.clone()),
        }
    }
}

/// Values saved by a forward step for the matching backward step.
#[derive(Clone, Debug, Default)]
pub struct StepCache {
    /// Gate activations in the architecture's gate order.
    acts: Vec<Matrix>,
    /// GRU: r∘h_prev. LSTM: h̃_prev (the candidate's recurrent operand).
    gated_input: Matrix,
    /// LSTM: tanh(c_t).
    tanh_cell: Matrix,
    input: StoredInput,
}

impl StepCache {
    fn prepare(&mut self, params: &RnnParams, rows: usize) {
        let gates = params.gates.len();
        let m = params.arch.hidden_dim;
        self.acts.resize_with(gates, || Matrix::zeros(0, 0));
        for a in &mut self.acts {
            a.reset(rows, m);
        }
        match params.arch.kind {
            CellKind::Ugrnn => {}
            CellKind::Gru => self.gated_input.reset(rows, m),
            CellKind::Lstm => {
                self.gated_input.reset(rows, m);
                self.tanh_cell.reset(rows, m);
            }
        }
    }
}

/// Scratch buffers for [`backward_into`].
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch {
    bufs: Vec<Matrix>,
}

/// `out = act(h_in·W_hᵀ + x·W_xᵀ + b)`.
fn affine_into(gate: &GateParams, h_in: &Matrix, input: &StoredInput, out: &mut Matrix, act: impl Fn(f64) -> f64) {
    let rows = h_in.rows();
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&gate.b);
    }
    gemm(1.0, h_in, Trans::No, &gate.wh, Trans::Yes, 1.0, out);
    match input {
        StoredInput::Zero => {}
        StoredInput::Tokens(tokens) => {
            for (r, tok) in tokens.iter().enumerate() {
                if let Some(t) = tok {
                    for (i, v) in out.row_mut(r).iter_mut().enumerate() {
                        *v += gate.wx[(i, *t)];
                    }
                }
            }
        }
        StoredInput::Dense(x) => gemm(1.0, x, Trans::No, &gate.wx, Trans::Yes, 1.0, out),
    }
    out.data_mut().iter_mut().for_each(|v| *v = act(*v));
}

fn accumulate(grad: &mut GateParams, da: &Matrix, h_in: &Matrix, input: &StoredInput) {
    gemm(1.0, da, Trans::Yes, h_in, Trans::No, 1.0, &mut grad.wh);
    for r in 0..da.rows() {
        for (gb, d) in grad.b.iter_mut().zip(da.row(r)) {
            *gb += d;
        }
    }
    match input {
        StoredInput::Zero => {}
        StoredInput::Tokens(tokens) => {
            for (r, tok) in tokens.iter().enumerate() {
                if let Some(t) = tok {
                    for (i, d) in da.row(r).iter().enumerate() {
                        grad.wx[(i, *t)] += d;
                    }
                }
            }
        }
        StoredInput::Dense(x) => gemm(1.0, da, Trans::Yes, x, Trans::No, 1.0, &mut grad.wx),
    }
}

/// `h = g∘h_prev + (1 − g)∘c`.
fn blend(h: &mut Matrix, g: &Matrix, h_prev: &Matrix, c: &Matrix) {
    for (((out, gk), hp), ck) in h.data_mut().iter_mut().zip(g.data()).zip(h_prev.data()).zip(c.data()) {
        *out = gk * hp + (1.0 - gk) * ck;
    }
}

/// One batched step from `h_prev` (B × state_dim) into `h_next`, recording
/// what the backward pass needs in `cache`.
pub fn forward_into(params: &RnnParams, h_prev: &Matrix, input: BatchInput<'_>, cache: &mut StepCache, h_next: &mut Matrix) {
    let b = h_prev.rows();
    cache.prepare(params, b);
    cache.input.store(input);
    h_next.reset(b, h_prev.cols());
    let StepCache {
        acts,
        gated_input,
        tanh_cell,
        input,
    } = cache;
    match params.arch.kind {
        CellKind::Ugrnn => {
            let (c, g) = acts.split_at_mut(1);
            let (c, g) = (&mut c[0], &mut g[0]);
            affine_into(&params.gates[0], h_prev, input, c, tanh);
            affine_into(&params.gates[1], h_prev, input, g, sigmoid);
            blend(h_next, g, h_prev, c);
        }
        CellKind::Gru => {
            let (c, rest) = acts.split_at_mut(1);
            let (g, r) = rest.split_at_mut(1);
            let (c, g, r) = (&mut c[0], &mut g[0], &mut r[0]);
            affine_into(&params.gates[1], h_prev, input, g, sigmoid);
            affine_into(&params.gates[2], h_prev, input, r, sigmoid);
            for ((rh, rk), hp) in gated_input.data_mut().iter_mut().zip(r.data()).zip(h_prev.data()) {
                *rh = rk * hp;
            }
            affine_into(&params.gates[0], gated_input, input, c, tanh);
            blend(h_next, g, h_prev, c);
        }
        CellKind::Lstm => {
            let m = params.arch.hidden_dim;
            for r in 0..b {
                gated_input.row_mut(r).copy_from_slice(&h_prev.row(r)[m..]);
            }
            for (k, gate) in params.gates.iter().enumerate() {
                let h_in = if k == 1 { &*gated_input } else { h_prev };
                affine_into(gate, h_in, input, &mut acts[k], sigmoid);
            }
            let (o, u, ig, f) = (&acts[0], &acts[1], &acts[2], &acts[3]);
            for r in 0..b {
                let hp = h_prev.row(r);
                let (c_out, h_out) = h_next.row_mut(r).split_at_mut(m);
                let tc = tanh_cell.row_mut(r);
                let (or, ur, ir, fr) = (o.row(r), u.row(r), ig.row(r), f.row(r));
                for k in 0..m {
                    let c_new = fr[k] * hp[k] + ir[k] * ur[k];
                    let t = tanh(c_new);
                    tc[k] = t;
                    c_out[k] = c_new;
                    h_out[k] = t * or[k];
                }
            }
        }
    }
}

/// Given `∂L/∂h_t` (`d_next`), write `∂L/∂h_{t−1}` into `d_prev` and, if
/// `grads` is provided, add this step's parameter gradients into it.
/// `h_prev` must be the state the forward step started from.
pub fn backward_into(
    params: &RnnParams,
    h_prev: &Matrix,
    cache: &StepCache,
    d_next: &Matrix,
    d_prev: &mut Matrix,
    mut grads: Option<&mut RnnParams>,
    scratch: &mut BackwardScratch,
) {
    let b = h_prev.rows();
    let m = params.arch.hidden_dim;
    let needed = if params.arch.kind == CellKind::Lstm { 5 } else { 4 };
    scratch.bufs.resize_with(needed, || Matrix::zeros(0, 0));
    for buf in &mut scratch.bufs {
        buf.reset(b, m);
    }
    d_prev.reset(b, h_prev.cols());
    let input = &cache.input;
    match params.arch.kind {
        CellKind::Ugrnn | CellKind::Gru => {
            let (c, g) = (&cache.acts[0], &cache.acts[1]);
            let [dac, dag, drh, dar] = &mut scratch.bufs[..] else { unreachable!("four buffers") };
            for k in 0..d_next.data().len() {
                let d = d_next.data()[k];
                let (ck, gk) = (c.data()[k], g.data()[k]);
                d_prev.data_mut()[k] = d * gk;
                dac.data_mut()[k] = d * (1.0 - gk) * (1.0 - ck * ck);
                dag.data_mut()[k] = d * (h_prev.data()[k] - ck) * gk * (1.0 - gk);
            }
            gemm(1.0, dag, Trans::No, &params.gates[1].wh, Trans::No, 1.0, d_prev);
            if params.arch.kind == CellKind::Ugrnn {
                gemm(1.0, dac, Trans::No, &params.gates[0].wh, Trans::No, 1.0, d_prev);
                if let Some(gr) = grads.as_deref_mut() {
                    accumulate(&mut gr.gates[0], dac, h_prev, input);
                    accumulate(&mut gr.gates[1], dag, h_prev, input);
                }
                return;
            }
            let r = &cache.acts[2];
            gemm(1.0, dac, Trans::No, &params.gates[0].wh, Trans::No, 0.0, drh);
            for k in 0..drh.data().len() {
                let rk = r.data()[k];
                d_prev.data_mut()[k] += drh.data()[k] * rk;
                dar.data_mut()[k] = drh.data()[k] * h_prev.data()[k] * rk * (1.0 - rk);
            }
            gemm(1.0, dar, Trans::No, &params.gates[2].wh, Trans::No, 1.0, d_prev);
            if let Some(gr) = grads.as_deref_mut() {
                accumulate(&mut gr.gates[0], dac, &cache.gated_input, input);
                accumulate(&mut gr.gates[1], dag, h_prev, input);
                accumulate(&mut gr.gates[2], dar, h_prev, input);
            }
        }
        CellKind::Lstm => {
            let (o, u, ig, f) = (&cache.acts[0], &cache.acts[1], &cache.acts[2], &cache.acts[3]);
            let tc = &cache.tanh_cell;
            let [dao, dau, dai, daf, dht] = &mut scratch.bufs[..] else { unreachable!("five buffers") };
            for r in 0..b {
                for k in 0..m {
                    let dh = d_next[(r, m + k)];
                    let t = tc[(r, k)];
                    let ok = o[(r, k)];
                    let dc = d_next[(r, k)] + dh * ok * (1.0 - t * t);
                    dao[(r, k)] = dh * t * ok * (1.0 - ok);
                    let (uk, ik, fk) = (u[(r, k)], ig[(r, k)], f[(r, k)]);
                    daf[(r, k)] = dc * h_prev[(r, k)] * fk * (1.0 - fk);
                    dai[(r, k)] = dc * uk * ik * (1.0 - ik);
                    dau[(r, k)] = dc * ik * uk * (1.0 - uk);
                    d_prev[(r, k)] = dc * fk;
                }
            }
            gemm(1.0, dao, Trans::No, &params.gates[0].wh, Trans::No, 1.0, d_prev);
            gemm(1.0, dai, Trans::No, &params.gates[2].wh, Trans::No, 1.0, d_prev);
            gemm(1.0, daf, Trans::No, &params.gates[3].wh, Trans::No, 1.0, d_prev);
            gemm(1.0, dau, Trans::No, &params.gates[1].wh, Trans::No, 0.0, dht);
            for r in 0..b {
                for k in 0..m {
                    d_prev[(r, m + k)] += dht[(r, k)];
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                accumulate(&mut gr.gates[0], dao, h_prev, input);
                accumulate(&mut gr.gates[1], dau, &cache.gated_input, input);
                accumulate(&mut gr.gates[2], dai, h_prev, input);
                accumulate(&mut gr.gates[3], daf, h_prev, input);
            }
        }
    }
}

/// Allocating form of [`forward_into`].
pub fn forward(params: &RnnParams, h_prev: &Matrix, input: BatchInput<'_>) -> (Matrix, StepCache) {
    let mut cache = StepCache::default();
    let mut h = Matrix::zeros(0, 0);
    forward_into(params, h_prev, input, &mut cache, &mut h);
    (h, cache)
}

/// Allocating form of [`backward_into`].
pub fn backward(params: &RnnParams, h_prev: &Matrix, cache: &StepCache, d_next: &Matrix, grads: Option<&mut RnnParams>) -> Matrix {
    let mut d = Matrix::zeros(0, 0);
    backward_into(params, h_prev, cache, d_next, &mut d, grads, &mut BackwardScratch::default());
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{jacobians, step, Architecture};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(kind: CellKind) -> RnnParams {
        let arch = Architecture::new(kind, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = RnnParams::init(arch, 2, false, &mut rng);
        for s in p.slices_mut() {
            s.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        p
    }

    #[test]
    fn forward_matches_single_step() {
        for kind in [CellKind::Ugrnn, CellKind::Gru, CellKind::Lstm] {
            let p = params(kind);
            let n = p.state_dim();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let h = Matrix::from_fn(3, n, |_, _| rng.random_range(-0.8..0.8));
            let tokens = [Some(0), None, Some(2)];
            let (out, _) = forward(&p, &h, BatchInput::Tokens(&tokens));
            for (r, tok) in tokens.iter().enumerate() {
                let mut x = vec![0.0; 3];
                if let Some(t) = tok {
                    x[*t] = 1.0;
                }
                let single = step(&p, h.row(r), &x).unwrap();
                for (a, b) in out.row(r).iter().zip(&single) {
                    assert!((a - b).abs() < 1e-14, "{kind}");
                }
            }
            let xd = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let (out, _) = forward(&p, &h, BatchInput::Dense(&xd));
            let single = step(&p, h.row(1), xd.row(1)).unwrap();
            for (a, b) in out.row(1).iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_state_gradient_is_jacobian_transpose() {
        for kind in [CellKind::Ugrnn, CellKind::Gru, CellKind::Lstm] {
            let p = params(kind);
            let n = p.state_dim();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hm = Matrix::from_vec(1, n, h.clone()).unwrap();
            let (_, cache) = forward(&p, &hm, BatchInput::Zero);
            let d = backward(&p, &hm, &cache, &Matrix::from_vec(1, n, v.clone()).unwrap(), None);
            let (jr, _) = jacobians(&p, &h, &[0.0; 3]).unwrap();
            let expected = jr.matvec_t(&v).unwrap();
            for (a, b) in d.row(0).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-13, "{kind}");
            }
        }
    }

    #[test]
    fn reused_buffers_match_fresh_ones() {
        let p = params(CellKind::Gru);
        let n = p.state_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h1 = Matrix::from_fn(5, n, |_, _| rng.random_range(-0.8..0.8));
        let h2 = Matrix::from_fn(2, n, |_, _| rng.random_range(-0.8..0.8));
        let mut cache = StepCache::default();
        let mut out = Matrix::zeros(0, 0);
        forward_into(&p, &h1, BatchInput::Zero, &mut cache, &mut out);
        forward_into(&p, &h2, BatchInput::Zero, &mut cache, &mut out);
        let (fresh, _) = forward(&p, &h2, BatchInput::Zero);
        assert_eq!(out, fresh);
    }
}
