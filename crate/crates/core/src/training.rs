//! Backpropagation through time with Adam, exponential learning-rate decay,
//! global-norm clipping and squared-ℓ2 regularization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::batch::{backward_into, forward_into, BackwardScratch, BatchInput, StepCache};
use crate::cells::{sigmoid, Architecture, RnnParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix, Trans};
use crate::synth_data::{shuffle_phrase, Label, LabeledDataset, Phrase};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Exclusive classes.
    #[default]
    SoftmaxXent,
    /// Independent binary labels, one logit each, thresholded at 0.
    SigmoidBce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_per_step: f64,
    /// Maximum global gradient norm.
    pub grad_clip: f64,
    pub l2_penalty: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            initial_lr: 0.01,
            lr_decay_per_step: 0.9997,
            grad_clip: 10.0,
            l2_penalty: 5e-4,
            steps: 3000,
            seed: 0,
            loss_kind: LossKind::SoftmaxXent,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.lr_decay_per_step > 0.0 && self.lr_decay_per_step <= 1.0) {
            return Err(Error::Parameter(format!(
                "lr_decay_per_step must lie in (0, 1], got {}",
                self.lr_decay_per_step
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Parameter(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::Parameter(format!("l2_penalty must be nonnegative, got {}", self.l2_penalty)));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::Parameter(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        Ok(())
    }

    /// `initial_lr · decay^step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.initial_lr * self.lr_decay_per_step.powi(step as i32)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Regularized minibatch loss at every step.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub shuffled_test_accuracy: f64,
    pub params: RnnParams,
}

fn max_len(phrases: &[&Phrase]) -> usize {
    phrases.iter().map(|p| p.tokens.len()).max().unwrap_or(0)
}

/// Hidden states `[H_0, …, H_T]` (each B × state_dim) for a batch of token
/// sequences run from h0 = 0. Shorter sequences see zero input once they end.
pub fn batch_states(params: &RnnParams, sequences: &[&[usize]]) -> Vec<Matrix> {
    let t_max = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut states = Vec::with_capacity(t_max + 1);
    states.push(Matrix::zeros(sequences.len(), params.state_dim()));
    let mut cache = StepCache::default();
    for t in 0..t_max {
        let toks: Vec<Option<usize>> = sequences.iter().map(|s| s.get(t).copied()).collect();
        let mut h = Matrix::zeros(0, 0);
        forward_into(params, states.last().expect("nonempty"), BatchInput::Tokens(&toks), &mut cache, &mut h);
        states.push(h);
    }
    states
}

fn batch_logits(params: &RnnParams, h: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(h.rows(), params.num_classes());
    if let Some(b) = &params.readout_bias {
        for r in 0..z.rows() {
            z.row_mut(r).copy_from_slice(b);
        }
    }
    gemm(1.0, h, Trans::No, &params.readout, Trans::Yes, 1.0, &mut z);
    z
}

fn check_label(label: &Label, kind: LossKind, n: usize) -> Result<()> {
    match (label, kind) {
        (Label::Class(c), LossKind::SoftmaxXent) if *c < n => Ok(()),
        (Label::Multi(v), LossKind::SigmoidBce) if v.len() == n => Ok(()),
        _ => Err(Error::Parameter(format!("label {label:?} is invalid for {kind:?} with {n} outputs"))),
    }
}

/// Mean data loss over the batch and its gradient with respect to the logits.
fn data_loss(z: &Matrix, labels: &[&Label], kind: LossKind) -> (f64, Matrix) {
    let (b, n) = z.shape();
    let mut dz = Matrix::zeros(b, n);
    let mut loss = 0.0;
    match kind {
        LossKind::SoftmaxXent => {
            for (r, label) in labels.iter().enumerate() {
                let c = label.class().expect("checked");
                let row = z.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                loss += lse - row[c];
                for j in 0..n {
                    let p = (row[j] - lse).exp();
                    dz[(r, j)] = (p - if j == c { 1.0 } else { 0.0 }) / b as f64;
                }
            }
            (loss / b as f64, dz)
        }
        LossKind::SigmoidBce => {
            let denom = (b * n) as f64;
            for (r, label) in labels.iter().enumerate() {
                let Label::Multi(ys) = label else { unreachable!("checked") };
                for j in 0..n {
                    let x = z[(r, j)];
                    let y = if ys[j] { 1.0 } else { 0.0 };
                    loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                    dz[(r, j)] = (sigmoid(x) - y) / denom;
                }
            }
            (loss / denom, dz)
        }
    }
}

/// Buffers reused across training steps.
#[derive(Default)]
pub struct Workspace {
    states: Vec<Matrix>,
    caches: Vec<StepCache>,
    d_next: Matrix,
    d_prev: Matrix,
    scratch: BackwardScratch,
    tokens: Vec<Option<usize>>,
}

/// Regularized loss `mean data loss + λ‖θ‖²` on a batch and its exact
/// gradient through the unrolled sequence.
pub fn loss_and_grads(params: &RnnParams, batch: &[&Phrase], config: &TrainConfig) -> Result<(f64, RnnParams)> {
    let mut grads = params.zeros_like();
    let loss = loss_and_grads_with(params, batch, config, &mut Workspace::default(), &mut grads)?;
    Ok((loss, grads))
}

/// [`loss_and_grads`] writing the gradient into `grads` (overwritten) and
/// reusing `ws` between calls.
pub fn loss_and_grads_with(
    params: &RnnParams,
    batch: &[&Phrase],
    config: &TrainConfig,
    ws: &mut Workspace,
    grads: &mut RnnParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty training batch".into()));
    }
    let n = params.num_classes();
    for p in batch {
        check_label(&p.label, config.loss_kind, n)?;
        if let Some(t) = p.tokens.iter().find(|t| **t >= params.arch.input_dim) {
            return Err(Error::Range(format!("token {t} outside input dimension {}", params.arch.input_dim)));
        }
    }
    let t_max = max_len(batch);
    ws.states.resize_with(t_max + 1, || Matrix::zeros(0, 0));
    ws.caches.resize_with(t_max, StepCache::default);
    ws.states[0].reset(batch.len(), params.state_dim());
    for t in 0..t_max {
        ws.tokens.clear();
        ws.tokens.extend(batch.iter().map(|p| p.tokens.get(t).copied()));
        let (before, after) = ws.states.split_at_mut(t + 1);
        forward_into(params, &before[t], BatchInput::Tokens(&ws.tokens), &mut ws.caches[t], &mut after[0]);
    }
    let h = &ws.states[t_max];
    let z = batch_logits(params, h);
    let labels: Vec<&Label> = batch.iter().map(|p| &p.label).collect();
    let (data, dz) = data_loss(&z, &labels, config.loss_kind);

    for s in grads.slices_mut() {
        s.fill(0.0);
    }
    gemm(1.0, &dz, Trans::Yes, h, Trans::No, 0.0, &mut grads.readout);
    if let Some(gb) = grads.readout_bias.as_mut() {
        for r in 0..dz.rows() {
            for (g, d) in gb.iter_mut().zip(dz.row(r)) {
                *g += d;
            }
        }
    }
    ws.d_next.reset(h.rows(), h.cols());
    gemm(1.0, &dz, Trans::No, &params.readout, Trans::No, 0.0, &mut ws.d_next);
    for t in (0..t_max).rev() {
        backward_into(
            params,
            &ws.states[t],
            &ws.caches[t],
            &ws.d_next,
            &mut ws.d_prev,
            Some(grads),
            &mut ws.scratch,
        );
        std::mem::swap(&mut ws.d_next, &mut ws.d_prev);
    }

    let lambda = config.l2_penalty;
    let loss = data + lambda * params.squared_norm();
    if lambda > 0.0 {
        for (g, p) in grads.slices_mut().into_iter().zip(params.slices()) {
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi += 2.0 * lambda * pi;
            }
        }
    }
    Ok(loss)
}

/// Predicted label for each row of final states.
fn predictions(params: &RnnParams, h: &Matrix, kind: LossKind) -> Vec<Label> {
    let z = batch_logits(params, h);
    (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            match kind {
                LossKind::SoftmaxXent => {
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    Label::Class(best)
                }
                LossKind::SigmoidBce => Label::Multi(row.iter().map(|v| *v >= 0.0).collect()),
            }
        })
        .collect()
}

const EVAL_CHUNK: usize = 256;

/// Fraction of correct decisions. For multi-label sets every (phrase, label)
/// pair counts as one decision.
pub fn accuracy(params: &RnnParams, phrases: &[Phrase], kind: LossKind) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in phrases.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|p| p.tokens.as_slice()).collect();
        let states = batch_states(params, &seqs);
        let preds = predictions(params, states.last().expect("nonempty"), kind);
        for (p, pred) in chunk.iter().zip(&preds) {
            match (&p.label, pred) {
                (Label::Multi(a), Label::Multi(b)) => {
                    correct += a.iter().zip(b).filter(|(x, y)| x == y).count();
                    total += a.len();
                }
                (a, b) => {
                    correct += usize::from(a == b);
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Accuracy after shuffling each phrase's tokens with a seed derived from
/// `seed` and the phrase index.
pub fn shuffled_accuracy(params: &RnnParams, phrases: &[Phrase], kind: LossKind, seed: u64) -> f64 {
    let shuffled: Vec<Phrase> = phrases
        .iter()
        .enumerate()
        .map(|(i, p)| shuffle_phrase(p, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect();
    accuracy(params, &shuffled, kind)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Train from a fresh initialization drawn with `config.seed`. Minibatches
/// are sampled with replacement from `train_set`.
pub fn train(arch: Architecture, train_set: &LabeledDataset, test_set: &LabeledDataset, config: &TrainConfig) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = RnnParams::init(arch, train_set.num_outputs(), false, &mut rng);
    train_from(params, train_set, test_set, config, &mut rng)
}

/// Continue training `params` using `rng` for batch sampling.
pub fn train_from<R: Rng>(
    mut params: RnnParams,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if params.arch.input_dim != train_set.vocabulary.len() {
        return Err(Error::dim("input x", params.arch.input_dim, train_set.vocabulary.len()));
    }
    let mut theta = params.to_flat();
    let mut adam = Adam::new(theta.len());
    let mut losses = Vec::with_capacity(config.steps);
    let mut ws = Workspace::default();
    let mut grads = params.zeros_like();
    for step in 0..config.steps {
        let batch: Vec<&Phrase> = (0..config.batch_size)
            .map(|_| &train_set.phrases[rng.random_range(0..train_set.len())])
            .collect();
        let loss = loss_and_grads_with(&params, &batch, config, &mut ws, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(loss);
        let mut g = grads.to_flat();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        if norm > config.grad_clip {
            let s = config.grad_clip / norm;
            g.iter_mut().for_each(|v| *v *= s);
        }
        adam.update(&mut theta, &g, config.learning_rate(step), config);
        params.set_flat(&theta)?;
    }
    let kind = config.loss_kind;
    let eval_train = &train_set.phrases[..train_set.len().min(2000)];
    Ok(TrainReport {
        losses,
        train_accuracy: accuracy(&params, eval_train, kind),
        test_accuracy: accuracy(&params, &test_set.phrases, kind),
        shuffled_test_accuracy: shuffled_accuracy(&params, &test_set.phrases, kind, config.seed),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::synth_data::{gen_categorical, gen_multilabel, SamplingMode};

    #[test]
    fn uniform_logits_give_log_n() {
        let ds = gen_categorical(4, 5, 6, SamplingMode::UniformOverScores, 1).unwrap();
        let arch = Architecture::new(CellKind::Gru, 3, ds.vocabulary.len()).unwrap();
        let p = RnnParams::zeros(arch, 4, false);
        let cfg = TrainConfig {
            l2_penalty: 0.0,
            ..TrainConfig::default()
        };
        let batch: Vec<&Phrase> = ds.phrases.iter().collect();
        let (loss, _) = loss_and_grads(&p, &batch, &cfg).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_readout_bce_is_ln2() {
        let ds = gen_multilabel(2, 5, 6, 1).unwrap();
        let arch = Architecture::new(CellKind::Ugrnn, 3, ds.vocabulary.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = RnnParams::init(arch, 2, false, &mut rng);
        p.readout = Matrix::zeros(2, 3);
        let cfg = TrainConfig {
            l2_penalty: 0.0,
            loss_kind: LossKind::SigmoidBce,
            ..TrainConfig::default()
        };
        let batch: Vec<&Phrase> = ds.phrases.iter().collect();
        let (loss, _) = loss_and_grads(&p, &batch, &cfg).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.01);
        assert!((cfg.learning_rate(1000) - 0.01 * 0.9997f64.powi(1000)).abs() < 1e-15);
    }

    #[test]
    fn wrong_label_kind_is_rejected() {
        let ds = gen_multilabel(2, 3, 2, 1).unwrap();
        let arch = Architecture::new(CellKind::Gru, 3, ds.vocabulary.len()).unwrap();
        let p = RnnParams::zeros(arch, 2, false);
        let batch: Vec<&Phrase> = ds.phrases.iter().collect();
        assert!(loss_and_grads(&p, &batch, &TrainConfig::default()).is_err());
    }

    #[test]
    fn invalid_config() {
        let bad = TrainConfig {
            lr_decay_per_step: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
