//! Recurrent action network: dense(tanh) → GRU → dense(tanh) → action heads.
//!
//! The heads map to steering `240°·tanh`, gas `σ` and brake `σ`. Training
//! minimizes the mean squared error on normalized actions (steering divided
//! by 240°) with Adam over seeded mini-batches. Parameters live in one flat
//! buffer; [`Layout`] gives each tensor its slice.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::Action;

pub const NN_SCHEMA: &str = "nn/1";
pub const STEER_SCALE: f64 = 240.0;
const OUTPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input: usize,
    pub dense1: usize,
    pub gru: usize,
    pub dense2: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: 9,
            dense1: 32,
            gru: 32,
            dense2: 32,
        }
    }
}

impl Architecture {
    pub fn with_input(input: usize) -> Self {
        Self {
            input,
            ..Self::default()
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new("input", self.input, "identity"),
            LayerSpec::new("dense", self.dense1, "tanh"),
            LayerSpec::new("gru", self.gru, "tanh"),
            LayerSpec::new("dense", self.dense2, "tanh"),
            LayerSpec::new("head", OUTPUTS, "steer_tanh240,logistic,logistic"),
        ]
    }

    fn from_layer_specs(specs: &[LayerSpec]) -> Result<Self> {
        let kinds: Vec<&str> = specs.iter().map(|s| s.kind.as_str()).collect();
        if kinds != ["input", "dense", "gru", "dense", "head"] || specs[4].width != OUTPUTS {
            return Err(Error::Shape(format!("unsupported layer stack {kinds:?}")));
        }
        Ok(Self {
            input: specs[0].width,
            dense1: specs[1].width,
            gru: specs[2].width,
            dense2: specs[3].width,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub width: usize,
    pub activation: String,
}

impl LayerSpec {
    fn new(kind: &str, width: usize, activation: &str) -> Self {
        Self {
            kind: kind.into(),
            width,
            activation: activation.into(),
        }
    }
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub arch: Architecture,
    w1: usize,
    b1: usize,
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wh: usize,
    uh: usize,
    bh: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: Architecture) -> Self {
        let (n, h1, g, h2) = (arch.input, arch.dense1, arch.gru, arch.dense2);
        let mut off = 0;
        let mut take = |size: usize| {
            let o = off;
            off += size;
            o
        };
        let w1 = take(h1 * n);
        let b1 = take(h1);
        let wz = take(g * h1);
        let uz = take(g * g);
        let bz = take(g);
        let wr = take(g * h1);
        let ur = take(g * g);
        let br = take(g);
        let wh = take(g * h1);
        let uh = take(g * g);
        let bh = take(g);
        let w2 = take(h2 * g);
        let b2 = take(h2);
        let w3 = take(OUTPUTS * h2);
        let b3 = take(OUTPUTS);
        Self {
            arch,
            w1,
            b1,
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wh,
            uh,
            bh,
            w2,
            b2,
            w3,
            b3,
            len: off,
        }
    }

    /// (offset, rows, cols) of every tensor in storage order; biases are one
    /// row.
    pub fn tensors(&self) -> [(usize, usize, usize); 15] {
        let a = self.arch;
        [
            (self.w1, a.dense1, a.input),
            (self.b1, 1, a.dense1),
            (self.wz, a.gru, a.dense1),
            (self.uz, a.gru, a.gru),
            (self.bz, 1, a.gru),
            (self.wr, a.gru, a.dense1),
            (self.ur, a.gru, a.gru),
            (self.br, 1, a.gru),
            (self.wh, a.gru, a.dense1),
            (self.uh, a.gru, a.gru),
            (self.bh, 1, a.gru),
            (self.w2, a.dense2, a.gru),
            (self.b2, 1, a.dense2),
            (self.w3, OUTPUTS, a.dense2),
            (self.b3, 1, OUTPUTS),
        ]
    }

    /// Offset of the steering-head bias.
    pub fn steer_bias(&self) -> usize {
        self.b3
    }

    /// Range of the output-layer weights and biases.
    pub fn output_layer(&self) -> std::ops::Range<usize> {
        self.w3..self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Per-feature mean and population std; near-constant features get std 1.
    pub fn fit<'a>(features: impl Iterator<Item = &'a [f64]>, n: usize) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for f in features {
            count += 1;
            for i in 0..n {
                let d = f[i] - mean[i];
                mean[i] += d / count as f64;
                m2[i] += d * (f[i] - mean[i]);
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let s = if count > 0 { (v / count as f64).sqrt() } else { 1.0 };
                if s > 1e-9 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layout: Layout,
    pub params: Vec<f64>,
    pub norm: NormStats,
    pub sequence_len: usize,
    pub seed: u64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y += W x for a row-major `rows × cols` matrix.
#[inline]
fn gemv_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        // Four independent partial sums keep the FP adds pipelined.
        let mut acc = [0.0; 4];
        let (rc, rr) = (row.chunks_exact(4), row.len() / 4 * 4);
        for (r4, x4) in rc.zip(x.chunks_exact(4)) {
            for k in 0..4 {
                acc[k] += r4[k] * x4[k];
            }
        }
        let mut tail = 0.0;
        for (a, b) in row[rr..].iter().zip(&x[rr..]) {
            tail += a * b;
        }
        *yi += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
}

/// dx += Wᵀ dy.
#[inline]
fn gemv_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (d, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *d == 0.0 {
            continue;
        }
        for (o, a) in dx.iter_mut().zip(row) {
            *o += d * a;
        }
    }
}

/// dW += dy ⊗ x.
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (d, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *d == 0.0 {
            continue;
        }
        for (o, b) in row.iter_mut().zip(x) {
            *o += d * b;
        }
    }
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
struct Trace {
    x: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    /// h[0] is the zero initial state; h[t + 1] follows input t.
    h: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    rh: Vec<Vec<f64>>,
    u: Vec<f64>,
    pred: [f64; OUTPUTS],
}

impl NetworkModel {
    pub fn zeros(arch: Architecture, sequence_len: usize) -> Self {
        let layout = Layout::new(arch);
        Self {
            layout,
            params: vec![0.0; layout.len],
            norm: NormStats::identity(arch.input),
            sequence_len,
            seed: 0,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: Architecture, sequence_len: usize, seed: u64) -> Self {
        let mut m = Self::zeros(arch, sequence_len);
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (off, rows, cols) in m.layout.tensors() {
            if rows == 1 {
                continue;
            }
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for v in &mut m.params[off..off + rows * cols] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        m
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layout.arch.layer_specs()
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Runs the network on already-normalized features.
    fn run(&self, params: &[f64], seq: &[&[f64]], trace: &mut Trace) {
        let l = &self.layout;
        let a = l.arch;
        let p = |off: usize, len: usize| &params[off..off + len];
        trace.x.clear();
        trace.a.clear();
        trace.z.clear();
        trace.r.clear();
        trace.c.clear();
        trace.rh.clear();
        trace.h.clear();
        trace.h.push(vec![0.0; a.gru]);
        for x in seq {
            let mut act = p(l.b1, a.dense1).to_vec();
            gemv_acc(p(l.w1, a.dense1 * a.input), x, &mut act);
            act.iter_mut().for_each(|v| *v = v.tanh());

            let h = trace.h.last().unwrap();
            let mut z = p(l.bz, a.gru).to_vec();
            gemv_acc(p(l.wz, a.gru * a.dense1), &act, &mut z);
            gemv_acc(p(l.uz, a.gru * a.gru), h, &mut z);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut r = p(l.br, a.gru).to_vec();
            gemv_acc(p(l.wr, a.gru * a.dense1), &act, &mut r);
            gemv_acc(p(l.ur, a.gru * a.gru), h, &mut r);
            r.iter_mut().for_each(|v| *v = sigmoid(*v));
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let mut c = p(l.bh, a.gru).to_vec();
            gemv_acc(p(l.wh, a.gru * a.dense1), &act, &mut c);
            gemv_acc(p(l.uh, a.gru * a.gru), &rh, &mut c);
            c.iter_mut().for_each(|v| *v = v.tanh());
            let next: Vec<f64> = (0..a.gru)
                .map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i])
                .collect();

            trace.x.push(x.to_vec());
            trace.a.push(act);
            trace.z.push(z);
            trace.r.push(r);
            trace.c.push(c);
            trace.rh.push(rh);
            trace.h.push(next);
        }
        let hl = trace.h.last().unwrap();
        let mut u = p(l.b2, a.dense2).to_vec();
        gemv_acc(p(l.w2, a.dense2 * a.gru), hl, &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        let mut o = p(l.b3, OUTPUTS).to_vec();
        gemv_acc(p(l.w3, OUTPUTS * a.dense2), &u, &mut o);
        trace.u = u;
        trace.pred = [o[0].tanh(), sigmoid(o[1]), sigmoid(o[2])];
    }

    fn check_sequence<T: AsRef<[f64]>>(&self, seq: &[T]) -> Result<()> {
        if seq.len() != self.sequence_len {
            return Err(Error::Shape(format!(
                "sequence of {} steps, model expects {}",
                seq.len(),
                self.sequence_len
            )));
        }
        if let Some(f) = seq.iter().find(|f| f.as_ref().len() != self.layout.arch.input) {
            return Err(Error::Shape(format!(
                "feature width {}, model expects {}",
                f.as_ref().len(),
                self.layout.arch.input
            )));
        }
        Ok(())
    }

    /// Normalized outputs `(tanh, σ, σ)` for normalized inputs.
    pub fn forward_normalized<T: AsRef<[f64]>>(&self, seq: &[T]) -> Result<[f64; OUTPUTS]> {
        self.check_sequence(seq)?;
        let refs: Vec<&[f64]> = seq.iter().map(|s| s.as_ref()).collect();
        let mut trace = Trace::default();
        self.run(&self.params, &refs, &mut trace);
        Ok(trace.pred)
    }

    /// Maps raw (unnormalized) feature vectors, oldest first, to an action.
    pub fn forward<T: AsRef<[f64]>>(&self, seq: &[T]) -> Result<Action> {
        self.check_sequence(seq)?;
        let normed: Vec<Vec<f64>> = seq
            .iter()
            .map(|f| {
                let mut out = vec![0.0; f.as_ref().len()];
                self.norm.apply(f.as_ref(), &mut out);
                out
            })
            .collect();
        let p = self.forward_normalized(&normed)?;
        Ok(Action::new(STEER_SCALE * p[0], p[1], p[2]))
    }

    /// Mean squared error over a batch and its gradient. Samples are reduced
    /// in fixed-size chunks in index order so results do not depend on the
    /// thread count.
    pub fn loss_and_gradient(&self, params: &[f64], batch: &[&Sample]) -> (f64, Vec<f64>) {
        const CHUNK: usize = 16;
        let n = batch.len().max(1) as f64;
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.layout.len];
                let mut loss = 0.0;
                let mut trace = Trace::default();
                for s in chunk {
                    loss += self.backprop(params, s, 1.0 / n, &mut trace, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut grad = vec![0.0; self.layout.len];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (loss / n, grad)
    }

    pub fn loss(&self, params: &[f64], batch: &[&Sample]) -> f64 {
        let n = batch.len().max(1) as f64;
        let mut trace = Trace::default();
        let mut total = 0.0;
        for s in batch {
            let seq: Vec<&[f64]> = s.inputs.iter().map(|v| v.as_slice()).collect();
            self.run(params, &seq, &mut trace);
            total += sample_loss(&trace.pred, &s.target);
        }
        total / n
    }

    /// Accumulates `scale · ∂loss/∂params` for one sample, returns its loss.
    fn backprop(
        &self,
        params: &[f64],
        s: &Sample,
        scale: f64,
        tr: &mut Trace,
        grad: &mut [f64],
    ) -> f64 {
        let l = &self.layout;
        let a = l.arch;
        let seq: Vec<&[f64]> = s.inputs.iter().map(|v| v.as_slice()).collect();
        self.run(params, &seq, tr);
        let loss = sample_loss(&tr.pred, &s.target);

        let p = |off: usize, len: usize| &params[off..off + len];
        let mut dout = [0.0; OUTPUTS];
        for c in 0..OUTPUTS {
            let dpred = scale * 2.0 * (tr.pred[c] - s.target[c]) / OUTPUTS as f64;
            let deriv = if c == 0 {
                1.0 - tr.pred[0] * tr.pred[0]
            } else {
                tr.pred[c] * (1.0 - tr.pred[c])
            };
            dout[c] = dpred * deriv;
        }
        outer_acc(&mut grad[l.w3..l.w3 + OUTPUTS * a.dense2], &dout, &tr.u);
        for c in 0..OUTPUTS {
            grad[l.b3 + c] += dout[c];
        }
        let mut du = vec![0.0; a.dense2];
        gemv_t_acc(p(l.w3, OUTPUTS * a.dense2), &dout, &mut du);
        for (d, u) in du.iter_mut().zip(&tr.u) {
            *d *= 1.0 - u * u;
        }
        let steps = seq.len();
        outer_acc(&mut grad[l.w2..l.w2 + a.dense2 * a.gru], &du, &tr.h[steps]);
        for (g, d) in grad[l.b2..l.b2 + a.dense2].iter_mut().zip(&du) {
            *g += d;
        }
        let mut dh = vec![0.0; a.gru];
        gemv_t_acc(p(l.w2, a.dense2 * a.gru), &du, &mut dh);

        let g = a.gru;
        let mut dzp = vec![0.0; g];
        let mut drp = vec![0.0; g];
        let mut dcp = vec![0.0; g];
        let mut drh = vec![0.0; g];
        let mut da = vec![0.0; a.dense1];
        for t in (0..steps).rev() {
            let (z, r, c, h) = (&tr.z[t], &tr.r[t], &tr.c[t], &tr.h[t]);
            let mut dh_prev = vec![0.0; g];
            for i in 0..g {
                let dc = dh[i] * z[i];
                let dz = dh[i] * (c[i] - h[i]);
                dh_prev[i] = dh[i] * (1.0 - z[i]);
                dcp[i] = dc * (1.0 - c[i] * c[i]);
                dzp[i] = dz * z[i] * (1.0 - z[i]);
            }
            outer_acc(&mut grad[l.wh..l.wh + g * a.dense1], &dcp, &tr.a[t]);
            outer_acc(&mut grad[l.uh..l.uh + g * g], &dcp, &tr.rh[t]);
            drh.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(p(l.uh, g * g), &dcp, &mut drh);
            for i in 0..g {
                let dr = drh[i] * h[i];
                dh_prev[i] += drh[i] * r[i];
                drp[i] = dr * r[i] * (1.0 - r[i]);
            }
            outer_acc(&mut grad[l.wz..l.wz + g * a.dense1], &dzp, &tr.a[t]);
            outer_acc(&mut grad[l.uz..l.uz + g * g], &dzp, h);
            outer_acc(&mut grad[l.wr..l.wr + g * a.dense1], &drp, &tr.a[t]);
            outer_acc(&mut grad[l.ur..l.ur + g * g], &drp, h);
            for i in 0..g {
                grad[l.bz + i] += dzp[i];
                grad[l.br + i] += drp[i];
                grad[l.bh + i] += dcp[i];
            }
            gemv_t_acc(p(l.uz, g * g), &dzp, &mut dh_prev);
            gemv_t_acc(p(l.ur, g * g), &drp, &mut dh_prev);

            da.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(p(l.wz, g * a.dense1), &dzp, &mut da);
            gemv_t_acc(p(l.wr, g * a.dense1), &drp, &mut da);
            gemv_t_acc(p(l.wh, g * a.dense1), &dcp, &mut da);
            for (d, act) in da.iter_mut().zip(&tr.a[t]) {
                *d *= 1.0 - act * act;
            }
            outer_acc(&mut grad[l.w1..l.w1 + a.dense1 * a.input], &da, &tr.x[t]);
            for (gb, d) in grad[l.b1..l.b1 + a.dense1].iter_mut().zip(&da) {
                *gb += d;
            }
            dh = dh_prev;
        }
        loss
    }
}

fn sample_loss(pred: &[f64; OUTPUTS], target: &[f64; OUTPUTS]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / OUTPUTS as f64
}

/// One training example: normalized feature sequence (oldest first) and the
/// normalized action target `[δ/240, g, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Vec<f64>>,
    pub target: [f64; OUTPUTS],
}

impl Sample {
    pub fn target_from_action(a: &Action) -> [f64; OUTPUTS] {
        [a.delta / STEER_SCALE, a.gas, a.brake]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetworkModel,
    /// Entry 0 is the loss before training; entry `e` the mean mini-batch
    /// loss of epoch `e`.
    pub loss_history: Vec<f64>,
    /// Epoch at which a non-finite loss stopped training; the model is the
    /// last finite checkpoint.
    pub diverged_at: Option<usize>,
}

/// Adam on mini-batches of normalized samples.
pub fn train(model: NetworkModel, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs at least one sample".into()));
    }
    for s in samples {
        model.check_sequence(&s.inputs)?;
    }
    let mut model = model;
    let n_params = model.layout.len;
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let all: Vec<&Sample> = samples.iter().collect();
    let mut history = vec![model.loss(&model.params, &all)];
    let mut checkpoint = model.params.clone();
    let mut t = 0i32;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut finite = true;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&model.params, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                finite = false;
                break;
            }
            epoch_loss += loss * batch.len() as f64;
            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for i in 0..n_params {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let step = cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                model.params[i] -= step;
            }
        }
        if !finite || model.params.iter().any(|p| !p.is_finite()) {
            model.params = checkpoint;
            return Ok(TrainOutcome {
                model,
                loss_history: history,
                diverged_at: Some(epoch),
            });
        }
        history.push(epoch_loss / samples.len() as f64);
        checkpoint.clone_from(&model.params);
        log::debug!("epoch {epoch}: loss {:.6}", history[epoch]);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
        diverged_at: None,
    })
}

/// Central-difference check of the batch-loss gradient on a random subset of
/// parameters (`fraction` of them, at least one). Returns the maximum of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check(model: &NetworkModel, batch: &[Sample], fraction: f64, seed: u64) -> f64 {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (_, analytic) = model.loss_and_gradient(&model.params, &refs);
    let n = model.layout.len;
    let count = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, count);
    gradient_check_indices(model, &refs, &analytic, picks.iter())
}

pub fn gradient_check_indices(
    model: &NetworkModel,
    batch: &[&Sample],
    analytic: &[f64],
    indices: impl Iterator<Item = usize>,
) -> f64 {
    const STEP: f64 = 1e-5;
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = params[i];
        params[i] = orig + STEP;
        let up = model.loss(&params, batch);
        params[i] = orig - STEP;
        let down = model.loss(&params, batch);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema: String,
    layers: Vec<LayerSpec>,
    sequence_len: usize,
    weights: Vec<Vec<Vec<f64>>>,
    norm_stats: NormStats,
    seed: u64,
}

impl NetworkModel {
    pub fn to_json(&self) -> Result<String> {
        let weights = self
            .layout
            .tensors()
            .iter()
            .map(|&(off, rows, cols)| {
                self.slice(off, rows * cols)
                    .chunks(cols)
                    .map(|r| r.to_vec())
                    .collect()
            })
            .collect();
        Ok(serde_json::to_string(&ModelFile {
            schema: NN_SCHEMA.into(),
            layers: self.layer_specs(),
            sequence_len: self.sequence_len,
            weights,
            norm_stats: self.norm.clone(),
            seed: self.seed,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.schema != NN_SCHEMA {
            return Err(Error::Invalid(format!(
                "expected schema {NN_SCHEMA}, found {}",
                f.schema
            )));
        }
        let arch = Architecture::from_layer_specs(&f.layers)?;
        let layout = Layout::new(arch);
        let tensors = layout.tensors();
        if f.weights.len() != tensors.len() {
            return Err(Error::Shape("wrong number of weight tensors".into()));
        }
        let mut params = vec![0.0; layout.len];
        for (w, &(off, rows, cols)) in f.weights.iter().zip(tensors.iter()) {
            if w.len() != rows || w.iter().any(|r| r.len() != cols) {
                return Err(Error::Shape(format!("tensor at {off} is not {rows}x{cols}")));
            }
            for (i, row) in w.iter().enumerate() {
                params[off + i * cols..off + (i + 1) * cols].copy_from_slice(row);
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("non-finite weight".into()));
        }
        if f.norm_stats.mean.len() != arch.input || f.norm_stats.std.len() != arch.input {
            return Err(Error::Shape("normalization stats width".into()));
        }
        Ok(Self {
            layout,
            params,
            norm: f.norm_stats,
            sequence_len: f.sequence_len,
            seed: f.seed,
        })
    }
}
