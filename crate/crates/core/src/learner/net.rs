//! Feed-forward actor-critic network over a flat parameter vector.
//!
//! Layout: for every layer, the weight matrix stored row-major as
//! `[input][output]`, followed by the bias. The trunk layers come first, then
//! the actor head (two logits, index 0 = stop, 1 = continue), then the critic
//! head (one output).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::Action;

pub const INPUT_DIM: usize = 4;
pub const ACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    /// Widths of the rectified hidden layers; empty gives linear heads.
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input: INPUT_DIM, hidden: vec![64, 64, 64] }
    }
}

/// One dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bias(&self) -> usize {
        self.offset + self.rows * self.cols
    }
}

impl Architecture {
    /// Trunk layers followed by the actor and the critic head.
    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.hidden.len() + 2);
        let mut offset = 0;
        let mut rows = self.input;
        let mut push = |rows: usize, cols: usize, offset: &mut usize| {
            let l = LayerShape { offset: *offset, rows, cols };
            *offset += l.len();
            out.push(l);
        };
        for &h in &self.hidden {
            push(rows, h, &mut offset);
            rows = h;
        }
        push(rows, ACTIONS, &mut offset);
        push(rows, 1, &mut offset);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output {
    pub logits: [f64; ACTIONS],
    pub probs: [f64; ACTIONS],
    pub value: f64,
}

impl Output {
    pub fn stop_prob(&self) -> f64 {
        self.probs[0]
    }

    pub fn log_prob(&self, a: Action) -> f64 {
        let m = self.logits[0].max(self.logits[1]);
        let lse = m + ((self.logits[0] - m).exp() + (self.logits[1] - m).exp()).ln();
        self.logits[action_index(a)] - lse
    }

    pub fn entropy(&self) -> f64 {
        -(0..ACTIONS).map(|i| self.log_prob(index_action(i)) * self.probs[i]).sum::<f64>()
    }
}

pub fn action_index(a: Action) -> usize {
    match a {
        Action::Stop => 0,
        Action::Continue => 1,
    }
}

pub fn index_action(i: usize) -> Action {
    if i == 0 {
        Action::Stop
    } else {
        Action::Continue
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: [f64; ACTIONS]) -> [f64; ACTIONS] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Forward pass with every hidden activation kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Pass {
    /// Input followed by each post-activation hidden layer.
    acts: Vec<Vec<f64>>,
    pub out: Output,
}

fn dense(values: &[f64], l: &LayerShape, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&values[l.bias()..l.bias() + l.cols]);
    for (i, &x) in input.iter().enumerate() {
        let row = &values[l.offset + i * l.cols..l.offset + (i + 1) * l.cols];
        for (o, w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self { arch, values: vec![0.0; n] }
    }

    /// Orthogonal init with gain sqrt(2) in the trunk, 0.01 on the actor head
    /// and 1 on the critic head; zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        let layers = p.arch.layers();
        let n = layers.len();
        for (k, l) in layers.iter().enumerate() {
            let gain = if k == n - 2 {
                0.01
            } else if k == n - 1 {
                1.0
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(l.rows, l.cols, rng);
            for (dst, v) in p.values[l.offset..l.bias()].iter_mut().zip(w) {
                *dst = gain * v;
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Output {
        self.forward_cached(input).out
    }

    pub fn forward_cached(&self, input: &[f64]) -> Pass {
        assert_eq!(input.len(), self.arch.input, "input width");
        let layers = self.arch.layers();
        let trunk = &layers[..layers.len() - 2];
        let mut acts = Vec::with_capacity(trunk.len() + 1);
        acts.push(input.to_vec());
        for l in trunk {
            let mut h = Vec::with_capacity(l.cols);
            dense(&self.values, l, acts.last().unwrap(), &mut h);
            for v in &mut h {
                *v = v.max(0.0);
            }
            acts.push(h);
        }
        let last = acts.last().unwrap();
        let mut z = Vec::with_capacity(ACTIONS);
        dense(&self.values, &layers[layers.len() - 2], last, &mut z);
        let mut v = Vec::with_capacity(1);
        dense(&self.values, &layers[layers.len() - 1], last, &mut v);
        let logits = [z[0], z[1]];
        Pass { acts, out: Output { logits, probs: softmax(logits), value: v[0] } }
    }

    /// Adds the gradient of a loss with the given output sensitivities to
    /// `grad`.
    pub fn backward(&self, pass: &Pass, dlogits: [f64; ACTIONS], dvalue: f64, grad: &mut [f64]) {
        let layers = self.arch.layers();
        let n = layers.len();
        let last = pass.acts.last().unwrap();
        let mut dh = vec![0.0; last.len()];
        for (l, dout) in [(&layers[n - 2], &dlogits[..]), (&layers[n - 1], &[dvalue][..])] {
            accumulate(&self.values, l, last, dout, grad, Some(&mut dh));
        }
        for k in (0..n - 2).rev() {
            let act = &pass.acts[k + 1];
            for (d, a) in dh.iter_mut().zip(act) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = &pass.acts[k];
            let mut din = vec![0.0; input.len()];
            let need_input = k > 0;
            accumulate(&self.values, &layers[k], input, &dh, grad, need_input.then_some(&mut din));
            dh = din;
        }
    }
}

fn accumulate(values: &[f64], l: &LayerShape, input: &[f64], dout: &[f64], grad: &mut [f64], din: Option<&mut Vec<f64>>) {
    for (g, d) in grad[l.bias()..l.bias() + l.cols].iter_mut().zip(dout) {
        *g += d;
    }
    for (i, &x) in input.iter().enumerate() {
        let g = &mut grad[l.offset + i * l.cols..l.offset + (i + 1) * l.cols];
        for (gij, d) in g.iter_mut().zip(dout) {
            *gij += x * d;
        }
    }
    if let Some(din) = din {
        for (i, di) in din.iter_mut().enumerate() {
            let row = &values[l.offset + i * l.cols..l.offset + (i + 1) * l.cols];
            *di += row.iter().zip(dout).map(|(w, d)| w * d).sum::<f64>();
        }
    }
}

/// Row-major `rows x cols` matrix with orthonormal rows or columns,
/// whichever is the smaller set.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (k, n) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    while q.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut w = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            w[i * cols + j] = if rows <= cols { q[i][j] } else { q[j][i] };
        }
    }
    w
}
