//! Two-layer MLP that scores a concatenated (text ⊕ visual) item pair for the
//! cross-modal contrastive loss.

use rand::Rng;

use crate::linalg::{dot, sigmoid};
use crate::rng;

/// `score(x) = w2 · silu(W1 x + b1) + b2`, parameters stored flat as
/// `[W1 (hidden x input, row-major) | b1 | w2 | b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScorer {
    input: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Intermediate values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ScorerCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl MlpScorer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        MlpScorer {
            input,
            hidden,
            params: vec![0.0; Self::param_len(input, hidden)],
        }
    }

    /// Uniform Glorot initialization for both weight matrices, zero biases.
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut s = Self::zeros(input, hidden);
        let mut rng = rng::stream(seed, rng::STREAM_GENERATOR, 0x5c0);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let (w1_end, b1_end) = (hidden * input, hidden * input + hidden);
        for p in &mut s.params[..w1_end] {
            *p = rng.random_range(-a1..a1);
        }
        for p in &mut s.params[b1_end..b1_end + hidden] {
            *p = rng.random_range(-a2..a2);
        }
        s
    }

    pub fn from_params(input: usize, hidden: usize, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_len(input, hidden)).then_some(MlpScorer {
            input,
            hidden,
            params,
        })
    }

    pub fn param_len(input: usize, hidden: usize) -> usize {
        hidden * input + 2 * hidden + 1
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1_row(&self, h: usize) -> &[f64] {
        &self.params[h * self.input..(h + 1) * self.input]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.input;
        &self.params[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * self.input + self.hidden;
        &self.params[o..o + self.hidden]
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    pub fn forward(&self, x: &[f64]) -> (f64, ScorerCache) {
        debug_assert_eq!(x.len(), self.input);
        let b1 = self.b1();
        let pre: Vec<f64> = (0..self.hidden).map(|h| dot(self.w1_row(h), x) + b1[h]).collect();
        let act: Vec<f64> = pre.iter().map(|&p| silu(p)).collect();
        let score = dot(self.w2(), &act) + self.b2();
        (score, ScorerCache { pre, act })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.forward(x).0
    }

    /// Accumulates `d_score · ∂score/∂θ` into `param_grad` and returns
    /// `d_score · ∂score/∂x`.
    pub fn backward(&self, x: &[f64], cache: &ScorerCache, d_score: f64, param_grad: &mut [f64]) -> Vec<f64> {
        let (inp, hid) = (self.input, self.hidden);
        let w2 = self.w2();
        let mut dx = vec![0.0; inp];
        let b1_off = hid * inp;
        let w2_off = b1_off + hid;
        for h in 0..hid {
            param_grad[w2_off + h] += d_score * cache.act[h];
            let d_pre = d_score * w2[h] * silu_grad(cache.pre[h]);
            param_grad[b1_off + h] += d_pre;
            let row = &mut param_grad[h * inp..(h + 1) * inp];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += d_pre * xv;
            }
            for (d, w) in dx.iter_mut().zip(self.w1_row(h)) {
                *d += d_pre * w;
            }
        }
        param_grad[w2_off + hid] += d_score;
        dx
    }
}
