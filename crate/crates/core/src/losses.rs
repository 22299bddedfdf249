//! Stage-one objectives: BPR over concatenated (text ⊕ visual)
//! reconstructions, the cross-modal contrastive loss, and their weighted sum.
//! Each batch value is the mean over triples.

use crate::linalg::{dot, neg_log_sigmoid, sigmoid};
use crate::scorer::MlpScorer;

#[derive(Debug, Clone, PartialEq)]
pub struct TripleGrad {
    pub loss: f64,
    pub user: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

/// `-ln σ(u·i - u·j)` and its gradients for one triple.
pub fn bpr_triple(user: &[f64], pos: &[f64], neg: &[f64]) -> TripleGrad {
    let gap = dot(user, pos) - dot(user, neg);
    // d/dgap of -ln σ(gap)
    let d = -sigmoid(-gap);
    TripleGrad {
        loss: neg_log_sigmoid(gap),
        user: pos.iter().zip(neg).map(|(p, n)| d * (p - n)).collect(),
        pos: user.iter().map(|u| d * u).collect(),
        neg: user.iter().map(|u| -d * u).collect(),
    }
}

/// Batch-mean BPR loss; gradients are those of the mean.
pub fn bpr_loss(users: &[&[f64]], pos: &[&[f64]], neg: &[&[f64]]) -> (f64, Vec<TripleGrad>) {
    let n = users.len().max(1) as f64;
    let mut total = 0.0;
    let grads = users
        .iter()
        .zip(pos)
        .zip(neg)
        .map(|((u, p), q)| {
            let mut g = bpr_triple(u, p, q);
            total += g.loss;
            for v in g.user.iter_mut().chain(g.pos.iter_mut()).chain(g.neg.iter_mut()) {
                *v /= n;
            }
            g
        })
        .collect();
    (total / n, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalGrad {
    pub loss: f64,
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
    pub visual_neg: Vec<f64>,
}

/// `-ln σ(MLP(t ⊕ v) - MLP(t ⊕ v'))` for one item. Scorer gradients are
/// scaled by `weight` and accumulated into `scorer_grad`; input gradients are
/// returned scaled by `weight` as well.
pub fn cross_modal_triple(
    text: &[f64],
    visual: &[f64],
    visual_neg: &[f64],
    scorer: &MlpScorer,
    weight: f64,
    scorer_grad: &mut [f64],
) -> CrossModalGrad {
    let dt = text.len();
    let x_pos: Vec<f64> = text.iter().chain(visual).copied().collect();
    let x_neg: Vec<f64> = text.iter().chain(visual_neg).copied().collect();
    let (s_pos, c_pos) = scorer.forward(&x_pos);
    let (s_neg, c_neg) = scorer.forward(&x_neg);
    let gap = s_pos - s_neg;
    let d = -sigmoid(-gap) * weight;
    let dx_pos = scorer.backward(&x_pos, &c_pos, d, scorer_grad);
    let dx_neg = scorer.backward(&x_neg, &c_neg, -d, scorer_grad);
    CrossModalGrad {
        loss: neg_log_sigmoid(gap),
        text: dx_pos[..dt].iter().zip(&dx_neg[..dt]).map(|(a, b)| a + b).collect(),
        visual: dx_pos[dt..].to_vec(),
        visual_neg: dx_neg[dt..].to_vec(),
    }
}

/// Per-component batch losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub rq: f64,
    pub cm: f64,
    pub total: f64,
}

pub fn total_stage1_loss(bpr: f64, rq: f64, cm: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        bpr,
        rq,
        cm,
        total: bpr + rq + beta * cm,
    }
}
