//! Output scoring layer, ranking losses, and per-event objective assembly.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, sigmoid_scalar, softplus, Matrix};
use crate::vgru::LatentSample;

/// Scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before taking logs.
pub const SCORE_CLAMP: f64 = 1e-12;

/// Output layer: one row of `wy` per item, `m × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputParams {
    pub wy: Matrix,
}

impl OutputParams {
    pub fn zeros(latent_dim: usize, num_items: usize) -> Self {
        OutputParams {
            wy: Matrix::zeros(num_items, latent_dim),
        }
    }

    pub fn num_items(&self) -> usize {
        self.wy.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.wy.cols()
    }
}

/// Per-item scores `σ(w_j · h)` for the next action.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Top1,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cross-entropy" => Ok(LossKind::CrossEntropy),
            "top1" => Ok(LossKind::Top1),
            other => Err(format!("unknown loss `{other}` (expected cross-entropy or top1)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Top1 => "top1",
        })
    }
}

/// Pre-sigmoid scores `Wy · h`.
pub fn logits(out: &OutputParams, h: &[f64]) -> Vec<f64> {
    assert_eq!(h.len(), out.latent_dim(), "latent length mismatch");
    (0..out.num_items()).map(|j| dot(out.wy.row(j), h)).collect()
}

pub fn score_all(out: &OutputParams, h: &LatentSample) -> ScoreVector {
    score_latent(out, &h.h)
}

pub fn score_latent(out: &OutputParams, h: &[f64]) -> ScoreVector {
    ScoreVector(logits(out, h).into_iter().map(sigmoid_scalar).collect())
}

/// Binary cross-entropy of `scores` against a one-hot target.
pub fn cross_entropy(scores: &ScoreVector, target: usize) -> f64 {
    assert!(target < scores.len(), "target {target} out of range");
    let clamp = |p: f64| p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    scores
        .0
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let p = clamp(p);
            if j == target {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Cross-entropy evaluated from logits, with its gradient w.r.t. the logits.
/// Same function as [`cross_entropy`] away from the clamp region, but finite
/// and differentiable everywhere.
pub fn cross_entropy_logits(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target {target} out of range");
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, &o)| {
            let p = sigmoid_scalar(o);
            if j == target {
                loss += softplus(-o);
                p - 1.0
            } else {
                loss += softplus(o);
                p
            }
        })
        .collect();
    (loss, grad)
}

/// TOP1 pairwise loss over `negatives`:
/// `mean_j [σ(o_j − o_t) + σ(o_j²)]`.
pub fn top1_loss(logits: &[f64], target: usize, negatives: &[usize]) -> f64 {
    top1_loss_grad(logits, target, negatives).0
}

/// [`top1_loss`] and its gradient w.r.t. all logits.
pub fn top1_loss_grad(logits: &[f64], target: usize, negatives: &[usize]) -> (f64, Vec<f64>) {
    assert!(!negatives.is_empty(), "top1 loss needs at least one negative");
    assert!(target < logits.len(), "target {target} out of range");
    let inv = 1.0 / negatives.len() as f64;
    let ot = logits[target];
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for &j in negatives {
        assert!(j != target, "target {target} listed as its own negative");
        let oj = logits[j];
        let rank = sigmoid_scalar(oj - ot);
        let reg = sigmoid_scalar(oj * oj);
        loss += rank + reg;
        let d_rank = rank * (1.0 - rank);
        grad[j] += inv * (d_rank + reg * (1.0 - reg) * 2.0 * oj);
        grad[target] -= inv * d_rank;
    }
    (loss * inv, grad)
}

/// One event's contribution to the minimized objective
/// (the negated evidence lower bound).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub data_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

pub fn elbo_step_loss(kl: f64, data_loss: f64, kl_weight: f64) -> LossValue {
    assert!(kl >= 0.0, "KL term must be nonnegative, got {kl}");
    LossValue {
        data_term: data_loss,
        kl_term: kl,
        total: data_loss + kl_weight * kl,
    }
}
