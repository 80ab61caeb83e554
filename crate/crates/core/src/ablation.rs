//! Twin training runs that differ only in the ranking loss.

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::error::Result;
use crate::eval::{self, EvalConfig, EvalReport};
use crate::numerics::Execution;
use crate::objective::LossKind;
use crate::trainer::{self, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAblation {
    pub cross_entropy: EvalReport,
    pub top1: EvalReport,
}

impl LossAblation {
    pub fn to_text(&self) -> String {
        let k = self.cross_entropy.k;
        format!(
            "metric      top1      cross-entropy\nrecall@{k:<3} {:.4}    {:.4}\nmrr@{k:<6} {:.4}    {:.4}\n",
            self.top1.recall_at_k,
            self.cross_entropy.recall_at_k,
            self.top1.mrr_at_k,
            self.cross_entropy.mrr_at_k,
        )
    }
}

/// Trains one model per loss from the same seed and configuration and
/// evaluates both on `test`.
pub fn run_loss_ablation(
    train: &[Session],
    test: &[Session],
    num_items: usize,
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    exec: Execution,
) -> Result<LossAblation> {
    let run = |loss: LossKind| -> Result<EvalReport> {
        let cfg = TrainConfig { loss, ..base.clone() };
        let mut state = TrainState::new(&cfg, num_items);
        trainer::train(&mut state, train, &cfg, exec, |_, _| {})?;
        Ok(eval::evaluate(&state.model, test, eval_cfg, exec))
    };
    Ok(LossAblation {
        cross_entropy: run(LossKind::CrossEntropy)?,
        top1: run(LossKind::Top1)?,
    })
}
