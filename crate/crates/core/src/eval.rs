//! Monte-Carlo prediction and Recall@K / MRR@K over held-out sessions.

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::model::Model;
use crate::numerics::{fnv1a, Execution, Rng};
use crate::objective::{self, ScoreVector};
use crate::vgru::{self, PosteriorState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// Average the scores of `samples` posterior draws.
    #[default]
    McMean,
    /// Score the posterior mean only.
    MeanState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Posterior samples per prediction.
    pub samples: usize,
    pub mode: PredictMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            samples: 10,
            mode: PredictMode::McMean,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.k < 1 {
            return Err(crate::Error::Config("k must be at least 1".into()));
        }
        if self.samples < 1 {
            return Err(crate::Error::Config("gamma_eval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores for the next action given the current posterior.
pub fn predict_scores(
    model: &Model,
    state: &PosteriorState,
    config: &EvalConfig,
    rng: &mut Rng,
) -> ScoreVector {
    match config.mode {
        PredictMode::MeanState => objective::score_latent(&model.output, &state.mu),
        PredictMode::McMean => {
            let m = model.num_items();
            let mut acc = vec![0.0; m];
            for _ in 0..config.samples {
                let h = vgru::sample(state, rng);
                for (a, s) in acc.iter_mut().zip(objective::score_all(&model.output, &h).0) {
                    *a += s;
                }
            }
            let inv = 1.0 / config.samples as f64;
            ScoreVector(acc.into_iter().map(|a| a * inv).collect())
        }
    }
}

/// 1-based rank of `target`: items with a strictly greater score, or an
/// equal score and smaller index, rank ahead of it.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    assert!(target < scores.len(), "target {target} out of range");
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < target))
        .count()
}

/// Item indices ordered by descending score, ties by ascending index.
pub fn ranked_items(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub events_evaluated: usize,
    pub events_skipped: usize,
}

impl EvalReport {
    /// Aggregates 1-based ranks (one per evaluated event).
    pub fn from_ranks(ranks: &[usize], k: usize, events_skipped: usize) -> Self {
        let mut hits = 0usize;
        let mut rr = 0.0;
        for &r in ranks {
            if r <= k {
                hits += 1;
                rr += 1.0 / r as f64;
            }
        }
        let n = ranks.len();
        let (recall_at_k, mrr_at_k) = if n == 0 {
            (0.0, 0.0)
        } else {
            (hits as f64 / n as f64, rr / n as f64)
        };
        EvalReport {
            k,
            recall_at_k,
            mrr_at_k,
            events_evaluated: n,
            events_skipped,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "recall@{k}={:.6}\nmrr@{k}={:.6}\nevents_evaluated={}\nevents_skipped={}\n",
            self.recall_at_k,
            self.mrr_at_k,
            self.events_evaluated,
            self.events_skipped,
            k = self.k
        )
    }

    /// One JSON object per metric.
    pub fn to_jsonl(&self) -> String {
        let line = |name: String, value: f64| {
            serde_json::json!({
                "metric": name,
                "value": value,
                "events_evaluated": self.events_evaluated,
                "events_skipped": self.events_skipped,
            })
            .to_string()
        };
        format!(
            "{}\n{}\n",
            line(format!("recall@{}", self.k), self.recall_at_k),
            line(format!("mrr@{}", self.k), self.mrr_at_k)
        )
    }
}

/// Ranks of every teacher-forced next-item event in one session, plus the
/// number of events skipped because an item lies outside the model.
pub fn session_ranks(model: &Model, session: &Session, config: &EvalConfig) -> (Vec<usize>, usize) {
    let m = model.num_items();
    let mut rng = Rng::with_stream(config.seed, fnv1a(session.id.as_bytes()));
    let mut state = vgru::init_state(model.latent_dim());
    let mut ranks = Vec::with_capacity(session.len().saturating_sub(1));
    let mut skipped = 0;
    for pair in session.events.windows(2) {
        let (input, target) = (pair[0].item, pair[1].item);
        if input >= m {
            skipped += 1;
            continue;
        }
        state = vgru::step(&model.cell, &state, input).0;
        if target >= m {
            skipped += 1;
            continue;
        }
        let scores = predict_scores(model, &state, config, &mut rng);
        ranks.push(rank_of(&scores.0, target));
    }
    (ranks, skipped)
}

/// Evaluates every session independently; the RNG stream of each session is
/// keyed by its id, so the report does not depend on scheduling.
pub fn evaluate(model: &Model, sessions: &[Session], config: &EvalConfig, exec: Execution) -> EvalReport {
    let per_session = exec.map(sessions, |s| session_ranks(model, s, config));
    let mut ranks = Vec::new();
    let mut skipped = 0;
    for (r, s) in per_session {
        ranks.extend(r);
        skipped += s;
    }
    EvalReport::from_ranks(&ranks, config.k, skipped)
}

/// Feeds `items` through the recurrence and returns the top `k`
/// `(item, score)` pairs.
pub fn recommend(
    model: &Model,
    items: &[usize],
    k: usize,
    config: &EvalConfig,
) -> Vec<(usize, f64)> {
    let mut state = vgru::init_state(model.latent_dim());
    for &i in items {
        state = vgru::step(&model.cell, &state, i).0;
    }
    let mut rng = Rng::new(config.seed);
    let scores = predict_scores(model, &state, config, &mut rng);
    ranked_items(&scores.0)
        .into_iter()
        .take(k)
        .map(|j| (j, scores.0[j]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    /// Rank via a full stable sort (descending score, ties by index).
    fn brute_rank(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        order.iter().position(|&(j, _)| j == target).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&[0.1, 0.9, 0.3], 1), 1);
        assert_eq!(rank_of(&[0.5; 8], 0), 1);
        assert_eq!(rank_of(&[0.5; 8], 5), 6);
        assert_eq!(rank_of(&[0.2, 0.9, 0.5], 2), 2);
    }

    #[test]
    fn metric_boundaries() {
        let perfect = EvalReport::from_ranks(&[1, 1, 1], 20, 0);
        assert_eq!((perfect.recall_at_k, perfect.mrr_at_k), (1.0, 1.0));
        let miss = EvalReport::from_ranks(&[21, 21], 20, 0);
        assert_eq!((miss.recall_at_k, miss.mrr_at_k), (0.0, 0.0));
        let mixed = EvalReport::from_ranks(&[1, 4, 30, 2], 20, 3);
        assert_eq!(mixed.recall_at_k, 0.75);
        assert_eq!(mixed.mrr_at_k, (1.0 + 0.25 + 0.5) / 4.0);
        assert_eq!(mixed.events_skipped, 3);
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::from_ranks(&[1, 3], 20, 1);
        assert_eq!(
            r.to_text(),
            "recall@20=1.000000\nmrr@20=0.666667\nevents_evaluated=2\nevents_skipped=1\n"
        );
        let lines: Vec<serde_json::Value> = r
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0]["metric"], "recall@20");
        assert_eq!(lines[1]["value"], r.mrr_at_k);
    }

    fn small_model(seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        Model::glorot(3, 7, &mut rng)
    }

    #[test]
    fn degenerate_posterior_mc_equals_mean_state() {
        let model = small_model(1);
        let state = PosteriorState {
            mu: vec![0.3, -0.2, 0.9],
            log_var: -50.0,
        };
        let mut rng = Rng::new(0);
        let mc = predict_scores(&model, &state, &EvalConfig::default(), &mut rng);
        let ms = predict_scores(
            &model,
            &state,
            &EvalConfig {
                mode: PredictMode::MeanState,
                ..Default::default()
            },
            &mut rng,
        );
        for (a, b) in mc.0.iter().zip(&ms.0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_sample_prediction_is_deterministic() {
        let model = small_model(2);
        let state = vgru::init_state(3);
        let cfg = EvalConfig {
            samples: 1,
            ..Default::default()
        };
        let a = predict_scores(&model, &state, &cfg, &mut Rng::new(4));
        let b = predict_scores(&model, &state, &cfg, &mut Rng::new(4));
        assert_eq!(a, b);
    }

    #[test]
    fn mc_mean_converges_to_reference() {
        let model = small_model(3);
        let state = PosteriorState {
            mu: vec![0.5, -0.4, 0.2],
            log_var: 0.3,
        };
        let n_ref = 1_000_000;
        let n = 10_000;
        let m = model.num_items();
        // reference mean and per-item standard deviation of a single score draw
        let mut rng = Rng::new(100);
        let mut sum = vec![0.0; m];
        let mut sumsq = vec![0.0; m];
        for _ in 0..n_ref {
            let h = vgru::sample(&state, &mut rng);
            for (j, s) in objective::score_all(&model.output, &h).0.into_iter().enumerate() {
                sum[j] += s;
                sumsq[j] += s * s;
            }
        }
        let cfg = EvalConfig {
            samples: n,
            ..Default::default()
        };
        let est = predict_scores(&model, &state, &cfg, &mut Rng::new(7));
        for j in 0..m {
            let mean = sum[j] / n_ref as f64;
            let sd = (sumsq[j] / n_ref as f64 - mean * mean).sqrt();
            let se = sd / (n as f64).sqrt();
            assert!((est.0[j] - mean).abs() < 3.0 * se + 1e-12, "item {j}");
        }
    }

    #[test]
    fn evaluate_skips_out_of_vocabulary_events() {
        let model = small_model(5);
        let ev = |item| Event { timestamp: 0, item };
        let s = Session {
            id: "x".into(),
            events: vec![ev(0), ev(1), ev(99), ev(2)],
        };
        let r = evaluate(&model, &[s], &EvalConfig::default(), Execution::Sequential);
        assert_eq!(r.events_evaluated, 1);
        assert_eq!(r.events_skipped, 2);
    }

    #[test]
    fn recommend_returns_a_permutation_when_k_is_m() {
        let model = small_model(6);
        let recs = recommend(&model, &[1, 4], 7, &EvalConfig::default());
        let mut items: Vec<usize> = recs.iter().map(|r| r.0).collect();
        assert!(recs.windows(2).all(|w| w[0].1 >= w[1].1));
        items.sort();
        assert_eq!(items, (0..7).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn rank_matches_stable_sort(
            scores in proptest::collection::vec(0u8..6, 1..40),
            t in 0usize..40,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 5.0).collect();
            let t = t % scores.len();
            prop_assert_eq!(rank_of(&scores, t), brute_rank(&scores, t));
        }

        #[test]
        fn metrics_are_ordered_and_monotone_in_k(ranks in proptest::collection::vec(1usize..60, 1..50)) {
            let mut prev = EvalReport::from_ranks(&ranks, 1, 0);
            prop_assert!(prev.mrr_at_k <= prev.recall_at_k && prev.recall_at_k <= 1.0);
            for k in 2..70 {
                let r = EvalReport::from_ranks(&ranks, k, 0);
                prop_assert!(0.0 <= r.mrr_at_k && r.mrr_at_k <= r.recall_at_k && r.recall_at_k <= 1.0);
                prop_assert!(r.recall_at_k >= prev.recall_at_k && r.mrr_at_k >= prev.mrr_at_k);
                prev = r;
            }
        }
    }
}
