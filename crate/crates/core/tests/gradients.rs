use varec::data::{gen_synthetic, Batcher, SessionBatch, SyntheticSpec, Transition};
use varec::objective::LossKind;
use varec::trainer::{draw_window_noise, window_forward_backward, ObjectiveConfig};
use varec::{vgru, Execution, Model, Rng};

fn max_rel_err(loss: LossKind, kl_weight: f64, window: usize, seed: u64) -> f64 {
    let (d, m, beta) = (5, 12, 3);
    let sessions = gen_synthetic(&SyntheticSpec {
        num_items: m,
        num_sessions: 20,
        min_len: 2,
        max_len: 6,
        transition: Transition::Uniform,
        seed,
    });
    let mut rng = Rng::new(seed);
    let model = Model::glorot(d, m, &mut rng);
    let cfg = ObjectiveConfig { loss, kl_weight, samples: 3 };
    let batches: Vec<SessionBatch> = Batcher::new(&sessions, beta).take(window).collect();
    let noise = draw_window_noise(&mut rng, &batches, d, m, &cfg, 0.3);
    let states = vec![vgru::init_state(d); beta];
    let f = |mdl: &Model| window_forward_backward(mdl, &cfg, &states, &batches, &noise, false, Execution::Sequential).objective;
    let g = window_forward_backward(&model, &cfg, &states, &batches, &noise, true, Execution::Parallel).grads.unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for t in 0..7 {
        for i in 0..model.tensors()[t].data().len() {
            let w = model.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = w + h;
            let up = f(&probe);
            probe.tensors_mut()[t].data_mut()[i] = w - h;
            let down = f(&probe);
            probe.tensors_mut()[t].data_mut()[i] = w;
            let num = (up - down) / (2.0 * h);
            let a = g.tensors()[t].data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn top1_window_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let e = max_rel_err(LossKind::Top1, 1.0, 4, seed);
        assert!(e <= 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn weighted_kl_and_long_window_gradients_match() {
    let e = max_rel_err(LossKind::CrossEntropy, 0.25, 8, 3);
    assert!(e <= 1e-4, "{e}");
}

#[test]
fn gradients_agree_across_execution_modes() {
    let sessions = gen_synthetic(&SyntheticSpec {
        num_items: 30,
        num_sessions: 30,
        min_len: 2,
        max_len: 9,
        transition: Transition::Uniform,
        seed: 6,
    });
    let mut rng = Rng::new(6);
    let model = Model::glorot(7, 30, &mut rng);
    let cfg = ObjectiveConfig { loss: LossKind::Top1, kl_weight: 1.0, samples: 2 };
    let batches: Vec<SessionBatch> = Batcher::new(&sessions, 8).take(6).collect();
    let noise = draw_window_noise(&mut rng, &batches, 7, 30, &cfg, 0.5);
    let states = vec![vgru::init_state(7); 8];
    let run = |exec| window_forward_backward(&model, &cfg, &states, &batches, &noise, true, exec);
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
