//! Variational GRU cell.
//!
//! The recurrent state is the parameter pair of an isotropic Gaussian
//! posterior over the latent activations: `D` means plus one shared
//! log-variance, concatenated into a vector of length `D + 1`. The gates act
//! on that concatenated state; latent activations are drawn from the
//! posterior by reparameterization and never feed back into the recurrence.

use crate::numerics::{self, matvec, matvec_t, Matrix, Rng};

/// Weights of the cell. Input matrices are `(D+1) × m` and are applied by
/// column lookup; recurrent matrices are `(D+1) × (D+1)`. There are no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct VgruParams {
    pub wz: Matrix,
    pub uz: Matrix,
    pub wr: Matrix,
    pub ur: Matrix,
    pub w: Matrix,
    pub u: Matrix,
}

impl VgruParams {
    pub fn zeros(latent_dim: usize, num_items: usize) -> Self {
        let s = latent_dim + 1;
        VgruParams {
            wz: Matrix::zeros(s, num_items),
            uz: Matrix::zeros(s, s),
            wr: Matrix::zeros(s, num_items),
            ur: Matrix::zeros(s, s),
            w: Matrix::zeros(s, num_items),
            u: Matrix::zeros(s, s),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.uz.rows() - 1
    }

    pub fn num_items(&self) -> usize {
        self.wz.cols()
    }

    pub fn validate(&self) -> Result<(), String> {
        let s = self.uz.rows();
        let m = self.wz.cols();
        for (name, mat) in [("Uz", &self.uz), ("Ur", &self.ur), ("U", &self.u)] {
            if mat.shape() != (s, s) {
                return Err(format!("{name} has shape {:?}, expected ({s}, {s})", mat.shape()));
            }
        }
        for (name, mat) in [("Wz", &self.wz), ("Wr", &self.wr), ("W", &self.w)] {
            if mat.shape() != (s, m) {
                return Err(format!("{name} has shape {:?}, expected ({s}, {m})", mat.shape()));
            }
        }
        Ok(())
    }
}

/// Posterior `N(mu, exp(log_var) I)` over the latent activations.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorState {
    pub mu: Vec<f64>,
    pub log_var: f64,
}

impl PosteriorState {
    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_var.exp()
    }

    /// `[mu, log_var]`
    pub fn to_concat(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.mu.len() + 1);
        s.extend_from_slice(&self.mu);
        s.push(self.log_var);
        s
    }

    pub fn from_concat(mut s: Vec<f64>) -> Self {
        let log_var = s.pop().expect("state vector must be nonempty");
        PosteriorState { mu: s, log_var }
    }
}

/// Pre-session state: the prior `N(0, I)`.
pub fn init_state(latent_dim: usize) -> PosteriorState {
    assert!(latent_dim >= 1, "latent dimension must be at least 1");
    PosteriorState {
        mu: vec![0.0; latent_dim],
        log_var: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_cand: Vec<f64>,
}

/// A reparameterized draw `h = mu + exp(log_var / 2) * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub h: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTape {
    pub item: usize,
    pub prev: Vec<f64>,
    pub gates: GateActivations,
    pub next: Vec<f64>,
}

impl StepTape {
    pub fn next_state(&self) -> PosteriorState {
        PosteriorState::from_concat(self.next.clone())
    }
}

/// One step of the recurrence on input item `item`.
pub fn step(
    params: &VgruParams,
    prev: &PosteriorState,
    item: usize,
) -> (PosteriorState, GateActivations) {
    let tape = step_taped(params, prev, item);
    (PosteriorState::from_concat(tape.next), tape.gates)
}

/// As [`step`], keeping the tape for [`step_backward`].
pub fn step_taped(params: &VgruParams, prev: &PosteriorState, item: usize) -> StepTape {
    assert!(
        item < params.num_items(),
        "item index {item} out of range for {} items",
        params.num_items()
    );
    assert_eq!(
        prev.latent_dim(),
        params.latent_dim(),
        "state dimension does not match cell"
    );
    let s = prev.to_concat();

    let mut z = params.wz.column(item);
    for (a, b) in z.iter_mut().zip(matvec(&params.uz, &s)) {
        *a = numerics::sigmoid_scalar(*a + b);
    }
    let mut r = params.wr.column(item);
    for (a, b) in r.iter_mut().zip(matvec(&params.ur, &s)) {
        *a = numerics::sigmoid_scalar(*a + b);
    }
    let gated = numerics::hadamard(&r, &s);
    let mut h_cand = params.w.column(item);
    for (a, b) in h_cand.iter_mut().zip(matvec(&params.u, &gated)) {
        *a = (*a + b).tanh();
    }
    let next = s
        .iter()
        .zip(&z)
        .zip(&h_cand)
        .map(|((&sp, &zi), &c)| (1.0 - zi) * sp + zi * c)
        .collect();

    StepTape {
        item,
        prev: s,
        gates: GateActivations { z, r, h_cand },
        next,
    }
}

/// Reparameterized draw from `state` using fresh standard-normal noise.
pub fn sample(state: &PosteriorState, rng: &mut Rng) -> LatentSample {
    let eps = numerics::draw_std_normal(rng, state.latent_dim());
    sample_with_noise(state, eps)
}

/// Reparameterized draw with caller-supplied noise.
pub fn sample_with_noise(state: &PosteriorState, eps: Vec<f64>) -> LatentSample {
    assert_eq!(eps.len(), state.latent_dim(), "noise length mismatch");
    let sd = (0.5 * state.log_var).exp();
    let h = state
        .mu
        .iter()
        .zip(&eps)
        .map(|(m, e)| m + sd * e)
        .collect();
    LatentSample { h, eps }
}

/// `KL[N(mu, σ²I) ‖ N(0, I)] = ½ [Σ mu² + D (σ² − 1 − log σ²)]`.
pub fn kl(state: &PosteriorState) -> f64 {
    let d = state.latent_dim() as f64;
    let sq: f64 = state.mu.iter().map(|m| m * m).sum();
    // expm1 keeps the log_var ≈ 0 term accurate and exactly zero at the prior.
    0.5 * (sq + d * (state.log_var.exp_m1() - state.log_var))
}

/// Gradient of [`kl`] with respect to the concatenated state `[mu, log_var]`.
pub fn kl_grad(state: &PosteriorState) -> Vec<f64> {
    let d = state.latent_dim() as f64;
    let mut g = state.mu.clone();
    g.push(0.5 * d * state.log_var.exp_m1());
    g
}

/// Gradient columns of the three input matrices for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct InputColumnGrad {
    pub item: usize,
    pub wz: Vec<f64>,
    pub wr: Vec<f64>,
    pub w: Vec<f64>,
}

/// Accumulated cell gradients. Input matrices are kept as sparse columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrads {
    pub uz: Matrix,
    pub ur: Matrix,
    pub u: Matrix,
    pub input_cols: Vec<InputColumnGrad>,
}

impl CellGrads {
    pub fn zeros(latent_dim: usize) -> Self {
        let s = latent_dim + 1;
        CellGrads {
            uz: Matrix::zeros(s, s),
            ur: Matrix::zeros(s, s),
            u: Matrix::zeros(s, s),
            input_cols: Vec::new(),
        }
    }

    /// Adds `scale` times these gradients into dense parameter-shaped storage.
    pub fn add_into(&self, dense: &mut VgruParams, scale: f64) {
        dense.uz.add_scaled(&self.uz, scale);
        dense.ur.add_scaled(&self.ur, scale);
        dense.u.add_scaled(&self.u, scale);
        for col in &self.input_cols {
            dense.wz.add_to_column(col.item, &col.wz, scale);
            dense.wr.add_to_column(col.item, &col.wr, scale);
            dense.w.add_to_column(col.item, &col.w, scale);
        }
    }
}

/// Reverse-mode pass through one recorded step. Accumulates parameter
/// gradients into `grads` and returns the gradient with respect to the
/// previous (concatenated) state.
pub fn step_backward(
    tape: &StepTape,
    grad_state_out: &[f64],
    params: &VgruParams,
    grads: &mut CellGrads,
) -> Vec<f64> {
    let n = tape.prev.len();
    assert_eq!(grad_state_out.len(), n, "state gradient length mismatch");
    let GateActivations { z, r, h_cand } = &tape.gates;
    let s = &tape.prev;

    let mut d_prev = vec![0.0; n];
    let mut d_hpre = vec![0.0; n];
    let mut d_zpre = vec![0.0; n];
    for i in 0..n {
        let g = grad_state_out[i];
        d_prev[i] = g * (1.0 - z[i]);
        d_zpre[i] = g * (h_cand[i] - s[i]) * z[i] * (1.0 - z[i]);
        d_hpre[i] = g * z[i] * (1.0 - h_cand[i] * h_cand[i]);
    }

    // candidate: h_cand = tanh(W x + U (r ⊙ s))
    let gated = numerics::hadamard(r, s);
    grads.u.add_outer(&d_hpre, &gated, 1.0);
    let d_gated = matvec_t(&params.u, &d_hpre);
    let mut d_rpre = vec![0.0; n];
    for i in 0..n {
        d_prev[i] += d_gated[i] * r[i];
        d_rpre[i] = d_gated[i] * s[i] * r[i] * (1.0 - r[i]);
    }

    // reset gate
    grads.ur.add_outer(&d_rpre, s, 1.0);
    for (a, b) in d_prev.iter_mut().zip(matvec_t(&params.ur, &d_rpre)) {
        *a += b;
    }

    // update gate
    grads.uz.add_outer(&d_zpre, s, 1.0);
    for (a, b) in d_prev.iter_mut().zip(matvec_t(&params.uz, &d_zpre)) {
        *a += b;
    }

    grads.input_cols.push(InputColumnGrad {
        item: tape.item,
        wz: d_zpre,
        wr: d_rpre,
        w: d_hpre,
    });
    d_prev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid_scalar;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn random_params(d: usize, m: usize, seed: u64, scale: f64) -> VgruParams {
        let mut rng = Rng::new(seed);
        let mut p = VgruParams::zeros(d, m);
        for mat in [&mut p.wz, &mut p.uz, &mut p.wr, &mut p.ur, &mut p.w, &mut p.u] {
            for x in mat.data_mut() {
                *x = scale * rng.std_normal();
            }
        }
        p
    }

    /// Straight-line transcription of the gate equations, written with
    /// explicit index loops and a one-hot input vector.
    fn reference_step(p: &VgruParams, prev: &[f64], item: usize) -> Vec<f64> {
        let n = prev.len();
        let m = p.wz.cols();
        let x: Vec<f64> = (0..m).map(|j| if j == item { 1.0 } else { 0.0 }).collect();
        let affine = |wm: &Matrix, um: &Matrix, v: &[f64], i: usize| {
            let mut acc = 0.0;
            for j in 0..m {
                acc += wm[(i, j)] * x[j];
            }
            for j in 0..n {
                acc += um[(i, j)] * v[j];
            }
            acc
        };
        let z: Vec<f64> = (0..n).map(|i| sigmoid_scalar(affine(&p.wz, &p.uz, prev, i))).collect();
        let r: Vec<f64> = (0..n).map(|i| sigmoid_scalar(affine(&p.wr, &p.ur, prev, i))).collect();
        let rs: Vec<f64> = (0..n).map(|i| r[i] * prev[i]).collect();
        let c: Vec<f64> = (0..n).map(|i| affine(&p.w, &p.u, &rs, i).tanh()).collect();
        (0..n).map(|i| (1.0 - z[i]) * prev[i] + z[i] * c[i]).collect()
    }

    #[test]
    fn init_state_is_prior() {
        let s = init_state(3);
        assert_eq!(s.mu, vec![0.0; 3]);
        assert_eq!(s.log_var, 0.0);
        assert_eq!(kl(&s), 0.0);
        assert_eq!(init_state(1).mu, vec![0.0]);
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let p = VgruParams::zeros(2, 4);
        let prev = PosteriorState {
            mu: vec![0.8, -0.4],
            log_var: 0.2,
        };
        let (next, gates) = step(&p, &prev, 1);
        assert_eq!(gates.z, vec![0.5; 3]);
        assert_eq!(gates.r, vec![0.5; 3]);
        assert_eq!(gates.h_cand, vec![0.0; 3]);
        assert_eq!(next.mu, vec![0.4, -0.2]);
        assert_eq!(next.log_var, 0.1);

        let (fixed, _) = step(&p, &init_state(2), 0);
        assert_eq!(fixed, init_state(2));
    }

    #[test]
    fn step_matches_reference_implementation() {
        let p = random_params(2, 5, 7, 0.8);
        let prev = PosteriorState {
            mu: vec![0.3, -0.7],
            log_var: -0.2,
        };
        let (next, _) = step(&p, &prev, 3);
        let expect = reference_step(&p, &prev.to_concat(), 3);
        for (a, b) in next.to_concat().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn step_rejects_unknown_item() {
        let p = VgruParams::zeros(2, 4);
        step(&p, &init_state(2), 4);
    }

    #[test]
    fn tape_replays_bit_exactly() {
        let p = random_params(3, 6, 1, 1.0);
        let tape = step_taped(&p, &init_state(3), 2);
        let (again, _) = step(&p, &tape.next_state(), 5);
        let replay = step_taped(&p, &PosteriorState::from_concat(tape.prev.clone()), tape.item);
        assert_eq!(replay, tape);
        assert_eq!(again.latent_dim(), 3);
    }

    #[test]
    fn sample_examples() {
        let st = PosteriorState {
            mu: vec![1.0, 2.0],
            log_var: 0.25f64.ln(),
        };
        assert_eq!(sample_with_noise(&st, vec![0.0, 0.0]).h, st.mu);
        let s = sample_with_noise(&st, vec![1.0, -1.0]);
        assert!((s.h[0] - 1.5).abs() < 1e-15 && (s.h[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn sample_moments_match_posterior() {
        let st = PosteriorState {
            mu: vec![0.7, -1.3],
            log_var: 0.4,
        };
        let var = st.variance();
        let n = 1_000_000;
        let mut rng = Rng::new(99);
        let mut sum = [0.0; 2];
        let mut sumsq = [0.0; 2];
        for _ in 0..n {
            let s = sample(&st, &mut rng);
            for d in 0..2 {
                sum[d] += s.h[d];
                sumsq[d] += s.h[d] * s.h[d];
            }
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let emp_var = sumsq[d] / n as f64 - mean * mean;
            let se_mean = (var / n as f64).sqrt();
            // var of the sample variance of a Gaussian is 2σ⁴/(n-1)
            let se_var = (2.0 * var * var / (n as f64 - 1.0)).sqrt();
            assert!((mean - st.mu[d]).abs() < 3.0 * se_mean, "mean {mean}");
            assert!((emp_var - var).abs() < 3.0 * se_var, "var {emp_var}");
        }
    }

    #[test]
    fn kl_examples() {
        let s = PosteriorState {
            mu: vec![1.0, 0.0],
            log_var: 0.0,
        };
        assert!((kl(&s) - 0.5).abs() < 1e-15);
        assert_eq!(kl_grad(&s), vec![1.0, 0.0, 0.0]);
        let e = PosteriorState {
            mu: vec![0.0],
            log_var: 1.0,
        };
        assert!((kl(&e) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = random_params(2, 5, 3, 1.0);
        let tape = step_taped(&p, &init_state(2), 4);
        let mut g = CellGrads::zeros(2);
        let d = step_backward(&tape, &[0.0; 3], &p, &mut g);
        assert!(d.iter().all(|&x| x == 0.0));
        assert!(g.uz.data().iter().chain(g.ur.data()).chain(g.u.data()).all(|&x| x == 0.0));
        assert!(g.input_cols[0].wz.iter().all(|&x| x == 0.0));
    }

    /// Scalar objective `c · s_new` for a fixed random projection `c`.
    fn projected(p: &VgruParams, prev: &PosteriorState, item: usize, c: &[f64]) -> f64 {
        let (next, _) = step(p, prev, item);
        numerics::dot(&next.to_concat(), c)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let (d, m, item) = (2, 5, 3);
        let p = random_params(d, m, 17, 0.9);
        let prev = PosteriorState {
            mu: vec![0.4, -0.6],
            log_var: 0.3,
        };
        let c = vec![0.7, -1.1, 0.5];
        let tape = step_taped(&p, &prev, item);
        let mut grads = CellGrads::zeros(d);
        let d_prev = step_backward(&tape, &c, &p, &mut grads);
        let mut dense = VgruParams::zeros(d, m);
        grads.add_into(&mut dense, 1.0);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for which in 0..6 {
            let shape = {
                let refs = [&p.wz, &p.uz, &p.wr, &p.ur, &p.w, &p.u];
                refs[which].data().len()
            };
            for k in 0..shape {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let mats = [&mut q.wz, &mut q.uz, &mut q.wr, &mut q.ur, &mut q.w, &mut q.u];
                    mats.into_iter().nth(which).unwrap().data_mut()[k] += delta;
                    projected(&q, &prev, item, &c)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = [&dense.wz, &dense.uz, &dense.wr, &dense.ur, &dense.w, &dense.u]
                    [which]
                    .data()[k];
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
        let s = prev.to_concat();
        for k in 0..s.len() {
            let bump = |delta: f64| {
                let mut t = s.clone();
                t[k] += delta;
                projected(&p, &PosteriorState::from_concat(t), item, &c)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max(rel_err(d_prev[k], numeric));
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..6),
            log_var in -6.0f64..4.0,
        ) {
            let st = PosteriorState { mu, log_var };
            prop_assert!(kl(&st) >= 0.0);
        }

        #[test]
        fn new_state_is_between_old_state_and_candidate(
            seed in 0u64..1000,
            mu in proptest::collection::vec(-2.0f64..2.0, 3),
            log_var in -2.0f64..2.0,
            item in 0usize..4,
        ) {
            let p = random_params(3, 4, seed, 1.5);
            let prev = PosteriorState { mu, log_var };
            let tape = step_taped(&p, &prev, item);
            for i in 0..4 {
                let lo = tape.prev[i].min(tape.gates.h_cand[i]);
                let hi = tape.prev[i].max(tape.gates.h_cand[i]);
                prop_assert!(tape.next[i] >= lo - 1e-15 && tape.next[i] <= hi + 1e-15);
            }
        }

        #[test]
        fn sampling_does_not_touch_recurrence(seed in 0u64..1000) {
            let p = random_params(2, 3, seed, 1.0);
            let s0 = init_state(2);
            let (a, _) = step(&p, &s0, 1);
            let mut rng = Rng::new(seed);
            let _ = sample(&a, &mut rng);
            let (b1, _) = step(&p, &a, 2);
            let (b2, _) = step(&p, &a, 2);
            prop_assert_eq!(b1, b2);
        }
    }
}
