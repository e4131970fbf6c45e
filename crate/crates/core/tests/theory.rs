use bilab_core::datagen::TaggedSequence;
use bilab_core::embeddings::gaussian_matrix;
use bilab_core::grad::{backward, relative_error};
use bilab_core::model::{AttnScale, MaskMode, ModelParams, TrainableInit};
use bilab_core::theory::data::{draw_batches, ConditionedSource, StandardSource};
use bilab_core::theory::lemmas::*;
use bilab_core::RngStream;
use ndarray::{Array1, Array2};

fn softmax(v: Array1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

fn random_joint(n: usize, stream: &RngStream) -> Array2<f64> {
    let raw: Array2<f64> = gaussian_matrix(n, n, 1.0, stream).unwrap();
    let pos = raw.mapv(|a| a.abs() + 0.05);
    let z = pos.sum();
    pos / z
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn lemma1_enumeration_matches_backward() {
    let (d, n) = (8, 3);
    let s = RngStream::new(11);
    let w: Array2<f64> = gaussian_matrix(d, d, 1.0, &s.named("W")).unwrap();
    let w_e: Array2<f64> = gaussian_matrix(d, n, 1.0 / d as f64, &s.named("E")).unwrap();
    let w_u: Array2<f64> = gaussian_matrix(n, d, 1.0 / d as f64, &s.named("U")).unwrap();
    let joint = random_joint(n, &s.named("p"));
    let exact = lemma1_gradient_exact(&w, &joint, &w_e, &w_u).unwrap();
    let back = lemma1_via_backward(&w, &joint, &w_e, &w_u).unwrap();
    assert!(max_abs(&exact) > 1e-3);
    assert!(max_abs(&(&exact - &back)) <= 1e-10);
}

#[test]
fn lemma1_vanishes_when_predictions_are_exact() {
    let n = 4;
    let joint = random_joint(n, &RngStream::new(3));
    let eye = Array2::<f64>::eye(n);
    // logits W[k, z] = log p(k|z) reproduce the conditionals on orthonormal embeddings
    let w = Array2::from_shape_fn((n, n), |(k, z)| (joint[[z, k]] / joint.row(z).sum()).ln());
    let g = lemma1_gradient_exact(&w, &joint, &eye, &eye).unwrap();
    assert!(max_abs(&g) <= 1e-8);
}

#[test]
fn lemma1_uniform_conditionals_at_zero_give_zero() {
    let n = 5;
    let joint = Array2::from_elem((n, n), 1.0 / (n * n) as f64);
    let s = RngStream::new(4);
    let w_e: Array2<f64> = gaussian_matrix(16, n, 1.0 / 16.0, &s.named("E")).unwrap();
    let w_u: Array2<f64> = gaussian_matrix(n, 16, 1.0 / 16.0, &s.named("U")).unwrap();
    let g = lemma1_gradient_exact(&Array2::zeros((16, 16)), &joint, &w_e, &w_u).unwrap();
    assert!(max_abs(&g) <= 1e-15);
}

#[test]
fn lemma1_rejects_unnormalized_tables() {
    let eye = Array2::<f64>::eye(3);
    let bad = Array2::from_elem((3, 3), 0.2);
    assert!(lemma1_gradient_exact(&eye, &bad, &eye, &eye).is_err());
    let mut neg = Array2::from_elem((3, 3), 1.0 / 9.0);
    neg[[0, 0]] = -1.0 / 9.0;
    neg[[0, 1]] = 3.0 / 9.0;
    assert!(lemma1_gradient_exact(&eye, &neg, &eye, &eye).is_err());
}

#[test]
fn lemma2_matches_output_matrix_gradient() {
    // W_O2 only enters through h2 = h1 + W_O2 x with x = W_V2 h1 a2^T, for any
    // fixed attention
    let p = ModelParams::<f64>::init(12, 5, 10, TrainableInit::Gaussian, false, AttnScale::One, &RngStream::new(5)).unwrap();
    let src = StandardSource::uniform(5, 2, 10).unwrap();
    let batch = draw_batches(&src, 1, 6, &RngStream::new(6)).unwrap();
    let back = backward(&p, &batch, MaskMode::All).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ph = Vec::new();
    for seq in &batch {
        let tr = p.forward(&seq.tokens).unwrap();
        let ctx = p.w_v2.dot(&tr.h1.dot(&tr.a2.t()));
        for t in MaskMode::All.positions(seq) {
            xs.push(ctx.column(t).to_owned());
            ys.push(seq.tokens[t + 1]);
            ph.push(softmax(tr.logits.column(t).to_owned()));
        }
    }
    let stack = |v: &[Array1<f64>]| Array2::from_shape_fn((v[0].len(), v.len()), |(i, j)| v[j][i]);
    let g = lemma2_gradient(&p.w_u, &stack(&xs), &ys, &stack(&ph)).unwrap();
    assert!(max_abs(&(&g - &back.grads.wo2)) <= 1e-10, "{}", max_abs(&(&g - &back.grads.wo2)));
}

fn small_theory_params(seed: u64, t: usize) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(16, 5, t + 1, TrainableInit::Zeros, false, AttnScale::One, &RngStream::new(seed)).unwrap();
    p.w_o2 = gaussian_matrix(16, 16, 1.0, &RngStream::new(seed).named("W_O2")).unwrap();
    p.w_k2 = gaussian_matrix(16, 16, 1.0, &RngStream::new(seed).named("W_K2")).unwrap();
    p
}

fn small_samples(t: usize, count: usize, seed: u64) -> Vec<TaggedSequence> {
    let src = ConditionedSource::new(5, t).unwrap();
    draw_batches(&src, 1, count, &RngStream::new(seed)).unwrap()
}

#[test]
fn lemma3_closed_form_matches_restricted_backward() {
    let mut p = small_theory_params(7, 8);
    p.w_k2.fill(0.0);
    let samples = small_samples(8, 40, 8);
    let closed = lemma3_gradient_wk2(&p, &samples).unwrap();
    let (_, back) = restricted_wk2_backward(&p, &p.w_k2, &samples).unwrap();
    assert!(max_abs(&closed) > 1e-4);
    assert!(max_abs(&(&closed - &back)) <= 1e-10, "{}", max_abs(&(&closed - &back)));
}

#[test]
fn restricted_wk2_backward_matches_finite_differences() {
    let p = small_theory_params(9, 6);
    let samples = small_samples(6, 10, 10);
    let w = p.w_k2.mapv(|a| 0.3 * a);
    let (_, g) = restricted_wk2_backward(&p, &w, &samples).unwrap();
    let eps = 1e-5;
    for (i, j) in [(0, 0), (3, 7), (15, 2), (8, 8), (11, 14)] {
        let mut wp = w.clone();
        wp[[i, j]] += eps;
        let mut wm = w.clone();
        wm[[i, j]] -= eps;
        let lp = restricted_wk2_backward(&p, &wp, &samples).unwrap().0;
        let lm = restricted_wk2_backward(&p, &wm, &samples).unwrap().0;
        let fd = (lp - lm) / (2.0 * eps);
        assert!(relative_error(g[[i, j]], fd) < 1e-6, "{i},{j}: {} vs {fd}", g[[i, j]]);
    }
}

#[test]
fn lemma3_requires_zero_and_vanishes_without_output_memory() {
    let p = small_theory_params(12, 8);
    let samples = small_samples(8, 10, 13);
    assert!(lemma3_gradient_wk2(&p, &samples).is_err());
    let mut z = p.clone();
    z.w_k2.fill(0.0);
    z.w_o2.fill(0.0);
    assert!(max_abs(&lemma3_gradient_wk2(&z, &samples).unwrap()) <= 1e-15);
}

#[test]
fn lemma4_closed_form_matches_finite_differences() {
    let p = small_theory_params(14, 8);
    let samples = small_samples(8, 32, 15);
    let closed = lemma4_gradient_wk1(&p, &samples).unwrap();
    assert!(max_abs(&closed) > 1e-6);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..16 {
        for j in 0..16 {
            let mut wp = Array2::zeros((16, 16));
            wp[[i, j]] = eps;
            let lp = restricted_wk1_loss(&p, &wp, &samples).unwrap();
            let lm = restricted_wk1_loss(&p, &wp.mapv(|a| -a), &samples).unwrap();
            worst = worst.max(relative_error(closed[[i, j]], (lp - lm) / (2.0 * eps)));
        }
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn lemma4_vanishes_without_downstream_matrices() {
    let mut p = small_theory_params(16, 8);
    p.w_k2.fill(0.0);
    p.w_o2.fill(0.0);
    let samples = small_samples(8, 10, 17);
    assert!(max_abs(&lemma4_gradient_wk1(&p, &samples).unwrap()) <= 1e-15);
    p.w_k1[[0, 0]] = 1.0;
    assert!(lemma4_gradient_wk1(&p, &samples).is_err());
}
