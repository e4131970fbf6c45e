use bilab_core::datagen::{MarkovSpec, OutputMode, SequenceSampler, TaggedSequence, TriggerConfig};
use bilab_core::grad::{
    backward, backward_with, check_against_fd, evaluate, finite_diff_gradient, finite_diff_with, gradcheck,
    relative_error, sample_coords, BackwardOptions, Coord, Prepared, Reduction,
};
use bilab_core::model::{AttnScale, MaskMode, ModelParams, Trainable, TrainableInit};
use bilab_core::RngStream;
use ndarray::Array2;

fn instance(init: TrainableInit, ff: bool, seed: u64) -> (ModelParams<f64>, Vec<TaggedSequence>) {
    let spec = MarkovSpec::synthetic(5, seed).unwrap();
    let cfg = TriggerConfig::random(1, spec.pi_u.clone(), OutputMode::Uniform);
    let root = RngStream::new(seed);
    let batch = SequenceSampler::new(&spec, &cfg)
        .unwrap()
        .sample_batch(8, 4, &root.named("data"))
        .unwrap();
    let mut p = ModelParams::init(16, 5, 8, init, ff, AttnScale::One, &root.named("model")).unwrap();
    if init == TrainableInit::Gaussian {
        // larger trainables so every path carries signal
        for m in p.active_trainables() {
            p.trainable_mut(m).unwrap().mapv_inplace(|x| 3.0 * x);
        }
    }
    (p, batch)
}

fn has_icl(batch: &[TaggedSequence]) -> bool {
    batch.iter().any(|s| s.in_context_positions().next().is_some())
}

#[test]
fn fast_forward_matches_reference() {
    let (p, batch) = instance(TrainableInit::Gaussian, true, 1);
    let prep = Prepared::new(&p);
    for seq in &batch {
        let fast = prep.forward(&seq.tokens);
        let slow = p.forward(&seq.tokens).unwrap();
        let diff = (&fast.logits - &slow.logits).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12, "{diff}");
        let diff = (&fast.a1 - &slow.a1).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn gradcheck_all_positions() {
    for (ff, seed) in [(true, 2), (false, 3)] {
        let (p, batch) = instance(TrainableInit::Gaussian, ff, seed);
        let r = gradcheck(&p, &batch, MaskMode::All, 1e-4, 60, &RngStream::new(seed)).unwrap();
        assert!(r.passed, "{:?}", r);
    }
}

#[test]
fn gradcheck_in_context_only() {
    let mut seed = 10;
    loop {
        let (p, batch) = instance(TrainableInit::Gaussian, true, seed);
        if has_icl(&batch) {
            let r = gradcheck(&p, &batch, MaskMode::InContextOnly, 1e-4, 60, &RngStream::new(seed)).unwrap();
            assert!(r.passed, "{:?}", r);
            break;
        }
        seed += 1;
    }
}

#[test]
fn gradcheck_zero_init_degenerate_attention() {
    let mut seed = 20;
    loop {
        let (p, batch) = instance(TrainableInit::Zeros, true, seed);
        if has_icl(&batch) {
            let r = gradcheck(&p, &batch, MaskMode::InContextOnly, 1e-4, 60, &RngStream::new(seed)).unwrap();
            assert!(r.passed, "{:?}", r);
            break;
        }
        seed += 1;
    }
}

#[test]
fn gradcheck_inverse_sqrt_scale() {
    let (mut p, batch) = instance(TrainableInit::Gaussian, true, 4);
    p.attn_scale = AttnScale::InvSqrtD;
    let r = gradcheck(&p, &batch, MaskMode::All, 1e-4, 40, &RngStream::new(4)).unwrap();
    assert!(r.passed, "{:?}", r);
}

#[test]
fn corrupted_gradient_is_caught() {
    let (p, batch) = instance(TrainableInit::Gaussian, true, 5);
    let mut g = backward(&p, &batch, MaskMode::All).unwrap().grads;
    g.wk2.mapv_inplace(|x| 1.5 * x + 1e-3);
    let coords = sample_coords(&p, 20, &RngStream::new(5));
    let r = check_against_fd(&p, &batch, MaskMode::All, &g, &coords, 1e-5, 1e-4).unwrap();
    assert!(!r.passed);
    assert!(r.failing.iter().all(|c| c.coord.matrix == Trainable::WK2));
    assert_eq!(r.failing.len(), 20);
}

#[test]
fn zero_init_logit_gradient_is_uniform_minus_onehot() {
    // One supervised position, all trainables 0: only W_F sees dlogits, and
    // d loss / d W_F = W_U^T (1/N - e_y) h^T with h the layer-2 output.
    let (mut p, _) = instance(TrainableInit::Zeros, true, 6);
    let seq = TaggedSequence::annotate(vec![2, 4], vec![], vec![]);
    // Remove the hidden-state direction from every output embedding so
    // the logits at position 0 are exactly uniform.
    let h = p.forward(&seq.tokens).unwrap().h2.column(0).to_owned();
    let hh = h.dot(&h);
    for mut row in p.w_u.rows_mut() {
        let c = row.dot(&h) / hh;
        row.scaled_add(-c, &h);
    }
    let b = backward(&p, std::slice::from_ref(&seq), MaskMode::All).unwrap();
    let tr = p.forward(&seq.tokens).unwrap();
    assert!(tr.logits.column(0).iter().all(|x| x.abs() < 1e-14));
    let mut dlog = ndarray::Array1::from_elem(5, 0.2);
    dlog[4] -= 1.0;
    let h = tr.h2.column(0);
    let want = p.w_u.t().dot(&dlog).insert_axis(ndarray::Axis(1)).dot(&h.insert_axis(ndarray::Axis(0)));
    let got = b.grads.wf.unwrap();
    assert!((&got - &want).iter().all(|x| x.abs() < 1e-13));
    assert!((b.loss - 5f64.ln()).abs() < 1e-13);
}

#[test]
fn finite_differences_of_quadratic_are_exact() {
    let (p, _) = instance(TrainableInit::Gaussian, true, 7);
    let coords: Vec<Coord> = (0..5)
        .map(|i| Coord {
            matrix: Trainable::WO2,
            row: i,
            col: 2 * i,
        })
        .collect();
    let f = |q: &ModelParams<f64>| Ok(q.w_o2.iter().map(|x| 0.5 * x * x + 2.0 * x).sum::<f64>());
    let est = finite_diff_with(&p, &coords, 1e-4, f).unwrap();
    for (c, e) in coords.iter().zip(est) {
        let want = p.w_o2[[c.row, c.col]] + 2.0;
        assert!((e - want).abs() < 1e-10);
    }
    assert!(finite_diff_with(&p, &coords, 1e-2, f).is_err());
}

#[test]
fn masked_out_weight_has_zero_derivative() {
    // Without feed-forward W_F does not exist; with zero output embeddings
    // every loss is log N whatever W_K1 is.
    let (mut p, batch) = instance(TrainableInit::Gaussian, false, 8);
    p.w_u.fill(0.0);
    let coords = sample_coords(&p, 10, &RngStream::new(8));
    let est = finite_diff_gradient(&p, &batch, MaskMode::All, 1e-5, &coords).unwrap();
    assert!(est.iter().all(|x| x.abs() < 1e-9));
}

#[test]
fn batch_gradient_is_mean_of_sequence_gradients() {
    // With mask "all" and equal lengths every sequence has the same number
    // of supervised positions, so the pooled mean equals the mean of means.
    let (p, batch) = instance(TrainableInit::Gaussian, true, 9);
    let full = backward(&p, &batch, MaskMode::All).unwrap();
    let mut sum: Option<Array2<f64>> = None;
    let mut loss = 0.0;
    for s in &batch {
        let b = backward(&p, std::slice::from_ref(s), MaskMode::All).unwrap();
        loss += b.loss / batch.len() as f64;
        let g = b.grads.wk1.mapv(|x| x / batch.len() as f64);
        sum = Some(match sum {
            None => g,
            Some(acc) => acc + g,
        });
    }
    assert!((loss - full.loss).abs() < 1e-13);
    let diff = (&sum.unwrap() - &full.grads.wk1).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(diff < 1e-13);
}

#[test]
fn compensated_reduction_matches_serial() {
    let (p, batch) = instance(TrainableInit::Gaussian, true, 11);
    let serial = backward_with(
        &p,
        &batch,
        MaskMode::All,
        BackwardOptions {
            chunk: batch.len(),
            reduction: Reduction::Ordered,
        },
    )
    .unwrap();
    let comp = backward_with(
        &p,
        &batch,
        MaskMode::All,
        BackwardOptions {
            chunk: 1,
            reduction: Reduction::Compensated,
        },
    )
    .unwrap();
    for m in p.active_trainables() {
        let (a, b) = (serial.grads.get(m).unwrap(), comp.grads.get(m).unwrap());
        let diff = (a - b).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(diff < 1e-10, "{m}: {diff}");
    }
    assert_eq!(serial.stats, comp.stats);
}

#[test]
fn backward_is_independent_of_thread_count() {
    let (p, batch) = instance(TrainableInit::Gaussian, true, 12);
    let a = backward(&p, &batch, MaskMode::All).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| backward(&p, &batch, MaskMode::All).unwrap());
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn empty_masks_are_an_error() {
    let (p, _) = instance(TrainableInit::Gaussian, true, 13);
    let seq = TaggedSequence::annotate(vec![0, 1, 2], vec![4], vec![0]);
    assert!(backward(&p, std::slice::from_ref(&seq), MaskMode::InContextOnly).is_err());
    assert!(backward(&p, &[], MaskMode::All).is_err());
}

#[test]
fn eval_stats_match_backward_stats() {
    let (p, batch) = instance(TrainableInit::Gaussian, true, 14);
    let b = backward(&p, &batch, MaskMode::All).unwrap();
    assert_eq!(evaluate(&p, &batch).unwrap(), b.stats);
    assert!((b.stats.metrics().loss_all.unwrap() - b.loss).abs() < 1e-12);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1e-9, 0.0) < 1e-2);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}
