use bilab_core::datagen::{estimate_markov, fixed_triggers, MarkovSpec, OutputMode, SequenceSampler, TriggerConfig};
use bilab_core::grad::relative_error;
use bilab_core::model::{argmax, causal_softmax, AttnScale, ModelParams, TrainableInit};
use bilab_core::RngStream;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_are_pure_functions_of_their_path(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let s = RngStream::new(seed);
        prop_assert_eq!(s.child(a).seed(), s.child(a).seed());
        prop_assert_eq!(s.child(a).child(b).seed(), RngStream::new(seed).child(a).child(b).seed());
        if a != b {
            prop_assert_ne!(s.child(a).seed(), s.child(b).seed());
        }
    }

    #[test]
    fn causal_softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 36)) {
        let mut a = Array2::from_shape_vec((6, 6), vals).unwrap();
        causal_softmax(&mut a);
        for t in 0..6 {
            let row = a.row(t);
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().skip(t + 1).all(|&x| x == 0.0));
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn estimated_chain_is_stochastic(text in prop::collection::vec(any::<u8>(), 2..400)) {
        let spec = estimate_markov(&text).unwrap();
        let mut distinct = text.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(spec.n, distinct.len());
        prop_assert!((spec.pi_u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in &spec.pi_b {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let st = spec.stationary();
        prop_assert!((st.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn triggers_are_always_followed_by_their_output(
        seed in any::<u64>(),
        n in 3usize..20,
        k in 1usize..3,
        t in 2usize..60,
        fixed in any::<bool>(),
    ) {
        let spec = MarkovSpec::synthetic(n, seed).unwrap();
        let cfg = if fixed {
            TriggerConfig::fixed(fixed_triggers(&spec, k, 0).unwrap(), OutputMode::Uniform)
        } else {
            TriggerConfig::random(k, spec.pi_u.clone(), OutputMode::Bigram)
        };
        let seq = SequenceSampler::new(&spec, &cfg).unwrap().sample(t, &RngStream::new(seed).named("seq")).unwrap();
        prop_assert_eq!(seq.len(), t);
        prop_assert!(seq.tokens.iter().all(|&z| z < n));
        prop_assert_eq!(seq.triggers.len(), k);
        for i in 0..t - 1 {
            if let Some(j) = seq.triggers.iter().position(|&q| q == seq.tokens[i]) {
                prop_assert_eq!(seq.tokens[i + 1], seq.outputs[j]);
            }
        }
        for i in seq.in_context_positions() {
            prop_assert!(seq.is_trigger[i] && seq.occurrence_index[i] >= 2);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), d in 1usize..6, n in 1usize..5, ff in any::<bool>()) {
        let p: ModelParams<f64> =
            ModelParams::init(d, n, 4, TrainableInit::Gaussian, ff, AttnScale::InvSqrtD, &RngStream::new(seed)).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::<f64>::read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn argmax_finds_a_maximum(vals in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let i = argmax(vals.iter().copied());
        prop_assert!(vals.iter().all(|&v| v <= vals[i]));
    }

    #[test]
    fn relative_error_is_symmetric_and_bounded(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let e = relative_error(a, b);
        prop_assert_eq!(e, relative_error(b, a));
        prop_assert!((0.0..=2.0).contains(&e));
    }
}
