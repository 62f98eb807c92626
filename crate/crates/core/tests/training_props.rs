use std::collections::HashSet;

use proptest::prelude::*;

use affectfuse::attrib::normalize_importance;
use affectfuse::data::{generate_synthetic, load_dataset, write_dataset, Split, SyntheticConfig};
use affectfuse::eval::EvalReport;
use affectfuse::losses::{self, EmotionDistribution, KlDirection};
use affectfuse::optim::{adamw_step, AdamWConfig, OptimizerState, ScheduleConfig};
use affectfuse::{ParamStore, Tape, Tensor};

fn distribution(k: usize) -> impl Strategy<Value = EmotionDistribution> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        EmotionDistribution::new(w.iter().map(|v| v / s).collect(), 1e-9).unwrap()
    })
}

/// Textbook Adam, written independently of the optimizer module.
fn adam_reference(w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64, cfg: &AdamWConfig) {
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
        let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
        w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

fn labelled(k: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..=k).prop_flat_map(|k| {
        (1usize..40).prop_flat_map(move |n| (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
    })
}

proptest! {
    #[test]
    fn smoothed_target_keeps_true_class_on_top(k in 2usize..=9, class in 0usize..9, frac in 0.0f64..1.0) {
        let class = class % k;
        let eps = frac * (k as f64 - 1.0) / k as f64;
        let t = losses::smoothed_target(class, eps, k).unwrap();
        prop_assert_eq!(losses::argmax(&t), class);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(z in prop::collection::vec(-8.0f64..8.0, 9), t in distribution(9), class in 0usize..9, eps in 0.0f64..=1.0) {
        let tape = Tape::new();
        let logits = tape.input(&Tensor::new([9], z).unwrap());
        prop_assert!(losses::label_smoothed_ce(logits, class, eps, 9).unwrap().item() >= 0.0);
        for dir in [KlDirection::TargetToPrediction, KlDirection::PredictionToTarget] {
            prop_assert!(losses::kl_to_annotator(logits, &t, dir).unwrap().item() >= -1e-15);
        }
    }

    #[test]
    fn kl_vanishes_at_the_target(t in distribution(6), shift in -5.0f64..5.0) {
        let tape = Tape::new();
        let z: Vec<f64> = t.as_slice().iter().map(|p| p.ln() + shift).collect();
        let kl = losses::kl_to_annotator(tape.input(&Tensor::new([6], z).unwrap()), &t, KlDirection::TargetToPrediction).unwrap();
        prop_assert!(kl.item().abs() <= 1e-9);
    }

    #[test]
    fn smoothed_ce_gradient_matches_differences(z in prop::collection::vec(-4.0f64..4.0, 9), class in 0usize..9, eps in 0.0f64..0.5) {
        let tape = Tape::new();
        let x = tape.input(&Tensor::new([9], z.clone()).unwrap());
        let g = tape.gradients(losses::label_smoothed_ce(x, class, eps, 9).unwrap()).unwrap();
        let f = |v: &[f64]| {
            let tape = Tape::new();
            losses::label_smoothed_ce(tape.input(&Tensor::new([9], v.to_vec()).unwrap()), class, eps, 9).unwrap().item()
        };
        for i in 0..9 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let numeric = (f(&a) - f(&b)) / 2e-5;
            prop_assert!(affectfuse::gradcheck::relative_error(g.wrt(x).unwrap()[i], numeric, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam(w0 in prop::collection::vec(-2.0f64..2.0, 5), grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..6), lr in 1e-5f64..1e-1) {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([5], w0.clone()).unwrap());
        let mut state = OptimizerState::new(&store, cfg);
        let (mut w, mut m, mut v) = (w0, vec![0.0; 5], vec![0.0; 5]);
        for (t, g) in grads.iter().enumerate() {
            store.zero_grad();
            store.get_mut(id).accumulate_grad(g).unwrap();
            adamw_step(&mut store, &mut state, lr).unwrap();
            adam_reference(&mut w, &mut m, &mut v, g, t as i32 + 1, lr, &cfg);
            prop_assert_eq!(store.get(id).data(), w.as_slice());
        }
    }

    #[test]
    fn schedule_is_continuous_and_peaks_once(peak in 1e-6f64..1e-2, warmup in 1u64..300, extra in 0u64..300) {
        let s = ScheduleConfig { peak_lr: peak, warmup_steps: warmup, total_steps: warmup + extra };
        let lrs: Vec<f64> = (0..=s.total_steps + 5).map(|t| s.lr_at(t)).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(max, peak);
        let slope = peak / warmup.min(extra.max(1)) as f64;
        for pair in lrs[..=s.total_steps as usize].windows(2) {
            prop_assert!((pair[1] - pair[0]).abs() <= slope * (1.0 + 1e-9));
        }
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak).contains(&l)));
    }

    #[test]
    fn macro_f1_ignores_class_order((k, truth, pred) in labelled(9), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut affectfuse::seed::stream(perm_seed, "perm"));
        let a = EvalReport::from_predictions(&truth, &pred, &names(k)).unwrap();
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let b = EvalReport::from_predictions(&t2, &p2, &names(k)).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
        let total: usize = a.confusion_matrix.iter().flatten().sum();
        prop_assert_eq!(total, truth.len());
        let trace: usize = (0..k).map(|c| a.confusion_matrix[c][c]).sum();
        prop_assert_eq!(a.accuracy, trace as f64 / total as f64);
    }

    #[test]
    fn accuracy_ignores_sample_order((k, truth, pred) in labelled(9), rot in 0usize..40) {
        let n = truth.len();
        let r = rot % n;
        let rotate = |v: &[usize]| v[r..].iter().chain(&v[..r]).copied().collect::<Vec<_>>();
        let a = EvalReport::from_predictions(&truth, &pred, &names(k)).unwrap();
        let b = EvalReport::from_predictions(&rotate(&truth), &rotate(&pred), &names(k)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a, EvalReport::from_predictions(&truth, &pred, &names(k)).unwrap());
    }

    #[test]
    fn normalized_importance_has_one_exact_max(raw in prop::collection::vec(prop_oneof![Just(0.0), Just(2.5), 0.0f64..10.0], 1..8)) {
        let (v, all_zero) = normalize_importance(&raw);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        if raw.iter().any(|&x| x > 0.0) {
            prop_assert!(!all_zero);
            prop_assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            let first_max = raw.iter().position(|&x| x == raw.iter().copied().fold(0.0, f64::max)).unwrap();
            prop_assert_eq!(v[first_max], 1.0);
        } else {
            prop_assert!(all_zero);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_round_trips_and_splits_are_disjoint(seed in any::<u64>(), n in 9usize..80, regions in 1usize..5) {
        let ds = generate_synthetic(seed, &SyntheticConfig { num_samples: n, regions, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("d.manifest.jsonl"), dir.path().join("d.features.bin"));
        write_dataset(&ds, &m, &b).unwrap();
        let back = load_dataset(&m, &b).unwrap();
        prop_assert_eq!(&back.samples, &ds.samples);
        let ids = |s: Split| back.split(s).iter().map(|x| x.sample_id.clone()).collect::<HashSet<_>>();
        let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), n);
    }
}
