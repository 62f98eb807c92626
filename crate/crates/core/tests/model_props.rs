mod common;

use proptest::prelude::*;

use affectfuse::data::PAD;
use affectfuse::models::{FusionConfig, LossConfig, LossKind, ModelOutput, TextInput};
use affectfuse::nn::ForwardCtx;
use affectfuse::{Family, Model, Tape, Tensor};

fn probs(m: &Model, tokens: &[u32], mask: Option<&[bool]>, regions: &Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let r = tape.constant(regions);
    let out = m
        .forward(&tape, TextInput { tokens, mask }, r, &mut ForwardCtx::eval())
        .unwrap();
    out.probabilities().unwrap().value().to_vec()
}

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..9, 1..=2)
}

fn regions() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, 8).prop_map(|d| Tensor::new([2, 4], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn padding_leaves_output_unchanged(f in family(), seed in 0u64..50, toks in tokens(), r in regions(), pad in 1usize..=2) {
        let m = Model::new(common::toy_config(f), seed).unwrap();
        let plain = probs(&m, &toks, None, &r);
        let mut padded = toks.clone();
        padded.resize(toks.len() + pad, PAD);
        let mut mask = vec![true; toks.len()];
        mask.resize(padded.len(), false);
        let with_pad = probs(&m, &padded, Some(&mask), &r);
        for (a, b) in plain.iter().zip(&with_pad) {
            prop_assert!((a - b).abs() <= 1e-9, "{f:?}: {a} vs {b}");
        }
    }

    #[test]
    fn outputs_are_distributions(f in family(), seed in 0u64..50, toks in tokens(), r in regions()) {
        let m = Model::new(common::toy_config(f), seed).unwrap();
        let p = probs(&m, &toks, None, &r);
        prop_assert_eq!(p.len(), 9);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scaling_fusion_weights_changes_nothing(a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.1f64..10.0, toks in tokens(), r in regions()) {
        let build = |w1: f64, w2: f64| {
            let mut cfg = common::toy_config(Family::DualStreamLateFusion);
            cfg.fusion = FusionConfig { w1, w2, trainable: false };
            Model::new(cfg, 3).unwrap()
        };
        let p = probs(&build(a, b), &toks, None, &r);
        let q = probs(&build(c * a, c * b), &toks, None, &r);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_weight_selects_one_stream(toks in tokens(), r in regions(), image in any::<bool>()) {
        let mut cfg = common::toy_config(Family::DualStreamLateFusion);
        cfg.fusion = if image {
            FusionConfig { w1: 1.0, w2: 0.0, trainable: false }
        } else {
            FusionConfig { w1: 0.0, w2: 1.0, trainable: false }
        };
        let m = Model::new(cfg, 8).unwrap();
        let tape = Tape::new();
        let out = m.forward(&tape, TextInput::new(&toks), tape.constant(&r), &mut ForwardCtx::eval()).unwrap();
        let ModelOutput::Fused { probs, image_probs, text_probs, .. } = out else { unreachable!() };
        let stream = if image { image_probs } else { text_probs };
        prop_assert_eq!(probs.value().to_vec(), stream.value().to_vec());
        let argmax = affectfuse::losses::argmax;
        prop_assert_eq!(argmax(&probs.value()), argmax(&stream.value()));
    }

    #[test]
    fn region_order_is_irrelevant(f in family(), seed in 0u64..50, toks in tokens(), r in regions()) {
        let m = Model::new(common::toy_config(f), seed).unwrap();
        let swapped = Tensor::from_rows(&[r.row(1).to_vec(), r.row(0).to_vec()]).unwrap();
        let p = probs(&m, &toks, None, &r);
        let q = probs(&m, &toks, None, &swapped);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_seed_same_outputs_and_gradients(f in family(), seed in 0u64..50) {
        let data = common::toy_dataset(seed, 9);
        let run = || {
            let mut m = Model::new(common::toy_config(f), seed).unwrap();
            let tape = Tape::new();
            let (out, _) = m.forward_sample(&tape, &data.samples[0], &mut ForwardCtx::eval()).unwrap();
            let loss = m.loss(&out, &data.samples[0], &LossConfig::default()).unwrap();
            let value = loss.item();
            tape.backward(loss, m.params_mut()).unwrap();
            let grads: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| t.grad().unwrap().to_vec()).collect();
            (value.to_bits(), grads)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn corrupted_checkpoints_never_panic(f in family(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4)) {
        let m = Model::new(common::toy_config(f), 1).unwrap();
        let mut bytes = m.to_checkpoint_bytes().unwrap();
        for (at, v) in flips {
            let i = at.index(bytes.len());
            bytes[i] = v;
        }
        let _ = Model::from_checkpoint_bytes(&bytes);
    }
}

#[test]
fn text_only_single_stream_runs_without_regions() {
    let mut cfg = common::toy_config(Family::SingleStreamBitransformer);
    cfg.num_regions = 0;
    let m = Model::new(cfg, 2).unwrap();
    let p = probs(&m, &[3, 4], None, &Tensor::zeros([0, 4]));
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

/// Names of parameter tensors whose gradient never rises above rounding
/// noise (1e-10 of the largest entry seen) on any sample of the batch.
fn dead_parameters(model: &Model, samples: &[&affectfuse::data::MultimodalSample], loss: &LossConfig) -> Vec<String> {
    let mut peak = std::collections::BTreeMap::new();
    for s in samples {
        let tape = Tape::new();
        let (out, _) = model.forward_sample(&tape, s, &mut ForwardCtx::eval()).unwrap();
        let l = model.loss(&out, s, loss).unwrap();
        for (id, g) in tape.param_gradients(l, model.params()).unwrap() {
            let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let e = peak.entry(id).or_insert(0.0f64);
            *e = e.max(m);
        }
    }
    let global = peak.values().fold(0.0f64, |a, v| a.max(*v));
    model
        .params()
        .ids()
        .filter(|id| peak.get(id).is_none_or(|m| *m <= 1e-10 * global))
        .map(|id| model.params().name(id).to_string())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn every_parameter_receives_gradient(seed in 0u64..1_000_000, init in 0u64..1_000) {
        let ds = affectfuse::data::generate_synthetic(seed, &affectfuse::data::SyntheticConfig {
            num_samples: 48,
            ..Default::default()
        }).unwrap();
        let batch: Vec<_> = ds.samples.iter().collect();
        for family in Family::ALL {
            for kind in [LossKind::LabelSmoothedCe, LossKind::KlToAnnotator] {
                let model = Model::new(affectfuse::ModelConfig::desk(family), init).unwrap();
                let loss = LossConfig { kind, ..Default::default() };
                let dead = dead_parameters(&model, &batch, &loss);
                prop_assert!(dead.is_empty(), "{} / {:?}: {:?}", family.as_str(), kind, dead);
            }
        }
    }
}

#[test]
fn zero_output_layer_gives_uniform_probabilities() {
    let data = common::toy_dataset(8, 9);
    for f in Family::ALL {
        let mut m = Model::new(common::toy_config(f), 4).unwrap();
        let heads: Vec<_> = m
            .params()
            .ids()
            .filter(|id| m.params().name(*id).contains("head.output"))
            .collect();
        assert!(!heads.is_empty(), "{f:?}");
        for id in heads {
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        for s in &data.samples {
            let p = m.predict_proba(s).unwrap();
            for v in &p {
                assert!((v - 1.0 / 9.0).abs() <= 1e-15, "{f:?}: {p:?}");
            }
        }
    }
}

#[test]
fn identical_regions_match_a_single_region() {
    let row = vec![0.4, -0.2, 0.9, 0.1];
    for f in [Family::ImageOnlyMlp, Family::EarlyFusionAvg, Family::EarlyFusionFirst] {
        let two = Model::new(common::toy_config(f), 6).unwrap();
        let mut cfg = common::toy_config(f);
        cfg.num_regions = 1;
        let mut one = Model::new(cfg, 6).unwrap();
        let layout = |m: &Model| {
            m.params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(layout(&one), layout(&two), "{f:?}");
        *one.params_mut() = two.params().clone();
        let a = probs(
            &two,
            &[2, 3],
            None,
            &Tensor::from_rows(&[row.clone(), row.clone()]).unwrap(),
        );
        let b = probs(
            &one,
            &[2, 3],
            None,
            &Tensor::from_rows(std::slice::from_ref(&row)).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12, "{f:?}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn image_only_overfits_a_uniform_target() {
    use affectfuse::losses::EmotionDistribution;
    use affectfuse::optim::{adamw_step, AdamWConfig, OptimizerState};

    let mut sample = common::toy_dataset(10, 9).samples[0].clone();
    sample.distribution = EmotionDistribution::uniform(9);
    let mut m = Model::new(common::toy_config(Family::ImageOnlyMlp), 3).unwrap();
    let loss_cfg = LossConfig {
        kind: LossKind::KlToAnnotator,
        ..Default::default()
    };
    let kl = |m: &Model| {
        let tape = Tape::new();
        let (out, _) = m.forward_sample(&tape, &sample, &mut ForwardCtx::eval()).unwrap();
        m.loss(&out, &sample, &loss_cfg).unwrap().item()
    };
    let start = kl(&m);
    let mut state = OptimizerState::new(
        m.params(),
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    for _ in 0..300 {
        m.params_mut().zero_grad();
        let tape = Tape::new();
        let (out, _) = m.forward_sample(&tape, &sample, &mut ForwardCtx::eval()).unwrap();
        let l = m.loss(&out, &sample, &loss_cfg).unwrap();
        tape.backward(l, m.params_mut()).unwrap();
        adamw_step(m.params_mut(), &mut state, 1e-2).unwrap();
    }
    let end = kl(&m);
    assert!(end < 1e-3 && end < start, "KL {start} -> {end}");
    for p in m.predict_proba(&sample).unwrap() {
        assert!((p - 1.0 / 9.0).abs() < 0.02);
    }
}
