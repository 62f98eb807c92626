#![allow(dead_code)]

use affectfuse::data::{generate_synthetic, Dataset, MultimodalSample, SyntheticConfig};
use affectfuse::gradcheck::{self, GradCheckReport};
use affectfuse::models::LossConfig;
use affectfuse::nn::ForwardCtx;
use affectfuse::{Family, Model, ModelConfig, ParamStore, Tape};

/// A dataset small enough for finite differences: 9 vocab entries,
/// 2 regions of 4 features, captions of 2 to 4 tokens.
pub fn toy_dataset(seed: u64, n: usize) -> Dataset {
    generate_synthetic(
        seed,
        &SyntheticConfig {
            num_samples: n,
            regions: 2,
            region_feature_dim: 4,
            min_caption_len: 2,
            max_caption_len: 4,
            keywords_per_group: 1,
            filler_words: 3,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Every dimension at most 8.
pub fn toy_config(family: Family) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        encoder_layers: 1,
        heads: 2,
        model_dim: 8,
        ff_dim: 8,
        head_hidden_dim: 8,
        max_text_len: 4,
        num_regions: 2,
        region_feature_dim: 4,
        dropout: 0.0,
        ..ModelConfig::desk(family)
    }
}

pub fn total_loss(model: &Model, samples: &[&MultimodalSample], loss: &LossConfig) -> f64 {
    let tape = Tape::new();
    samples
        .iter()
        .map(|s| {
            let (out, _) = model.forward_sample(&tape, s, &mut ForwardCtx::eval()).unwrap();
            model.loss(&out, s, loss).unwrap().item()
        })
        .sum()
}

/// Backward gradients of the summed loss versus central differences, on
/// every parameter entry.
pub fn model_gradcheck(
    model: &mut Model,
    samples: &[&MultimodalSample],
    loss: &LossConfig,
    h: f64,
    floor: f64,
) -> GradCheckReport {
    model.params_mut().zero_grad();
    for s in samples {
        let tape = Tape::new();
        let (out, _) = model.forward_sample(&tape, s, &mut ForwardCtx::eval()).unwrap();
        let l = model.loss(&out, s, loss).unwrap();
        tape.backward(l, model.params_mut()).unwrap();
    }
    let mut probe = model.clone();
    let mut store: ParamStore = model.params().clone();
    gradcheck::check_params(&mut store, h, floor, 1, |p| {
        *probe.params_mut() = p.clone();
        Ok(total_loss(&probe, samples, loss))
    })
    .unwrap()
}
