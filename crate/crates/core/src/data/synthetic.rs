//! A small learnable task whose label needs both modalities.
//!
//! Each caption carries one keyword from one of `text_groups` groups; each
//! image's regions are scattered around one of `image_groups` prototype
//! directions, scaled by the region's detector score. The class is
//! `t * G + (g + t) mod G` for text group `t` and image group `g`, so the
//! pair `(t, g)` determines the class while either one alone leaves `G`
//! (respectively `T`) classes equally likely.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetHeader, MultimodalSample, Split, Vocabulary, DEFAULT_CLASS_NAMES, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::losses::EmotionDistribution;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub text_groups: usize,
    pub image_groups: usize,
    pub regions: usize,
    pub region_feature_dim: usize,
    pub min_caption_len: usize,
    pub max_caption_len: usize,
    pub keywords_per_group: usize,
    pub filler_words: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Prototype magnitude along the group's axis.
    pub signal: f32,
    /// Half-width of the uniform per-coordinate noise.
    pub noise: f32,
    /// Lower bound of the sampled detector scores (upper bound is 1).
    pub min_score: f32,
    pub annotators: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            text_groups: 3,
            image_groups: 3,
            regions: 4,
            region_feature_dim: 8,
            min_caption_len: 3,
            max_caption_len: 7,
            keywords_per_group: 3,
            filler_words: 24,
            train_fraction: 0.7,
            val_fraction: 0.15,
            signal: 2.0,
            noise: 0.15,
            min_score: 0.3,
            annotators: 5,
        }
    }
}

impl SyntheticConfig {
    pub fn num_classes(&self) -> usize {
        self.text_groups * self.image_groups
    }

    fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k < 2 {
            return Err(Error::config("synthetic task needs at least 2 classes"));
        }
        if self.num_samples < k {
            return Err(Error::config(format!(
                "{} samples is fewer than {k} classes",
                self.num_samples
            )));
        }
        if self.region_feature_dim < self.image_groups {
            return Err(Error::config("region_feature_dim must be at least image_groups"));
        }
        if self.regions == 0 || self.min_caption_len == 0 || self.min_caption_len > self.max_caption_len {
            return Err(Error::config(
                "need regions >= 1 and 1 <= min_caption_len <= max_caption_len",
            ));
        }
        if self.keywords_per_group == 0 || self.filler_words == 0 || self.annotators == 0 {
            return Err(Error::config("keyword, filler and annotator counts must be positive"));
        }
        if !(0.0..=1.0).contains(&(self.train_fraction + self.val_fraction))
            || self.train_fraction < 0.0
            || self.val_fraction < 0.0
        {
            return Err(Error::config(
                "split fractions must be non-negative and sum to at most 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::config("min_score must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn keyword(&self, group: usize, j: usize) -> String {
        format!("kw{group}x{j}")
    }
}

/// Class for text group `t` and image group `g` with `image_groups` groups.
pub fn class_of(t: usize, g: usize, image_groups: usize) -> usize {
    t * image_groups + (g + t) % image_groups
}

fn groups_of(class: usize, image_groups: usize) -> (usize, usize) {
    let t = class / image_groups;
    let g = (class % image_groups + image_groups - t % image_groups) % image_groups;
    (t, g)
}

fn f32_uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generates a balanced, split dataset. Identical seeds give identical
/// datasets.
pub fn generate_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k_classes = cfg.num_classes();
    let g_count = cfg.image_groups;
    let mut rng = seed::stream(seed, "synthetic");

    let mut vocab = Vocabulary::new();
    let keywords: Vec<Vec<u32>> = (0..cfg.text_groups)
        .map(|t| {
            (0..cfg.keywords_per_group)
                .map(|j| vocab.add(&cfg.keyword(t, j)))
                .collect()
        })
        .collect();
    let fillers: Vec<u32> = (0..cfg.filler_words).map(|j| vocab.add(&format!("w{j}"))).collect();

    let mut classes: Vec<usize> = (0..cfg.num_samples).map(|i| i % k_classes).collect();
    classes.shuffle(&mut rng);
    let mut split_order: Vec<usize> = (0..cfg.num_samples).collect();
    split_order.shuffle(&mut rng);
    let n_train = (cfg.num_samples as f64 * cfg.train_fraction).round() as usize;
    let n_val = (cfg.num_samples as f64 * cfg.val_fraction).round() as usize;
    let mut splits = vec![Split::Test; cfg.num_samples];
    for (rank, &i) in split_order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let dim = cfg.region_feature_dim;
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for (i, &class) in classes.iter().enumerate() {
        let (t, g) = groups_of(class, g_count);
        debug_assert_eq!(class_of(t, g, g_count), class);

        let len = rng.gen_range(cfg.min_caption_len..=cfg.max_caption_len);
        let slot = rng.gen_range(0..len);
        let tokens: Vec<u32> = (0..len)
            .map(|p| {
                if p == slot {
                    *keywords[t].choose(&mut rng).expect("non-empty")
                } else {
                    *fillers.choose(&mut rng).expect("non-empty")
                }
            })
            .collect();
        let caption = tokens
            .iter()
            .map(|&id| vocab.token(id).expect("known id"))
            .collect::<Vec<_>>()
            .join(" ");

        let mut scores: Vec<f32> = (0..cfg.regions)
            .map(|_| f32_uniform(&mut rng, cfg.min_score, 1.0))
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let mut features = Vec::with_capacity(cfg.regions * dim);
        let mut boxes = Vec::with_capacity(cfg.regions);
        for &score in &scores {
            for d in 0..dim {
                let base = if d == g { cfg.signal * score } else { 0.0 };
                features.push((base + f32_uniform(&mut rng, -cfg.noise, cfg.noise)) as f64);
            }
            let x1 = f32_uniform(&mut rng, 0.0, 0.7);
            let y1 = f32_uniform(&mut rng, 0.0, 0.7);
            let w = f32_uniform(&mut rng, 0.05, 0.3);
            let h = f32_uniform(&mut rng, 0.05, 0.3);
            boxes.push([x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64]);
        }

        // a majority of annotators agree with the caption label
        let mut votes = vec![0usize; k_classes];
        let majority = cfg.annotators / 2 + 1;
        votes[class] += majority;
        for _ in majority..cfg.annotators {
            votes[rng.gen_range(0..k_classes)] += 1;
        }
        let dist: Vec<f64> = votes
            .iter()
            .map(|&v| (v as f32 / cfg.annotators as f32) as f64)
            .collect();

        samples.push(MultimodalSample {
            sample_id: format!("syn-{i:05}"),
            caption: Some(caption),
            caption_token_ids: tokens,
            region_features: features,
            region_dim: dim,
            region_boxes: boxes,
            region_scores: scores.into_iter().map(f64::from).collect(),
            label: class,
            distribution: EmotionDistribution::new(dist, super::DISTRIBUTION_TOL)?,
            split: splits[i],
            flags: Vec::new(),
        });
    }

    let class_names = if k_classes == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k_classes).map(|c| format!("class_{c}")).collect()
    };
    let dataset = Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            num_classes: k_classes,
            class_names,
            region_feature_dim: dim,
            k: cfg.regions,
            vocab: vocab.tokens().to_vec(),
            blob: String::new(),
            provenance: Some(serde_json::json!({
                "generator": "synthetic",
                "seed": seed,
                "config": cfg,
            })),
        },
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}
