//! Samples, datasets, their on-disk format, a synthetic task generator and
//! padded batching.

mod batch;
mod format;
mod synthetic;
mod vocab;

pub use batch::{Batch, BatchIterator};
pub use format::{load_dataset, load_dataset_auto, write_dataset, BLOB_MAGIC, FORMAT_VERSION};
pub use synthetic::{class_of, generate_synthetic, SyntheticConfig};
pub use vocab::{Vocabulary, CLS, PAD, UNK};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmotionDistribution;
use crate::tensor::Tensor;

/// Tolerance on distribution sums read from single-precision storage.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// The nine emotion categories used by default.
pub const DEFAULT_CLASS_NAMES: [&str; 9] = [
    "amusement",
    "awe",
    "contentment",
    "excitement",
    "anger",
    "disgust",
    "fear",
    "sadness",
    "something else",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// One caption paired with the region features of its image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: String,
    pub caption: Option<String>,
    pub caption_token_ids: Vec<u32>,
    /// Row-major `[k, region_dim]`.
    pub region_features: Vec<f64>,
    pub region_dim: usize,
    /// Normalized `(x1, y1, x2, y2)` per region.
    pub region_boxes: Vec<[f64; 4]>,
    /// Detector scores, non-increasing.
    pub region_scores: Vec<f64>,
    pub label: usize,
    pub distribution: EmotionDistribution,
    pub split: Split,
    /// Free-form markers, e.g. zero-padded detections.
    pub flags: Vec<String>,
}

impl MultimodalSample {
    pub fn num_regions(&self) -> usize {
        self.region_scores.len()
    }

    /// The `k` highest-scoring regions as a `[k, region_dim]` tensor.
    pub fn top_regions(&self, k: usize) -> Result<Tensor> {
        if k > self.num_regions() {
            return Err(Error::InvalidSample {
                sample_id: self.sample_id.clone(),
                reason: format!("model wants {k} regions, sample has {}", self.num_regions()),
            });
        }
        Tensor::new(
            [k, self.region_dim],
            self.region_features[..k * self.region_dim].to_vec(),
        )
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason: reason.into(),
        }
    }
}

/// Dataset-level metadata, the manifest header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u16,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub region_feature_dim: usize,
    pub k: usize,
    #[serde(default)]
    pub vocab: Vec<String>,
    /// File name of the feature blob, relative to the manifest.
    pub blob: String,
    /// Producer details (generator settings, detector configuration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<MultimodalSample>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.header.class_names
    }

    pub fn split(&self, split: Split) -> Vec<&MultimodalSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let mut sizes = SplitSizes::default();
        for s in &self.samples {
            match s.split {
                Split::Train => sizes.train += 1,
                Split::Val => sizes.val += 1,
                Split::Test => sizes.test += 1,
            }
        }
        sizes
    }

    pub fn find(&self, sample_id: &str) -> Option<&MultimodalSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.header.vocab.clone())
    }

    /// Checks the header and every sample; the first violation is returned.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.num_classes < 2 {
            return Err(Error::DatasetFormat(format!("num_classes {} < 2", h.num_classes)));
        }
        if h.class_names.len() != h.num_classes {
            return Err(Error::DatasetFormat(format!(
                "{} class names for {} classes",
                h.class_names.len(),
                h.num_classes
            )));
        }
        let unique: HashSet<_> = h.class_names.iter().collect();
        if unique.len() != h.class_names.len() {
            return Err(Error::DatasetFormat("class names are not unique".into()));
        }
        if !h.vocab.is_empty() {
            self.vocabulary()?;
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(s.fail("duplicate sample_id"));
            }
            validate_sample(h, s)?;
        }
        Ok(())
    }
}

fn validate_sample(h: &DatasetHeader, s: &MultimodalSample) -> Result<()> {
    if s.label >= h.num_classes {
        return Err(s.fail(format!("unknown class {} (num_classes {})", s.label, h.num_classes)));
    }
    if s.distribution.len() != h.num_classes {
        return Err(s.fail(format!("distribution has {} entries", s.distribution.len())));
    }
    EmotionDistribution::new(s.distribution.as_slice().to_vec(), DISTRIBUTION_TOL)
        .map_err(|e| s.fail(e.to_string()))?;
    if s.num_regions() != h.k || s.region_boxes.len() != h.k {
        return Err(s.fail(format!("has {} regions, header k is {}", s.num_regions(), h.k)));
    }
    if s.region_dim != h.region_feature_dim || s.region_features.len() != h.k * h.region_feature_dim {
        return Err(s.fail(format!(
            "feature dim {} does not match header {}",
            s.region_dim, h.region_feature_dim
        )));
    }
    if s.region_features.iter().any(|v| !v.is_finite()) {
        return Err(s.fail("non-finite region feature"));
    }
    for b in &s.region_boxes {
        let inside = b.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside || b[0] > b[2] || b[1] > b[3] {
            return Err(s.fail(format!("box {b:?} is not a normalized (x1, y1, x2, y2)")));
        }
    }
    if s.region_scores.iter().any(|v| !v.is_finite()) || s.region_scores.windows(2).any(|w| w[0] < w[1]) {
        return Err(s.fail("region scores are not sorted non-increasing"));
    }
    if !h.vocab.is_empty() {
        if let Some(t) = s.caption_token_ids.iter().find(|&&t| t as usize >= h.vocab.len()) {
            return Err(s.fail(format!("token id {t} outside vocabulary of {}", h.vocab.len())));
        }
    }
    Ok(())
}
