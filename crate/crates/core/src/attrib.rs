//! Gradient-based importance of each image region for one class score.

use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::ForwardCtx;
use crate::tape::Tape;

/// How many regions a report lists.
pub const TOP_REGIONS: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    /// L2 norm of the gradient row.
    #[default]
    GradientNorm,
    /// L2 norm of gradient times input, elementwise.
    GradientTimesInput,
}

impl std::str::FromStr for ImportanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient_norm" | "grad" => Ok(Self::GradientNorm),
            "gradient_times_input" | "grad_x_input" => Ok(Self::GradientTimesInput),
            _ => Err(Error::config(format!(
                "unknown importance method `{s}` (expected gradient_norm or gradient_times_input)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRegion {
    pub index: usize,
    pub importance: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttribution {
    pub sample_id: String,
    pub class: usize,
    pub method: ImportanceMethod,
    /// Unnormalized importance per region.
    pub raw: Vec<f64>,
    /// `raw` divided by its maximum; exactly one entry equals 1.
    pub importance: Vec<f64>,
    pub top: Vec<TopRegion>,
    /// Set when every raw importance is zero; `importance` is then all zeros.
    pub all_zero: bool,
}

/// Scales `raw` so its first maximum is exactly 1. Later entries tied with
/// the maximum get the largest value below 1, so the maximum stays unique.
pub fn normalize_importance(raw: &[f64]) -> (Vec<f64>, bool) {
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    if max == 0.0 {
        return (vec![0.0; raw.len()], true);
    }
    let below_one = f64::from_bits(1.0f64.to_bits() - 1);
    let mut seen_max = false;
    let out = raw
        .iter()
        .map(|&v| {
            if v == max {
                if seen_max {
                    below_one
                } else {
                    seen_max = true;
                    1.0
                }
            } else {
                (v / max).min(below_one)
            }
        })
        .collect();
    (out, false)
}

/// Indices of the `n` largest values, ties broken by lower index.
pub fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn region_attribution(
    model: &Model,
    sample: &MultimodalSample,
    class: usize,
    method: ImportanceMethod,
) -> Result<RegionAttribution> {
    if !model.uses_regions() {
        return Err(Error::invalid(format!(
            "{} model reads no regions; nothing to attribute",
            model.family().as_str()
        )));
    }
    if class >= model.config().num_classes {
        return Err(Error::Index {
            table: "classes".into(),
            index: class,
            size: model.config().num_classes,
        });
    }
    let tape = Tape::new();
    let (out, regions) = model.forward_sample(&tape, sample, &mut ForwardCtx::eval())?;
    let score = out.class_score(class)?;
    let grads = tape.gradients(score)?;
    let g = grads
        .wrt(regions)
        .ok_or_else(|| Error::Invariant("region input received no gradient".into()))?;
    let x = regions.value();
    let dim = regions.shape()[1];
    let raw: Vec<f64> = g
        .chunks(dim)
        .zip(x.chunks(dim))
        .map(|(gr, xr)| match method {
            ImportanceMethod::GradientNorm => gr.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ImportanceMethod::GradientTimesInput => gr.iter().zip(xr).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt(),
        })
        .collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant(format!(
            "non-finite region importance for sample `{}`",
            sample.sample_id
        )));
    }
    let (importance, all_zero) = normalize_importance(&raw);
    let top = top_indices(&importance, TOP_REGIONS)
        .into_iter()
        .map(|i| TopRegion {
            index: i,
            importance: importance[i],
            bbox: sample.region_boxes[i],
        })
        .collect();
    Ok(RegionAttribution {
        sample_id: sample.sample_id.clone(),
        class,
        method,
        raw,
        importance,
        top,
        all_zero,
    })
}
