//! Training objectives over logits (or fused probabilities).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;

/// Per-image annotator vote fractions over the emotion classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionDistribution(Vec<f64>);

impl EmotionDistribution {
    /// Validates that entries are non-negative and sum to one within `tol`.
    pub fn new(values: Vec<f64>, tol: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty emotion distribution"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "distribution has negative or non-finite entries: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::invalid(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `(1 - eps) * onehot(true_class) + eps / K`.
pub fn smoothed_target(true_class: usize, eps: f64, classes: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} not in [0, 1]")));
    }
    if true_class >= classes {
        return Err(Error::Index {
            table: "classes".into(),
            index: true_class,
            size: classes,
        });
    }
    let off = eps / classes as f64;
    let mut t = vec![off; classes];
    t[true_class] = (1.0 - eps) + off;
    Ok(t)
}

fn check_len(x: &Var<'_>, k: usize, op: &'static str) -> Result<()> {
    if x.numel() != k {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: vec![k],
        });
    }
    Ok(())
}

/// Cross-entropy of `logits` against the label-smoothed target.
pub fn label_smoothed_ce<'t>(logits: Var<'t>, true_class: usize, eps: f64, classes: usize) -> Result<Var<'t>> {
    check_len(&logits, classes, "label_smoothed_ce")?;
    let t = smoothed_target(true_class, eps, classes)?;
    let neg: Vec<f64> = t.iter().map(|v| -v).collect();
    Ok(logits.log_softmax()?.mul_const(neg)?.sum())
}

/// `-sum_i t_i ln p_i` for an already-normalized probability vector.
pub fn cross_entropy_probs<'t>(probs: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    check_len(&probs, target.len(), "cross_entropy_probs")?;
    let neg: Vec<f64> = target.iter().map(|v| -v).collect();
    Ok(probs.ln().mul_const(neg)?.sum())
}

/// `sum_i t_i ln t_i`, with `0 ln 0 = 0`.
fn neg_entropy(target: &[f64]) -> f64 {
    target.iter().filter(|t| **t > 0.0).map(|t| t * t.ln()).sum()
}

/// Direction of the annotator KL objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || prediction)`
    #[default]
    TargetToPrediction,
    /// `KL(prediction || target)`; needs a strictly positive target.
    PredictionToTarget,
}

fn constant_offset<'t>(x: Var<'t>, c: f64) -> Result<Var<'t>> {
    x.add_const(&[c])
}

/// KL divergence between the annotator distribution and `softmax(logits)`.
pub fn kl_to_annotator<'t>(logits: Var<'t>, target: &EmotionDistribution, direction: KlDirection) -> Result<Var<'t>> {
    check_len(&logits, target.len(), "kl_to_annotator")?;
    let t = target.as_slice();
    match direction {
        KlDirection::TargetToPrediction => {
            let neg: Vec<f64> = t.iter().map(|v| -v).collect();
            let cross = logits.log_softmax()?.mul_const(neg)?.sum();
            constant_offset(cross, neg_entropy(t))
        }
        KlDirection::PredictionToTarget => {
            if t.iter().any(|v| *v <= 0.0) {
                return Err(Error::invalid("reverse KL needs a strictly positive target"));
            }
            let neg_ln_t: Vec<f64> = t.iter().map(|v| -v.ln()).collect();
            let lp = logits.log_softmax()?;
            let p = logits.softmax()?;
            Ok(p.mul(&lp.add_const(&neg_ln_t)?)?.sum())
        }
    }
}

/// `KL(target || probs)` for an already-normalized probability vector.
pub fn kl_probs<'t>(probs: Var<'t>, target: &EmotionDistribution) -> Result<Var<'t>> {
    let cross = cross_entropy_probs(probs, target.as_slice())?;
    constant_offset(cross, neg_entropy(target.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn logits<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.input(&Tensor::new([v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let tape = Tape::new();
        let z = logits(&tape, &[0.3, -1.2, 2.0, 0.0]);
        let loss = label_smoothed_ce(z, 2, 0.0, 4).unwrap().item();
        let plain = -z.log_softmax().unwrap().value()[2];
        assert_eq!(loss, plain);
    }

    #[test]
    fn full_smoothing_ignores_class() {
        let tape = Tape::new();
        let z = logits(&tape, &[0.3, -1.2, 2.0]);
        let a = label_smoothed_ce(z, 0, 1.0, 3).unwrap().item();
        let b = label_smoothed_ce(z, 2, 1.0, 3).unwrap().item();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let tape = Tape::new();
        for eps in [0.0, 0.1, 0.5, 0.9] {
            let z = logits(&tape, &[0.7; 9]);
            let loss = label_smoothed_ce(z, 4, eps, 9).unwrap().item();
            assert!((loss - 9f64.ln()).abs() < 1e-12, "eps {eps}: {loss}");
        }
    }

    #[test]
    fn invalid_smoothing_and_class() {
        let tape = Tape::new();
        let z = logits(&tape, &[0.0; 3]);
        assert!(label_smoothed_ce(z, 0, -0.1, 3).is_err());
        assert!(label_smoothed_ce(z, 0, 1.5, 3).is_err());
        assert!(label_smoothed_ce(z, 3, 0.1, 3).is_err());
        assert!(label_smoothed_ce(z, 0, 0.1, 4).is_err());
    }

    #[test]
    fn smoothed_target_argmax_is_true_class() {
        let k = 9;
        for eps in [0.0, 0.3, 0.8, 0.88] {
            assert!(eps < (k - 1) as f64 / k as f64);
            let t = smoothed_target(5, eps, k).unwrap();
            assert_eq!(argmax(&t), 5);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_cases() {
        let tape = Tape::new();
        let t = EmotionDistribution::new(vec![1.0, 0.0], 1e-9).unwrap();
        let z = logits(&tape, &[0.0, 0.0]);
        let kl = kl_to_annotator(z, &t, KlDirection::TargetToPrediction).unwrap().item();
        assert!((kl - 2f64.ln()).abs() < 1e-15);

        let t = EmotionDistribution::new(vec![0.2, 0.5, 0.3], 1e-9).unwrap();
        let z = logits(&tape, &[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]);
        let kl = kl_to_annotator(z, &t, KlDirection::TargetToPrediction).unwrap().item();
        assert!(kl.abs() < 1e-12, "{kl}");
        let rev = kl_to_annotator(z, &t, KlDirection::PredictionToTarget).unwrap().item();
        assert!(rev.abs() < 1e-12, "{rev}");

        let onehot = EmotionDistribution::new(vec![0.0, 1.0, 0.0], 1e-9).unwrap();
        assert!(kl_to_annotator(z, &onehot, KlDirection::PredictionToTarget).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(EmotionDistribution::new(vec![0.5, 0.6], 1e-9).is_err());
        assert!(EmotionDistribution::new(vec![-0.1, 1.1], 1e-9).is_err());
        assert!(EmotionDistribution::new(vec![], 1e-9).is_err());
        assert_eq!(EmotionDistribution::new(vec![0.25, 0.75], 1e-9).unwrap().argmax(), 1);
    }
}
