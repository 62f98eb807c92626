//! Minibatch training, periodic evaluation and learning-rate sweeps.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, Dataset, MultimodalSample, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::models::{Family, LossConfig, Model, ModelConfig, TextInput};
use crate::nn::ForwardCtx;
use crate::optim::{adamw_step, AdamWConfig, OptimizerState, ScheduleConfig};
use crate::params::ParamId;
use crate::seed;
use crate::tape::{Tape, Var};

/// Minibatches are split into this many shards, each differentiated on its
/// own thread. The shard count is fixed so results do not depend on the host.
pub const GRAD_SHARDS: usize = 4;

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate every this many updates; 0 evaluates only at the end.
    pub eval_every: u64,
    pub max_grad_norm: Option<f64>,
    /// When set, replaces `schedule.total_steps` with this many passes over
    /// the train split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    /// Dataset manifest; command-line flags take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory; command-line flags take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(Family::SingleStreamBitransformer)
    }
}

impl RunConfig {
    /// Small settings that train on the synthetic task in seconds.
    pub fn desk(family: Family) -> Self {
        Self {
            model: ModelConfig::desk(family),
            schedule: ScheduleConfig {
                peak_lr: 2e-3,
                warmup_steps: 50,
                total_steps: 500,
            },
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            batch_size: 32,
            eval_every: 100,
            max_grad_norm: Some(1.0),
            epochs: None,
            data: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match self.epochs {
            // the step count is only known once the train split is
            None => self.schedule.validate()?,
            Some(_) => ScheduleConfig {
                total_steps: self.schedule.total_steps.max(self.schedule.warmup_steps),
                ..self.schedule
            }
            .validate()?,
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == Some(0) {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::config(format!("max_grad_norm {n} must be positive")));
            }
        }
        Ok(())
    }

    /// The schedule actually used on a train split of `train_len` samples.
    pub fn effective_schedule(&self, train_len: usize) -> Result<ScheduleConfig> {
        let mut s = self.schedule;
        if let Some(e) = self.epochs {
            s.total_steps = e * train_len.div_ceil(self.batch_size) as u64;
            s.validate()?;
        }
        Ok(s)
    }

    /// Checks that the model can read `dataset`.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let m = &self.model;
        let h = &dataset.header;
        if m.num_classes != h.num_classes {
            return Err(Error::config(format!(
                "model has {} classes, dataset has {}",
                m.num_classes, h.num_classes
            )));
        }
        if m.vocab_size < h.vocab.len() {
            return Err(Error::config(format!(
                "vocab_size {} is smaller than the dataset vocabulary ({})",
                m.vocab_size,
                h.vocab.len()
            )));
        }
        if m.num_regions > 0 && m.region_feature_dim != h.region_feature_dim {
            return Err(Error::config(format!(
                "region_feature_dim {} does not match the dataset ({})",
                m.region_feature_dim, h.region_feature_dim
            )));
        }
        if m.num_regions > h.k {
            return Err(Error::config(format!(
                "model reads {} regions, dataset stores {}",
                m.num_regions, h.k
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub final_train: EvalReport,
    pub final_val: Option<EvalReport>,
}

/// Mean loss and metrics over `samples` in evaluation mode.
pub fn evaluate_with_loss(
    model: &Model,
    samples: &[&MultimodalSample],
    class_names: &[String],
    loss: &LossConfig,
) -> Result<EvalReport> {
    let chunk = samples.len().div_ceil(eval::EVAL_SHARDS).max(1);
    let per_sample: Vec<(usize, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| {
                            let tape = Tape::new();
                            let (out, _) = model.forward_sample(&tape, s, &mut ForwardCtx::eval())?;
                            let pred = crate::losses::argmax(&out.probabilities()?.value());
                            Ok((pred, model.loss(&out, s, loss)?.item()))
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::with_capacity(samples.len());
        for h in handles {
            all.extend(
                h.join()
                    .map_err(|_| Error::Invariant("evaluation worker panicked".into()))??,
            );
        }
        Ok::<_, Error>(all)
    })?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let preds: Vec<usize> = per_sample.iter().map(|p| p.0).collect();
    let mut report = EvalReport::from_predictions(&truth, &preds, class_names)?;
    report.loss = Some(per_sample.iter().map(|p| p.1).sum::<f64>() / samples.len() as f64);
    Ok(report)
}

type ShardGrads = (f64, Vec<(ParamId, Vec<f64>)>);

#[allow(clippy::too_many_arguments)]
fn shard_gradients(
    model: &Model,
    samples: &[&MultimodalSample],
    tokens: &[Vec<u32>],
    masks: &[Vec<bool>],
    loss_cfg: &LossConfig,
    scale: f64,
    dropout_seed: u64,
    stream: &str,
) -> Result<ShardGrads> {
    let mut rng = seed::stream(dropout_seed, stream);
    let tape = Tape::new();
    let mut total: Option<Var<'_>> = None;
    for ((s, t), m) in samples.iter().zip(tokens).zip(masks) {
        let regions = tape.constant(&s.top_regions(model.config().num_regions)?);
        let text = TextInput {
            tokens: t,
            mask: Some(m),
        };
        let out = model.forward(&tape, text, regions, &mut ForwardCtx::train(&mut rng))?;
        let l = model.loss(&out, s, loss_cfg)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    let total = total
        .ok_or_else(|| Error::Invariant("empty gradient shard".into()))?
        .scale(scale);
    Ok((total.item(), tape.param_gradients(total, model.params())?))
}

/// Runs one optimizer update on `batch` and returns the mean batch loss.
fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    batch: &crate::data::Batch<'_>,
    cfg: &RunConfig,
    step: u64,
    lr: f64,
) -> Result<f64> {
    let n = batch.len();
    let chunk = n.div_ceil(GRAD_SHARDS);
    let scale = 1.0 / n as f64;
    let shards: Vec<ShardGrads> = {
        let model: &Model = model;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n.div_ceil(chunk))
                .map(|i| {
                    let r = i * chunk..((i + 1) * chunk).min(n);
                    let (samples, tokens, masks) =
                        (&batch.samples[r.clone()], &batch.tokens[r.clone()], &batch.text_mask[r]);
                    let stream = format!("dropout/{step}/{i}");
                    scope.spawn(move || {
                        shard_gradients(model, samples, tokens, masks, &cfg.loss, scale, cfg.seed, &stream)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .map_err(|_| Error::Invariant("training worker panicked".into()))?
                })
                .collect::<Result<Vec<_>>>()
        })?
    };
    let store = model.params_mut();
    store.zero_grad();
    let mut loss = 0.0;
    for (l, grads) in shards {
        loss += l;
        for (pid, g) in grads {
            store.get_mut(pid).accumulate_grad(&g)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Invariant(format!("non-finite training loss at step {step}")));
    }
    if let Some(max) = cfg.max_grad_norm {
        store.clip_grad_norm(max);
    }
    adamw_step(store, state, lr)?;
    Ok(loss)
}

/// Trains a freshly initialized model on the train split of `dataset`, with
/// metrics on the train and val splits every `eval_every` updates and after
/// the last one. Update `i` (from 0) uses the learning rate at step `i + 1`.
pub fn train(dataset: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with_sink(dataset, cfg, &mut |_| Ok(()))
}

/// [`train`], handing each metrics record to `sink` as soon as it exists.
pub fn train_with_sink(
    dataset: &Dataset,
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_compatible(dataset)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::config("dataset has no train samples"));
    }
    let names = dataset.class_names().to_vec();
    let mut state = OptimizerState::new(model.params(), cfg.optimizer);
    let mut records = Vec::new();
    let mut epoch = 0u64;
    let mut batches = BatchIterator::new(&train, cfg.batch_size, cfg.seed, epoch);
    let mut running = (0.0, 0usize);
    let schedule = cfg.effective_schedule(train.len())?;
    let total = schedule.total_steps;

    for i in 0..total {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = BatchIterator::new(&train, cfg.batch_size, cfg.seed, epoch);
                batches.next().expect("train split is non-empty")
            }
        };
        let lr = schedule.lr_at(i + 1);
        let loss = train_step(&mut model, &mut state, &batch, cfg, i, lr)?;
        running.0 += loss;
        running.1 += 1;
        let step = i + 1;
        if step == total || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let tr = eval::evaluate(&model, &train, &names)?;
            log::info!(
                "step {step}: train loss {:.4} acc {:.4} macro-F1 {:.4}",
                running.0 / running.1 as f64,
                tr.accuracy,
                tr.macro_f1
            );
            let rec = MetricsRecord {
                step,
                split: "train".into(),
                loss: running.0 / running.1 as f64,
                accuracy: tr.accuracy,
                macro_f1: tr.macro_f1,
                lr,
            };
            sink(&rec)?;
            records.push(rec);
            running = (0.0, 0);
            if !val.is_empty() {
                let v = evaluate_with_loss(&model, &val, &names, &cfg.loss)?;
                let rec = MetricsRecord {
                    step,
                    split: "val".into(),
                    loss: v.loss.unwrap_or(f64::NAN),
                    accuracy: v.accuracy,
                    macro_f1: v.macro_f1,
                    lr,
                };
                sink(&rec)?;
                records.push(rec);
            }
        }
    }
    let final_train = evaluate_with_loss(&model, &train, &names, &cfg.loss)?;
    let final_val = if val.is_empty() {
        None
    } else {
        Some(evaluate_with_loss(&model, &val, &names, &cfg.loss)?)
    };
    Ok(TrainOutcome {
        model,
        records,
        final_train,
        final_val,
    })
}

/// One named axis of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Parses `name=a,b,c` or `name=lo..hi:step` (inclusive).
pub fn parse_grid_axis(spec: &str) -> Result<GridAxis> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("grid axis `{spec}` must look like name=values")))?;
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::config(format!("`{s}` in grid axis `{spec}` is not a number")))
    };
    let values = if let Some((range, step)) = values.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| Error::config(format!("grid range `{range}` must look like lo..hi")))?;
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if step.is_nan() || step <= 0.0 || hi < lo {
            return Err(Error::config(format!("grid range in `{spec}` is empty")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| {
                let v = lo + i as f64 * step;
                format!("{v:.12e}").parse().expect("formatted float parses")
            })
            .collect()
    } else {
        values.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(Error::config(format!("grid axis `{spec}` has no values")));
    }
    Ok(GridAxis {
        name: name.trim().to_string(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrial {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// `None` when the combination was skipped.
    pub val_macro_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub trials: Vec<SweepTrial>,
    /// Index into `trials` of the best validation macro-F1 (first on ties).
    pub best: Option<usize>,
    pub best_model: Option<Model>,
}

/// Trains once per `(peak_lr, warmup_steps)` pair and keeps the model with
/// the best validation macro-F1. Pairs that do not form a valid schedule are
/// recorded as skipped.
pub fn sweep(dataset: &Dataset, base: &RunConfig, lrs: &[f64], warmups: &[u64]) -> Result<SweepOutcome> {
    if dataset.split(Split::Val).is_empty() {
        return Err(Error::config("sweep selects on the val split, which is empty"));
    }
    let train_len = dataset.split(Split::Train).len();
    let mut trials = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    for &warmup in warmups {
        for &lr in lrs {
            let mut cfg = base.clone();
            cfg.schedule.peak_lr = lr;
            cfg.schedule.warmup_steps = warmup;
            if let Err(e) = cfg.validate().and(cfg.effective_schedule(train_len).map(|_| ())) {
                log::warn!("skipping lr={lr} warmup={warmup}: {e}");
                trials.push(SweepTrial {
                    peak_lr: lr,
                    warmup_steps: warmup,
                    val_macro_f1: None,
                    val_accuracy: None,
                    skipped: Some(e.to_string()),
                });
                continue;
            }
            let out = train(dataset, &cfg)?;
            let val = out.final_val.expect("val split checked above");
            log::info!("lr={lr} warmup={warmup}: val macro-F1 {:.4}", val.macro_f1);
            trials.push(SweepTrial {
                peak_lr: lr,
                warmup_steps: warmup,
                val_macro_f1: Some(val.macro_f1),
                val_accuracy: Some(val.accuracy),
                skipped: None,
            });
            if best.as_ref().is_none_or(|b| val.macro_f1 > b.1) {
                best = Some((trials.len() - 1, val.macro_f1, out.model));
            }
        }
    }
    let (best, best_model) = match best {
        Some((i, _, m)) => (Some(i), Some(m)),
        None => (None, None),
    };
    Ok(SweepOutcome {
        trials,
        best,
        best_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let a = parse_grid_axis("lr=1e-5..6e-5:1e-5").unwrap();
        assert_eq!(a.name, "lr");
        assert_eq!(a.values, vec![1e-5, 2e-5, 3e-5, 4e-5, 5e-5, 6e-5]);
        let w = parse_grid_axis("warmup=1000,5000,10000").unwrap();
        assert_eq!(w.values, vec![1000.0, 5000.0, 10000.0]);
        assert!(parse_grid_axis("lr").is_err());
        assert!(parse_grid_axis("lr=3..1:1").is_err());
        assert!(parse_grid_axis("lr=a,b").is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::desk(Family::EarlyFusionAvg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let mut bad = cfg;
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }
}
