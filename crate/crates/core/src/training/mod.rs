//! Optimization loop, evaluation and checkpoints.

mod adam;
mod checkpoint;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::{BnUpdate, CapsuleNet, Mode};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricSummary, SampleScore};
use crate::params::ParamStore;
use crate::pipeline::{self, Unit};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::vgg::VggPrefix;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Batch size used for inference when none is given.
pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Mini-batch size; derived from the input size when absent.
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Also update the VGG prefix.
    #[serde(default)]
    pub fine_tune_prefix: bool,
    /// Re-estimate batch-norm running statistics over the training split
    /// after every epoch.
    #[serde(default = "default_bn_refresh")]
    pub bn_refresh: bool,
}

fn default_epochs() -> usize {
    25
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}

fn default_checkpoint_every() -> usize {
    1
}

fn default_bn_refresh() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch: None,
            lr: default_lr(),
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
            fine_tune_prefix: false,
            bn_refresh: default_bn_refresh(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Explicit batch size, or 100 up to 128 px, 32 at 300 px, linear in the
    /// side between them and shrinking with the pixel count beyond.
    pub fn batch_size(&self, input_side: usize) -> usize {
        if let Some(b) = self.batch {
            return b;
        }
        let s = input_side as f64;
        let b = if s <= 128.0 {
            100.0
        } else if s <= 300.0 {
            100.0 - (s - 128.0) * 68.0 / 172.0
        } else {
            32.0 * (300.0 / s).powi(2)
        };
        (b.round() as usize).max(1)
    }
}

/// Network inputs prepared for training or scoring.
///
/// With a frozen prefix the items are cached feature maps, otherwise
/// normalized images.
#[derive(Clone, Debug)]
pub struct Examples<T: Element> {
    pub items: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub groups: Vec<String>,
    pub features: bool,
}

impl<T: Element> Examples<T> {
    /// Normalize and, unless the prefix is trainable, run it once per unit.
    pub fn prepare(prefix: &VggPrefix<T>, units: &[Unit]) -> Result<Self> {
        let images: Vec<Tensor<T>> = units
            .iter()
            .map(|u| prefix.normalize(&u.image.cast()))
            .collect::<Result<_>>()?;
        let features = !prefix.trainable;
        let items = if features { prefix.extract_many(&images)? } else { images };
        Ok(Examples {
            items,
            labels: units.iter().map(|u| u.label).collect(),
            ids: units.iter().map(|u| u.id.clone()).collect(),
            groups: units.iter().map(|u| u.group_id.clone()).collect(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Mutable training state: parameters, optimizer and progress.
#[derive(Clone, Debug)]
pub struct Trainer<T: Element> {
    pub prefix: VggPrefix<T>,
    pub net: CapsuleNet<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochReport>,
    /// Best validation result so far.
    pub best: Option<BestEpoch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_accuracy: f64,
}

/// Key of the per-epoch random stream under the run seed.
const EPOCH_STREAM: u64 = 0x6570_6f63;
/// Key of the stream fed to the routing noise during statistic refreshes.
const REFRESH_STREAM: u64 = 0x626e_7266;

fn stores<'a, T: Element>(prefix: &'a mut VggPrefix<T>, net: &'a mut CapsuleNet<T>) -> Vec<&'a mut ParamStore<T>> {
    let tune = prefix.trainable;
    let mut v = vec![net.store_mut()];
    if tune {
        v.push(prefix.store_mut());
    }
    v
}

impl<T: Element> Trainer<T> {
    pub fn new(mut prefix: VggPrefix<T>, net: CapsuleNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        prefix.trainable = config.fine_tune_prefix;
        Ok(Trainer {
            prefix,
            net,
            adam: AdamState::new(config.adam()),
            config,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Random stream for a 1-based epoch.
    pub fn epoch_stream(seed: u64, epoch: usize) -> RngStream {
        RngStream::new(seed).split(EPOCH_STREAM).split(epoch as u64)
    }

    fn record_inputs(&self, tape: &mut Tape<T>, x: Tensor<T>, features: bool) -> Result<crate::tape::Var> {
        let v = tape.constant(x);
        if features {
            Ok(v)
        } else {
            self.prefix.record(tape, v)
        }
    }

    /// One optimizer step on a batch; returns the summed loss and the number
    /// of correct predictions.
    fn batch_step(&mut self, x: Tensor<T>, labels: &[usize], features: bool, rng: &mut RngStream) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let f = self.record_inputs(&mut tape, x, features)?;
        let out = self.net.record_forward(&mut tape, f, Mode::Train, Some(rng), true)?;
        let loss = tape.cross_entropy(out.probs, labels)?;
        let lv = tape.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("loss diverged to {lv}")));
        }
        let correct = count_correct(tape.value(out.probs), labels);
        let grads = tape.backward(loss)?;
        self.adam.step(&mut stores(&mut self.prefix, &mut self.net), &grads)?;
        self.net.apply_bn_updates(&out.bn_updates)?;
        Ok((lv * labels.len() as f64, correct))
    }

    /// Replace the running statistics by the batch-size weighted average of
    /// train-mode batch statistics over `data`, taken in order with the
    /// current parameters.
    pub fn refresh_bn_statistics(&mut self, data: &Examples<T>, batch: usize) -> Result<()> {
        if data.is_empty() || batch == 0 {
            return Ok(());
        }
        let mut rng = RngStream::new(self.config.seed).split(REFRESH_STREAM);
        let mut sums: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for chunk in data.items.chunks(batch) {
            let mut tape = Tape::new();
            let f = self.record_inputs(&mut tape, Tensor::stack(chunk)?, data.features)?;
            let out = self.net.record_forward(&mut tape, f, Mode::Train, Some(&mut rng), false)?;
            if sums.is_empty() {
                sums = out
                    .bn_updates
                    .iter()
                    .map(|u| (u.layer.clone(), vec![0.0; u.mean.len()], vec![0.0; u.var.len()]))
                    .collect();
            }
            let w = chunk.len() as f64;
            for (acc, u) in sums.iter_mut().zip(&out.bn_updates) {
                for (a, m) in acc.1.iter_mut().zip(&u.mean) {
                    *a += w * m.as_f64();
                }
                for (a, v) in acc.2.iter_mut().zip(&u.var) {
                    *a += w * v.as_f64();
                }
            }
        }
        let n = data.len() as f64;
        let stats: Vec<BnUpdate<T>> = sums
            .into_iter()
            .map(|(layer, m, v)| BnUpdate {
                layer,
                mean: m.iter().map(|x| T::from_f64_lossy(x / n)).collect(),
                var: v.iter().map(|x| T::from_f64_lossy(x / n)).collect(),
            })
            .collect();
        self.net.set_bn_statistics(&stats)
    }

    /// One shuffled pass over `data` with batches of `batch`.
    pub fn train_epoch(&mut self, data: &Examples<T>, batch: usize) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if data.features == self.prefix.trainable {
            return Err(Error::Config(
                "examples were prepared for a different prefix setting".into(),
            ));
        }
        let epoch = self.epoch + 1;
        let mut rng = Self::epoch_stream(self.config.seed, epoch);
        let order = rng.permutation(data.len());
        let (mut loss, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(batch).enumerate() {
            let items: Vec<Tensor<T>> = idx.iter().map(|&i| data.items[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (l, c) = self
                .batch_step(Tensor::stack(&items)?, &labels, data.features, &mut rng)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                    other => other,
                })?;
            loss += l;
            correct += c;
        }
        if self.config.bn_refresh {
            self.refresh_bn_statistics(data, batch)?;
        }
        let report = EpochReport {
            epoch,
            mean_loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        self.epoch = epoch;
        self.history.push(report);
        Ok(report)
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult<T: Element> {
    /// Snapshot of the best epoch (earliest on ties), if that epoch was
    /// trained by this call.
    pub best: Option<Trainer<T>>,
    /// Best validation result including epochs before a resume.
    pub best_epoch: Option<BestEpoch>,
    /// Validation accuracy per epoch trained by this call.
    pub val_accuracy: Vec<f64>,
}

/// Per-epoch callback of [`fit`]: the trainer after the epoch, its report,
/// the validation report and whether it is a new best.
pub type EpochHook<'a, T> = dyn FnMut(&Trainer<T>, &EpochReport, Option<&ScoreReport>, bool) -> Result<()> + 'a;

/// Train from the trainer's current epoch up to `config.epochs`, scoring
/// `val` after each epoch and keeping the best snapshot.
pub fn fit<T: Element>(
    trainer: &mut Trainer<T>,
    train: &Examples<T>,
    val: Option<&Examples<T>>,
    batch: usize,
    class_names: &[String],
    hook: &mut EpochHook<'_, T>,
) -> Result<FitResult<T>> {
    let mut out = FitResult {
        best: None,
        best_epoch: trainer.best,
        val_accuracy: Vec::new(),
    };
    while trainer.epoch < trainer.config.epochs {
        let report = trainer.train_epoch(train, batch)?;
        let scored = match val {
            Some(v) if !v.is_empty() => Some(evaluate(
                &trainer.prefix,
                &trainer.net,
                v,
                class_names,
                metrics::DEFAULT_THRESHOLD,
            )?),
            _ => None,
        };
        let mut improved = false;
        if let Some(r) = &scored {
            let acc = r.unit_metrics.accuracy;
            out.val_accuracy.push(acc);
            if trainer.best.is_none_or(|b| acc > b.val_accuracy) {
                improved = true;
                trainer.best = Some(BestEpoch {
                    epoch: report.epoch,
                    val_accuracy: acc,
                });
                out.best_epoch = trainer.best;
                out.best = Some(trainer.clone());
            }
        }
        hook(trainer, &report, scored.as_ref(), improved)?;
    }
    Ok(out)
}

fn count_correct<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(p, &l)| {
            let p: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
            metrics::predicted_class(&p, metrics::DEFAULT_THRESHOLD) == l
        })
        .count()
}

/// Infer-mode class probabilities for every example, in order.
pub fn predict_examples<T: Element>(
    prefix: &VggPrefix<T>,
    net: &CapsuleNet<T>,
    data: &Examples<T>,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.items.chunks(batch.max(1)) {
        let x = Tensor::stack(chunk)?;
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let f = if data.features { v } else { prefix.record(&mut tape, v)? };
        let fwd = net.record_forward(&mut tape, f, Mode::Infer, None, false)?;
        let p = tape.value(fwd.probs);
        out.extend(p.data().chunks(p.shape()[1]).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Per-unit and per-group scores with their metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub class_names: Vec<String>,
    pub threshold: f64,
    pub samples: Vec<SampleScore>,
    pub groups: Vec<SampleScore>,
    pub unit_metrics: MetricSummary,
    pub group_metrics: MetricSummary,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    class_names: &'a [String],
    threshold: f64,
    units: &'a MetricSummary,
    groups: &'a MetricSummary,
}

impl ScoreReport {
    /// Metrics recomputed from per-unit scores.
    pub fn from_samples(samples: Vec<SampleScore>, class_names: Vec<String>, threshold: f64) -> Result<Self> {
        let k = class_names.len();
        let groups = pipeline::aggregate_groups(&samples)?;
        Ok(ScoreReport {
            unit_metrics: metrics::summarize(&samples, k, threshold)?,
            group_metrics: metrics::summarize(&groups, k, threshold)?,
            class_names,
            threshold,
            samples,
            groups,
        })
    }

    /// Metrics as pretty JSON (scores go to the score file).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportJson {
            class_names: &self.class_names,
            threshold: self.threshold,
            units: &self.unit_metrics,
            groups: &self.group_metrics,
        })
        .expect("report serializes")
            + "\n"
    }

    pub fn summary_text(&self) -> String {
        metrics::summary_table("per unit", &self.unit_metrics, &self.class_names)
            + &metrics::summary_table("per group", &self.group_metrics, &self.class_names)
    }
}

/// Score every example in infer mode. Parameters are only read.
pub fn evaluate<T: Element>(
    prefix: &VggPrefix<T>,
    net: &CapsuleNet<T>,
    data: &Examples<T>,
    class_names: &[String],
    threshold: f64,
) -> Result<ScoreReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if class_names.len() != net.config().classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class network",
            class_names.len(),
            net.config().classes
        )));
    }
    let probs = predict_examples(prefix, net, data, EVAL_BATCH)?;
    let samples = probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| SampleScore {
            sample_id: data.ids[i].clone(),
            group_id: data.groups[i].clone(),
            label: data.labels[i],
            probs: p,
        })
        .collect();
    ScoreReport::from_samples(samples, class_names.to_vec(), threshold)
}

/// Per-unit scores as JSON lines.
pub fn scores_to_jsonl(samples: &[SampleScore]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("scores serialize") + "\n")
        .collect()
}

pub fn scores_from_jsonl(text: &str) -> Result<Vec<SampleScore>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("score line {}: {e}", n + 1))))
        .collect()
}

pub fn write_scores(path: &Path, samples: &[SampleScore]) -> Result<()> {
    fs::write(path, scores_to_jsonl(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<SampleScore>> {
    scores_from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{CapsuleNetConfig, RoutingConfig};

    fn tiny() -> (Trainer<f32>, Examples<f32>) {
        let mut rng = RngStream::new(5);
        let prefix = VggPrefix::<f32>::random(&mut rng);
        let net = CapsuleNet::new(CapsuleNetConfig::light(2), &mut rng).unwrap();
        let units: Vec<Unit> = (0..6)
            .map(|i| Unit {
                id: format!("u{i}"),
                group_id: format!("g{}", i / 2),
                label: (i / 2) % 2,
                image: Tensor::from_vec([3, 24, 24], (0..3 * 24 * 24).map(|_| rng.uniform() as f32).collect()).unwrap(),
            })
            .collect();
        let ex = Examples::prepare(&prefix, &units).unwrap();
        let cfg = TrainConfig { epochs: 2, batch: Some(4), ..Default::default() };
        (Trainer::new(prefix, net, cfg).unwrap(), ex)
    }

    #[test]
    fn batch_size_rule() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size(100), 100);
        assert_eq!(c.batch_size(128), 100);
        assert_eq!(c.batch_size(300), 32);
        assert_eq!(TrainConfig { batch: Some(7), ..c }.batch_size(300), 7);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: Some(0), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut t, ex) = tiny();
        t.adam.config.lr = 0.0;
        let before: Vec<_> = t.net.store().trainable().map(|e| e.value.clone()).collect();
        t.train_epoch(&ex, 4).unwrap();
        let after: Vec<_> = t.net.store().trainable().map(|e| e.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn epochs_are_deterministic() {
        let (mut a, ex) = tiny();
        let (mut b, _) = tiny();
        assert_eq!(a.train_epoch(&ex, 4).unwrap(), b.train_epoch(&ex, 4).unwrap());
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn refreshed_statistics_match_train_mode() {
        let (mut t, ex) = tiny();
        t.net.set_routing(RoutingConfig { noise_sigma: 0.0, dropout: 0.0, ..t.net.config().routing }).unwrap();
        t.refresh_bn_statistics(&ex, ex.len()).unwrap();
        let x = Tensor::stack(&ex.items).unwrap();
        let mut rng = RngStream::new(1);
        let train = t.net.forward_batch(&x, Mode::Train, Some(&mut rng)).unwrap();
        let infer = t.net.forward_batch(&x, Mode::Infer, None).unwrap();
        for (a, b) in train.probs.data().iter().zip(infer.probs.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fit_keeps_best_across_resume() {
        let (mut t, ex) = tiny();
        let names = vec!["real".to_string(), "fake".to_string()];
        t.best = Some(BestEpoch { epoch: 1, val_accuracy: 1.0 });
        t.epoch = 1;
        let r = fit(&mut t, &ex, Some(&ex), 4, &names, &mut |_, _, _, best| {
            assert!(!best);
            Ok(())
        })
        .unwrap();
        assert!(r.best.is_none());
        assert_eq!(r.best_epoch.unwrap().epoch, 1);
        assert_eq!(r.val_accuracy.len(), 1);
    }

    #[test]
    fn empty_split_rejected() {
        let (mut t, mut ex) = tiny();
        ex.items.clear();
        assert!(matches!(t.train_epoch(&ex, 4), Err(Error::Data(_))));
    }

    #[test]
    fn evaluation_is_read_only_and_replayable() {
        let (t, ex) = tiny();
        let names = vec!["real".to_string(), "fake".to_string()];
        let before = t.net.clone();
        let r = evaluate(&t.prefix, &t.net, &ex, &names, 0.5).unwrap();
        assert_eq!(t.net, before);
        assert_eq!(r.groups.len(), 3);
        let replay = scores_from_jsonl(&scores_to_jsonl(&r.samples)).unwrap();
        assert_eq!(ScoreReport::from_samples(replay, names, 0.5).unwrap(), r);
    }
}
