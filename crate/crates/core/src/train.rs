//! Training loop, evaluation and the metrics log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::graph::Graph;
use crate::kernels;
use crate::metrics::{dice_coefficient, pixel_recall};
use crate::network::{argmax_classes, DualBranchSegNet, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::{Sample, GLAND, LESION};
use crate::seed;
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Seed stream used for per-epoch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4500;

/// Stacks samples into `[N, 1, D, H, W]` pre/post tensors and a flat lesion
/// target. With `post_only`, the post volume fills both inputs.
pub fn stack(samples: &[&Sample], post_only: bool) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("stack", "empty batch"))?;
    let vol_shape = first.post.shape().to_vec();
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&vol_shape);
    let mut pre = Vec::with_capacity(shape.iter().product());
    let mut post = Vec::with_capacity(pre.capacity());
    let mut targets = Vec::with_capacity(samples.len() * first.labels.data.len());
    for s in samples {
        if s.post.shape() != vol_shape.as_slice() || s.pre.shape() != vol_shape.as_slice() {
            return Err(Error::InvalidShape {
                shape: s.post.shape().to_vec(),
                reason: format!("batch mixes volume shapes (first is {vol_shape:?})"),
            });
        }
        pre.extend_from_slice(if post_only {
            s.post.data()
        } else {
            s.pre.data()
        });
        post.extend_from_slice(s.post.data());
        targets.extend(s.labels.lesion_target());
    }
    Ok((
        Tensor::new(shape.clone(), pre)?,
        Tensor::new(shape, post)?,
        targets,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: usize,
    pub dsc: f64,
    pub recall: f64,
    pub loss: f64,
    pub gland_voxels: usize,
    /// Gland voxels predicted as lesion.
    pub gland_marked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub dsc: f64,
    pub recall: f64,
    pub loss: f64,
    /// Fraction of all gland voxels predicted as lesion, if any gland exists.
    pub gland_marked_fraction: Option<f64>,
}

/// Lesion mask predicted by per-voxel argmax.
pub fn predict_mask(
    net: &DualBranchSegNet<f32>,
    sample: &Sample,
    post_only: bool,
) -> Result<(Vec<bool>, Tensor<f32>)> {
    let (pre, post, _) = stack(&[sample], post_only)?;
    let logits = net.forward(&pre, &post)?;
    let classes = argmax_classes(&logits)?;
    Ok((classes.iter().map(|&c| c == LESION).collect(), logits))
}

/// Per-case and mean metrics. Cases run in parallel; results are in input
/// order and independent of thread count.
pub fn evaluate(
    net: &DualBranchSegNet<f32>,
    samples: &[Sample],
    post_only: bool,
) -> Result<EvalReport> {
    let cases = samples
        .par_iter()
        .enumerate()
        .map(|(case, s)| -> Result<CaseMetrics> {
            let (pred, logits) = predict_mask(net, s, post_only)?;
            let gt = s.labels.mask(LESION);
            let gland = s.labels.mask(GLAND);
            let targets = s.labels.lesion_target();
            let probs = kernels::channel_softmax(&logits)?;
            let (loss, _) = kernels::soft_dice(&probs, &targets, DICE_SMOOTH)?;
            let gland_voxels = gland.iter().filter(|&&g| g).count();
            let gland_marked = pred.iter().zip(&gland).filter(|(&p, &g)| p && g).count();
            Ok(CaseMetrics {
                case,
                dsc: dice_coefficient(&pred, &gt)?,
                recall: pixel_recall(&pred, &gt)?,
                loss: loss as f64,
                gland_voxels,
                gland_marked,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cases))
}

fn summarize(cases: Vec<CaseMetrics>) -> EvalReport {
    let n = cases.len().max(1) as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(f).sum::<f64>() / n;
    let gland: usize = cases.iter().map(|c| c.gland_voxels).sum();
    let marked: usize = cases.iter().map(|c| c.gland_marked).sum();
    EvalReport {
        dsc: mean(|c| c.dsc),
        recall: mean(|c| c.recall),
        loss: mean(|c| c.loss),
        gland_marked_fraction: coverage_ratio(marked, gland),
        cases,
    }
}

fn coverage_ratio(marked: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| marked as f64 / total as f64)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub dsc: f64,
    pub recall: f64,
    pub loss: f64,
    pub train_loss: f64,
    pub wall_ms: u64,
    #[serde(skip)]
    pub cases: Vec<CaseMetrics>,
}

/// Training state over in-memory samples.
pub struct Trainer {
    pub state: Checkpoint,
    pub batch_size: usize,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        adam: AdamConfig,
        post_only: bool,
        batch_size: usize,
    ) -> Result<Self> {
        if post_only && model.variant != FusionVariant::PlainResidual {
            return Err(Error::Config(
                "post-only training requires the plain variant".into(),
            ));
        }
        let net = DualBranchSegNet::build(model)?;
        Ok(Self::resume(
            Checkpoint {
                net,
                optimizer: Adam::new(adam),
                training: TrainingState {
                    post_only,
                    ..TrainingState::default()
                },
            },
            batch_size,
        ))
    }

    pub fn resume(state: Checkpoint, batch_size: usize) -> Self {
        Self {
            state,
            batch_size: batch_size.max(1),
        }
    }

    pub fn net(&self) -> &DualBranchSegNet<f32> {
        &self.state.net
    }

    pub fn epoch(&self) -> usize {
        self.state.training.epoch
    }

    /// Visiting order for the next epoch; a function of (model seed, epoch).
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let s = seed::derive(
            self.state.net.config().seed ^ SHUFFLE_STREAM,
            self.epoch() as u64,
        );
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        order
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let post_only = self.state.training.post_only;
        let (pre, post, targets) = stack(batch, post_only)?;
        let diverged = Error::Diverged {
            epoch: self.epoch() + 1,
            step: self.state.optimizer.state.step as usize + 1,
        };
        let net = &mut self.state.net;
        let mut g = Graph::new();
        let result = (|| {
            let pre = g.input(pre)?;
            let post = g.input(post)?;
            let logits = net.forward_graph(&mut g, &net.params, pre, post)?;
            g.dice_loss(logits, &targets, DICE_SMOOTH)
        })();
        let loss = match result {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged),
            Err(e) => return Err(e),
        };
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(diverged);
        }
        match g.backward(loss, &mut net.params) {
            Err(Error::NonFinite { .. }) => return Err(diverged),
            other => other?,
        }
        drop(g);
        self.state.optimizer.step(&mut net.params);
        net.params.zero_grad();
        Ok(value as f64)
    }

    /// One pass over `train` in shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        let order = self.epoch_order(train.len());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)?;
            batches += 1;
        }
        self.state.training.epoch += 1;
        Ok(if batches == 0 {
            0.0
        } else {
            total / batches as f64
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport> {
        evaluate(&self.state.net, samples, self.state.training.post_only)
    }

    /// Trains `epochs` more epochs, evaluating on `val` after each. The
    /// callback sees each record, the current state and whether validation
    /// DSC improved on the best so far.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        epochs: usize,
        mut on_epoch: impl FnMut(&MetricsRecord, &Checkpoint, bool) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let start = Instant::now();
            let train_loss = self.train_epoch(train)?;
            let report = self.evaluate(val)?;
            let improved = self
                .state
                .training
                .best_val_dsc
                .is_none_or(|b| report.dsc > b);
            if improved {
                self.state.training.best_val_dsc = Some(report.dsc);
            }
            let record = MetricsRecord {
                epoch: self.epoch(),
                split: Split::Val,
                dsc: report.dsc,
                recall: report.recall,
                loss: report.loss,
                train_loss,
                wall_ms: start.elapsed().as_millis() as u64,
                cases: report.cases,
            };
            on_epoch(&record, &self.state, improved)?;
            records.push(record);
        }
        Ok(records)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: PathBuf,
    /// Last checkpoint; the best one goes to [`best_path`] of this.
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub variant: FusionVariant,
    pub post_only: bool,
    pub levels: usize,
    pub base_channels: usize,
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("model.rfck"),
            log: None,
            epochs: 30,
            batch_size: 2,
            lr: AdamConfig::default().lr,
            seed: 0,
            variant: model.variant,
            post_only: false,
            levels: model.levels,
            base_channels: model.base_channels,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            variant: self.variant,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `model.rfck` → `model.best.rfck`.
pub fn best_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    out.with_file_name(name)
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    pub records: Vec<MetricsRecord>,
}

/// Trains on a dataset directory, logging one JSON line per epoch and writing
/// last and best checkpoints. With zero epochs only the initial checkpoint
/// is written.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.data)?;
    let train_set = dataset.load_split(Split::Train)?;
    let val_set = dataset.load_split(Split::Val)?;

    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.training.post_only != cfg.post_only || ck.net.config().variant != cfg.variant {
                return Err(Error::Config(format!(
                    "resume checkpoint {} was trained with a different variant or input mode",
                    path.display()
                )));
            }
            let mut ck = ck;
            ck.optimizer.config.lr = cfg.lr;
            Trainer::resume(ck, cfg.batch_size)
        }
        None => Trainer::new(
            cfg.model_config(),
            cfg.adam_config(),
            cfg.post_only,
            cfg.batch_size,
        )?,
    };

    let mut log = match &cfg.log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut opts = OpenOptions::new();
            opts.create(true);
            if cfg.resume.is_some() {
                opts.append(true);
            } else {
                opts.write(true).truncate(true);
            }
            Some(opts.open(path)?)
        }
        None => None,
    };

    trainer.state.save(&cfg.out)?;
    let best = best_path(&cfg.out);
    if cfg.epochs == 0 || cfg.resume.is_none() {
        trainer.state.save(&best)?;
    }
    let records = trainer.run(
        &train_set,
        &val_set,
        cfg.epochs,
        |record, state, improved| {
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(record)?)?;
            }
            state.save(&cfg.out)?;
            if improved {
                state.save(&best)?;
            }
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        last: trainer.state,
        records,
    })
}
