//! Three-class image quality assessment: class weighting, weighted
//! cross-entropy, the desk-scale CNN, the training loop with early stopping,
//! and inference.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::manifest::ManifestRow;
use crate::split::Split;
use crate::tensor::net::{ClassifierSpec, NetSpec, Network};
use crate::tensor::optim::{LrSchedule, Optimizer};
use crate::tensor::tape::{softmax_row, Tape, Var};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityClass {
    Ungradable = 0,
    Gradable = 1,
    Outstanding = 2,
}

impl QualityClass {
    pub const ALL: [QualityClass; 3] = [
        QualityClass::Ungradable,
        QualityClass::Gradable,
        QualityClass::Outstanding,
    ];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("class index {i} out of range")))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            QualityClass::Ungradable => "ungradable",
            QualityClass::Gradable => "gradable",
            QualityClass::Outstanding => "outstanding",
        }
    }
}

impl fmt::Display for QualityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown quality class '{s}'")))
    }
}

/// Predicted quality with optional per-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityLabel {
    pub category: QualityClass,
    pub probs: Option<[f64; NUM_CLASSES]>,
}

/// Inverse-frequency class weights: `w_i = sum(counts) / (K * counts_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config(
            "every class needs at least one training sample".into(),
        ));
    }
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let weights = counts
        .iter()
        .map(|&c| total as f64 / (k * c as f64))
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
    })
}

/// Class-weighted cross-entropy on `[N,K]` logits, normalized by the sum of
/// the per-sample weights over the batch.
pub fn weighted_ce_loss(
    tape: &mut Tape<f32>,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<Var> {
    let sample_weights: Vec<f32> = labels
        .iter()
        .map(|&l| {
            weights
                .weights
                .get(l)
                .copied()
                .map(|w| w as f32)
                .ok_or_else(|| Error::Contract(format!("label {l} out of range")))
        })
        .collect::<Result<_>>()?;
    let norm: f32 = sample_weights.iter().sum();
    tape.weighted_ce(logits, labels, &sample_weights, norm)
}

pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<Network> {
    if spec.num_classes != NUM_CLASSES {
        return Err(Error::Config(format!(
            "quality classifier needs {NUM_CLASSES} output classes, spec has {}",
            spec.num_classes
        )));
    }
    Network::build(NetSpec::Classifier(spec.clone()), seed)
}

/// Resize to the network input size, collapse to grayscale, Z-score
/// normalize.
pub fn preprocess_for_qa(img: &ImageTensor, input_size: usize) -> Result<ImageTensor> {
    let gray = imaging::to_grayscale(img);
    let resized = imaging::resize(&gray, input_size, input_size)?;
    Ok(imaging::zscore_normalize(&resized))
}

/// Argmax of the softmax logits; ties break toward the lowest category
/// index so ambiguous images fall on the conservative (ungradable) side.
pub fn predict_quality(network: &Network, img: &ImageTensor) -> Result<QualityLabel> {
    let logits = classifier_logits(network, img)?;
    let probs = softmax_row(&logits);
    let mut best = 0usize;
    for (i, &p) in logits.iter().enumerate() {
        if p > logits[best] {
            best = i;
        }
    }
    Ok(QualityLabel {
        category: QualityClass::from_index(best)?,
        probs: Some([probs[0] as f64, probs[1] as f64, probs[2] as f64]),
    })
}

fn classifier_logits(network: &Network, img: &ImageTensor) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let input = tape.leaf(img.pixels.clone(), false)?;
    let (logits, _) = network.forward(&mut tape, input, false)?;
    Ok(tape.data(logits).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaTrainConfig {
    pub net: ClassifierSpec,
    pub max_epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    /// Cosine annealing period; defaults to `max_epochs`.
    pub t_max: u64,
    pub patience: u64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        QaTrainConfig {
            net: ClassifierSpec::default(),
            max_epochs: 40,
            batch_size: 16,
            lr0: 0.001,
            t_max: 40,
            patience: 20,
            augment: true,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaEpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn qa_log_csv(rows: &[QaEpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
        ));
    }
    s
}

struct Sample {
    /// raw [0,1] grayscale pixels at network input size, pre-normalization
    raw: ImageTensor,
    label: usize,
}

fn load_samples(rows: &[&ManifestRow], input_size: usize) -> Result<Vec<Sample>> {
    rows.par_iter()
        .map(|r| {
            let bytes = std::fs::read(&r.image_path).map_err(|e| Error::io(&r.image_path, e))?;
            let img = imaging::decode_image(&bytes, r.field_mm, &r.source_id)?;
            let gray = imaging::to_grayscale(&img);
            let raw = imaging::resize(&gray, input_size, input_size)?;
            Ok(Sample {
                raw,
                label: r.class.index(),
            })
        })
        .collect()
}

/// Trains the quality classifier with weighted CE, Adam and cosine
/// annealing; early-stops on the validation (test-split) loss and returns
/// the best-validation network with the per-epoch log.
pub fn train_classifier(
    manifest: &[ManifestRow],
    cfg: &QaTrainConfig,
) -> Result<(Network, Vec<QaEpochLog>)> {
    cfg.net.validate()?;
    let train_rows: Vec<&ManifestRow> =
        manifest.iter().filter(|r| r.split == Split::Train).collect();
    let val_rows: Vec<&ManifestRow> =
        manifest.iter().filter(|r| r.split == Split::Test).collect();
    if val_rows.is_empty() {
        return Err(Error::Config("no validation (test-split) samples".into()));
    }
    let mut counts = [0u64; NUM_CLASSES];
    for r in &train_rows {
        counts[r.class.index()] += 1;
    }
    let weights = class_weights(&counts)?;

    let input_size = cfg.net.input_size;
    let train = load_samples(&train_rows, input_size)?;
    let val = load_samples(&val_rows, input_size)?;
    let val_prepared: Vec<(ImageTensor, usize)> = val
        .iter()
        .map(|s| (imaging::zscore_normalize(&s.raw), s.label))
        .collect();

    let mut network = build_classifier(&cfg.net, cfg.seed)?;
    let mut optimizer = Optimizer::adam(cfg.lr0 as f32)?;
    let schedule = LrSchedule::CosineAnnealing { t_max: cfg.t_max };

    let mut logs = Vec::new();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0u64;

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr_at(cfg.lr0, epoch.min(cfg.t_max))?;
        optimizer.lr = lr as f32;

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch.wrapping_mul(0x9E3779B97F4A7C15)));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_norm: f32 = chunk
                .iter()
                .map(|&i| weights.weights[train[i].label] as f32)
                .sum();
            // per-sample graphs in parallel, reduced in fixed order
            let results: Vec<(f64, Vec<Option<Vec<f32>>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let img = if cfg.augment {
                        let mut srng = ChaCha8Rng::seed_from_u64(
                            cfg.seed
                                ^ epoch.wrapping_mul(0x9E3779B97F4A7C15)
                                ^ (i as u64).wrapping_mul(0xD1B54A32D192ED03),
                        );
                        let mut img = s.raw.clone();
                        if srng.gen_bool(0.5) {
                            img = imaging::hflip(&img);
                        }
                        let angle = srng.gen_range(-15.0..=15.0);
                        img = imaging::rotate(&img, angle)?;
                        img
                    } else {
                        s.raw.clone()
                    };
                    let img = imaging::zscore_normalize(&img);
                    let mut tape = Tape::new();
                    let input = tape.leaf(img.pixels, true)?;
                    let (logits, param_vars) = network.forward(&mut tape, input, true)?;
                    let w = weights.weights[s.label] as f32;
                    let loss =
                        tape.weighted_ce(logits, &[s.label], &[w], batch_norm)?;
                    tape.backward(loss)?;
                    let grads: Vec<Option<Vec<f32>>> = param_vars
                        .iter()
                        .map(|&v| tape.grad(v).map(|g| g.to_vec()))
                        .collect();
                    Ok((tape.data(loss)[0] as f64, grads))
                })
                .collect::<Result<_>>()?;

            let n_params = network.flat_tensors().len();
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; n_params];
            let mut batch_loss = 0.0f64;
            for (loss, g) in results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    match (acc.as_mut(), gi) {
                        (Some(a), Some(b)) => {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                        (None, Some(b)) => *acc = Some(b),
                        _ => {}
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let mut tensors = network.flat_tensors_mut();
            optimizer.step(&mut tensors, &grads)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let (val_loss, val_acc) = evaluate_classifier(&network, &val_prepared, &weights)?;
        logs.push(QaEpochLog {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        });

        let improved = best.as_ref().map(|(b, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, network.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, logs))
}

/// Validation weighted-CE loss and accuracy on preprocessed images.
pub fn evaluate_classifier(
    network: &Network,
    samples: &[(ImageTensor, usize)],
    weights: &ClassWeights,
) -> Result<(f64, f64)> {
    let logits: Vec<(Vec<f32>, usize)> = samples
        .par_iter()
        .map(|(img, label)| Ok((classifier_logits(network, img)?, *label)))
        .collect::<Result<_>>()?;
    let mut tape: Tape<f32> = Tape::new();
    let all: Vec<f32> = logits.iter().flat_map(|(l, _)| l.iter().copied()).collect();
    let labels: Vec<usize> = logits.iter().map(|(_, l)| *l).collect();
    let lv = tape.leaf(Tensor::new(vec![labels.len(), NUM_CLASSES], all)?, false)?;
    let loss = weighted_ce_loss(&mut tape, lv, &labels, weights)?;
    let val_loss = tape.data(loss)[0] as f64;
    let correct = logits
        .iter()
        .filter(|(l, label)| {
            let mut best = 0usize;
            for (i, &v) in l.iter().enumerate() {
                if v > l[best] {
                    best = i;
                }
            }
            best == *label
        })
        .count();
    Ok((val_loss, correct as f64 / samples.len() as f64))
}
