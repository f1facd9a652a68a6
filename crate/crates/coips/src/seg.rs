//! FAZ segmentation: the configurable U-shaped network, the combined
//! Dice + cross-entropy loss, 5-fold training, and mask inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::manifest::ManifestRow;
use crate::qa::QualityClass;
use crate::split::{kfold, Split};
use crate::tensor::net::{NetSpec, Network, UNetConfig};
use crate::tensor::optim::{LrSchedule, Optimizer};
use crate::tensor::tape::{Tape, Var};

/// Binary segmentation mask tied to its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FazMask {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
}

impl FazMask {
    pub fn new(pixels: Vec<u8>, height: usize, width: usize, source_id: String) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(FazMask {
            pixels,
            height,
            width,
            source_id,
        })
    }

    pub fn foreground_count(&self) -> u64 {
        self.pixels.iter().filter(|&&p| p != 0).count() as u64
    }

    /// Align-corners nearest-neighbor resample.
    pub fn resize_nearest(&self, target_h: usize, target_w: usize) -> FazMask {
        if target_h == self.height && target_w == self.width {
            return self.clone();
        }
        let sy = if target_h > 1 {
            (self.height - 1) as f64 / (target_h - 1) as f64
        } else {
            0.0
        };
        let sx = if target_w > 1 {
            (self.width - 1) as f64 / (target_w - 1) as f64
        } else {
            0.0
        };
        let mut pixels = vec![0u8; target_h * target_w];
        for y in 0..target_h {
            let src_y = ((y as f64 * sy).round() as usize).min(self.height - 1);
            for x in 0..target_w {
                let src_x = ((x as f64 * sx).round() as usize).min(self.width - 1);
                pixels[y * target_w + x] = self.pixels[src_y * self.width + src_x];
            }
        }
        FazMask {
            pixels,
            height: target_h,
            width: target_w,
            source_id: self.source_id.clone(),
        }
    }
}

/// Smoothed Dice per the +1 convention: `(2TP+1) / (|SR|+|GT|+1)`.
pub fn dice_coefficient(sr: &[u8], gt: &[u8]) -> Result<f64> {
    if sr.len() != gt.len() {
        return Err(Error::Shape("mask size mismatch".into()));
    }
    let tp: u64 = sr
        .iter()
        .zip(gt)
        .filter(|(&s, &g)| s != 0 && g != 0)
        .count() as u64;
    let ssum: u64 = sr.iter().filter(|&&v| v != 0).count() as u64;
    let gsum: u64 = gt.iter().filter(|&&v| v != 0).count() as u64;
    Ok((2.0 * tp as f64 + 1.0) / ((ssum + gsum) as f64 + 1.0))
}

/// Soft Dice on foreground probabilities, same smoothing.
pub fn dice_soft(fg_probs: &[f32], gt: &[u8]) -> Result<f64> {
    if fg_probs.len() != gt.len() {
        return Err(Error::Shape("mask size mismatch".into()));
    }
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut gsum = 0.0f64;
    for (&p, &g) in fg_probs.iter().zip(gt) {
        inter += p as f64 * g as f64;
        psum += p as f64;
        gsum += g as f64;
    }
    Ok((2.0 * inter + 1.0) / (psum + gsum + 1.0))
}

/// `lambda*CE + (1-lambda)*(1 - softDice)` on `[2,H,W]` logits.
pub fn combined_loss(tape: &mut Tape<f32>, logits: Var, gt: &FazMask, lambda: f64) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 3 || shape[1] != gt.height || shape[2] != gt.width {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match mask {}x{}",
            gt.height, gt.width
        )));
    }
    let gtf: Vec<f32> = gt.pixels.iter().map(|&p| p as f32).collect();
    tape.seg_combined_loss(logits, &gtf, lambda as f32)
}

pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<Network> {
    Network::build(NetSpec::UNet(cfg.clone()), seed)
}

/// Per-pixel argmax over the two logit channels; ties go to background so
/// the area estimate stays conservative.
pub fn predict_mask(network: &Network, patch: &ImageTensor) -> Result<FazMask> {
    let mut tape = Tape::new();
    let input = tape.leaf(patch.pixels.clone(), false)?;
    let (logits, _) = network.forward(&mut tape, input, false)?;
    let shape = tape.shape(logits).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let d = tape.data(logits);
    let hw = h * w;
    let pixels: Vec<u8> = (0..hw).map(|j| u8::from(d[hw + j] > d[j])).collect();
    FazMask::new(pixels, h, w, patch.source_id.clone())
}

/// Preprocesses to the network patch size, predicts, and resizes the mask
/// back to the source resolution.
pub fn predict_mask_full(network: &Network, img: &ImageTensor) -> Result<FazMask> {
    let cfg = match &network.spec {
        NetSpec::UNet(c) => c.clone(),
        _ => return Err(Error::Config("checkpoint is not a segmentation network".into())),
    };
    let patch = preprocess_for_seg(img, &cfg)?;
    let mask = predict_mask(network, &patch)?;
    Ok(mask.resize_nearest(img.height(), img.width()))
}

pub fn preprocess_for_seg(img: &ImageTensor, cfg: &UNetConfig) -> Result<ImageTensor> {
    let gray = imaging::to_grayscale(img);
    let resized = imaging::resize(&gray, cfg.patch_h, cfg.patch_w)?;
    Ok(imaging::zscore_normalize(&resized))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub net: UNetConfig,
    pub folds: usize,
    pub max_epochs: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub patience: u64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            net: UNetConfig::default(),
            folds: 5,
            max_epochs: 4,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.99,
            poly_exponent: 0.9,
            patience: 20,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegEpochLog {
    pub fold: usize,
    pub epoch: u64,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

pub fn seg_log_csv(rows: &[SegEpochLog]) -> String {
    let mut s = String::from("fold,epoch,train_loss,val_dice,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.fold, r.epoch, r.train_loss, r.val_dice, r.lr
        ));
    }
    s
}

pub struct SegTrainOutcome {
    pub network: Network,
    pub logs: Vec<SegEpochLog>,
    pub best_fold: usize,
    pub best_dice: f64,
}

struct SegSample {
    image: ImageTensor,
    mask: FazMask,
}

fn load_seg_samples(rows: &[&ManifestRow], cfg: &UNetConfig) -> Result<Vec<SegSample>> {
    rows.par_iter()
        .map(|r| {
            let bytes = std::fs::read(&r.image_path).map_err(|e| Error::io(&r.image_path, e))?;
            let img = imaging::decode_image(&bytes, r.field_mm, &r.source_id)?;
            let image = preprocess_for_seg(&img, cfg)?;
            let mbytes = std::fs::read(&r.mask_path).map_err(|e| Error::io(&r.mask_path, e))?;
            let mask = imaging::decode_mask_png(&mbytes, &r.source_id)?
                .resize_nearest(cfg.patch_h, cfg.patch_w);
            Ok(SegSample { image, mask })
        })
        .collect()
}

/// Trains one model per fold over the gradable/outstanding training images
/// and returns the checkpoint with the best fold-validation Dice.
pub fn train_segmenter(manifest: &[ManifestRow], cfg: &SegTrainConfig) -> Result<SegTrainOutcome> {
    cfg.net.validate()?;
    if cfg.folds == 0 {
        return Err(Error::Config("at least one fold required".into()));
    }
    // ungradable images never enter segmentation training
    let rows: Vec<&ManifestRow> = manifest
        .iter()
        .filter(|r| r.split == Split::Train && r.class != QualityClass::Ungradable)
        .collect();
    if rows.len() < cfg.folds {
        return Err(Error::Config(format!(
            "{} training masks cannot form {} folds",
            rows.len(),
            cfg.folds
        )));
    }
    let ids: Vec<String> = rows.iter().map(|r| r.source_id.clone()).collect();
    let folds = kfold(&ids, cfg.folds, cfg.seed)?;
    let samples = load_seg_samples(&rows, &cfg.net)?;
    let by_id: std::collections::HashMap<&str, usize> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.source_id.as_str(), i))
        .collect();

    let mut all_logs = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    for (f, fold_ids) in folds.iter().enumerate() {
        let val_idx: Vec<usize> = fold_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let in_val: std::collections::HashSet<usize> = val_idx.iter().copied().collect();
        let train_idx: Vec<usize> = (0..samples.len()).filter(|i| !in_val.contains(i)).collect();
        let (net, fold_logs, fold_best) =
            train_one_fold(&samples, &train_idx, &val_idx, cfg, f)?;
        all_logs.extend(fold_logs);
        if best.as_ref().map(|(b, _, _)| fold_best > *b).unwrap_or(true) {
            best = Some((fold_best, f, net));
        }
    }
    let (best_dice, best_fold, network) = best.expect("at least one fold trained");
    Ok(SegTrainOutcome {
        network,
        logs: all_logs,
        best_fold,
        best_dice,
    })
}

fn train_one_fold(
    samples: &[SegSample],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &SegTrainConfig,
    fold: usize,
) -> Result<(Network, Vec<SegEpochLog>, f64)> {
    let mut network = build_unet(&cfg.net, cfg.seed.wrapping_add(fold as u64))?;
    let mut optimizer = Optimizer::sgd_nesterov(cfg.lr0 as f32, cfg.momentum as f32)?;
    let schedule = LrSchedule::Poly {
        t_total: cfg.max_epochs,
        exponent: cfg.poly_exponent,
    };
    let mut logs = Vec::new();
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0u64;

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr_at(cfg.lr0, epoch)?;
        optimizer.lr = lr as f32;

        let mut order = train_idx.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                ^ (fold as u64).wrapping_mul(0xA24BAED4963EE407)
                ^ epoch.wrapping_mul(0x9E3779B97F4A7C15),
        );
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let inv = 1.0f32 / chunk.len() as f32;
            let results: Vec<(f64, Vec<Option<Vec<f32>>>)> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mut tape = Tape::new();
                    let input = tape.leaf(s.image.pixels.clone(), true)?;
                    let (logits, param_vars) = network.forward(&mut tape, input, true)?;
                    let loss = combined_loss(&mut tape, logits, &s.mask, cfg.net.lambda)?;
                    tape.backward(loss)?;
                    let grads = param_vars
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
                                *x += y * inv;
                            }
                        }
                        (None, Some(mut b)) => {
                            for y in b.iter_mut() {
                                *y *= inv;
                            }
                            *acc = Some(b);
                        }
                        _ => {}
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite segmentation loss at fold {fold} epoch {epoch}"
                )));
            }
            let mut tensors = network.flat_tensors_mut();
            optimizer.step(&mut tensors, &grads)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let dices: Vec<f64> = val_idx
            .par_iter()
            .map(|&i| {
                let s = &samples[i];
                let pred = predict_mask(&network, &s.image)?;
                dice_coefficient(&pred.pixels, &s.mask.pixels)
            })
            .collect::<Result<_>>()?;
        let val_dice = dices.iter().sum::<f64>() / dices.len().max(1) as f64;

        logs.push(SegEpochLog {
            fold,
            epoch,
            train_loss,
            val_dice,
            lr,
        });

        let improved = best.as_ref().map(|(b, _)| val_dice > *b).unwrap_or(true);
        if improved {
            best = Some((val_dice, network.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_dice, best_net) = best.expect("at least one epoch ran");
    Ok((best_net, logs, best_dice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mask_validation() {
        assert!(FazMask::new(vec![0, 1, 1], 2, 2, "m".into()).is_err());
        assert!(FazMask::new(vec![0, 2, 1, 0], 2, 2, "m".into()).is_err());
        let m = FazMask::new(vec![0, 1, 1, 0], 2, 2, "m".into()).unwrap();
        assert_eq!(m.foreground_count(), 2);
    }

    #[test]
    fn smoothed_dice_fixtures() {
        // identical masks
        assert!((dice_coefficient(&[1, 0, 1], &[1, 0, 1]).unwrap() - 1.0).abs() < 1e-12);
        // both empty: smoothing gives (0+1)/(0+1) = 1
        assert!((dice_coefficient(&[0, 0], &[0, 0]).unwrap() - 1.0).abs() < 1e-12);
        // tp=1, |SR|=2, |GT|=2 -> 3/5
        assert!((dice_coefficient(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap() - 0.6).abs() < 1e-12);
        assert!(dice_coefficient(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn soft_dice_matches_hard_dice_on_binary_probs() {
        let gt = [1u8, 0, 1, 0, 1];
        let sr = [1u8, 1, 0, 0, 1];
        let probs: Vec<f32> = sr.iter().map(|&v| v as f32).collect();
        let hard = dice_coefficient(&sr, &gt).unwrap();
        let soft = dice_soft(&probs, &gt).unwrap();
        assert!((hard - soft).abs() < 1e-9);
    }

    #[test]
    fn nearest_resize_fixture() {
        let m = FazMask::new(vec![1, 0, 0, 1], 2, 2, "m".into()).unwrap();
        let up = m.resize_nearest(3, 3);
        // align-corners: coords 0, 0.5, 1 round to source 0, 1, 1
        assert_eq!(up.pixels, vec![1, 0, 0, 0, 1, 1, 0, 1, 1]);
        assert_eq!(m.resize_nearest(2, 2).pixels, m.pixels);
    }

    #[test]
    fn tied_logits_predict_background() {
        let mut net = build_unet(&UNetConfig::default(), 0).unwrap();
        for t in net.flat_tensors_mut() {
            for v in t.data.iter_mut() {
                *v = 0.0;
            }
        }
        let img = ImageTensor::new(Tensor::zeros(vec![1, 64, 64]), 3.0, "tie".into()).unwrap();
        let mask = predict_mask(&net, &img).unwrap();
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn combined_loss_rejects_shape_mismatch() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 4, 4]), false).unwrap();
        let gt = FazMask::new(vec![0; 9], 3, 3, "m".into()).unwrap();
        assert!(combined_loss(&mut tape, logits, &gt, 0.5).is_err());
    }

    #[test]
    fn log_csv_has_header() {
        let csv = seg_log_csv(&[SegEpochLog {
            fold: 2,
            epoch: 1,
            train_loss: 0.4,
            val_dice: 0.9,
            lr: 0.01,
        }]);
        assert!(csv.starts_with("fold,epoch,train_loss,val_dice,lr\n"));
        assert!(csv.contains("2,1,0.4,0.9,0.01"));
    }
}
