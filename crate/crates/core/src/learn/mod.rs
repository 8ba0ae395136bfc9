//! Two-stage learning pipeline with explicit, testable gradients.
//!
//! Stage one masks random patches of unlabelled flow windows and trains an
//! encoder–decoder to reconstruct them under MSE. Stage two fine-tunes the
//! pretrained encoder jointly with a pooled classifier head under focal
//! loss. Every layer's backward pass is hand-written and validated against
//! central finite differences in `f64`; training runs in `f32`.
//!
//! Determinism contract: for a fixed seed (and the fixed ordered reductions
//! used throughout), repeated runs produce bit-identical weights.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod mask;
pub mod net;
pub mod optim;
pub mod scalar;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{ActivityClassId, ClassTable, LabeledDataset};
use crate::echo::{extract_windows, EchoProfile, FlowWindow, WINDOW_HOP};

pub use mask::{random_mask, MaskConfig};
pub use net::{ArchConfig, ClassifierHead, Decoder, Encoder};
pub use scalar::Scalar;

const SHUFFLE_STREAM: u64 = 0x51F7;
const DROPOUT_STREAM: u64 = 0xD209;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("window shape {got:?} does not match the architecture {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("class table mismatch: {0}")]
    ClassMismatch(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. The defaults are the full-scale settings;
/// experiment harnesses shrink epochs and batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_init: f64,
    pub gamma_focal: f64,
    pub dropout_p: f64,
    pub seed: u64,
    /// Restrict the reconstruction loss to masked pixels instead of the
    /// whole window.
    pub masked_loss_only: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            pretrain_epochs: 100,
            finetune_epochs: 50,
            lr_init: 1e-3,
            gamma_focal: 0.5,
            dropout_p: 0.2,
            seed: 0,
            masked_loss_only: false,
            arch: ArchConfig::default(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Write a training log as CSV (`epoch,loss,lr`).
pub fn write_training_log(path: &std::path::Path, log: &[EpochLog]) -> Result<(), LearnError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,lr")?;
    for row in log {
        writeln!(f, "{},{},{}", row.epoch, row.loss, row.lr)?;
    }
    Ok(())
}

/// Pretrained autoencoder weights plus the per-epoch loss trace.
pub struct PretrainOutcome<T: Scalar> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub log: Vec<EpochLog>,
}

/// A trained classifier: encoder, head and the class table it predicts.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub encoder: Encoder<T>,
    pub head: ClassifierHead<T>,
    pub classes: ClassTable,
    pub arch: ArchConfig,
    /// Set when the training set contained a single class; such a model is
    /// trivially perfect on its training data and useless elsewhere.
    pub degenerate_single_class: bool,
}

/// One per-second prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub time_s: f64,
    pub class: ActivityClassId,
    pub probs: Vec<f64>,
}

fn check_window_shape(
    shape: (usize, usize, usize),
    arch: &ArchConfig,
) -> Result<(), LearnError> {
    let expected = (arch.in_channels, arch.input_hw.0, arch.input_hw.1);
    if shape != expected {
        return Err(LearnError::ShapeMismatch { expected, got: shape });
    }
    Ok(())
}

/// Stack windows into a `[B, C, H, W]` batch tensor.
pub fn windows_to_batch<T: Scalar>(windows: &[&FlowWindow]) -> Array4<T> {
    let (c, h, w) = windows[0].shape();
    let mut x = Array4::<T>::zeros((windows.len(), c, h, w));
    for (bi, win) in windows.iter().enumerate() {
        let mut slot = x.index_axis_mut(Axis(0), bi);
        ndarray::Zip::from(&mut slot).and(&win.data).for_each(|d, &s| *d = T::from_f64(s as f64));
    }
    x
}

/// Batch index lists for one epoch; a trailing singleton is merged into the
/// previous batch so batch statistics stay meaningful.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> =
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Loss and full gradient set for one masked-reconstruction batch.
pub fn pretrain_loss_and_grads<T: Scalar>(
    encoder: &mut Encoder<T>,
    decoder: &mut Decoder<T>,
    masked: &Array4<T>,
    target: &Array4<T>,
    mask: Option<&Array4<u8>>,
) -> (f64, net::EncoderGrads<T>, net::DecoderGrads<T>) {
    let (feat, enc_cache) = encoder.forward_train(masked);
    let (recon, dec_cache) = decoder.forward_train(&feat);
    let (loss_value, drecon) = match mask {
        Some(m) => {
            (loss::masked_mse(&recon, target, m), loss::masked_mse_backward(&recon, target, m))
        }
        None => (loss::mse(&recon, target), loss::mse_backward(&recon, target)),
    };
    let (dfeat, dec_grads) = decoder.backward(&dec_cache, &drecon);
    let (_, enc_grads) = encoder.backward(&enc_cache, &dfeat);
    (loss_value, enc_grads, dec_grads)
}

/// Loss and full gradient set for one focal-loss classification batch.
pub fn finetune_loss_and_grads<T: Scalar>(
    encoder: &mut Encoder<T>,
    head: &mut ClassifierHead<T>,
    x: &Array4<T>,
    labels: &[usize],
    gamma: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> (f64, net::EncoderGrads<T>, net::HeadGrads<T>) {
    let (feat, enc_cache) = encoder.forward_train(x);
    let (fh, fw) = (feat.shape()[2], feat.shape()[3]);
    let pooled = layers::global_avg_pool(&feat);
    let (logits, head_cache) = head.forward_train(&pooled, dropout_rng);
    let probs = loss::softmax_rows(&logits);
    let (loss_value, dlogits) = loss::focal_loss_batch(&probs, labels, gamma);
    let (dpooled, head_grads) = head.backward(&head_cache, &dlogits);
    let dfeat = layers::global_avg_pool_backward(&dpooled, fh, fw);
    let (_, enc_grads) = encoder.backward(&enc_cache, &dfeat);
    (loss_value, enc_grads, head_grads)
}

/// Masked-reconstruction pretraining over unlabelled windows.
///
/// Adam with a cosine-annealed learning rate; the loss is the MSE between
/// the reconstruction and the unmasked window (full-window by default,
/// masked pixels only behind `masked_loss_only`).
pub fn pretrain<T: Scalar>(
    windows: &[FlowWindow],
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
) -> Result<PretrainOutcome<T>, LearnError> {
    if windows.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    for w in windows {
        check_window_shape(w.shape(), &cfg.arch)?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Encoder::<T>::new(&cfg.arch, &mut init_rng);
    let mut decoder = Decoder::<T>::new(&cfg.arch, &mut init_rng);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_cfg.rng_seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SHUFFLE_STREAM));
    let mut adam = optim::Adam::<T>::new();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);

    for epoch in 0..cfg.pretrain_epochs {
        let lr = optim::cosine_lr(cfg.lr_init, epoch, cfg.pretrain_epochs);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(windows.len(), cfg.batch_size, &mut shuffle_rng) {
            let originals: Vec<&FlowWindow> = batch.iter().map(|&i| &windows[i]).collect();
            let target = windows_to_batch::<T>(&originals);
            let (c, h, w) = originals[0].shape();
            let mut masked = target.clone();
            let mut mask_tensor = Array4::<u8>::zeros((batch.len(), c, h, w));
            for (bi, win) in originals.iter().enumerate() {
                let (mw, m) = mask::random_mask(win, mask_cfg, &mut mask_rng);
                let mut slot = masked.index_axis_mut(Axis(0), bi);
                ndarray::Zip::from(&mut slot)
                    .and(&mw.data)
                    .for_each(|d, &s| *d = T::from_f64(s as f64));
                mask_tensor.index_axis_mut(Axis(0), bi).assign(&m);
            }
            let mask_opt = cfg.masked_loss_only.then_some(&mask_tensor);
            let (batch_loss, enc_grads, dec_grads) =
                pretrain_loss_and_grads(&mut encoder, &mut decoder, &masked, &target, mask_opt);
            if !batch_loss.is_finite() {
                return Err(LearnError::NonFiniteLoss { epoch });
            }
            let mut params = encoder.trainable_mut();
            params.extend(decoder.trainable_mut());
            let mut grads = enc_grads.flat();
            grads.extend(dec_grads.flat());
            adam.step(lr, &mut params, &grads);
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        log.push(EpochLog { epoch, loss: epoch_loss / seen as f64, lr });
    }
    Ok(PretrainOutcome { encoder, decoder, log })
}

/// Joint fine-tuning of encoder and classifier head under focal loss.
///
/// `encoder = None` trains from random initialisation (the no-pretraining
/// baseline).
pub fn finetune<T: Scalar>(
    encoder: Option<Encoder<T>>,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Model<T>, LearnError> {
    if ds.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let k = ds.classes().len();
    for item in ds.items() {
        check_window_shape(item.window.shape(), &cfg.arch)?;
        if item.label.id as usize >= k {
            return Err(LearnError::ClassMismatch(format!(
                "label id {} outside class table of size {k}",
                item.label.id
            )));
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = match encoder {
        Some(e) => {
            if e.arch != cfg.arch {
                return Err(LearnError::ClassMismatch(
                    "encoder architecture does not match the training config".into(),
                ));
            }
            e
        }
        None => Encoder::<T>::new(&cfg.arch, &mut init_rng),
    };
    let mut head = ClassifierHead::<T>::new(&cfg.arch, k, cfg.dropout_p, &mut init_rng);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(DROPOUT_STREAM));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SHUFFLE_STREAM));
    let mut adam = optim::Adam::<T>::new();

    let labels: Vec<usize> = ds.items().iter().map(|it| it.label.id as usize).collect();
    let distinct = {
        let mut ids = labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };

    for epoch in 0..cfg.finetune_epochs {
        let lr = optim::cosine_lr(cfg.lr_init, epoch, cfg.finetune_epochs);
        for batch in epoch_batches(ds.len(), cfg.batch_size, &mut shuffle_rng) {
            let ws: Vec<&FlowWindow> = batch.iter().map(|&i| &ds.items()[i].window).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = windows_to_batch::<T>(&ws);
            let (batch_loss, enc_grads, head_grads) = finetune_loss_and_grads(
                &mut encoder,
                &mut head,
                &x,
                &batch_labels,
                cfg.gamma_focal,
                &mut dropout_rng,
            );
            if !batch_loss.is_finite() {
                return Err(LearnError::NonFiniteLoss { epoch });
            }
            let mut params = encoder.trainable_mut();
            params.extend(head.trainable_mut());
            let mut grads = enc_grads.flat();
            grads.extend(head_grads.flat());
            adam.step(lr, &mut params, &grads);
        }
    }
    Ok(Model {
        encoder,
        head,
        classes: ds.classes().clone(),
        arch: cfg.arch.clone(),
        degenerate_single_class: distinct <= 1,
    })
}

impl<T: Scalar> Model<T> {
    /// Class probabilities for a batch of windows, inference mode.
    pub fn probs(&self, windows: &[&FlowWindow]) -> Result<Array2<f64>, LearnError> {
        if windows.is_empty() {
            return Err(LearnError::EmptyDataset);
        }
        for w in windows {
            check_window_shape(w.shape(), &self.arch)?;
        }
        let k = self.head.n_classes();
        let mut out = Array2::<f64>::zeros((windows.len(), k));
        // bounded batches keep the activation memory flat
        for (chunk_idx, chunk) in windows.chunks(32).enumerate() {
            let x = windows_to_batch::<T>(chunk);
            let feat = self.encoder.forward_eval(&x);
            let pooled = layers::global_avg_pool(&feat);
            let logits = self.head.forward_eval(&pooled);
            let probs = loss::softmax_rows(&logits);
            for (bi, row) in probs.rows().into_iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[[chunk_idx * 32 + bi, j]] = v.as_f64();
                }
            }
        }
        Ok(out)
    }

    /// Probability vector for one window.
    ///
    /// `train_mode` exercises batch statistics and dropout on a throwaway
    /// copy of the model; running statistics are not advanced.
    pub fn classify_window(
        &self,
        window: &FlowWindow,
        train_mode: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<f64>, LearnError> {
        check_window_shape(window.shape(), &self.arch)?;
        let x = windows_to_batch::<T>(&[window]);
        let logits = if train_mode {
            let mut enc = self.encoder.clone();
            let mut head = self.head.clone();
            let mut fallback = ChaCha8Rng::seed_from_u64(0);
            let rng = dropout_rng.unwrap_or(&mut fallback);
            let (feat, _) = enc.forward_train(&x);
            let pooled = layers::global_avg_pool(&feat);
            head.forward_train(&pooled, rng).0
        } else {
            let feat = self.encoder.forward_eval(&x);
            let pooled = layers::global_avg_pool(&feat);
            self.head.forward_eval(&pooled)
        };
        let probs = loss::softmax_rows(&logits);
        Ok(probs.row(0).iter().map(|v| v.as_f64()).collect())
    }

    pub fn class_of(&self, probs_row: &[f64]) -> ActivityClassId {
        let mut best = 0;
        for (i, v) in probs_row.iter().enumerate() {
            if *v > probs_row[best] {
                best = i;
            }
        }
        self.classes.by_id(best as u16).expect("argmax within table").clone()
    }
}

/// Slide over an acoustic-flow profile and classify once per hop (≈1 Hz).
pub fn predict<T: Scalar>(
    model: &Model<T>,
    flow: &EchoProfile,
) -> Result<Vec<Prediction>, LearnError> {
    let (lag_crop, win_frames) = (model.arch.input_hw.0, model.arch.input_hw.1);
    let windows = extract_windows(flow, lag_crop, win_frames, WINDOW_HOP)
        .map_err(|e| LearnError::InputTooShort(e.to_string()))?;
    let refs: Vec<&FlowWindow> = windows.iter().collect();
    let probs = model.probs(&refs)?;
    Ok(windows
        .iter()
        .zip(probs.rows())
        .map(|(w, row)| {
            let row_vec: Vec<f64> = row.iter().copied().collect();
            Prediction { time_s: w.start_time, class: model.class_of(&row_vec), probs: row_vec }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            pretrain_epochs: 3,
            finetune_epochs: 4,
            lr_init: 1e-3,
            seed,
            arch: ArchConfig::tiny(2, (24, 18)),
            ..TrainConfig::default()
        }
    }

    fn tiny_window(fill: impl Fn(usize, usize, usize) -> f32) -> FlowWindow {
        let mut data = Array3::<f32>::zeros((2, 24, 18));
        for c in 0..2 {
            for i in 0..24 {
                for j in 0..18 {
                    data[[c, i, j]] = fill(c, i, j);
                }
            }
        }
        FlowWindow { data, start_time: 0.0 }
    }

    fn tiny_labeled(n_per_class: usize) -> LabeledDataset {
        let classes = ClassTable::from_names(&["a", "b"]).unwrap();
        let mut items = Vec::new();
        for rep in 0..n_per_class {
            // class a: energy in the top band; class b: bottom band
            let wa = tiny_window(|_, i, j| if i < 12 { (1 + rep) as f32 * 0.1 } else { 0.0 } + (i + j) as f32 * 1e-3);
            let wb = tiny_window(|_, i, j| if i >= 12 { (1 + rep) as f32 * 0.1 } else { 0.0 } + (i * j) as f32 * 1e-4);
            items.push(crate::dataset::LabeledWindow {
                window: wa,
                label: classes.by_name("a").unwrap().clone(),
                group: format!("g{}", rep % 2),
            });
            items.push(crate::dataset::LabeledWindow {
                window: wb,
                label: classes.by_name("b").unwrap().clone(),
                group: format!("g{}", rep % 2),
            });
        }
        LabeledDataset::new(items, classes, 83.333).unwrap()
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let windows: Vec<FlowWindow> = (0..8)
            .map(|k| tiny_window(|c, i, j| ((c + i + j + k) % 5) as f32 * 0.2))
            .collect();
        let cfg = TrainConfig { pretrain_epochs: 6, ..tiny_cfg(11) };
        let mask_cfg = MaskConfig { rng_seed: 3, ..MaskConfig::default() };
        let out_a = pretrain::<f32>(&windows, &cfg, &mask_cfg).unwrap();
        assert!(out_a.log.last().unwrap().loss < out_a.log[0].loss, "{:?}", out_a.log);
        let out_b = pretrain::<f32>(&windows, &cfg, &mask_cfg).unwrap();
        for (a, b) in out_a.log.iter().zip(&out_b.log) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "loss trace diverged");
        }
        // bit-identical weights
        let mut ea = out_a.encoder;
        let mut eb = out_b.encoder;
        for (pa, pb) in ea.trainable_mut().into_iter().zip(eb.trainable_mut()) {
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn pretrain_zero_lr_keeps_weights() {
        let windows: Vec<FlowWindow> =
            (0..4).map(|k| tiny_window(|_, i, j| (i + j + k) as f32 * 0.1)).collect();
        let cfg = TrainConfig { lr_init: 0.0, pretrain_epochs: 2, ..tiny_cfg(5) };
        let out = pretrain::<f64>(&windows, &cfg, &MaskConfig::default()).unwrap();
        // fresh initialisation with the same seed
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reference = Encoder::<f64>::new(&cfg.arch, &mut init_rng);
        let mut trained = out.encoder;
        let mut reference = reference;
        for (a, b) in trained.trainable_mut().into_iter().zip(reference.trainable_mut()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y);
            }
        }
    }

    #[test]
    fn pretrain_rejects_empty_and_bad_shapes() {
        let cfg = tiny_cfg(1);
        assert!(matches!(
            pretrain::<f32>(&[], &cfg, &MaskConfig::default()),
            Err(LearnError::EmptyDataset)
        ));
        let wrong = FlowWindow { data: Array3::zeros((2, 10, 10)), start_time: 0.0 };
        assert!(matches!(
            pretrain::<f32>(&[wrong], &cfg, &MaskConfig::default()),
            Err(LearnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn finetune_learns_separable_classes() {
        let ds = tiny_labeled(6);
        let cfg = TrainConfig { finetune_epochs: 30, lr_init: 3e-3, ..tiny_cfg(7) };
        let model = finetune::<f32>(None, &ds, &cfg).unwrap();
        assert!(!model.degenerate_single_class);
        let mut correct = 0;
        for item in ds.items() {
            let probs = model.classify_window(&item.window, false, None).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            if model.class_of(&probs).id == item.label.id {
                correct += 1;
            }
        }
        assert!(correct >= ds.len() * 9 / 10, "train accuracy {}/{}", correct, ds.len());
    }

    #[test]
    fn finetune_determinism_and_single_class_flag() {
        let ds = tiny_labeled(3);
        let cfg = tiny_cfg(13);
        let a = finetune::<f32>(None, &ds, &cfg).unwrap();
        let b = finetune::<f32>(None, &ds, &cfg).unwrap();
        let (mut ma, mut mb) = (a, b);
        for (x, y) in ma.encoder.trainable_mut().into_iter().zip(mb.encoder.trainable_mut()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        // single-class dataset flags degenerate
        let classes = ClassTable::from_names(&["only"]).unwrap();
        let items: Vec<_> = (0..4)
            .map(|i| crate::dataset::LabeledWindow {
                window: tiny_window(|_, a, b| (a + b + i) as f32 * 0.01),
                label: classes.by_name("only").unwrap().clone(),
                group: "g".into(),
            })
            .collect();
        let ds1 = LabeledDataset::new(items, classes, 83.333).unwrap();
        let m = finetune::<f32>(None, &ds1, &tiny_cfg(2)).unwrap();
        assert!(m.degenerate_single_class);
    }

    #[test]
    fn gamma_zero_matches_cross_entropy_trajectory() {
        let ds = tiny_labeled(4);
        let mut cfg = tiny_cfg(21);
        cfg.gamma_focal = 0.0;
        cfg.finetune_epochs = 3;
        // focal with γ=0 IS cross-entropy; verify via the loss function on
        // identical batches rather than retraining twice
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Array2<f64> =
            Array2::from_shape_simple_fn((5, 3), || rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let probs = loss::softmax_rows(&logits);
        let labels = [0usize, 2, 1, 0, 2];
        let (focal0, grad0) = loss::focal_loss_batch(&probs, &labels, 0.0);
        let ce: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[[i, l]].max(1e-12).ln())
            .sum::<f64>()
            / labels.len() as f64;
        assert!((focal0 - ce).abs() < 1e-12);
        // and the textbook CE gradient (p - onehot)/B matches
        for i in 0..5 {
            for j in 0..3 {
                let expect = (probs[[i, j]] - if labels[i] == j { 1.0 } else { 0.0 }) / 5.0;
                assert!((grad0[[i, j]] - expect).abs() < 1e-12);
            }
        }
        let model = finetune::<f32>(None, &ds, &cfg).unwrap();
        drop(model);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = ArchConfig::tiny(2, (24, 18));
        let mut enc = Encoder::<f64>::new(&arch, &mut rng);
        let mut head = ClassifierHead::<f64>::new(&arch, 3, 0.0, &mut rng);
        let w = tiny_window(|c, i, j| (c as f32) + (i as f32) * 0.1 - (j as f32) * 0.05);
        let x1 = windows_to_batch::<f64>(&[&w, &w]);
        let x2 = windows_to_batch::<f64>(&[&w, &w, &w, &w]);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let (l1, _, _) = finetune_loss_and_grads(&mut enc, &mut head, &x1, &[1, 1], 0.5, &mut r1);
        let (l2, _, _) =
            finetune_loss_and_grads(&mut enc, &mut head, &x2, &[1, 1, 1, 1], 0.5, &mut r2);
        assert!((l1 - l2).abs() < 1e-9, "{l1} vs {l2}");
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchConfig::tiny(2, (24, 18));
        let mut enc = Encoder::<f64>::new(&arch, &mut rng);
        let mut dec = Decoder::<f64>::new(&arch, &mut rng);
        let w = tiny_window(|_, i, j| ((i * j) % 7) as f32 * 0.1);
        let x = windows_to_batch::<f64>(&[&w, &w]);
        // run the autoencoder once and use its own output as the target:
        // loss and every gradient must vanish
        let (feat, _) = enc.forward_train(&x);
        let (recon, _) = dec.forward_train(&feat);
        let (loss_value, eg, dg) = pretrain_loss_and_grads(&mut enc, &mut dec, &x, &recon, None);
        assert!(loss_value < 1e-18);
        let norm: f64 = eg
            .flat()
            .iter()
            .chain(dg.flat().iter())
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn predict_counts_windows_at_one_hertz() {
        let ds = tiny_labeled(2);
        let mut cfg = tiny_cfg(17);
        cfg.arch = ArchConfig { input_hw: (24, 18), in_channels: 2, ..ArchConfig::tiny(2, (24, 18)) };
        cfg.finetune_epochs = 1;
        let model = finetune::<f32>(None, &ds, &cfg).unwrap();
        // hop is the global one; 18-frame windows over 200 frames
        let flow = EchoProfile {
            data: Array3::from_elem((2, 30, 200), 0.5),
            frame_rate: 83.333,
        };
        let preds = predict(&model, &flow).unwrap();
        let expect = (200 - 18) / WINDOW_HOP + 1;
        assert_eq!(preds.len(), expect);
        let again = predict(&model, &flow).unwrap();
        for (a, b) in preds.iter().zip(&again) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.probs, b.probs);
        }
    }
}
