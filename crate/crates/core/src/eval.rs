//! Scoring and evaluation campaigns: confusion matrices, macro F1,
//! leave-one-group-out cross-validation and throughput measurement.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{simulate, synth_activity_scene};
use crate::dataset::{split_leave_one_group_out, DatasetError, LabeledDataset};
use crate::echo::{
    acoustic_flow, compute_echo_profile, extract_windows, EchoError, FlowWindow, WINDOW_FRAMES,
    WINDOW_HOP, WINDOW_LAGS,
};
use crate::learn::{finetune, pretrain, LearnError, MaskConfig, Scalar, TrainConfig};
use crate::signal::{design_bandpass, generate_chirp, ChirpConfig, DEFAULT_FILTER_TAPS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/truth length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label id {0} outside the {1}-class table")]
    UnknownLabel(u16, usize),
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Echo(#[from] EchoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

/// Counts with rows = truth, columns = predicted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    /// Row-normalised copy (rows that sum to zero stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 })
                    .collect()
            })
            .collect()
    }

    /// Render as a grayscale PGM (P5), one block of pixels per cell of the
    /// row-normalised matrix.
    pub fn save_pgm(&self, path: &Path, cell_px: usize) -> Result<(), EvalError> {
        use std::io::Write;
        let norm = self.normalized();
        let k = self.k();
        let side = k * cell_px;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "P5\n{side} {side}\n255")?;
        for i in 0..side {
            let mut row = Vec::with_capacity(side);
            for j in 0..side {
                row.push((norm[i / cell_px][j / cell_px] * 255.0).round() as u8);
            }
            f.write_all(&row)?;
        }
        Ok(())
    }

    /// Render as a grayscale PNG.
    pub fn save_png(&self, path: &Path, cell_px: usize) -> Result<(), EvalError> {
        let norm = self.normalized();
        let k = self.k();
        let side = (k * cell_px) as u32;
        let img = image::GrayImage::from_fn(side, side, |x, y| {
            let j = (x as usize) / cell_px;
            let i = (y as usize) / cell_px;
            image::Luma([(norm[i][j] * 255.0).round() as u8])
        });
        img.save(path).map_err(|e| EvalError::Report(e.to_string()))?;
        Ok(())
    }
}

/// Tally per-second predictions against ground truth.
pub fn confusion_matrix(
    predicted: &[u16],
    truths: &[u16],
    k: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if predicted.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truths.len()));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &t) in predicted.iter().zip(truths) {
        if p as usize >= k {
            return Err(EvalError::UnknownLabel(p, k));
        }
        if t as usize >= k {
            return Err(EvalError::UnknownLabel(t, k));
        }
        cm.add(t as usize, p as usize);
    }
    Ok(cm)
}

/// Per-class F1 scores; a class with zero precision+recall contributes 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    let k = cm.k();
    let mut scores = Vec::with_capacity(k);
    for i in 0..k {
        let tp = cm.counts[i][i] as f64;
        let row: f64 = cm.counts[i].iter().sum::<u64>() as f64;
        let col: f64 = (0..k).map(|r| cm.counts[r][i]).sum::<u64>() as f64;
        let precision = if col > 0.0 { tp / col } else { 0.0 };
        let recall = if row > 0.0 { tp / row } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        scores.push(f1);
    }
    scores
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.k() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let scores = per_class_f1(cm);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One held-out fold of a cross-validation campaign.
#[derive(Debug, Clone, Serialize)]
pub struct GroupScore {
    pub group: String,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n_test: usize,
    pub train_groups: Vec<String>,
    pub confusion: ConfusionMatrix,
}

/// Cross-validation campaign summary.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_group: Vec<GroupScore>,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub runtime_s: f64,
    pub class_names: Vec<String>,
}

impl EvalReport {
    fn from_scores(per_group: Vec<GroupScore>, runtime_s: f64, class_names: Vec<String>) -> Self {
        let n = per_group.len() as f64;
        let mean = per_group.iter().map(|g| g.macro_f1).sum::<f64>() / n;
        let var = per_group.iter().map(|g| (g.macro_f1 - mean).powi(2)).sum::<f64>() / n;
        Self { per_group, mean_macro_f1: mean, std_macro_f1: var.sqrt(), runtime_s, class_names }
    }

    /// Pooled confusion matrix over all folds.
    pub fn pooled_confusion(&self) -> ConfusionMatrix {
        let k = self.class_names.len();
        let mut cm = ConfusionMatrix::new(k);
        for g in &self.per_group {
            for i in 0..k {
                for j in 0..k {
                    cm.counts[i][j] += g.confusion.counts[i][j];
                }
            }
        }
        cm
    }

    /// Per-fold CSV: `group,macro_f1,n_test`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "group,macro_f1,n_test")?;
        for g in &self.per_group {
            writeln!(f, "{},{},{}", g.group, g.macro_f1, g.n_test)?;
        }
        writeln!(f, "mean,{},", self.mean_macro_f1)?;
        writeln!(f, "std,{},", self.std_macro_f1)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| EvalError::Report(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Evaluate a trained model on a held-out set, returning its fold score.
fn score_fold<T: Scalar>(
    model: &crate::learn::Model<T>,
    test: &LabeledDataset,
    group: &str,
    train_groups: Vec<String>,
) -> Result<GroupScore, EvalError> {
    let refs: Vec<&FlowWindow> = test.items().iter().map(|i| &i.window).collect();
    let probs = model.probs(&refs)?;
    let k = test.classes().len();
    let mut cm = ConfusionMatrix::new(k);
    for (item, row) in test.items().iter().zip(probs.rows()) {
        let row_vec: Vec<f64> = row.iter().copied().collect();
        let predicted = model.class_of(&row_vec);
        cm.add(item.label.id as usize, predicted.id as usize);
    }
    let f1 = macro_f1(&cm)?;
    Ok(GroupScore {
        group: group.to_string(),
        macro_f1: f1,
        per_class_f1: per_class_f1(&cm),
        n_test: test.len(),
        train_groups,
        confusion: cm,
    })
}

/// Leave-one-group-out campaign: for every group, pretrain on the remaining
/// groups' windows (when `cfg.pretrain_epochs > 0`), fine-tune, and score
/// the held-out group.
pub fn run_lopo<T: Scalar>(
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
) -> Result<EvalReport, EvalError> {
    let groups = ds.groups();
    if groups.len() < 2 {
        return Err(EvalError::TooFewGroups(groups.len()));
    }
    let start = Instant::now();
    let mut per_group = Vec::with_capacity(groups.len());
    for held_out in &groups {
        let (train, test) = split_leave_one_group_out(ds, held_out)?;
        // data lineage: nothing from the held-out group may reach training
        assert!(
            train.items().iter().all(|item| item.group != *held_out),
            "lineage violation: held-out group leaked into the training split"
        );
        assert_eq!(train.len() + test.len(), ds.len(), "split must partition the dataset");
        let encoder = if cfg.pretrain_epochs > 0 {
            let windows: Vec<FlowWindow> =
                train.items().iter().map(|i| i.window.clone()).collect();
            Some(pretrain::<T>(&windows, cfg, mask_cfg)?.encoder)
        } else {
            None
        };
        let model = finetune::<T>(encoder, &train, cfg)?;
        per_group.push(score_fold(&model, &test, held_out, train.groups())?);
    }
    let class_names = ds.classes().classes().iter().map(|c| c.name.clone()).collect();
    Ok(EvalReport::from_scores(per_group, start.elapsed().as_secs_f64(), class_names))
}

/// Two-stage campaign: train on the primary dataset (minus the held-out
/// group), then fine-tune on the refinement dataset (minus the same group)
/// for `stage2_epochs`, and score the held-out group's refinement items.
pub fn run_lopo_two_stage<T: Scalar>(
    primary: &LabeledDataset,
    refine: &LabeledDataset,
    cfg: &TrainConfig,
    stage2_epochs: usize,
    mask_cfg: &MaskConfig,
) -> Result<EvalReport, EvalError> {
    let groups = refine.groups();
    if groups.len() < 2 {
        return Err(EvalError::TooFewGroups(groups.len()));
    }
    if primary.classes() != refine.classes() {
        return Err(EvalError::Learn(LearnError::ClassMismatch(
            "primary and refinement datasets disagree on classes".into(),
        )));
    }
    let start = Instant::now();
    let mut per_group = Vec::with_capacity(groups.len());
    for held_out in &groups {
        let primary_train: Vec<_> = primary
            .items()
            .iter()
            .filter(|item| item.group != *held_out)
            .cloned()
            .collect();
        let primary_train =
            LabeledDataset::new(primary_train, primary.classes().clone(), primary.frame_rate)?;
        let (refine_train, refine_test) = split_leave_one_group_out(refine, held_out)?;
        let encoder = if cfg.pretrain_epochs > 0 {
            let windows: Vec<FlowWindow> =
                primary_train.items().iter().map(|i| i.window.clone()).collect();
            Some(pretrain::<T>(&windows, cfg, mask_cfg)?.encoder)
        } else {
            None
        };
        let stage1 = finetune::<T>(encoder, &primary_train, cfg)?;
        let stage2_cfg = TrainConfig { finetune_epochs: stage2_epochs, ..cfg.clone() };
        let model = finetune::<T>(Some(stage1.encoder), &refine_train, &stage2_cfg)?;
        per_group.push(score_fold(&model, &refine_test, held_out, refine_train.groups())?);
    }
    let class_names = refine.classes().classes().iter().map(|c| c.name.clone()).collect();
    Ok(EvalReport::from_scores(per_group, start.elapsed().as_secs_f64(), class_names))
}

/// Timing of the signal-processing front end.
#[derive(Debug, Clone, Serialize)]
pub struct ThroughputStats {
    pub input_s: f64,
    pub wall_s: f64,
    /// Wall time divided by audio time; < 1 means faster than real time.
    pub realtime_factor: f64,
    pub frames_per_s: f64,
    pub windows: usize,
}

/// Measure end-to-end front-end throughput (filter + correlate + flow +
/// window extraction) on synthetic audio of the given duration.
pub fn bench_throughput(seconds_of_audio: f64, seed: u64) -> Result<ThroughputStats, EvalError> {
    if seconds_of_audio <= 0.0 {
        return Ok(ThroughputStats {
            input_s: 0.0,
            wall_s: 0.0,
            realtime_factor: 0.0,
            frames_per_s: 0.0,
            windows: 0,
        });
    }
    let tx_left = generate_chirp(&ChirpConfig::left_band()).expect("default config valid");
    let tx_right = generate_chirp(&ChirpConfig::right_band()).expect("default config valid");
    let scene =
        synth_activity_scene("walk-sway", seconds_of_audio, seed).expect("catalog class exists");
    let mics = simulate(&tx_left, &tx_right, &scene, seed)
        .map_err(|e| EvalError::Report(format!("simulation: {e}")))?;
    let kl = design_bandpass(18_000.0, 21_500.0, 50_000.0, DEFAULT_FILTER_TAPS)
        .expect("default band valid");
    let kr = design_bandpass(21_500.0, 24_500.0, 50_000.0, DEFAULT_FILTER_TAPS)
        .expect("default band valid");

    let start = Instant::now();
    let profile = compute_echo_profile(&tx_left, &tx_right, &mics, &kl, &kr)?;
    let flow = acoustic_flow(&profile)?;
    let windows = if flow.frames() >= WINDOW_FRAMES {
        extract_windows(&flow, WINDOW_LAGS, WINDOW_FRAMES, WINDOW_HOP)?.len()
    } else {
        0
    };
    let wall = start.elapsed().as_secs_f64();
    Ok(ThroughputStats {
        input_s: seconds_of_audio,
        wall_s: wall,
        realtime_factor: wall / seconds_of_audio,
        frames_per_s: profile.frames() as f64 / wall,
        windows,
    })
}

/// Brute-force per-class F1 via explicit TP/FP/FN loops; the independent
/// oracle for [`macro_f1`].
pub fn macro_f1_brute_force(cm: &ConfusionMatrix) -> f64 {
    let k = cm.k();
    let mut sum = 0.0;
    for class in 0..k {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for truth in 0..k {
            for pred in 0..k {
                let n = cm.counts[truth][pred];
                if truth == class && pred == class {
                    tp += n;
                } else if pred == class {
                    fp += n;
                } else if truth == class {
                    fn_ += n;
                }
            }
        }
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    sum / k as f64
}

/// Convenience: matrix from an `Array2` of counts (tests, fixtures).
pub fn matrix_from_array(a: &Array2<u64>) -> ConfusionMatrix {
    ConfusionMatrix { counts: a.rows().into_iter().map(|r| r.to_vec()).collect() }
}
