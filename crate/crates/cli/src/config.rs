//! Flat key=value run configuration.
//!
//! Every pipeline stage reads the same configuration file; unknown keys are
//! rejected so typos fail loudly. The canonical serialisation of the
//! *effective* configuration (defaults plus overrides, sorted) is hashed and
//! embedded in every artifact a run produces, which lets downstream stages
//! refuse mixed-provenance inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use echoflow::learn::{ArchConfig, MaskConfig, TrainConfig};
use echoflow::signal::ChirpConfig;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sample_rate: f64,
    pub chirp_n_samples: usize,
    pub chirp_amplitude: f64,
    pub left_band: (f64, f64),
    pub right_band: (f64, f64),
    pub filter_taps: usize,
    pub scene_file: Option<String>,
    pub scene_activity: String,
    pub scene_duration_s: f64,
    pub scene_snr_db: Option<f64>,
    pub flow_lag_crop: usize,
    pub flow_window_frames: usize,
    pub flow_hop_frames: usize,
    pub mask_fraction: (f64, f64),
    pub mask_patches: (usize, usize),
    pub mask_seed: u64,
    pub train_batch_size: usize,
    pub train_pretrain_epochs: usize,
    pub train_finetune_epochs: usize,
    pub train_lr_init: f64,
    pub train_gamma_focal: f64,
    pub train_dropout_p: f64,
    pub train_masked_loss_only: bool,
    pub train_seed: u64,
    pub train_stage2_epochs: usize,
    pub arch_stage_channels: Vec<usize>,
    pub arch_blocks_per_stage: usize,
    pub arch_classifier_hidden: usize,
    pub catalog_groups: usize,
    pub catalog_windows_per_recording: usize,
    pub saliency_patch: (usize, usize),
    pub bench_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 50_000.0,
            chirp_n_samples: 600,
            chirp_amplitude: 1.0,
            left_band: (18_000.0, 21_500.0),
            right_band: (21_500.0, 24_500.0),
            filter_taps: 255,
            scene_file: None,
            scene_activity: "chew".into(),
            scene_duration_s: 10.0,
            scene_snr_db: Some(30.0),
            flow_lag_crop: 295,
            flow_window_frames: 166,
            flow_hop_frames: 83,
            mask_fraction: (0.15, 0.20),
            mask_patches: (1, 4),
            mask_seed: 0,
            train_batch_size: 64,
            train_pretrain_epochs: 100,
            train_finetune_epochs: 50,
            train_lr_init: 1e-3,
            train_gamma_focal: 0.5,
            train_dropout_p: 0.2,
            train_masked_loss_only: false,
            train_seed: 0,
            train_stage2_epochs: 10,
            arch_stage_channels: vec![16, 32, 64, 128],
            arch_blocks_per_stage: 1,
            arch_classifier_hidden: 64,
            catalog_groups: 5,
            catalog_windows_per_recording: 3,
            saliency_patch: (37, 21),
            bench_seconds: 10.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("bad value for '{key}': {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("bad value for '{key}': expected true/false, got '{other}'")),
    }
}

impl RunConfig {
    /// Parse the flat key=value format over defaults; unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "sample_rate" => self.sample_rate = parse_num(key, value)?,
            "chirp.n_samples" => self.chirp_n_samples = parse_num(key, value)?,
            "chirp.amplitude" => self.chirp_amplitude = parse_num(key, value)?,
            "chirp.left.f_start" => self.left_band.0 = parse_num(key, value)?,
            "chirp.left.f_end" => self.left_band.1 = parse_num(key, value)?,
            "chirp.right.f_start" => self.right_band.0 = parse_num(key, value)?,
            "chirp.right.f_end" => self.right_band.1 = parse_num(key, value)?,
            "filter.taps" => self.filter_taps = parse_num(key, value)?,
            "scene.file" => self.scene_file = Some(value.to_string()),
            "scene.activity" => self.scene_activity = value.to_string(),
            "scene.duration_s" => self.scene_duration_s = parse_num(key, value)?,
            "scene.snr_db" => {
                self.scene_snr_db =
                    if value.is_empty() || value == "off" { None } else { Some(parse_num(key, value)?) }
            }
            "flow.lag_crop" => self.flow_lag_crop = parse_num(key, value)?,
            "flow.window_frames" => self.flow_window_frames = parse_num(key, value)?,
            "flow.hop_frames" => self.flow_hop_frames = parse_num(key, value)?,
            "mask.fraction_lo" => self.mask_fraction.0 = parse_num(key, value)?,
            "mask.fraction_hi" => self.mask_fraction.1 = parse_num(key, value)?,
            "mask.patches_lo" => self.mask_patches.0 = parse_num(key, value)?,
            "mask.patches_hi" => self.mask_patches.1 = parse_num(key, value)?,
            "mask.seed" => self.mask_seed = parse_num(key, value)?,
            "train.batch_size" => self.train_batch_size = parse_num(key, value)?,
            "train.pretrain_epochs" => self.train_pretrain_epochs = parse_num(key, value)?,
            "train.finetune_epochs" => self.train_finetune_epochs = parse_num(key, value)?,
            "train.lr_init" => self.train_lr_init = parse_num(key, value)?,
            "train.gamma_focal" => self.train_gamma_focal = parse_num(key, value)?,
            "train.dropout_p" => self.train_dropout_p = parse_num(key, value)?,
            "train.masked_loss_only" => self.train_masked_loss_only = parse_bool(key, value)?,
            "train.seed" => self.train_seed = parse_num(key, value)?,
            "train.stage2_epochs" => self.train_stage2_epochs = parse_num(key, value)?,
            "arch.stage_channels" => {
                self.arch_stage_channels = value
                    .split(',')
                    .map(|p| parse_num::<usize>(key, p.trim()))
                    .collect::<Result<_, _>>()?;
                if self.arch_stage_channels.is_empty() {
                    return Err("arch.stage_channels must not be empty".into());
                }
            }
            "arch.blocks_per_stage" => self.arch_blocks_per_stage = parse_num(key, value)?,
            "arch.classifier_hidden" => self.arch_classifier_hidden = parse_num(key, value)?,
            "catalog.groups" => self.catalog_groups = parse_num(key, value)?,
            "catalog.windows_per_recording" => {
                self.catalog_windows_per_recording = parse_num(key, value)?
            }
            "saliency.patch_h" => self.saliency_patch.0 = parse_num(key, value)?,
            "saliency.patch_w" => self.saliency_patch.1 = parse_num(key, value)?,
            "bench.seconds" => self.bench_seconds = parse_num(key, value)?,
            other => return Err(format!("unknown configuration key '{other}'")),
        }
        Ok(())
    }

    /// Override the seeds used by simulation, masking and training.
    pub fn override_seed(&mut self, seed: u64) {
        self.train_seed = seed;
        self.mask_seed = seed.wrapping_add(1);
    }

    /// Canonical serialisation of the effective configuration: every key,
    /// sorted, one per line.
    pub fn canonical(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("sample_rate", self.sample_rate.to_string());
        map.insert("chirp.n_samples", self.chirp_n_samples.to_string());
        map.insert("chirp.amplitude", self.chirp_amplitude.to_string());
        map.insert("chirp.left.f_start", self.left_band.0.to_string());
        map.insert("chirp.left.f_end", self.left_band.1.to_string());
        map.insert("chirp.right.f_start", self.right_band.0.to_string());
        map.insert("chirp.right.f_end", self.right_band.1.to_string());
        map.insert("filter.taps", self.filter_taps.to_string());
        map.insert("scene.file", self.scene_file.clone().unwrap_or_default());
        map.insert("scene.activity", self.scene_activity.clone());
        map.insert("scene.duration_s", self.scene_duration_s.to_string());
        map.insert(
            "scene.snr_db",
            self.scene_snr_db.map(|v| v.to_string()).unwrap_or_else(|| "off".into()),
        );
        map.insert("flow.lag_crop", self.flow_lag_crop.to_string());
        map.insert("flow.window_frames", self.flow_window_frames.to_string());
        map.insert("flow.hop_frames", self.flow_hop_frames.to_string());
        map.insert("mask.fraction_lo", self.mask_fraction.0.to_string());
        map.insert("mask.fraction_hi", self.mask_fraction.1.to_string());
        map.insert("mask.patches_lo", self.mask_patches.0.to_string());
        map.insert("mask.patches_hi", self.mask_patches.1.to_string());
        map.insert("mask.seed", self.mask_seed.to_string());
        map.insert("train.batch_size", self.train_batch_size.to_string());
        map.insert("train.pretrain_epochs", self.train_pretrain_epochs.to_string());
        map.insert("train.finetune_epochs", self.train_finetune_epochs.to_string());
        map.insert("train.lr_init", self.train_lr_init.to_string());
        map.insert("train.gamma_focal", self.train_gamma_focal.to_string());
        map.insert("train.dropout_p", self.train_dropout_p.to_string());
        map.insert("train.masked_loss_only", self.train_masked_loss_only.to_string());
        map.insert("train.seed", self.train_seed.to_string());
        map.insert("train.stage2_epochs", self.train_stage2_epochs.to_string());
        map.insert(
            "arch.stage_channels",
            self.arch_stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("arch.blocks_per_stage", self.arch_blocks_per_stage.to_string());
        map.insert("arch.classifier_hidden", self.arch_classifier_hidden.to_string());
        map.insert("catalog.groups", self.catalog_groups.to_string());
        map.insert(
            "catalog.windows_per_recording",
            self.catalog_windows_per_recording.to_string(),
        );
        map.insert("saliency.patch_h", self.saliency_patch.0.to_string());
        map.insert("saliency.patch_w", self.saliency_patch.1.to_string());
        map.insert("bench.seconds", self.bench_seconds.to_string());
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// First eight bytes of the SHA-256 of the canonical form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn left_chirp(&self) -> ChirpConfig {
        ChirpConfig {
            f_start: self.left_band.0,
            f_end: self.left_band.1,
            n_samples: self.chirp_n_samples,
            sample_rate: self.sample_rate,
            amplitude: self.chirp_amplitude,
        }
    }

    pub fn right_chirp(&self) -> ChirpConfig {
        ChirpConfig {
            f_start: self.right_band.0,
            f_end: self.right_band.1,
            n_samples: self.chirp_n_samples,
            sample_rate: self.sample_rate,
            amplitude: self.chirp_amplitude,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            in_channels: 4,
            input_hw: (self.flow_lag_crop, self.flow_window_frames),
            stage_channels: self.arch_stage_channels.clone(),
            blocks_per_stage: self.arch_blocks_per_stage,
            classifier_hidden: self.arch_classifier_hidden,
            leaky_slope: 0.01,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train_batch_size,
            pretrain_epochs: self.train_pretrain_epochs,
            finetune_epochs: self.train_finetune_epochs,
            lr_init: self.train_lr_init,
            gamma_focal: self.train_gamma_focal,
            dropout_p: self.train_dropout_p,
            seed: self.train_seed,
            masked_loss_only: self.train_masked_loss_only,
            arch: self.arch(),
        }
    }

    pub fn mask(&self) -> MaskConfig {
        MaskConfig {
            mask_fraction_range: self.mask_fraction,
            n_patches_range: self.mask_patches,
            rng_seed: self.mask_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_via_canonical() {
        let cfg = RunConfig::default();
        let reparsed = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg.hash(), reparsed.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("nonsense.key=1").is_err());
        assert!(RunConfig::parse("train.batch_size=abc").is_err());
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = RunConfig::default();
        let b = RunConfig::parse("train.seed=99").unwrap();
        assert_ne!(a.hash(), b.hash());
        // equivalent effective configs hash identically regardless of the
        // source text layout
        let c = RunConfig::parse("# comment\n\ntrain.seed=99\n").unwrap();
        assert_eq!(b.hash(), c.hash());
    }
}
