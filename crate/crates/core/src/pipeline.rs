//! End-to-end convenience wiring: synthetic catalog recordings to labelled
//! window datasets.

use thiserror::Error;

use crate::channel::{simulate, synth_activity_scene, ChannelError, Scene};
use crate::dataset::{ClassTable, DatasetError, LabeledDataset, LabeledWindow};
use crate::echo::{
    acoustic_flow, compute_echo_profile, extract_windows, EchoError, EchoProfile, WINDOW_FRAMES,
    WINDOW_HOP, WINDOW_LAGS,
};
use crate::signal::{
    design_bandpass, generate_chirp, ChirpConfig, FilterKernel, SignalError, Waveform,
    DEFAULT_FILTER_TAPS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Echo(#[from] EchoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// The default transmit/filter front end (both bands).
pub struct FrontEnd {
    pub tx_left: Waveform,
    pub tx_right: Waveform,
    pub kernel_left: FilterKernel,
    pub kernel_right: FilterKernel,
}

impl FrontEnd {
    pub fn default_bands() -> Self {
        let left = ChirpConfig::left_band();
        let right = ChirpConfig::right_band();
        Self {
            tx_left: generate_chirp(&left).expect("default config valid"),
            tx_right: generate_chirp(&right).expect("default config valid"),
            kernel_left: design_bandpass(left.f_start, left.f_end, left.sample_rate, DEFAULT_FILTER_TAPS)
                .expect("default band valid"),
            kernel_right: design_bandpass(
                right.f_start,
                right.f_end,
                right.sample_rate,
                DEFAULT_FILTER_TAPS,
            )
            .expect("default band valid"),
        }
    }

    /// Simulate a scene and return its acoustic-flow profile with the
    /// transient boundary frames trimmed (start-up transient at the head,
    /// filter/correlation truncation at the tail).
    pub fn scene_to_flow(self: &FrontEnd, scene: &Scene, seed: u64) -> Result<EchoProfile, PipelineError> {
        let mics = simulate(&self.tx_left, &self.tx_right, scene, seed)?;
        let profile =
            compute_echo_profile(&self.tx_left, &self.tx_right, &mics, &self.kernel_left, &self.kernel_right)?;
        let frames = profile.frames();
        let trimmed = EchoProfile {
            data: profile.data.slice(ndarray::s![.., .., 2..frames - 2]).to_owned(),
            frame_rate: profile.frame_rate,
        };
        Ok(acoustic_flow(&trimmed)?)
    }
}

/// Duration that yields exactly `windows` sliding windows per recording once
/// boundary frames are trimmed.
pub fn duration_for_windows(windows: usize) -> f64 {
    let flow_frames = WINDOW_FRAMES + (windows - 1) * WINDOW_HOP;
    // +1 frame lost to differencing, +4 trimmed at the boundaries
    let profile_frames = flow_frames + 5;
    (profile_frames * 600) as f64 / 50_000.0
}

/// Build a labelled dataset from the synthetic activity catalog.
///
/// One recording per (class, group); every window of a recording carries the
/// recording's class. Groups are named `G0..`, seeded per (group, class) so
/// recordings differ across groups.
pub fn synth_labeled_dataset(
    classes: &[&str],
    n_groups: usize,
    windows_per_recording: usize,
    base_seed: u64,
) -> Result<LabeledDataset, PipelineError> {
    let front = FrontEnd::default_bands();
    let table = ClassTable::from_names(classes)?;
    let duration = duration_for_windows(windows_per_recording);
    let mut items = Vec::new();
    let mut frame_rate = 0.0;
    for group_idx in 0..n_groups {
        let group = format!("G{group_idx}");
        for (class_idx, class) in classes.iter().enumerate() {
            let seed = base_seed
                .wrapping_add(group_idx as u64 * 0x9E37_79B9)
                .wrapping_add(class_idx as u64 * 0x85EB_CA6B);
            let scene = synth_activity_scene(class, duration, seed)?;
            let flow = front.scene_to_flow(&scene, seed)?;
            frame_rate = flow.frame_rate;
            let windows = extract_windows(&flow, WINDOW_LAGS, WINDOW_FRAMES, WINDOW_HOP)?;
            let label = table.by_name(class).expect("class registered").clone();
            for window in windows {
                items.push(LabeledWindow { window, label: label.clone(), group: group.clone() });
            }
        }
    }
    Ok(LabeledDataset::new(items, table, frame_rate)?)
}
