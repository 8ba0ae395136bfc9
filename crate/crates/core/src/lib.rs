//! Active acoustic sensing pipeline built around ultrasonic FMCW chirps.
//!
//! The crate covers the full path from transmit waveform to activity label:
//!
//! * [`signal`] — chirp synthesis and linear-phase bandpass filtering,
//! * [`channel`] — a simulated multipath echo channel with known ground truth,
//! * [`echo`] — correlation echo frames, four-path echo profiles, acoustic
//!   flow and model-ready sliding windows,
//! * [`dataset`] — labelled window containers and leave-one-group-out splits,
//! * [`learn`] — masked-reconstruction pretraining and focal-loss activity
//!   classification with hand-written gradients,
//! * [`eval`] — confusion matrices, macro F1 and cross-validation campaigns,
//! * [`saliency`] — gradient-weighted class activation maps with an
//!   occlusion-based cross-check.
//!
//! All randomised operations take explicit seeds and are deterministic for a
//! fixed seed and thread policy.

pub mod channel;
pub mod container;
pub mod dataset;
pub mod echo;
pub mod pipeline;
pub mod eval;
pub mod learn;
pub mod saliency;
pub mod signal;
pub mod wav;

pub use channel::{MicStreams, Reflector, Scene, Trajectory};
pub use dataset::{ActivityClassId, LabeledDataset, LabeledWindow};
pub use echo::{EchoFrame, EchoProfile, FlowWindow, Region};
pub use eval::{ConfusionMatrix, EvalReport};
pub use learn::{MaskConfig, Model, TrainConfig};
pub use signal::{ChirpConfig, FilterKernel, PhysicalConstants, Waveform};
