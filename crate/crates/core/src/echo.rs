//! Correlation echo frames, four-path echo profiles, acoustic flow and
//! model-ready sliding windows.
//!
//! Each sweep of received audio is correlated against the analytic (complex)
//! form of the transmitted chirp; the magnitude per lag is one *echo frame*.
//! Using the analytic reference gives the correlation envelope rather than
//! the raw fringed cross-correlation, which is what makes the per-lag peak a
//! usable range estimate. Stacking frames over time per transmitter→receiver
//! path yields the echo profile; absolute frame-to-frame differences give the
//! acoustic flow, which suppresses static reflections.

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::channel::MicStreams;
use crate::signal::{FilterKernel, Waveform, apply_filter};

/// Lag rows kept for model windows.
pub const WINDOW_LAGS: usize = 295;
/// Frames per model window (≈2 s at 83.33 frames/s).
pub const WINDOW_FRAMES: usize = 166;
/// Frame hop between consecutive windows (≈1 s, 50 % overlap).
pub const WINDOW_HOP: usize = 83;
/// Lag rows covering the face region (≈17.15 cm).
pub const FACE_LAGS: usize = 50;
/// Echo profile channel count, order (TL→RL, TL→RR, TR→RL, TR→RR).
pub const N_CHANNELS: usize = 4;

#[derive(Debug, Error)]
pub enum EchoError {
    #[error("received segment shorter than one sweep: {0} < {1}")]
    SegmentTooShort(usize, usize),
    #[error("transmit chirp empty")]
    EmptyChirp,
    #[error("microphone streams differ in length: {0} vs {1}")]
    StreamLengthMismatch(usize, usize),
    #[error("profile needs at least {needed} frames, has {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),
}

/// One sweep's correlation magnitude per lag.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoFrame {
    pub values: Vec<f64>,
}

impl EchoFrame {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Time-stacked echo frames: `[channel, lag, frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoProfile {
    pub data: Array3<f32>,
    /// Frames per second (Fs / N).
    pub frame_rate: f64,
}

impl EchoProfile {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn lags(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }
}

/// One model input: `[4, 295, 166]` of nonnegative flow values.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowWindow {
    pub data: Array3<f32>,
    /// Offset of the window's first frame on the recording timeline, seconds.
    pub start_time: f64,
}

impl FlowWindow {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    /// Seconds covered by one window at the default frame rate.
    pub fn duration_s(frame_rate: f64) -> f64 {
        WINDOW_FRAMES as f64 / frame_rate
    }
}

/// Lag-band selection for the region ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Lags [0, 50): within ≈17.15 cm of the sensor.
    Face,
    /// Lags [50, 295).
    Body,
    Full,
}

impl std::str::FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "face" => Ok(Region::Face),
            "body" => Ok(Region::Body),
            "full" => Ok(Region::Full),
            other => Err(format!("unknown region '{other}'")),
        }
    }
}

/// Reusable correlator for one transmit chirp.
///
/// Holds the FFT plan and the conjugated spectrum of the analytic chirp; one
/// `frame` call is two FFTs and a pointwise product.
pub struct Correlator {
    n_lags: usize,
    fft_len: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    /// conj(FFT(analytic chirp)) padded to `fft_len`.
    reference: Vec<Complex64>,
}

/// Analytic (positive-frequency) representation of a real signal, via DFT.
fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    // single-sideband weights: keep DC and Nyquist, double positive bins
    for (k, v) in buf.iter_mut().enumerate() {
        let w = if k == 0 || (n % 2 == 0 && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= w;
    }
    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

impl Correlator {
    /// Correlator producing `tx.len()` lags.
    pub fn new(tx: &Waveform) -> Result<Self, EchoError> {
        Self::with_lags(tx, tx.len())
    }

    /// Correlator with an explicit lag count (used for sweep alignment).
    pub fn with_lags(tx: &Waveform, n_lags: usize) -> Result<Self, EchoError> {
        if tx.is_empty() {
            return Err(EchoError::EmptyChirp);
        }
        let n = tx.len();
        // no circular wrap for lags in [0, n_lags) over segments up to
        // n + n_lags samples
        let fft_len = (n + n_lags).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);
        let ifft = planner.plan_fft_inverse(fft_len);
        let mut reference = analytic_signal(&tx.samples);
        reference.resize(fft_len, Complex64::new(0.0, 0.0));
        fft.process(&mut reference);
        for v in reference.iter_mut() {
            *v = v.conj();
        }
        Ok(Self { n_lags, fft_len, fft, ifft, reference })
    }

    pub fn n_lags(&self) -> usize {
        self.n_lags
    }

    /// Correlate one received segment, producing magnitudes for lags
    /// [0, n_lags). The segment is zero-extended if shorter than the lag
    /// span requires.
    pub fn frame(&self, rx: &[f64]) -> EchoFrame {
        let take = rx.len().min(self.fft_len);
        let mut buf: Vec<Complex64> = Vec::with_capacity(self.fft_len);
        buf.extend(rx[..take].iter().map(|&v| Complex64::new(v, 0.0)));
        buf.resize(self.fft_len, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        for (v, r) in buf.iter_mut().zip(&self.reference) {
            *v *= r;
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        let values = buf[..self.n_lags].iter().map(|v| (v * scale).norm()).collect();
        EchoFrame { values }
    }
}

/// Correlation magnitude of one sweep against one received segment.
///
/// `values[lag] = |Σ_i ã(tx)*[i] · rx[i+lag]|` where ã is the analytic chirp;
/// computed via the frequency domain, equal to the direct time-domain sum to
/// within 1e−6 relative error.
pub fn compute_echo_frame(tx_chirp: &Waveform, rx_segment: &Waveform) -> Result<EchoFrame, EchoError> {
    if rx_segment.len() < tx_chirp.len() {
        return Err(EchoError::SegmentTooShort(rx_segment.len(), tx_chirp.len()));
    }
    let correlator = Correlator::new(tx_chirp)?;
    Ok(correlator.frame(&rx_segment.samples))
}

/// Estimate the sweep-start offset of an unaligned recording: the global
/// argmax of the correlation over the first two sweeps, modulo one sweep.
pub fn sync_offset(tx_chirp: &Waveform, stream: &Waveform) -> Result<usize, EchoError> {
    let n = tx_chirp.len();
    if stream.len() < 2 * n {
        return Err(EchoError::SegmentTooShort(stream.len(), 2 * n));
    }
    let correlator = Correlator::with_lags(tx_chirp, 2 * n)?;
    let take = stream.samples.len().min(3 * n);
    let frame = correlator.frame(&stream.samples[..take]);
    Ok(frame.argmax() % n)
}

/// Compute the four-path echo profile of a pair of microphone streams.
///
/// Each microphone is bandpass-filtered per transmit band and correlated
/// against the matching chirp. Channel order is (TL→RL, TL→RR, TR→RL,
/// TR→RR). Streams are assumed sweep-aligned (simulator output starts at a
/// sweep boundary; see [`sync_offset`] for external recordings).
pub fn compute_echo_profile(
    tx_left: &Waveform,
    tx_right: &Waveform,
    mics: &MicStreams,
    kernel_left: &FilterKernel,
    kernel_right: &FilterKernel,
) -> Result<EchoProfile, EchoError> {
    if mics.left.len() != mics.right.len() {
        return Err(EchoError::StreamLengthMismatch(mics.left.len(), mics.right.len()));
    }
    if (mics.left.sample_rate - tx_left.sample_rate).abs() > 1e-9 {
        return Err(EchoError::SampleRateMismatch(mics.left.sample_rate, tx_left.sample_rate));
    }
    let n = tx_left.len();
    let len = mics.left.len();
    if len < n {
        return Err(EchoError::SegmentTooShort(len, n));
    }
    let n_frames = len / n;
    let frame_rate = tx_left.sample_rate / n as f64;

    // (transmit chirp, receiving mic filtered by that chirp's band)
    let filtered = [
        apply_filter(kernel_left, &mics.left).expect("filtering is total"),
        apply_filter(kernel_left, &mics.right).expect("filtering is total"),
        apply_filter(kernel_right, &mics.left).expect("filtering is total"),
        apply_filter(kernel_right, &mics.right).expect("filtering is total"),
    ];
    // The reference passes through the same bandpass as the received
    // stream: this strips the chirp's spectral skirts, which would
    // otherwise correlate with the residual of the neighbouring band.
    let ref_left = apply_filter(kernel_left, tx_left).expect("filtering is total");
    let ref_right = apply_filter(kernel_right, tx_right).expect("filtering is total");
    let correlators = [
        Correlator::new(&ref_left)?,
        Correlator::new(&ref_left)?,
        Correlator::new(&ref_right)?,
        Correlator::new(&ref_right)?,
    ];

    let mut data = Array3::<f32>::zeros((N_CHANNELS, n, n_frames));
    for (ch, (stream, correlator)) in filtered.iter().zip(&correlators).enumerate() {
        let frames: Vec<EchoFrame> = (0..n_frames)
            .into_par_iter()
            .map(|f| {
                let start = f * n;
                let end = (start + 2 * n).min(len);
                correlator.frame(&stream.samples[start..end])
            })
            .collect();
        for (f, frame) in frames.iter().enumerate() {
            for (lag, v) in frame.values.iter().enumerate() {
                data[[ch, lag, f]] = *v as f32;
            }
        }
    }
    Ok(EchoProfile { data, frame_rate })
}

/// Absolute difference of consecutive echo frames. The result has one frame
/// fewer than the input; static reflections cancel exactly.
pub fn acoustic_flow(profile: &EchoProfile) -> Result<EchoProfile, EchoError> {
    acoustic_flow_opts(profile, false)
}

/// [`acoustic_flow`] with optional per-frame max-normalisation of the input
/// profile before differencing.
pub fn acoustic_flow_opts(
    profile: &EchoProfile,
    normalize_frames: bool,
) -> Result<EchoProfile, EchoError> {
    let frames = profile.frames();
    if frames < 2 {
        return Err(EchoError::TooFewFrames { needed: 2, got: frames });
    }
    let (channels, lags) = (profile.channels(), profile.lags());
    let source = if normalize_frames {
        let mut normed = profile.data.clone();
        for ch in 0..channels {
            for f in 0..frames {
                let mut column = normed.slice_mut(ndarray::s![ch, .., f]);
                let peak = column.iter().cloned().fold(0.0f32, f32::max);
                if peak > 0.0 {
                    column.mapv_inplace(|v| v / peak);
                }
            }
        }
        normed
    } else {
        profile.data.clone()
    };
    let mut data = Array3::<f32>::zeros((channels, lags, frames - 1));
    for ch in 0..channels {
        for lag in 0..lags {
            for f in 0..frames - 1 {
                data[[ch, lag, f]] = (source[[ch, lag, f + 1]] - source[[ch, lag, f]]).abs();
            }
        }
    }
    Ok(EchoProfile { data, frame_rate: profile.frame_rate })
}

/// Crop the lag axis and slide a fixed-size window along the frame axis.
pub fn extract_windows(
    flow: &EchoProfile,
    lag_crop: usize,
    win_frames: usize,
    hop_frames: usize,
) -> Result<Vec<FlowWindow>, EchoError> {
    let frames = flow.frames();
    if frames < win_frames {
        return Err(EchoError::TooFewFrames { needed: win_frames, got: frames });
    }
    let lag_crop = lag_crop.min(flow.lags());
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + win_frames <= frames {
        let data = flow
            .data
            .slice(ndarray::s![.., 0..lag_crop, start..start + win_frames])
            .to_owned();
        out.push(FlowWindow { data, start_time: start as f64 / flow.frame_rate });
        start += hop_frames;
    }
    Ok(out)
}

/// Zero the lags outside the requested region; shape is preserved so models
/// need no re-architecture.
pub fn crop_region(window: &FlowWindow, region: Region) -> FlowWindow {
    let mut data = window.data.clone();
    match region {
        Region::Full => {}
        Region::Face => {
            data.slice_mut(ndarray::s![.., FACE_LAGS.., ..]).fill(0.0);
        }
        Region::Body => {
            data.slice_mut(ndarray::s![.., ..FACE_LAGS, ..]).fill(0.0);
        }
    }
    FlowWindow { data, start_time: window.start_time }
}

/// Mean over channels of a window, `[lag, frame]`; used for rendering.
pub fn channel_mean(window: &FlowWindow) -> ndarray::Array2<f32> {
    let sum = window.data.sum_axis(Axis(0));
    sum / window.data.shape()[0] as f32
}
