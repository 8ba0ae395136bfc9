//! FMCW chirp synthesis and linear-phase bandpass filtering.
//!
//! Two ultrasonic bands are transmitted concurrently (18–21.5 kHz and
//! 21.5–24.5 kHz by default). Received audio is bandpass-filtered per band
//! before correlation so that the four transmitter→receiver paths stay
//! separable and audible content is rejected.

use thiserror::Error;

/// Sample rate used throughout the default configuration, in Hz.
pub const DEFAULT_SAMPLE_RATE: f64 = 50_000.0;
/// Samples per chirp sweep.
pub const DEFAULT_SWEEP_SAMPLES: usize = 600;
/// Default bandpass kernel length (odd, linear phase).
pub const DEFAULT_FILTER_TAPS: usize = 255;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid chirp config: {0}")]
    InvalidChirp(String),
    #[error("invalid band: low {low} Hz, high {high} Hz at sample rate {sample_rate} Hz")]
    InvalidBand { low: f64, high: f64, sample_rate: f64 },
    #[error("tap count must be odd and positive, got {0}")]
    BadTapCount(usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),
}

/// Physical constants of the propagation medium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Speed of sound in m/s (dry air at 20 °C).
    pub speed_of_sound: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { speed_of_sound: 343.0 }
    }
}

impl PhysicalConstants {
    /// Round-trip distance for one lag step: C / (2·Fs), in metres.
    pub fn range_resolution(&self, sample_rate: f64) -> f64 {
        self.speed_of_sound / (2.0 * sample_rate)
    }

    /// Distance in metres corresponding to a correlation lag.
    pub fn lag_to_distance(&self, lag: f64, sample_rate: f64) -> f64 {
        lag * self.speed_of_sound / (2.0 * sample_rate)
    }

    /// Fractional lag corresponding to a round-trip distance in metres.
    pub fn distance_to_lag(&self, distance_m: f64, sample_rate: f64) -> f64 {
        2.0 * distance_m * sample_rate / self.speed_of_sound
    }

    /// Maximum unambiguous range for a sweep of `n_samples`, in metres.
    pub fn max_range(&self, n_samples: usize, sample_rate: f64) -> f64 {
        (n_samples as f64) * self.speed_of_sound / (2.0 * sample_rate)
    }
}

/// Linear up-chirp transmit definition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChirpConfig {
    /// Instantaneous frequency at the first sample, Hz.
    pub f_start: f64,
    /// Instantaneous frequency approached at the last sample, Hz.
    pub f_end: f64,
    /// Samples per sweep.
    pub n_samples: usize,
    /// Sample rate, Hz.
    pub sample_rate: f64,
    /// Linear amplitude in [0, 1].
    pub amplitude: f64,
}

impl ChirpConfig {
    /// Default left transmitter band: 18–21.5 kHz.
    pub fn left_band() -> Self {
        Self {
            f_start: 18_000.0,
            f_end: 21_500.0,
            n_samples: DEFAULT_SWEEP_SAMPLES,
            sample_rate: DEFAULT_SAMPLE_RATE,
            amplitude: 1.0,
        }
    }

    /// Default right transmitter band: 21.5–24.5 kHz.
    pub fn right_band() -> Self {
        Self {
            f_start: 21_500.0,
            f_end: 24_500.0,
            n_samples: DEFAULT_SWEEP_SAMPLES,
            sample_rate: DEFAULT_SAMPLE_RATE,
            amplitude: 1.0,
        }
    }

    /// Sweep period T = N / Fs in seconds.
    pub fn sweep_period(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    /// Bandwidth f_end − f_start in Hz.
    pub fn bandwidth(&self) -> f64 {
        self.f_end - self.f_start
    }

    /// Echo frames produced per second of audio: Fs / N.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate / self.n_samples as f64
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.n_samples == 0 {
            return Err(SignalError::InvalidChirp("n_samples must be positive".into()));
        }
        if !(self.f_start > 0.0 && self.f_end >= self.f_start) {
            return Err(SignalError::InvalidChirp(format!(
                "need 0 < f_start <= f_end, got {} and {}",
                self.f_start, self.f_end
            )));
        }
        if self.f_end >= self.sample_rate / 2.0 {
            return Err(SignalError::InvalidChirp(format!(
                "f_end {} Hz violates Nyquist at Fs {}",
                self.f_end, self.sample_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(SignalError::InvalidChirp(format!(
                "amplitude {} outside [0, 1]",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Real-valued sampled audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }
}

/// Generate one sweep of a continuous-phase linear up-chirp.
///
/// The instantaneous frequency is `f_start` at sample 0 and approaches
/// `f_end` at sample N−1; repeating the returned sweep back-to-back gives a
/// continuous emission for the default band plans.
pub fn generate_chirp(cfg: &ChirpConfig) -> Result<Waveform, SignalError> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let t_sweep = cfg.sweep_period();
    let slope = (cfg.f_end - cfg.f_start) / t_sweep;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / cfg.sample_rate;
        let phase = 2.0 * std::f64::consts::PI * (cfg.f_start * t + 0.5 * slope * t * t);
        samples.push(cfg.amplitude * phase.sin());
    }
    Ok(Waveform::new(samples, cfg.sample_rate))
}

/// Linear-phase FIR bandpass kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub taps: Vec<f64>,
    /// Passband (low Hz, high Hz).
    pub band: (f64, f64),
    /// Group delay in samples, (taps.len() − 1) / 2 for the symmetric kernel.
    pub group_delay: usize,
}

impl FilterKernel {
    /// Magnitude of the kernel's frequency response at `freq` Hz.
    pub fn response_at(&self, freq: f64, sample_rate: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq / sample_rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, tap) in self.taps.iter().enumerate() {
            re += tap * (omega * k as f64).cos();
            im -= tap * (omega * k as f64).sin();
        }
        (re * re + im * im).sqrt()
    }
}

fn blackman(n: usize, m: usize) -> f64 {
    let x = n as f64 / (m - 1) as f64;
    let tau = 2.0 * std::f64::consts::PI;
    0.42 - 0.5 * (tau * x).cos() + 0.08 * (2.0 * tau * x).cos()
}

/// Design a Blackman-windowed-sinc bandpass filter.
///
/// The kernel is symmetric (odd tap count) so phase is linear and the group
/// delay is an integer number of samples, which keeps correlation-lag
/// geometry intact downstream.
pub fn design_bandpass(
    low: f64,
    high: f64,
    sample_rate: f64,
    n_taps: usize,
) -> Result<FilterKernel, SignalError> {
    if !(low > 0.0 && low < high && high < sample_rate / 2.0) {
        return Err(SignalError::InvalidBand { low, high, sample_rate });
    }
    if n_taps == 0 || n_taps % 2 == 0 {
        return Err(SignalError::BadTapCount(n_taps));
    }
    let center = (n_taps - 1) / 2;
    let w_low = 2.0 * std::f64::consts::PI * low / sample_rate;
    let w_high = 2.0 * std::f64::consts::PI * high / sample_rate;
    let mut taps = Vec::with_capacity(n_taps);
    for n in 0..n_taps {
        let x = n as f64 - center as f64;
        let ideal = if x == 0.0 {
            (w_high - w_low) / std::f64::consts::PI
        } else {
            ((w_high * x).sin() - (w_low * x).sin()) / (std::f64::consts::PI * x)
        };
        let w = if n_taps == 1 { 1.0 } else { blackman(n, n_taps) };
        taps.push(ideal * w);
    }
    Ok(FilterKernel { taps, band: (low, high), group_delay: center })
}

/// Convolve `signal` with the kernel, compensating group delay so the output
/// is aligned to the input timeline and has the same length.
pub fn apply_filter(kernel: &FilterKernel, signal: &Waveform) -> Result<Waveform, SignalError> {
    let gd = kernel.group_delay as isize;
    let taps = &kernel.taps;
    let x = &signal.samples;
    let len = x.len() as isize;
    let mut out = vec![0.0f64; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        // y[i] = sum_k taps[k] * x[i + gd - k]
        let base = i as isize + gd;
        let k_lo = (base - len + 1).max(0) as usize;
        let k_hi = (base + 1).min(taps.len() as isize) as usize;
        let mut acc = 0.0;
        for (k, tap) in taps.iter().enumerate().take(k_hi).skip(k_lo) {
            acc += tap * x[(base - k as isize) as usize];
        }
        *o = acc;
    }
    Ok(Waveform::new(out, signal.sample_rate))
}

/// Filter with an explicit sample-rate check against the rate the kernel was
/// designed for.
pub fn apply_filter_checked(
    kernel: &FilterKernel,
    signal: &Waveform,
    design_rate: f64,
) -> Result<Waveform, SignalError> {
    if (signal.sample_rate - design_rate).abs() > 1e-9 {
        return Err(SignalError::SampleRateMismatch(signal.sample_rate, design_rate));
    }
    apply_filter(kernel, signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Instantaneous frequency estimate from zero-crossing spacing around a
    /// sample index.
    fn zero_crossing_freq(w: &Waveform, around: usize, span: usize) -> f64 {
        let lo = around.saturating_sub(span / 2);
        let hi = (around + span / 2).min(w.len() - 1);
        let mut crossings = Vec::new();
        for i in lo..hi {
            let (a, b) = (w.samples[i], w.samples[i + 1]);
            if (a <= 0.0 && b > 0.0) || (a >= 0.0 && b < 0.0) {
                // linear interpolation of the crossing position
                crossings.push(i as f64 + a / (a - b));
            }
        }
        assert!(crossings.len() >= 2, "not enough crossings near {around}");
        let spacing =
            (crossings.last().unwrap() - crossings[0]) / (crossings.len() - 1) as f64;
        // two crossings per period
        w.sample_rate / (2.0 * spacing)
    }

    #[test]
    fn chirp_sweeps_left_band() {
        let w = generate_chirp(&ChirpConfig::left_band()).unwrap();
        assert_eq!(w.len(), 600);
        assert!(w.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        let f_lo = zero_crossing_freq(&w, 30, 60);
        let f_hi = zero_crossing_freq(&w, 570, 60);
        assert!((f_lo - 18_000.0).abs() < 400.0, "start freq {f_lo}");
        assert!((f_hi - 21_500.0).abs() < 400.0, "end freq {f_hi}");
        // monotone rise across quarters
        let q: Vec<f64> =
            [75, 225, 375, 525].iter().map(|&c| zero_crossing_freq(&w, c, 90)).collect();
        assert!(q.windows(2).all(|p| p[1] > p[0]), "quarters {q:?}");
    }

    #[test]
    fn zero_bandwidth_is_pure_tone() {
        let cfg = ChirpConfig {
            f_start: 20_000.0,
            f_end: 20_000.0,
            ..ChirpConfig::left_band()
        };
        let w = generate_chirp(&cfg).unwrap();
        let f_a = zero_crossing_freq(&w, 100, 80);
        let f_b = zero_crossing_freq(&w, 480, 80);
        assert!((f_a - 20_000.0).abs() < 100.0);
        assert!((f_b - 20_000.0).abs() < 100.0);
    }

    #[test]
    fn zero_amplitude_is_silence() {
        let cfg = ChirpConfig { amplitude: 0.0, ..ChirpConfig::left_band() };
        let w = generate_chirp(&cfg).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn back_to_back_repetition_is_phase_continuous() {
        // For both default bands T·(f_start+f_end)/2 is an integer number of
        // cycles, so the sweep tiles without a phase step.
        for cfg in [ChirpConfig::left_band(), ChirpConfig::right_band()] {
            let w = generate_chirp(&cfg).unwrap();
            let t = cfg.sweep_period();
            let cycles = t * (cfg.f_start + cfg.f_end) / 2.0;
            assert!((cycles - cycles.round()).abs() < 1e-9, "cycles {cycles}");
            // first sample of the next repetition continues the sweep: the
            // phase at t=T equals 2π·cycles ≡ 0, matching sample 0.
            let next = (2.0 * std::f64::consts::PI
                * (cfg.f_start * t + 0.5 * (cfg.f_end - cfg.f_start) / t * t * t))
                .sin();
            assert!((next - w.samples[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = ChirpConfig::left_band();
        cfg.f_end = 26_000.0;
        assert!(matches!(generate_chirp(&cfg), Err(SignalError::InvalidChirp(_))));
        let mut cfg = ChirpConfig::left_band();
        cfg.n_samples = 0;
        assert!(generate_chirp(&cfg).is_err());
        let mut cfg = ChirpConfig::left_band();
        cfg.f_start = 22_000.0; // above f_end
        assert!(generate_chirp(&cfg).is_err());
    }

    #[test]
    fn bandpass_design_meets_mask() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, 255).unwrap();
        assert_eq!(k.taps.len(), 255);
        assert_eq!(k.group_delay, 127);
        let reference = k.response_at(19_750.0, 50_000.0);
        // passband centre within ±1 dB of unity
        let centre_db = 20.0 * reference.log10();
        assert!(centre_db.abs() < 1.0, "centre gain {centre_db} dB");
        // stopband: 5 kHz tone at least 40 dB below the passband centre
        let rejection = 20.0 * (k.response_at(5_000.0, 50_000.0) / reference).log10();
        assert!(rejection <= -40.0, "rejection {rejection} dB");
        // 1.5 kHz beyond both edges is already stopband
        for f in [16_500.0, 23_000.0] {
            let db = 20.0 * (k.response_at(f, 50_000.0) / reference).log10();
            assert!(db <= -40.0, "edge+1.5k {f} Hz at {db} dB");
        }
        // passband ripple < 1 dB over the inner 80 % of the band
        for i in 0..=20 {
            let f = 18_350.0 + i as f64 * (21_150.0 - 18_350.0) / 20.0;
            let db = 20.0 * (k.response_at(f, 50_000.0) / reference).log10();
            assert!(db.abs() < 1.0, "ripple {db} dB at {f} Hz");
        }
    }

    #[test]
    fn single_tap_wide_band_is_near_allpass() {
        let k = design_bandpass(100.0, 24_900.0, 50_000.0, 1).unwrap();
        assert_eq!(k.taps.len(), 1);
        assert_eq!(k.group_delay, 0);
        let w = Waveform::new(vec![0.0, 1.0, -0.5, 0.25], 50_000.0);
        let y = apply_filter(&k, &w).unwrap();
        for (a, b) in w.samples.iter().zip(&y.samples) {
            assert!((a * k.taps[0] - b).abs() < 1e-12);
        }
        // gain close to unity
        assert!((k.taps[0] - 1.0).abs() < 0.02, "tap {}", k.taps[0]);
    }

    #[test]
    fn rejects_bad_bands_and_even_taps() {
        assert!(design_bandpass(21_500.0, 18_000.0, 50_000.0, 255).is_err());
        assert!(design_bandpass(18_000.0, 26_000.0, 50_000.0, 255).is_err());
        assert!(matches!(
            design_bandpass(18_000.0, 21_500.0, 50_000.0, 256),
            Err(SignalError::BadTapCount(256))
        ));
    }

    /// Plain full convolution, used as the independent oracle for
    /// `apply_filter`'s aligned output.
    fn convolve_full(taps: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; taps.len() + x.len() - 1];
        for (i, xi) in x.iter().enumerate() {
            for (k, tk) in taps.iter().enumerate() {
                y[i + k] += xi * tk;
            }
        }
        y
    }

    #[test]
    fn filter_matches_convolution_oracle() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, 63).unwrap();
        let chirp = generate_chirp(&ChirpConfig::left_band()).unwrap();
        let y = apply_filter(&k, &chirp).unwrap();
        let full = convolve_full(&k.taps, &chirp.samples);
        for i in 0..chirp.len() {
            assert!((y.samples[i] - full[i + k.group_delay]).abs() < 1e-12);
        }
    }

    #[test]
    fn in_band_chirp_keeps_energy() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, DEFAULT_FILTER_TAPS).unwrap();
        // several sweeps so edge transients are negligible
        let sweep = generate_chirp(&ChirpConfig::left_band()).unwrap();
        let mut samples = Vec::new();
        for _ in 0..4 {
            samples.extend_from_slice(&sweep.samples);
        }
        let long = Waveform::new(samples, sweep.sample_rate);
        let y = apply_filter(&k, &long).unwrap();
        let ratio = y.energy() / long.energy();
        assert!(ratio >= 0.9, "in-band energy ratio {ratio}");
    }

    #[test]
    fn out_of_band_tone_is_rejected() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, DEFAULT_FILTER_TAPS).unwrap();
        let n = 2400;
        let tone: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 5_000.0 * i as f64 / 50_000.0).sin())
            .collect();
        let w = Waveform::new(tone, 50_000.0);
        let y = apply_filter(&k, &w).unwrap();
        assert!(y.rms() <= 0.01 * w.rms(), "tone leak rms {}", y.rms());
    }

    #[test]
    fn zero_signal_stays_zero() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, 31).unwrap();
        let y = apply_filter(&k, &Waveform::new(vec![0.0; 500], 50_000.0)).unwrap();
        assert!(y.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn cross_band_isolation() {
        let k_right = design_bandpass(21_500.0, 24_500.0, 50_000.0, DEFAULT_FILTER_TAPS).unwrap();
        let sweep = generate_chirp(&ChirpConfig::left_band()).unwrap();
        let mut samples = Vec::new();
        for _ in 0..4 {
            samples.extend_from_slice(&sweep.samples);
        }
        let left_long = Waveform::new(samples, sweep.sample_rate);
        let leaked = apply_filter(&k_right, &left_long).unwrap();
        let ratio = leaked.energy() / left_long.energy();
        assert!(ratio <= 0.05, "cross-band energy ratio {ratio}");
    }

    #[test]
    fn autocorrelation_is_sharp() {
        // Peak at lag 0; past the main lobe (Fs/B samples) everything is at
        // least 5x below the peak.
        for cfg in [ChirpConfig::left_band(), ChirpConfig::right_band()] {
            let w = generate_chirp(&cfg).unwrap();
            let n = w.len();
            let mut rx = w.samples.clone();
            rx.extend(std::iter::repeat(0.0).take(n));
            let corr: Vec<f64> = (0..n)
                .map(|lag| {
                    (0..n).map(|i| w.samples[i] * rx[i + lag]).sum::<f64>().abs()
                })
                .collect();
            let peak = corr[0];
            assert!(corr.iter().skip(1).all(|&v| v < peak), "peak not at lag 0");
            let main_lobe = (cfg.sample_rate / cfg.bandwidth()).ceil() as usize;
            let side = corr[main_lobe..].iter().cloned().fold(0.0, f64::max);
            assert!(peak / side > 5.0, "peak/sidelobe {} for {:?}", peak / side, cfg.band_dbg());
        }
    }

    impl ChirpConfig {
        fn band_dbg(&self) -> (f64, f64) {
            (self.f_start, self.f_end)
        }
    }

    #[test]
    fn sample_rate_check() {
        let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, 31).unwrap();
        let w = Waveform::new(vec![0.0; 10], 44_100.0);
        assert!(matches!(
            apply_filter_checked(&k, &w, 50_000.0),
            Err(SignalError::SampleRateMismatch(_, _))
        ));
    }

    #[test]
    fn range_arithmetic() {
        let c = PhysicalConstants::default();
        let fs = DEFAULT_SAMPLE_RATE;
        assert_eq!(c.range_resolution(fs), 0.00343);
        assert_eq!(c.lag_to_distance(1.0, fs), 0.00343);
        assert_eq!(c.max_range(600, fs), 2.058);
        assert_eq!(c.distance_to_lag(0.343, fs), 100.0);
        let cfg = ChirpConfig::left_band();
        assert_eq!(cfg.sweep_period(), 0.012);
    }

    proptest! {
        #[test]
        fn filtering_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Waveform::new((0..300).map(|_| rng.gen_range(-1.0..1.0)).collect(), 50_000.0);
            let y = Waveform::new((0..300).map(|_| rng.gen_range(-1.0..1.0)).collect(), 50_000.0);
            let k = design_bandpass(18_000.0, 21_500.0, 50_000.0, 63).unwrap();
            let mixed = Waveform::new(
                x.samples.iter().zip(&y.samples).map(|(xi, yi)| a * xi + b * yi).collect(),
                50_000.0,
            );
            let lhs = apply_filter(&k, &mixed).unwrap();
            let fx = apply_filter(&k, &x).unwrap();
            let fy = apply_filter(&k, &y).unwrap();
            let scale = lhs.samples.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            for i in 0..300 {
                let rhs = a * fx.samples[i] + b * fy.samples[i];
                prop_assert!((lhs.samples[i] - rhs).abs() / scale < 1e-9);
            }
        }
    }
}
