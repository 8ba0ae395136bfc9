//! Simulated acoustic round trip with known ground truth.
//!
//! Moving reflectors delay and attenuate the periodic transmit stream; the
//! two microphone streams are the sum over reflectors and both transmitters,
//! plus optional white noise and interference tones. Because the reflector
//! trajectories are known, every sweep carries a ground-truth lag, which
//! stands in for hardware measurements when verifying the ranging pipeline.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::signal::{PhysicalConstants, Waveform};

/// Number of transmitter→receiver paths (2 TX × 2 RX).
pub const N_PATHS: usize = 4;
/// Distance floor for the spreading-loss model, metres.
pub const SPREAD_FLOOR_M: f64 = 0.05;
/// Reference distance of the spreading-loss model, metres: a reflector with
/// reflectivity 1 at this distance echoes at unit amplitude.
pub const SPREAD_REFERENCE_M: f64 = 0.1;
/// Taps of the windowed-sinc fractional-delay interpolator. The transmit
/// bands sit at 0.72-0.98 of Nyquist where short interpolators droop badly;
/// 32 taps keep correlation peaks within ±1 lag across the whole range.
pub const DELAY_INTERP_TAPS: usize = 32;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),
    #[error("trajectory leaves (0, {max_m} m]: distance {distance_m} m at t={t_s} s")]
    OutOfRange { distance_m: f64, t_s: f64, max_m: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unknown activity class '{0}'")]
    UnknownClass(String),
    #[error("scene file: {0}")]
    SceneFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distance-versus-time script of one scatterer.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// Constant distance.
    Static { distance_m: f64 },
    /// d(t) = center + amplitude·sin(2π·rate·t + phase).
    Sinusoid { center_m: f64, amplitude_m: f64, rate_hz: f64, phase: f64 },
    /// d(t) = start + velocity·t, clamped to [min, max].
    Linear { start_m: f64, velocity_mps: f64, min_m: f64, max_m: f64 },
    /// Sinusoid that is only active during a periodic gate; outside the gate
    /// the distance rests at `center_m`. Models impulsive motions.
    GatedSinusoid {
        center_m: f64,
        amplitude_m: f64,
        rate_hz: f64,
        gate_hz: f64,
        duty: f64,
        phase: f64,
    },
}

impl Trajectory {
    pub fn distance_at(&self, t: f64) -> f64 {
        match *self {
            Trajectory::Static { distance_m } => distance_m,
            Trajectory::Sinusoid { center_m, amplitude_m, rate_hz, phase } => {
                center_m
                    + amplitude_m
                        * (2.0 * std::f64::consts::PI * rate_hz * t + phase).sin()
            }
            Trajectory::Linear { start_m, velocity_mps, min_m, max_m } => {
                (start_m + velocity_mps * t).clamp(min_m, max_m)
            }
            Trajectory::GatedSinusoid { center_m, amplitude_m, rate_hz, gate_hz, duty, phase } => {
                let cycle = (t * gate_hz).fract();
                if cycle < duty {
                    center_m
                        + amplitude_m
                            * (2.0 * std::f64::consts::PI * rate_hz * t + phase).sin()
                } else {
                    center_m
                }
            }
        }
    }
}

/// One scatterer: where it is over time and how strongly it reflects.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflector {
    pub trajectory: Trajectory,
    /// Linear reflection gain in [0, 1].
    pub reflectivity: f64,
    pub label: String,
}

/// An interference tone added to both microphones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub freq_hz: f64,
    pub amplitude: f64,
}

/// A complete simulated recording setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub reflectors: Vec<Reflector>,
    pub duration_s: f64,
    /// Echo-power to noise-power ratio in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub interference: Vec<Tone>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.duration_s <= 0.0 {
            return Err(ChannelError::InvalidScene("duration must be positive".into()));
        }
        for r in &self.reflectors {
            if !(0.0..=1.0).contains(&r.reflectivity) {
                return Err(ChannelError::InvalidScene(format!(
                    "reflectivity {} outside [0,1] for '{}'",
                    r.reflectivity, r.label
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth for one sweep: the rounded correlation lag of each reflector.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTruth {
    pub sweep: usize,
    pub label: String,
    /// Lag per path in channel order (TL→RL, TL→RR, TR→RL, TR→RR). The
    /// monostatic geometry makes all four equal today.
    pub lags: [usize; N_PATHS],
    /// Set when the true lag reached the end of the unambiguous range and was
    /// clamped to N−1.
    pub clamped: bool,
}

/// Simulated microphone streams plus per-sweep ground truth.
#[derive(Debug, Clone)]
pub struct MicStreams {
    pub left: Waveform,
    pub right: Waveform,
    pub truth: Vec<SweepTruth>,
}

/// Amplitude gain of the spreading-loss model at distance `d`.
pub fn spreading_gain(d: f64) -> f64 {
    let d = d.max(SPREAD_FLOOR_M);
    (SPREAD_REFERENCE_M / d) * (SPREAD_REFERENCE_M / d)
}

/// Windowed-sinc interpolation of the periodic transmit stream at fractional
/// sample position `pos` (samples before emission start read as zero).
fn interp_tx(tile: &[f64], pos: f64) -> f64 {
    let n = tile.len() as isize;
    let half = (DELAY_INTERP_TAPS / 2) as isize;
    let base = pos.floor() as isize;
    let frac = pos - base as f64;
    let mut acc = 0.0;
    for k in (1 - half)..=half {
        let j = base + k;
        if j < 0 {
            continue;
        }
        let x = k as f64 - frac;
        let sinc = if x == 0.0 {
            1.0
        } else {
            let px = std::f64::consts::PI * x;
            px.sin() / px
        };
        // Hann window over the tap support
        let w = if x.abs() < half as f64 {
            0.5 * (1.0 + (std::f64::consts::PI * x / half as f64).cos())
        } else {
            0.0
        };
        acc += tile[(j % n) as usize] * sinc * w;
    }
    acc
}

/// Render the acoustic round trip for a scene.
///
/// Both transmit waveforms repeat back-to-back for the scene duration. Each
/// microphone receives, per reflector and per transmitter, the transmit
/// stream delayed by the round trip 2·d(t)/C, scaled by reflectivity and
/// spreading loss. White Gaussian noise is added at `snr_db` relative to the
/// accumulated echo power, then interference tones. Deterministic for a
/// fixed seed.
pub fn simulate(
    tx_left: &Waveform,
    tx_right: &Waveform,
    scene: &Scene,
    seed: u64,
) -> Result<MicStreams, ChannelError> {
    if (tx_left.sample_rate - tx_right.sample_rate).abs() > 1e-9 {
        return Err(ChannelError::SampleRateMismatch(
            tx_left.sample_rate,
            tx_right.sample_rate,
        ));
    }
    scene.validate()?;
    let fs = tx_left.sample_rate;
    let n = tx_left.len();
    let constants = PhysicalConstants::default();
    let r_max = constants.max_range(n, fs);
    let len = (scene.duration_s * fs).round() as usize;

    // Echo sums; the monostatic geometry means both mics hear the same
    // echoes, so render once and copy.
    let mut echo = vec![0.0f64; len];
    for tx in [tx_left, tx_right] {
        for refl in &scene.reflectors {
            let gain_base = refl.reflectivity;
            for (i, e) in echo.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let d = refl.trajectory.distance_at(t);
                if d <= 0.0 || d > r_max + 1e-12 {
                    return Err(ChannelError::OutOfRange {
                        distance_m: d,
                        t_s: t,
                        max_m: r_max,
                    });
                }
                let delay = constants.distance_to_lag(d, fs);
                *e += gain_base * spreading_gain(d) * interp_tx(&tx.samples, i as f64 - delay);
            }
        }
    }

    let mut left = echo.clone();
    let mut right = echo;

    // Noise at the requested SNR relative to echo power; zero-power scenes
    // stay silent.
    if let Some(snr_db) = scene.snr_db {
        let power = left.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
        if power > 0.0 {
            let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("sigma finite");
            for v in left.iter_mut() {
                *v += normal.sample(&mut rng);
            }
            for v in right.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    for tone in &scene.interference {
        for (i, (l, r)) in left.iter_mut().zip(right.iter_mut()).enumerate() {
            let s = tone.amplitude
                * (2.0 * std::f64::consts::PI * tone.freq_hz * i as f64 / fs).sin();
            *l += s;
            *r += s;
        }
    }

    // Ground truth at each sweep midpoint.
    let sweeps = len / n;
    let mut truth = Vec::new();
    for s in 0..sweeps {
        let t_mid = (s * n) as f64 / fs + 0.5 * n as f64 / fs;
        for refl in &scene.reflectors {
            let d = refl.trajectory.distance_at(t_mid);
            let lag_f = constants.distance_to_lag(d, fs);
            let rounded = lag_f.round() as usize;
            let clamped = rounded >= n;
            let lag = rounded.min(n - 1);
            truth.push(SweepTruth {
                sweep: s,
                label: refl.label.clone(),
                lags: [lag; N_PATHS],
                clamped,
            });
        }
    }

    Ok(MicStreams {
        left: Waveform::new(left, fs),
        right: Waveform::new(right, fs),
        truth,
    })
}

/// Names of the synthetic activity catalog. `null` doubles as the background
/// class used for unlabelled stretches.
pub const ACTIVITY_CATALOG: [&str; 8] = [
    "static",
    "chew",
    "drink-lift",
    "walk-sway",
    "brush-face",
    "wipe-arm",
    "cough-jerk",
    "null",
];

fn jitter(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Build a scene from the parametric motion script of a catalog class.
///
/// Amplitudes, rates and phases are jittered per seed so that repeated draws
/// of one class form a family rather than a single fixed recording; the
/// scripts occupy distinct regions of (range band, rate, burstiness) space so
/// the classes stay distinguishable in acoustic flow.
pub fn synth_activity_scene(
    class_name: &str,
    duration_s: f64,
    seed: u64,
) -> Result<Scene, ChannelError> {
    let class_idx = ACTIVITY_CATALOG
        .iter()
        .position(|c| *c == class_name)
        .ok_or_else(|| ChannelError::UnknownClass(class_name.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class_idx as u64) << 32));
    let torso = Reflector {
        trajectory: Trajectory::Static { distance_m: jitter(&mut rng, 0.48, 0.55) },
        reflectivity: 0.4,
        label: "torso".into(),
    };
    let knee = Reflector {
        trajectory: Trajectory::Static { distance_m: jitter(&mut rng, 0.85, 0.95) },
        reflectivity: 0.3,
        label: "knee".into(),
    };
    let phase = jitter(&mut rng, 0.0, std::f64::consts::PI);
    let reflectors = match class_name {
        "static" => vec![torso, knee],
        "chew" => vec![
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.10, 0.15),
                    amplitude_m: jitter(&mut rng, 0.012, 0.02),
                    rate_hz: jitter(&mut rng, 1.5, 3.0),
                    phase,
                },
                reflectivity: 0.25,
                label: "jaw".into(),
            },
            torso,
        ],
        "drink-lift" => vec![
            // long excursion from lap level up to the mouth and back
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.42, 0.48),
                    amplitude_m: jitter(&mut rng, 0.28, 0.33),
                    rate_hz: jitter(&mut rng, 0.25, 0.4),
                    phase,
                },
                reflectivity: 0.35,
                label: "hand+cup".into(),
            },
            torso,
        ],
        "walk-sway" => vec![
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.48, 0.55),
                    amplitude_m: jitter(&mut rng, 0.05, 0.08),
                    rate_hz: jitter(&mut rng, 0.8, 1.2),
                    phase,
                },
                reflectivity: 0.4,
                label: "torso".into(),
            },
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.85, 0.95),
                    amplitude_m: jitter(&mut rng, 0.06, 0.10),
                    rate_hz: jitter(&mut rng, 0.8, 1.2),
                    phase: phase + 1.0,
                },
                reflectivity: 0.3,
                label: "legs".into(),
            },
        ],
        "brush-face" => vec![
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.09, 0.12),
                    amplitude_m: jitter(&mut rng, 0.02, 0.03),
                    rate_hz: jitter(&mut rng, 3.5, 5.0),
                    phase,
                },
                reflectivity: 0.3,
                label: "hand@face".into(),
            },
            torso,
        ],
        "wipe-arm" => vec![
            Reflector {
                trajectory: Trajectory::Sinusoid {
                    center_m: jitter(&mut rng, 0.32, 0.38),
                    amplitude_m: jitter(&mut rng, 0.09, 0.12),
                    rate_hz: jitter(&mut rng, 0.65, 1.0),
                    phase,
                },
                reflectivity: 0.35,
                label: "forearm".into(),
            },
            torso,
            knee,
        ],
        "cough-jerk" => vec![
            Reflector {
                trajectory: Trajectory::GatedSinusoid {
                    center_m: jitter(&mut rng, 0.42, 0.5),
                    amplitude_m: jitter(&mut rng, 0.05, 0.07),
                    rate_hz: jitter(&mut rng, 5.0, 7.0),
                    gate_hz: jitter(&mut rng, 0.4, 0.6),
                    duty: jitter(&mut rng, 0.15, 0.25),
                    phase,
                },
                reflectivity: 0.4,
                label: "chest".into(),
            },
            knee,
        ],
        "null" => {
            // diffuse low-energy drift across the range
            let mut refl = Vec::new();
            for i in 0..3 {
                let start = jitter(&mut rng, 0.15, 1.2);
                refl.push(Reflector {
                    trajectory: Trajectory::Linear {
                        start_m: start,
                        velocity_mps: jitter(&mut rng, -0.015, 0.015),
                        min_m: 0.08,
                        max_m: 1.6,
                    },
                    reflectivity: 0.2,
                    label: format!("drift{i}"),
                });
            }
            refl
        }
        _ => unreachable!("class membership checked above"),
    };
    Ok(Scene { reflectors, duration_s, snr_db: Some(30.0), interference: Vec::new() })
}

// --- scene file format: flat key=value with one [reflector] section each ---

fn fmt_trajectory(out: &mut String, t: &Trajectory) {
    match t {
        Trajectory::Static { distance_m } => {
            let _ = writeln!(out, "trajectory=static\ndistance_m={distance_m}");
        }
        Trajectory::Sinusoid { center_m, amplitude_m, rate_hz, phase } => {
            let _ = writeln!(
                out,
                "trajectory=sinusoid\ncenter_m={center_m}\namplitude_m={amplitude_m}\nrate_hz={rate_hz}\nphase={phase}"
            );
        }
        Trajectory::Linear { start_m, velocity_mps, min_m, max_m } => {
            let _ = writeln!(
                out,
                "trajectory=linear\nstart_m={start_m}\nvelocity_mps={velocity_mps}\nmin_m={min_m}\nmax_m={max_m}"
            );
        }
        Trajectory::GatedSinusoid { center_m, amplitude_m, rate_hz, gate_hz, duty, phase } => {
            let _ = writeln!(
                out,
                "trajectory=gated-sinusoid\ncenter_m={center_m}\namplitude_m={amplitude_m}\nrate_hz={rate_hz}\ngate_hz={gate_hz}\nduty={duty}\nphase={phase}"
            );
        }
    }
}

/// Serialize a scene to the flat key=value text format.
pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "duration_s={}", scene.duration_s);
    if let Some(snr) = scene.snr_db {
        let _ = writeln!(out, "snr_db={snr}");
    }
    if !scene.interference.is_empty() {
        let tones: Vec<String> = scene
            .interference
            .iter()
            .map(|t| format!("{}:{}", t.freq_hz, t.amplitude))
            .collect();
        let _ = writeln!(out, "interference={}", tones.join(","));
    }
    for r in &scene.reflectors {
        let _ = writeln!(out, "\n[reflector]");
        let _ = writeln!(out, "label={}", r.label);
        let _ = writeln!(out, "reflectivity={}", r.reflectivity);
        fmt_trajectory(&mut out, &r.trajectory);
    }
    out
}

fn parse_f64(map: &std::collections::BTreeMap<String, String>, key: &str) -> Result<f64, ChannelError> {
    map.get(key)
        .ok_or_else(|| ChannelError::SceneFile(format!("missing key '{key}'")))?
        .parse()
        .map_err(|e| ChannelError::SceneFile(format!("bad value for '{key}': {e}")))
}

/// Parse the flat key=value scene format produced by [`scene_to_string`].
pub fn scene_from_string(text: &str) -> Result<Scene, ChannelError> {
    let mut header = std::collections::BTreeMap::new();
    let mut sections: Vec<std::collections::BTreeMap<String, String>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[reflector]" {
            sections.push(Default::default());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ChannelError::SceneFile(format!("line {}: expected key=value", lineno + 1))
        })?;
        let target = sections.last_mut().unwrap_or(&mut header);
        target.insert(k.trim().to_string(), v.trim().to_string());
    }
    let duration_s = parse_f64(&header, "duration_s")?;
    let snr_db = match header.get("snr_db") {
        Some(v) => Some(v.parse().map_err(|e| ChannelError::SceneFile(format!("snr_db: {e}")))?),
        None => None,
    };
    let mut interference = Vec::new();
    if let Some(tones) = header.get("interference") {
        for part in tones.split(',').filter(|p| !p.is_empty()) {
            let (f, a) = part
                .split_once(':')
                .ok_or_else(|| ChannelError::SceneFile(format!("bad tone '{part}'")))?;
            interference.push(Tone {
                freq_hz: f.parse().map_err(|e| ChannelError::SceneFile(format!("tone freq: {e}")))?,
                amplitude: a
                    .parse()
                    .map_err(|e| ChannelError::SceneFile(format!("tone amplitude: {e}")))?,
            });
        }
    }
    let mut reflectors = Vec::new();
    for sec in &sections {
        let label = sec.get("label").cloned().unwrap_or_default();
        let reflectivity = parse_f64(sec, "reflectivity")?;
        let kind = sec
            .get("trajectory")
            .ok_or_else(|| ChannelError::SceneFile("missing trajectory kind".into()))?;
        let trajectory = match kind.as_str() {
            "static" => Trajectory::Static { distance_m: parse_f64(sec, "distance_m")? },
            "sinusoid" => Trajectory::Sinusoid {
                center_m: parse_f64(sec, "center_m")?,
                amplitude_m: parse_f64(sec, "amplitude_m")?,
                rate_hz: parse_f64(sec, "rate_hz")?,
                phase: parse_f64(sec, "phase")?,
            },
            "linear" => Trajectory::Linear {
                start_m: parse_f64(sec, "start_m")?,
                velocity_mps: parse_f64(sec, "velocity_mps")?,
                min_m: parse_f64(sec, "min_m")?,
                max_m: parse_f64(sec, "max_m")?,
            },
            "gated-sinusoid" => Trajectory::GatedSinusoid {
                center_m: parse_f64(sec, "center_m")?,
                amplitude_m: parse_f64(sec, "amplitude_m")?,
                rate_hz: parse_f64(sec, "rate_hz")?,
                gate_hz: parse_f64(sec, "gate_hz")?,
                duty: parse_f64(sec, "duty")?,
                phase: parse_f64(sec, "phase")?,
            },
            other => {
                return Err(ChannelError::SceneFile(format!("unknown trajectory '{other}'")))
            }
        };
        reflectors.push(Reflector { trajectory, reflectivity, label });
    }
    Ok(Scene { reflectors, duration_s, snr_db, interference })
}

/// Write the per-sweep ground truth as CSV (`sweep_index,label,lag`).
pub fn write_truth_csv(path: &Path, truth: &[SweepTruth]) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sweep_index", "label", "lag"]).map_err(csv_err)?;
    for t in truth {
        w.write_record([t.sweep.to_string(), t.label.clone(), t.lags[0].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> ChannelError {
    ChannelError::SceneFile(format!("truth csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_chirp, ChirpConfig};

    fn chirps() -> (Waveform, Waveform) {
        (
            generate_chirp(&ChirpConfig::left_band()).unwrap(),
            generate_chirp(&ChirpConfig::right_band()).unwrap(),
        )
    }

    fn static_scene(d: f64, duration_s: f64) -> Scene {
        Scene {
            reflectors: vec![Reflector {
                trajectory: Trajectory::Static { distance_m: d },
                reflectivity: 0.5,
                label: "target".into(),
            }],
            duration_s,
            snr_db: None,
            interference: Vec::new(),
        }
    }

    #[test]
    fn truth_lag_for_343mm_is_100() {
        let (l, r) = chirps();
        let mics = simulate(&l, &r, &static_scene(0.343, 0.1), 7).unwrap();
        assert!(!mics.truth.is_empty());
        for t in &mics.truth {
            assert_eq!(t.lags, [100; N_PATHS]);
            assert!(!t.clamped);
        }
    }

    #[test]
    fn truth_lag_grid_matches_formula() {
        let constants = PhysicalConstants::default();
        let (l, r) = chirps();
        for i in 0..50 {
            let d = 0.1 + (2.0 - 0.1) * (i as f64 + 0.5) / 50.0;
            let mics = simulate(&l, &r, &static_scene(d, 0.024), 1).unwrap();
            let expect = constants.distance_to_lag(d, 50_000.0).round() as usize;
            assert_eq!(mics.truth[0].lags[0], expect.min(599), "d={d}");
        }
    }

    #[test]
    fn empty_scene_is_silent() {
        let (l, r) = chirps();
        let scene = Scene {
            reflectors: Vec::new(),
            duration_s: 0.05,
            snr_db: None,
            interference: Vec::new(),
        };
        let mics = simulate(&l, &r, &scene, 3).unwrap();
        assert!(mics.left.samples.iter().all(|&v| v == 0.0));
        assert!(mics.right.samples.iter().all(|&v| v == 0.0));
        assert!(mics.truth.is_empty());
    }

    #[test]
    fn max_range_reflector_is_clamped() {
        let (l, r) = chirps();
        let mics = simulate(&l, &r, &static_scene(2.058, 0.05), 3).unwrap();
        assert!(mics.truth.iter().all(|t| t.lags[0] == 599 && t.clamped));
        // beyond max range is an error
        let err = simulate(&l, &r, &static_scene(2.07, 0.05), 3);
        assert!(matches!(err, Err(ChannelError::OutOfRange { .. })));
    }

    #[test]
    fn reflectivity_is_linear() {
        let (l, r) = chirps();
        let mut scene = static_scene(0.4, 0.05);
        let a = simulate(&l, &r, &scene, 5).unwrap();
        scene.reflectors[0].reflectivity = 1.0;
        let b = simulate(&l, &r, &scene, 5).unwrap();
        let scale = a.left.samples.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(scale > 0.0);
        for (x, y) in a.left.samples.iter().zip(&b.left.samples) {
            assert!((2.0 * x - y).abs() <= 1e-6 * scale.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn static_scene_is_periodic_after_transient() {
        let (l, r) = chirps();
        let mics = simulate(&l, &r, &static_scene(0.7, 0.06), 9).unwrap();
        let n = 600;
        let s = &mics.left.samples;
        let peak = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in n..(s.len() - n) {
            assert!(
                (s[i] - s[i + n]).abs() <= 1e-6 * peak,
                "period break at {i}: {} vs {}",
                s[i],
                s[i + n]
            );
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (l, r) = chirps();
        let mut scene = static_scene(0.5, 0.05);
        scene.snr_db = Some(20.0);
        let a = simulate(&l, &r, &scene, 42).unwrap();
        let b = simulate(&l, &r, &scene, 42).unwrap();
        assert_eq!(a.left.samples, b.left.samples);
        assert_eq!(a.right.samples, b.right.samples);
        let c = simulate(&l, &r, &scene, 43).unwrap();
        assert_ne!(a.left.samples, c.left.samples);
    }

    #[test]
    fn catalog_scenes_are_deterministic_and_distinct() {
        for class in ACTIVITY_CATALOG {
            let a = synth_activity_scene(class, 2.0, 11).unwrap();
            let b = synth_activity_scene(class, 2.0, 11).unwrap();
            assert_eq!(a, b, "class {class} not deterministic");
            let c = synth_activity_scene(class, 2.0, 12).unwrap();
            if class != "static" {
                assert_ne!(a, c, "class {class} ignores seed");
            }
        }
        assert!(synth_activity_scene("jumping", 2.0, 1).is_err());
    }

    #[test]
    fn static_class_has_constant_trajectories() {
        let scene = synth_activity_scene("static", 3.0, 5).unwrap();
        for r in &scene.reflectors {
            assert!(matches!(r.trajectory, Trajectory::Static { .. }));
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let mut scene = synth_activity_scene("cough-jerk", 4.0, 3).unwrap();
        scene.interference.push(Tone { freq_hz: 5_000.0, amplitude: 0.25 });
        let text = scene_to_string(&scene);
        let back = scene_from_string(&text).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn scene_file_errors() {
        assert!(scene_from_string("nonsense").is_err());
        assert!(scene_from_string("duration_s=1\n[reflector]\nreflectivity=0.5").is_err());
    }
}
