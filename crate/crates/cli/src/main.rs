//! Pipeline driver: every stage writes its artifacts into `--out` and embeds
//! the hash of the effective configuration, so a full run is reproducible
//! from the config file and a seed.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::RunConfig;
use echoflow::channel::{
    scene_from_string, scene_to_string, simulate, synth_activity_scene, write_truth_csv, Scene,
};
use echoflow::container;
use echoflow::dataset::{
    align_labels, read_dataset, read_label_csv, write_dataset, ClassTable, LabeledDataset,
    LabeledWindow,
};
use echoflow::echo::{
    acoustic_flow, compute_echo_profile, extract_windows, sync_offset, EchoProfile,
};
use echoflow::eval::{bench_throughput, run_lopo, run_lopo_two_stage};
use echoflow::learn::{
    checkpoint, finetune, predict, pretrain, write_training_log, LearnError,
};
use echoflow::saliency::{grad_cam, map_values, occlusion_saliency, save_heatmap_png, spearman, write_map_csv};
use echoflow::signal::{design_bandpass, generate_chirp, Waveform};
use echoflow::wav;

#[derive(Parser)]
#[command(
    name = "echoflow",
    version,
    about = "Ultrasonic FMCW sensing pipeline: chirps, echo profiles, acoustic flow, activity recognition"
)]
struct Cli {
    /// Key=value configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the simulation/masking/training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Chatty progress output.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the transmit chirps as WAV files.
    Synth,
    /// Simulate a scene into microphone WAVs plus a ground-truth sidecar.
    Simulate,
    /// Compute the four-path echo profile of a recording (AEPF).
    Echo {
        /// Two-channel WAV of microphone streams.
        #[arg(long)]
        input: PathBuf,
        /// Estimate and remove the sweep-start offset first.
        #[arg(long)]
        sync: bool,
    },
    /// Differentiate a profile and slice it into model windows (AEFW).
    Flow {
        #[arg(long)]
        input: PathBuf,
    },
    /// Assemble a labelled dataset container from window files.
    Dataset {
        /// Repeatable group spec: GROUP:WINDOWS.AEFW:LABELS.CSV
        #[arg(long = "add", required = true)]
        add: Vec<String>,
    },
    /// Masked-reconstruction pretraining over a dataset's windows.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Fine-tune a classifier (optionally from a pretrained encoder).
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Per-second activity predictions for a profile or window file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Leave-one-group-out evaluation campaign over a dataset container.
    EvalLopo {
        #[arg(long)]
        dataset: PathBuf,
        /// Optional second-stage dataset for the two-stage protocol.
        #[arg(long)]
        refine: Option<PathBuf>,
    },
    /// Class activation and occlusion saliency for one window.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        /// AEFW window file.
        #[arg(long)]
        input: PathBuf,
        /// Window index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to explain (default: the model's prediction).
        #[arg(long)]
        class: Option<String>,
    },
    /// Front-end throughput measurement.
    Bench {
        #[arg(long)]
        seconds: Option<f64>,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("ERR: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERR: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("config '{}': {e}", path.display())))?;
            RunConfig::parse(&text).map_err(CliError::Usage)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(data)
}

fn front_end(cfg: &RunConfig) -> Result<(Waveform, Waveform), CliError> {
    let left = generate_chirp(&cfg.left_chirp()).map_err(data)?;
    let right = generate_chirp(&cfg.right_chirp()).map_err(data)?;
    Ok((left, right))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    let out = cli.out.clone();
    match &cli.cmd {
        Cmd::Synth => {
            ensure_out(&out)?;
            let (left, right) = front_end(&cfg)?;
            wav::write_mono(&out.join("tx_left.wav"), &left).map_err(data)?;
            wav::write_mono(&out.join("tx_right.wav"), &right).map_err(data)?;
            if cli.verbose {
                println!("wrote tx_left.wav, tx_right.wav ({} samples/sweep)", left.len());
            }
        }
        Cmd::Simulate => {
            ensure_out(&out)?;
            let scene = load_scene(&cfg)?;
            let (left, right) = front_end(&cfg)?;
            let mics = simulate(&left, &right, &scene, cfg.train_seed).map_err(data)?;
            wav::write_stereo(&out.join("mics.wav"), &mics.left, &mics.right).map_err(data)?;
            write_truth_csv(&out.join("truth.csv"), &mics.truth).map_err(data)?;
            std::fs::write(out.join("scene.txt"), scene_to_string(&scene)).map_err(data)?;
            if cli.verbose {
                println!(
                    "simulated {}s into mics.wav ({} sweeps of truth)",
                    scene.duration_s,
                    mics.truth.len()
                );
            }
        }
        Cmd::Echo { input, sync } => {
            ensure_out(&out)?;
            let (mut mic_left, mut mic_right) = wav::read_stereo(input).map_err(data)?;
            let (tx_left, tx_right) = front_end(&cfg)?;
            if *sync {
                let offset = sync_offset(&tx_left, &mic_left).map_err(data)?;
                mic_left.samples.drain(..offset);
                mic_right.samples.drain(..offset);
                if cli.verbose {
                    println!("sweep alignment: dropped {offset} samples");
                }
            }
            let kl = design_bandpass(
                cfg.left_band.0,
                cfg.left_band.1,
                cfg.sample_rate,
                cfg.filter_taps,
            )
            .map_err(data)?;
            let kr = design_bandpass(
                cfg.right_band.0,
                cfg.right_band.1,
                cfg.sample_rate,
                cfg.filter_taps,
            )
            .map_err(data)?;
            let mics = echoflow::channel::MicStreams {
                left: mic_left,
                right: mic_right,
                truth: Vec::new(),
            };
            let profile =
                compute_echo_profile(&tx_left, &tx_right, &mics, &kl, &kr).map_err(data)?;
            container::write_profile(&out.join("profile.aepf"), &profile, hash).map_err(data)?;
            if cli.verbose {
                println!("profile.aepf: {} frames x {} lags", profile.frames(), profile.lags());
            }
        }
        Cmd::Flow { input } => {
            ensure_out(&out)?;
            let (profile, file_hash) = container::read_profile(input).map_err(data)?;
            if file_hash != hash {
                return Err(CliError::Data(format!(
                    "config hash mismatch: profile carries {file_hash:#018x}, current config is {hash:#018x}"
                )));
            }
            let flow = acoustic_flow(&profile).map_err(data)?;
            let windows = extract_windows(
                &flow,
                cfg.flow_lag_crop,
                cfg.flow_window_frames,
                cfg.flow_hop_frames,
            )
            .map_err(data)?;
            container::write_windows(&out.join("windows.aefw"), &windows, flow.frame_rate, hash)
                .map_err(data)?;
            if cli.verbose {
                println!("windows.aefw: {} windows", windows.len());
            }
        }
        Cmd::Dataset { add } => {
            ensure_out(&out)?;
            let ds = assemble_dataset(&cfg, add, hash)?;
            let dir = out.join("dataset");
            write_dataset(&dir, &ds, hash).map_err(data)?;
            if cli.verbose {
                println!(
                    "dataset: {} windows, {} classes, groups {:?}",
                    ds.len(),
                    ds.classes().len(),
                    ds.groups()
                );
            }
        }
        Cmd::Pretrain { dataset } => {
            ensure_out(&out)?;
            let (ds, ds_hash) = read_dataset(dataset).map_err(data)?;
            check_hash(ds_hash, hash)?;
            let windows: Vec<_> = ds.items().iter().map(|i| i.window.clone()).collect();
            let outcome = pretrain::<f32>(&windows, &cfg.train(), &cfg.mask())?;
            checkpoint::save_pretrained(
                &out.join("pretrained.amdl"),
                &outcome.encoder,
                &outcome.decoder,
                hash,
            )?;
            write_training_log(&out.join("pretrain_log.csv"), &outcome.log)?;
            if cli.verbose {
                let last = outcome.log.last().expect("at least one epoch");
                println!("pretrained.amdl: final loss {:.6}", last.loss);
            }
        }
        Cmd::Finetune { dataset, encoder } => {
            ensure_out(&out)?;
            let (ds, ds_hash) = read_dataset(dataset).map_err(data)?;
            check_hash(ds_hash, hash)?;
            let enc = match encoder {
                Some(path) => {
                    let (enc, _dec, enc_hash) = checkpoint::load_pretrained::<f32>(path)?;
                    check_hash(enc_hash, hash)?;
                    Some(enc)
                }
                None => None,
            };
            let model = finetune::<f32>(enc, &ds, &cfg.train())?;
            if model.degenerate_single_class {
                eprintln!("warning: training set contains a single class");
            }
            checkpoint::save_model(&out.join("model.amdl"), &model, hash)?;
            if cli.verbose {
                println!("model.amdl: {} classes", model.classes.len());
            }
        }
        Cmd::Predict { model, input } => {
            ensure_out(&out)?;
            let (model, model_hash) = checkpoint::load_model::<f32>(model)?;
            check_hash(model_hash, hash)?;
            let preds = predictions_for(&cfg, &model, input, hash)?;
            let path = out.join("predictions.csv");
            let mut w = csv::WriterBuilder::new()
                .from_path(&path)
                .map_err(|e| CliError::Data(e.to_string()))?;
            w.write_record(["time_s", "class", "probability"]).map_err(data)?;
            for p in &preds {
                let best = p.probs.iter().cloned().fold(0.0, f64::max);
                w.write_record([p.time_s.to_string(), p.class.name.clone(), best.to_string()])
                    .map_err(data)?;
            }
            w.flush().map_err(data)?;
            if cli.verbose {
                println!("predictions.csv: {} rows", preds.len());
            }
        }
        Cmd::EvalLopo { dataset, refine } => {
            ensure_out(&out)?;
            let (ds, ds_hash) = read_dataset(dataset).map_err(data)?;
            check_hash(ds_hash, hash)?;
            let report = match refine {
                Some(refine_path) => {
                    let (refine_ds, refine_hash) = read_dataset(refine_path).map_err(data)?;
                    check_hash(refine_hash, hash)?;
                    run_lopo_two_stage::<f32>(
                        &ds,
                        &refine_ds,
                        &cfg.train(),
                        cfg.train_stage2_epochs,
                        &cfg.mask(),
                    )
                    .map_err(eval_to_cli)?
                }
                None => run_lopo::<f32>(&ds, &cfg.train(), &cfg.mask()).map_err(eval_to_cli)?,
            };
            report.write_csv(&out.join("report.csv")).map_err(data)?;
            report.write_json(&out.join("report.json")).map_err(data)?;
            let pooled = report.pooled_confusion();
            pooled.save_pgm(&out.join("confusion.pgm"), 24).map_err(data)?;
            pooled.save_png(&out.join("confusion.png"), 24).map_err(data)?;
            println!(
                "macro F1: mean {:.4} (std {:.4}) over {} folds",
                report.mean_macro_f1,
                report.std_macro_f1,
                report.per_group.len()
            );
        }
        Cmd::Saliency { model, input, index, class } => {
            ensure_out(&out)?;
            let (model, model_hash) = checkpoint::load_model::<f32>(model)?;
            check_hash(model_hash, hash)?;
            let (windows, _, file_hash) = container::read_windows(input).map_err(data)?;
            check_hash(file_hash, hash)?;
            let window = windows
                .get(*index)
                .ok_or_else(|| CliError::Data(format!("window index {index} out of range")))?;
            let class_id = match class {
                Some(name) => model
                    .classes
                    .by_name(name)
                    .ok_or_else(|| CliError::Data(format!("unknown class '{name}'")))?
                    .clone(),
                None => {
                    let probs = model.classify_window(window, false, None)?;
                    model.class_of(&probs)
                }
            };
            let cam = grad_cam(&model, window, &class_id).map_err(data)?;
            let occ =
                occlusion_saliency(&model, window, &class_id, cfg.saliency_patch).map_err(data)?;
            save_heatmap_png(&cam, window, &out.join("saliency_cam.png")).map_err(data)?;
            write_map_csv(&cam, &out.join("saliency_cam.csv")).map_err(data)?;
            save_heatmap_png(&occ, window, &out.join("saliency_occlusion.png")).map_err(data)?;
            write_map_csv(&occ, &out.join("saliency_occlusion.csv")).map_err(data)?;
            let rho = spearman(&map_values(&cam), &map_values(&occ));
            println!("saliency for '{}': method agreement rho={rho:.3}", class_id.name);
        }
        Cmd::Bench { seconds } => {
            ensure_out(&out)?;
            let secs = seconds.unwrap_or(cfg.bench_seconds);
            let stats = bench_throughput(secs, cfg.train_seed).map_err(eval_to_cli)?;
            let json = serde_json::to_string_pretty(&stats)
                .map_err(|e| CliError::Data(e.to_string()))?;
            std::fs::write(out.join("bench.json"), &json).map_err(data)?;
            println!(
                "{:.2}s of audio processed in {:.2}s (realtime factor {:.3})",
                stats.input_s, stats.wall_s, stats.realtime_factor
            );
        }
    }
    Ok(())
}

fn check_hash(found: u64, expected: u64) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::Data(format!(
            "config hash mismatch: artifact carries {found:#018x}, current config is {expected:#018x}"
        )));
    }
    Ok(())
}

fn eval_to_cli(e: echoflow::eval::EvalError) -> CliError {
    match e {
        echoflow::eval::EvalError::Learn(l) => l.into(),
        other => CliError::Data(other.to_string()),
    }
}

fn load_scene(cfg: &RunConfig) -> Result<Scene, CliError> {
    match &cfg.scene_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("scene '{path}': {e}")))?;
            scene_from_string(&text).map_err(data)
        }
        None => {
            let mut scene =
                synth_activity_scene(&cfg.scene_activity, cfg.scene_duration_s, cfg.train_seed)
                    .map_err(data)?;
            scene.snr_db = cfg.scene_snr_db;
            Ok(scene)
        }
    }
}

fn assemble_dataset(
    cfg: &RunConfig,
    specs: &[String],
    expected_hash: u64,
) -> Result<LabeledDataset, CliError> {
    struct GroupInput {
        group: String,
        windows: Vec<echoflow::echo::FlowWindow>,
        intervals: Vec<echoflow::dataset::LabelInterval>,
        frame_rate: f64,
    }
    let mut inputs = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for spec in specs {
        let parts: Vec<&str> = spec.splitn(3, ':').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!(
                "bad --add spec '{spec}', expected GROUP:WINDOWS.AEFW:LABELS.CSV"
            )));
        }
        let (windows, frame_rate, file_hash) =
            container::read_windows(Path::new(parts[1])).map_err(data)?;
        check_hash(file_hash, expected_hash)?;
        let intervals = read_label_csv(Path::new(parts[2])).map_err(data)?;
        for interval in &intervals {
            if !class_names.contains(&interval.label) {
                class_names.push(interval.label.clone());
            }
        }
        inputs.push(GroupInput {
            group: parts[0].to_string(),
            windows,
            intervals,
            frame_rate,
        });
    }
    let table = ClassTable::from_names(&class_names).map_err(data)?;
    let mut items: Vec<LabeledWindow> = Vec::new();
    let mut frame_rate = 83.333;
    for input in inputs {
        frame_rate = input.frame_rate;
        let duration = cfg.flow_window_frames as f64 / input.frame_rate;
        let labelled =
            align_labels(input.windows, &input.intervals, duration, &input.group, &table)
                .map_err(data)?;
        items.extend(labelled);
    }
    LabeledDataset::new(items, table, frame_rate).map_err(data)
}

fn predictions_for(
    cfg: &RunConfig,
    model: &echoflow::learn::Model<f32>,
    input: &Path,
    expected_hash: u64,
) -> Result<Vec<echoflow::learn::Prediction>, CliError> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(input).map_err(data)?;
        f.read_exact(&mut magic).map_err(data)?;
    }
    if &magic == container::PROFILE_MAGIC {
        let (profile, file_hash) = container::read_profile(input).map_err(data)?;
        check_hash(file_hash, expected_hash)?;
        let flow = acoustic_flow(&profile).map_err(data)?;
        Ok(predict(model, &flow)?)
    } else if &magic == container::WINDOWS_MAGIC {
        let (windows, _, file_hash) = container::read_windows(input).map_err(data)?;
        check_hash(file_hash, expected_hash)?;
        let refs: Vec<&echoflow::echo::FlowWindow> = windows.iter().collect();
        let probs = model.probs(&refs)?;
        Ok(windows
            .iter()
            .zip(probs.rows())
            .map(|(w, row)| {
                let row_vec: Vec<f64> = row.iter().copied().collect();
                echoflow::learn::Prediction {
                    time_s: w.start_time,
                    class: model.class_of(&row_vec),
                    probs: row_vec,
                }
            })
            .collect())
    } else {
        Err(CliError::Data(format!(
            "'{}' is neither an AEPF profile nor an AEFW window file",
            input.display()
        )))
    }
}
