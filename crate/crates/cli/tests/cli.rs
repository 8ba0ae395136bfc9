//! End-to-end tests of the command-line surface: exit codes, artifact
//! hashing and stage-to-stage determinism.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echoflow"))
}

fn write_cfg(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let base = "scene.activity=brush-face\nscene.duration_s=4.2\n";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("ERR:"), "stderr: {stderr}");
    assert!(stderr.to_lowercase().contains("usage"), "stderr: {stderr}");
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("simulate"));
    assert!(stdout.contains("eval-lopo"));
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no.such.key=3").unwrap();
    let out = bin()
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERR:"));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["echo", "--input", "/no/such/file.wav", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERR:"));
}

#[test]
fn pipeline_simulate_echo_flow_window_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        for step in [vec!["simulate"], vec!["echo", "--input", "mics.wav"], vec!["flow", "--input", "profile.aepf"]] {
            let mut cmd = bin();
            cmd.arg(&step[0]);
            if step.len() > 1 {
                cmd.arg(step[1]).arg(out.join(step[2]));
            }
            let status = cmd
                .arg("--config")
                .arg(&cfg)
                .args(["--seed", "7"])
                .arg("--out")
                .arg(out)
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "step {step:?} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
        }
    }
    // window-count arithmetic: 4.2 s → 350 sweeps → 349 flow frames
    // → floor((349-166)/83)+1 = 3 windows
    let (windows, _, _) = echoflow::container::read_windows(&out_a.join("windows.aefw")).unwrap();
    assert_eq!(windows.len(), 3);
    // byte-identical artifacts across reruns with the same seed
    for name in ["mics.wav", "truth.csv", "profile.aepf", "windows.aefw"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn flow_refuses_mismatched_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let out = dir.path().join("run");
    for step in [vec!["simulate"], vec!["echo", "--input", "mics.wav"]] {
        let mut cmd = bin();
        cmd.arg(&step[0]);
        if step.len() > 1 {
            cmd.arg(step[1]).arg(out.join(step[2]));
        }
        assert!(cmd
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "7"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .success());
    }
    // different config (other seed) → flow must refuse
    let result = bin()
        .args(["flow", "--input"])
        .arg(out.join("profile.aepf"))
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "8"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("hash"), "stderr: {stderr}");
}

#[test]
fn synth_writes_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("synth").arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let left = echoflow::wav::read(&dir.path().join("tx_left.wav")).unwrap();
    assert_eq!(left.len(), 1);
    assert_eq!(left[0].len(), 600);
    assert_eq!(left[0].sample_rate, 50_000.0);
}

#[test]
fn bench_reports_realtime_factor() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["bench", "--seconds", "2"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap())
            .unwrap();
    assert!(json["realtime_factor"].as_f64().unwrap() > 0.0);
}
