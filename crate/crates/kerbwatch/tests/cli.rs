//! End-to-end tests of the command-line surface: exit codes, determinism
//! of emitted files, and the documented output formats.

use std::path::Path;
use std::process::Command;

fn kerbwatch() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kerbwatch"))
}

fn write_square_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("camera.json");
    std::fs::write(
        &path,
        r#"{
            "camera_id": "cam0",
            "frame_width": 1920,
            "frame_height": 1080,
            "correspondences": [
                {"u": 0.0, "v": 0.0, "lat": 40.0, "lon": -8.0},
                {"u": 100.0, "v": 0.0, "lat": 40.0, "lon": -7.999},
                {"u": 100.0, "v": 100.0, "lat": 40.001, "lon": -7.999},
                {"u": 0.0, "v": 100.0, "lat": 40.001, "lon": -8.0}
            ],
            "distortion": {"fx": 1000.0, "fy": 1000.0, "cx": 960.0, "cy": 540.0}
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn unknown_flag_exits_one() {
    let out = kerbwatch().arg("--nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_subcommand_exits_one() {
    let out = kerbwatch().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = kerbwatch().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["run", "simulate", "calibrate", "eval", "bench", "report"] {
        assert!(text.contains(sub), "help is missing `{sub}`");
    }
}

#[test]
fn runtime_error_exits_two() {
    let out = kerbwatch()
        .args(["calibrate", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    for dir in [&dir1, &dir2] {
        let out = kerbwatch()
            .args([
                "simulate",
                "--fixture",
                "crosswalk",
                "--seed",
                "7",
                "--noise-sigma",
                "2.0",
                "--out-dir",
            ])
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["detections.jsonl", "ground_truth.jsonl"] {
        let a = std::fs::read(dir1.path().join(name)).unwrap();
        let b = std::fs::read(dir2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        assert!(!a.is_empty());
    }
}

#[test]
fn simulate_then_run_produces_alerts_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = kerbwatch()
        .args(["simulate", "--fixture", "collision-head-on", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    // simulate emits the matching camera config alongside the streams.
    let cfg_path = dir.path().join("camera.json");
    assert!(cfg_path.exists(), "simulate did not write camera.json");

    let csv_dir = dir.path().join("csv");
    let out = kerbwatch()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--input"])
        .arg(dir.path().join("detections.jsonl"))
        .args(["--csv-dir"])
        .arg(&csv_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let alerts_line = stdout
        .lines()
        .find(|l| l.starts_with("alerts:"))
        .expect("summary missing alerts line");
    let alerts: u64 = alerts_line
        .split(':')
        .nth(1)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(alerts > 0, "head-on fixture produced no alerts\n{stdout}");

    let pairs_csv = std::fs::read_to_string(csv_dir.join("pairs.csv")).unwrap();
    assert!(pairs_csv.lines().count() > 1);
    assert!(pairs_csv.starts_with("t,frame_id,track_a"));
    let objects_csv = std::fs::read_to_string(csv_dir.join("objects.csv")).unwrap();
    assert!(objects_csv.lines().count() > 1);
    let road_csv = std::fs::read_to_string(csv_dir.join("road_state.csv")).unwrap();
    assert!(road_csv.starts_with("t,ras,rad,zone"));
    assert!(road_csv.lines().count() > 1);
}

#[test]
fn calibrate_prints_tiny_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_square_config(dir.path());
    let out = kerbwatch()
        .args(["calibrate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let residuals: Vec<f64> = stdout
        .lines()
        .filter(|l| l.trim_start().starts_with("point "))
        .map(|l| {
            l.split(':')
                .nth(1)
                .unwrap()
                .trim()
                .trim_end_matches(" deg")
                .parse::<f64>()
                .unwrap()
        })
        .collect();
    assert_eq!(residuals.len(), 4, "{stdout}");
    for r in residuals {
        assert!(r <= 1e-9, "residual {r} above 1e-9 deg");
    }
}

#[test]
fn eval_emits_curves_csv() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.jsonl");
    let mut text = String::from("{\"schema\":\"kerbwatch/labeled\",\"version\":1}\n");
    for i in 0..5 {
        let x = i as f64 * 30.0;
        text.push_str(&format!(
            "{{\"frame_id\":{i},\"kind\":\"truth\",\"class\":\"person\",\"bbox\":{{\"x_min\":{x},\"y_min\":0.0,\"x_max\":{},\"y_max\":10.0}}}}\n",
            x + 10.0
        ));
        text.push_str(&format!(
            "{{\"frame_id\":{i},\"kind\":\"detection\",\"class\":\"person\",\"confidence\":0.8,\"bbox\":{{\"x_min\":{x},\"y_min\":0.0,\"x_max\":{},\"y_max\":10.0}}}}\n",
            x + 10.0
        ));
    }
    std::fs::write(&labels, text).unwrap();
    let out_csv = dir.path().join("curves.csv");
    let out = kerbwatch()
        .args(["eval", "--labels"])
        .arg(&labels)
        .args(["--thresholds", "0.2,0.5,0.9", "--out"])
        .arg(&out_csv)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("threshold,precision,recall,f1"));
    // Perfect detector below its confidence: precision = recall = 1.
    assert!(csv.contains("0.2000,1.000000,1.000000,1.000000"));
}

#[test]
fn bench_passes_at_default_budget_and_fails_at_zero() {
    let out = kerbwatch()
        .args(["bench", "--fixture", "crosswalk", "--repetitions", "2"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pooled over 2 repetitions"));
    assert!(stdout.contains("PASS"));
    for stage in [
        "ingest",
        "undistort",
        "geo",
        "track",
        "risk",
        "metrics",
        "publish",
    ] {
        assert!(stdout.contains(stage), "bench table missing stage {stage}");
    }

    let out = kerbwatch()
        .args([
            "bench",
            "--fixture",
            "crosswalk",
            "--repetitions",
            "1",
            "--budget-ms",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "impossible budget must fail");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("worst stage"));
}

#[test]
fn report_ras_rad_emits_zone_column() {
    let dir = tempfile::tempdir().unwrap();
    let history = dir.path().join("history.csv");
    let mut text = String::from("t,ras,rad,zone\n");
    let mut state = 9_u64;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    for i in 0..300 {
        let (ras, rad) = if i % 3 == 0 {
            (5.0 + next(), 10.0 + next())
        } else {
            (12.0 + next(), 25.0 + next())
        };
        text.push_str(&format!("{}.0,{ras:.4},{rad:.4},no_data\n", i));
    }
    std::fs::write(&history, text).unwrap();
    let out_csv = dir.path().join("zones.csv");
    let out = kerbwatch()
        .args(["report", "--ras-rad"])
        .arg(&history)
        .args(["--out"])
        .arg(&out_csv)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("ras,rad,zone"));
    assert_eq!(csv.lines().count(), 301);
    assert!(csv.contains("low_risk"));
}

#[test]
fn report_latency_prints_stats() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("latency.txt");
    std::fs::write(&samples, "0.35\n0.44\n0.99\n").unwrap();
    let out = kerbwatch()
        .args(["report", "--latency"])
        .arg(&samples)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("median 0.440000"), "{stdout}");
    assert!(stdout.contains("bin,pdf,cdf"));
}

#[test]
fn env_var_overrides_flag() {
    // KERBWATCH_FIXTURE beats the explicit --fixture flag.
    let dir = tempfile::tempdir().unwrap();
    let out = kerbwatch()
        .args(["simulate", "--fixture", "collision-parallel", "--out-dir"])
        .arg(dir.path())
        .env("KERBWATCH_FIXTURE", "crosswalk")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("crosswalk"), "{stdout}");
}
