//! Command-line surface.
//!
//! Subcommands: `run` (live/replay pipeline), `simulate` (emit detection
//! and ground-truth streams), `calibrate` (solve the geo-frame and print
//! residuals), `eval` (detector evaluation curves), `bench` (latency
//! budget harness), `report` (plot-ready CSV emission).
//!
//! Environment variables with the `KERBWATCH_` prefix override the
//! corresponding flags: `KERBWATCH_CONFIG`, `KERBWATCH_INPUT`,
//! `KERBWATCH_MQTT_URL`, `KERBWATCH_CSV_DIR`, `KERBWATCH_SEED`,
//! `KERBWATCH_FIXTURE`, `KERBWATCH_BUDGET_MS`, `KERBWATCH_WINDOW_S`,
//! `KERBWATCH_MU`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::metrics::{eval_curves, parse_history_csv, parse_labeled_stream, ZoneMap};
use crate::pipeline::{bench, run_reader, ClockMode, RunSummary};
use crate::sim::{fixture_by_name, label_with_oracle, run_scenario, ScenarioScript, FIXTURE_NAMES};
use crate::telemetry::{CsvExporter, NullSink, Publisher};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "kerbwatch",
    version,
    about = "Single-camera road-safety pipeline: georeferenced tracking, collision alerts, road-state telemetry"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a detection stream and publish telemetry.
    Run(RunArgs),
    /// Emit detection and ground-truth streams for a fixture or script.
    Simulate(SimulateArgs),
    /// Solve the geo-frame from a config file and print residuals.
    Calibrate(CalibrateArgs),
    /// Compute detector evaluation curves from labeled data.
    Eval(EvalArgs),
    /// Measure per-stage latency over a scenario against a budget.
    Bench(BenchArgs),
    /// Emit plot-ready CSV from recorded histories.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Detection stream: a file path or `-` for stdin.
    #[arg(long, default_value = "-")]
    input: String,
    /// MQTT broker, e.g. mqtt://localhost:1883.
    #[arg(long)]
    mqtt_url: Option<String>,
    /// Directory for CSV mirrors of the objects/pairs topics.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Override the configured rolling window length, seconds.
    #[arg(long)]
    window_s: Option<f64>,
    /// Override the configured friction coefficient.
    #[arg(long)]
    mu: Option<f64>,
    /// Stamp payloads with the wall clock instead of input timestamps.
    #[arg(long)]
    live: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in fixture name.
    #[arg(long)]
    fixture: Option<String>,
    /// Scenario script file (overrides --fixture).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the script's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the script's pixel noise sigma.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Output directory for detections.jsonl and ground_truth.jsonl.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Pipeline configuration file with the four correspondences.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled detections/ground-truth stream (JSON lines).
    #[arg(long)]
    labels: PathBuf,
    /// Comma-separated confidence thresholds; default 0.05..0.95 step 0.05.
    #[arg(long)]
    thresholds: Option<String>,
    /// Write the curves CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Built-in fixture name.
    #[arg(long, default_value = "crosswalk")]
    fixture: String,
    /// Scenario script file (overrides --fixture).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Independent repetitions.
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Latency budget in milliseconds.
    #[arg(long, default_value_t = 300.0)]
    budget_ms: f64,
    /// Write the pooled per-stage stats CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the script's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Road-state history CSV (t,ras,rad,zone): build a zone map and emit
    /// (ras, rad, zone) rows.
    #[arg(long)]
    ras_rad: Option<PathBuf>,
    /// Latency samples, one per line: emit summary stats and histogram.
    #[arg(long)]
    latency: Option<PathBuf>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_override<T: FromStr>(var: &str, slot: &mut T) -> Result<(), CliError> {
    if let Ok(value) = std::env::var(var) {
        *slot = value
            .parse()
            .map_err(|_| CliError::Usage(format!("cannot parse {var}={value}")))?;
    }
    Ok(())
}

fn env_override_opt<T: FromStr>(var: &str, slot: &mut Option<T>) -> Result<(), CliError> {
    if let Ok(value) = std::env::var(var) {
        *slot = Some(
            value
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse {var}={value}")))?,
        );
    }
    Ok(())
}

fn apply_env_overrides(command: &mut Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => {
            env_override("KERBWATCH_CONFIG", &mut args.config)?;
            env_override("KERBWATCH_INPUT", &mut args.input)?;
            env_override_opt("KERBWATCH_MQTT_URL", &mut args.mqtt_url)?;
            env_override_opt("KERBWATCH_CSV_DIR", &mut args.csv_dir)?;
            env_override_opt("KERBWATCH_WINDOW_S", &mut args.window_s)?;
            env_override_opt("KERBWATCH_MU", &mut args.mu)?;
        }
        Command::Simulate(args) => {
            env_override_opt("KERBWATCH_FIXTURE", &mut args.fixture)?;
            env_override_opt("KERBWATCH_SEED", &mut args.seed)?;
        }
        Command::Calibrate(args) => {
            env_override("KERBWATCH_CONFIG", &mut args.config)?;
        }
        Command::Eval(_) => {}
        Command::Bench(args) => {
            env_override("KERBWATCH_FIXTURE", &mut args.fixture)?;
            env_override("KERBWATCH_BUDGET_MS", &mut args.budget_ms)?;
            env_override_opt("KERBWATCH_SEED", &mut args.seed)?;
        }
        Command::Report(_) => {}
    }
    Ok(())
}

/// Parse and execute. The caller maps the error variants to exit codes.
pub fn run<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    apply_env_overrides(&mut cli.command)?;
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn print_summary(summary: &RunSummary) {
    println!("frames: {}", summary.frames);
    println!("detections: {}", summary.detections);
    println!("rejects: {}", summary.rejects);
    println!("undistort_failures: {}", summary.undistort_failures);
    println!("outside_region: {}", summary.outside_region);
    println!("tracks_created: {}", summary.tracks_created);
    println!("objects_published: {}", summary.objects_published);
    println!("assessments: {}", summary.assessments);
    println!("alerts: {}", summary.alerts);
    println!("messages_published: {}", summary.messages_published);
    println!("messages_buffered: {}", summary.messages_buffered);
    println!("messages_dropped: {}", summary.messages_dropped);
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config).map_err(runtime)?;
    if let Some(window_s) = args.window_s {
        cfg.thresholds.window_s = window_s;
    }
    if let Some(mu) = args.mu {
        cfg.thresholds.mu = mu;
    }
    let mqtt_url = args.mqtt_url.or_else(|| cfg.mqtt_url.clone());
    let csv_dir = args.csv_dir.or_else(|| cfg.csv_dir.clone());
    let clock = if args.live {
        ClockMode::Live
    } else {
        ClockMode::Replay
    };

    let mut csv = match &csv_dir {
        Some(dir) => Some(CsvExporter::create(dir).map_err(runtime)?),
        None => None,
    };

    let source: Box<dyn BufRead> = if args.input == "-" {
        Box::new(std::io::BufReader::new(std::io::stdin()))
    } else {
        Box::new(std::io::BufReader::new(
            std::fs::File::open(&args.input).map_err(runtime)?,
        ))
    };

    let run = match mqtt_url {
        #[cfg(feature = "mqtt")]
        Some(url) => {
            let sink =
                crate::telemetry::MqttSink::connect(&url, &format!("kerbwatch-{}", cfg.camera_id))
                    .map_err(runtime)?;
            let mut publisher = Publisher::new(sink);
            run_reader(&cfg, source, &mut publisher, csv.as_mut(), clock).map_err(runtime)?
        }
        #[cfg(not(feature = "mqtt"))]
        Some(_) => {
            return Err(CliError::Runtime(
                "this binary was built without the `mqtt` feature".into(),
            ))
        }
        None => {
            let mut publisher = Publisher::new(NullSink);
            run_reader(&cfg, source, &mut publisher, csv.as_mut(), clock).map_err(runtime)?
        }
    };
    if let Some(exporter) = csv {
        exporter.finish().map_err(runtime)?;
    }
    if let Some(dir) = &csv_dir {
        let csv = crate::metrics::road_state_csv(&run.road_states);
        std::fs::write(dir.join("road_state.csv"), csv).map_err(runtime)?;
    }
    print_summary(&run.summary);
    Ok(())
}

fn load_script(
    fixture: Option<&str>,
    scenario: Option<&PathBuf>,
) -> Result<ScenarioScript, CliError> {
    if let Some(path) = scenario {
        let text = std::fs::read_to_string(path).map_err(runtime)?;
        return ScenarioScript::from_json(&text).map_err(runtime);
    }
    let name = fixture.unwrap_or("crosswalk");
    fixture_by_name(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown fixture `{name}`; available: {}",
            FIXTURE_NAMES.join(", ")
        ))
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut script = load_script(args.fixture.as_deref(), args.scenario.as_ref())?;
    if let Some(seed) = args.seed {
        script.seed = seed;
    }
    if let Some(sigma) = args.noise_sigma {
        script.pixel_noise_sigma = sigma;
    }
    let mut out = run_scenario(&script).map_err(runtime)?;

    let gf = script.geoframe().map_err(runtime)?;
    let local = crate::geo::LocalFrame::new(gf.centroid_geo());
    let cfg = script.loaded_config().map_err(runtime)?;
    label_with_oracle(
        &mut out.truth,
        &local,
        cfg.thresholds.mu,
        cfg.thresholds.g,
        &crate::risk::VruPolicy::default(),
        &crate::risk::RiskParams {
            margin_m: cfg.thresholds.margin_m,
            horizon_s: cfg.thresholds.horizon_s,
            alert_threshold: cfg.thresholds.alert_threshold,
        },
    );

    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;
    let det_path = args.out_dir.join("detections.jsonl");
    let truth_path = args.out_dir.join("ground_truth.jsonl");
    let mut det_file = std::io::BufWriter::new(std::fs::File::create(&det_path).map_err(runtime)?);
    crate::ingest::write_detection_stream(&mut det_file, &out.batches).map_err(runtime)?;
    det_file.flush().map_err(runtime)?;
    let mut truth_file =
        std::io::BufWriter::new(std::fs::File::create(&truth_path).map_err(runtime)?);
    crate::sim::write_ground_truth(&mut truth_file, &out.truth).map_err(runtime)?;
    truth_file.flush().map_err(runtime)?;

    // The matching camera config, so `run --config out/camera.json --input
    // out/detections.jsonl` replays the scenario with no extra setup.
    let config_path = args.out_dir.join("camera.json");
    let config_json = serde_json::json!({
        "camera_id": script.camera_id,
        "frame_width": script.frame_width,
        "frame_height": script.frame_height,
        "correspondences": script.correspondences,
        "distortion": script.distortion,
    });
    std::fs::write(
        &config_path,
        serde_json::to_string_pretty(&config_json).map_err(runtime)?,
    )
    .map_err(runtime)?;

    let detections: usize = out.batches.iter().map(|b| b.detections.len()).sum();
    println!(
        "scenario `{}`: {} frames, {} detections -> {}, {}, {}",
        script.name,
        out.truth.len(),
        detections,
        det_path.display(),
        truth_path.display(),
        config_path.display()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config).map_err(runtime)?;
    let gf = &cfg.geoframe;
    let h = gf.homography();
    println!("camera: {}", cfg.camera_id);
    println!("homography (pixel -> lat/lon, row major):");
    for r in 0..3 {
        println!(
            "  [{:+.9e} {:+.9e} {:+.9e}]",
            h[(r, 0)],
            h[(r, 1)],
            h[(r, 2)]
        );
    }
    println!("residuals:");
    for (i, (px, geo)) in gf.correspondences().iter().enumerate() {
        let projected = gf
            .pixel_to_geo(*px)
            .map_err(runtime)?
            .inside()
            .ok_or_else(|| CliError::Runtime("correspondence outside its own region".into()))?;
        let residual = (projected.lat - geo.lat)
            .abs()
            .max((projected.lon - geo.lon).abs());
        println!("  point {i}: {residual:.3e} deg");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.labels).map_err(runtime)?;
    let frames = parse_labeled_stream(&text).map_err(runtime)?;
    let thresholds: Vec<f64> = match &args.thresholds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("bad threshold `{s}`")))
            })
            .collect::<Result<_, _>>()?,
        None => (1..=19).map(|i| i as f64 * 0.05).collect(),
    };
    let curves = eval_curves(&frames, &thresholds).map_err(runtime)?;
    let csv = curves.to_csv();
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(runtime)?,
        None => print!("{csv}"),
    }
    if let Some(best) = curves.best_f1_threshold() {
        eprintln!("best F1 at confidence {best:.2}");
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let mut script = load_script(Some(&args.fixture), args.scenario.as_ref())?;
    if let Some(seed) = args.seed {
        script.seed = seed;
    }
    if args.repetitions == 0 {
        return Err(CliError::Usage("--repetitions must be at least 1".into()));
    }
    let budget_s = args.budget_ms / 1000.0;
    let report = bench(&script, args.repetitions, budget_s).map_err(runtime)?;
    for (i, rep) in report.per_rep.iter().enumerate() {
        println!("--- repetition {} ---", i + 1);
        print!("{}", rep.render());
    }
    println!("--- pooled over {} repetitions ---", report.per_rep.len());
    print!("{}", report.pooled.render());
    if let Some(path) = &args.csv {
        std::fs::write(path, report.pooled.to_csv()).map_err(runtime)?;
    }
    if report.pooled.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "latency budget exceeded: end-to-end p99 {:.3} ms > {:.0} ms",
            report.pooled.end_to_end.p99() * 1e3,
            args.budget_ms
        )))
    }
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    match (&args.ras_rad, &args.latency) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(runtime)?;
            let samples = parse_history_csv(&text).map_err(runtime)?;
            let map = ZoneMap::build(
                &samples,
                crate::metrics::ZONE_MAP_BINS,
                crate::metrics::ZONE_MAP_BINS,
            )
            .map_err(runtime)?;
            let mut out = String::from("ras,rad,zone\n");
            for (ras, rad) in &samples {
                out.push_str(&format!(
                    "{ras:.6},{rad:.6},{}\n",
                    map.classify(*ras, *rad).as_str()
                ));
            }
            match &args.out {
                Some(path) => std::fs::write(path, out).map_err(runtime)?,
                None => print!("{out}"),
            }
            Ok(())
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(runtime)?;
            let samples: Vec<f64> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.parse::<f64>()
                        .map_err(|_| CliError::Runtime(format!("bad latency sample `{l}`")))
                })
                .collect::<Result<_, _>>()?;
            let stats = crate::latency::latency_stats(&samples).map_err(runtime)?;
            println!(
                "count {}  min {:.6}  median {:.6}  mean {:.6}  std {:.6}  p99 {:.6}  max {:.6}",
                stats.count,
                stats.min,
                stats.median,
                stats.mean,
                stats.std,
                stats.p99(),
                stats.max
            );
            let mut out = String::from("bin,pdf,cdf\n");
            for i in 0..stats.histogram.len() {
                out.push_str(&format!(
                    "{i},{:.9},{:.9}\n",
                    stats.histogram[i], stats.cumulative[i]
                ));
            }
            match &args.out {
                Some(path) => std::fs::write(path, out).map_err(runtime)?,
                None => print!("{out}"),
            }
            Ok(())
        }
        _ => Err(CliError::Usage(
            "report needs exactly one of --ras-rad or --latency".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let err = run(["kerbwatch", "--definitely-not-a-flag"]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn unknown_fixture_is_a_usage_error() {
        let err = load_script(Some("no-such-fixture"), None).unwrap_err();
        match err {
            CliError::Usage(msg) => assert!(msg.contains("crosswalk")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn env_vars_override_flags() {
        // Serialize env mutation within this test only.
        std::env::set_var("KERBWATCH_BUDGET_MS", "150");
        let mut command = Command::Bench(BenchArgs {
            fixture: "crosswalk".into(),
            scenario: None,
            repetitions: 1,
            budget_ms: 300.0,
            csv: None,
            seed: None,
        });
        apply_env_overrides(&mut command).unwrap();
        match command {
            Command::Bench(args) => assert_eq!(args.budget_ms, 150.0),
            _ => unreachable!(),
        }
        std::env::remove_var("KERBWATCH_BUDGET_MS");
    }
}
