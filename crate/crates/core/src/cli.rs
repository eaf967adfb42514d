//! Command-line front end. Every subcommand reads and writes plain files and
//! leaves a JSON run manifest next to its primary output, so any run can be
//! repeated and checked with `dcilab replay <manifest>`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{cell_scan_with, detect_target, inject_signature, track_target, ScanOptions, SignatureSpec, TrackStatus};
use crate::capture::{apply_capture, CaptureConfig};
use crate::cnn::{build_model, load_model, numeric_grad_check, save_model, train, GradCheckOptions, OptimizerKind, TrainConfig};
use crate::corpus::{burst_gap_for, synthetic_latency, synthetic_sweep, SweepPlan};
use crate::dci::{read_trace, write_trace, AppLabel, Rnti, Trace};
use crate::error::{Error, Result};
use crate::features::{windows_from_records, write_dataset, read_dataset, Dataset, FeatureScaling, WindowConfig, WindowSample};
use crate::metrics::{evaluate, latency_csv, sweep_table};
use crate::rng::{derive_seed, seeded};
use crate::synth::{builtin_profile, builtin_profiles, generate, generate_cell, load_profiles, random_assignment, AppProfile};

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dcilab", version, about = "Traffic fingerprinting from 5G downlink control information")]
struct Cli {
    /// Write the run manifest here instead of next to the primary output.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise a DCI trace for one application or a whole cell.
    Gen(GenArgs),
    /// Thin a trace through a lossy sniffer model.
    Capture(CaptureArgs),
    /// Cut traces into labelled feature windows.
    Dataset(DatasetArgs),
    /// Train a classifier on a dataset.
    Train(TrainArgs),
    /// Evaluate a model on a labelled dataset.
    Eval(EvalArgs),
    /// Train and test one model per window size on synthetic traffic.
    Sweep(SweepArgs),
    /// Time needed to fill a window, per application.
    Latency(LatencyArgs),
    /// Classify every RNTI of a captured cell trace.
    Scan(ScanArgs),
    /// Find the RNTI that carries a planted burst signature.
    Hunt(HuntArgs),
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck(GradcheckArgs),
    /// Rerun a manifest and check that every output is byte-identical.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    /// Application profile to synthesise.
    #[arg(long, conflicts_with = "cell", required_unless_present = "cell")]
    app: Option<String>,
    /// Number of UEs in a synthetic cell, each running a random profile.
    #[arg(long)]
    cell: Option<usize>,
    /// Restrict cell profiles to these applications (comma separated).
    #[arg(long, value_delimiter = ',', requires = "cell")]
    apps: Vec<String>,
    /// Profile file (TOML); defaults to the built-in profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RNTI of the single UE, hexadecimal.
    #[arg(long, default_value = "4601")]
    rnti: Rnti,
    /// Inject a burst signature described by this TOML file.
    #[arg(long, requires = "target")]
    signature: Option<PathBuf>,
    /// RNTI that receives the signature, hexadecimal.
    #[arg(long)]
    target: Option<Rnti>,
    /// Start of the first signature burst, ms.
    #[arg(long, default_value_t = 60_000)]
    t0_ms: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CaptureArgs {
    /// Probability that the sniffer decodes a DCI.
    #[arg(long, default_value_t = 0.05)]
    prob: f64,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum timestamp perturbation of kept records, ms.
    #[arg(long, default_value_t = 0)]
    jitter_ms: u64,
    /// Mean good-state run length; enables the bursty loss model.
    #[arg(long, requires = "bad_run")]
    good_run: Option<f64>,
    /// Mean bad-state run length of the bursty loss model.
    #[arg(long, requires = "good_run")]
    bad_run: Option<f64>,
    /// Trace to thin.
    input: PathBuf,
    /// Captured trace to write.
    output: PathBuf,
}

/// Burst-exclusion threshold for dataset windows.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BurstGap {
    /// Per profile kind: streaming sources use the default gap.
    Auto,
    Off,
    Ms(u64),
}

impl FromStr for BurstGap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(BurstGap::Auto),
            "none" => Ok(BurstGap::Off),
            _ => s
                .parse()
                .map(BurstGap::Ms)
                .map_err(|_| format!("expected auto, none or milliseconds, got {s:?}")),
        }
    }
}

impl fmt::Display for BurstGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BurstGap::Auto => f.write_str("auto"),
            BurstGap::Off => f.write_str("none"),
            BurstGap::Ms(ms) => write!(f, "{ms}"),
        }
    }
}

impl Serialize for BurstGap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Args, Serialize)]
struct DatasetArgs {
    /// DCIs per window.
    #[arg(long, default_value_t = 100)]
    window: usize,
    /// Offset between window starts; defaults to the window (disjoint windows).
    #[arg(long)]
    stride: Option<usize>,
    /// Drop windows whose gaps all stay below this many ms: auto, none or a number.
    #[arg(long, default_value = "auto")]
    burst_gap: BurstGap,
    /// CSV `rnti,app` labelling the UEs of cell traces.
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Label for every window, overriding trace and assignment labels.
    #[arg(long)]
    label: Option<String>,
    /// Profile file used to pick burst gaps in auto mode.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Hold out this fraction of each class into `--val-out`.
    #[arg(long, requires = "val_out")]
    val_fraction: Option<f64>,
    /// Validation dataset written when `--val-fraction` is set.
    #[arg(long)]
    val_out: Option<PathBuf>,
    /// Seed of the train/validation shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Input trace files.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dataset file.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Optimiser.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Momentum of the SGD optimiser.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Keep the natural class sizes instead of downsampling to the smallest.
    #[arg(long)]
    no_balance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ReportFormat {
    Table,
    Kv,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Report file.
    #[arg(long)]
    report: PathBuf,
    /// Report layout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    format: ReportFormat,
}

/// Window sizes as `start:end:step` or a comma separated list.
#[derive(Debug, Clone, PartialEq)]
struct WindowList(Vec<usize>);

impl FromStr for WindowList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("expected start:end:step or a comma separated list, got {s:?}");
        let list: Vec<usize> = if s.contains(':') {
            let parts = s
                .split(':')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            match parts[..] {
                [a, b, step] if step > 0 && a <= b => (a..=b).step_by(step).collect(),
                _ => return Err(bad()),
            }
        } else {
            s.split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?
        };
        if list.is_empty() || list.contains(&0) {
            return Err(bad());
        }
        Ok(WindowList(list))
    }
}

impl Serialize for WindowList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    /// Window sizes: `start:end:step` or a comma separated list.
    #[arg(long, default_value = "20:160:20")]
    windows: WindowList,
    /// Capture probability of the synthetic sniffer.
    #[arg(long, default_value_t = 0.05)]
    capture: f64,
    /// Training windows per class at W = 100, scaled by 100 / W.
    #[arg(long, default_value_t = 1000)]
    per_class_at_100: usize,
    /// Cap on training windows per class.
    #[arg(long, default_value_t = 2000)]
    max_per_class: usize,
    /// Test windows per class, drawn from separate sessions.
    #[arg(long, default_value_t = 300)]
    test_per_class: usize,
    /// Restrict to these applications (comma separated).
    #[arg(long, value_delimiter = ',')]
    apps: Vec<String>,
    /// Profile file (TOML); defaults to the built-in profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Training epochs.
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives `report_w<W>.txt` per window and `summary.txt`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct LatencyArgs {
    /// Window sizes: `start:end:step` or a comma separated list.
    #[arg(long, default_value = "20:160:20")]
    windows: WindowList,
    /// Capture probability of the synthetic sniffer.
    #[arg(long, default_value_t = 0.05)]
    capture: f64,
    /// Windows averaged per application and size.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Restrict to these applications (comma separated).
    #[arg(long, value_delimiter = ',')]
    apps: Vec<String>,
    /// Profile file (TOML); defaults to the built-in profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ScanArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Must match the window the model was trained with.
    #[arg(long)]
    window: usize,
    /// Captured trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Predictions below this probability are ignored.
    #[arg(long, default_value_t = 0.5)]
    min_confidence: f64,
    /// Same-label predictions further apart than this start a new segment, ms.
    #[arg(long, default_value_t = 30_000)]
    segment_gap_ms: u64,
    /// Silence longer than this ends a presence interval, ms.
    #[arg(long, default_value_t = 180_000)]
    presence_gap_ms: u64,
    /// Skip windows inside one burst: `none` or a gap in ms.
    #[arg(long, default_value = "none")]
    burst_gap: BurstGap,
    /// Track a single RNTI (hexadecimal) instead of the whole cell.
    #[arg(long)]
    rnti: Option<Rnti>,
}

#[derive(Debug, Args, Serialize)]
struct HuntArgs {
    /// Signature TOML; defaults to seven bursts with five 10 s and one 20 s gap.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Captured trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Start of the first signature burst, ms.
    #[arg(long, default_value_t = 60_000)]
    t0_ms: u64,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    /// DCIs per window.
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Number of output classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Master seed of every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Check at most this many evenly spaced parameters per layer.
    #[arg(long)]
    max_per_layer: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    manifest_file: PathBuf,
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    /// Arguments after the program name, without `--manifest`.
    pub argv: Vec<String>,
    /// Every parameter after defaults were applied.
    pub params: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input file, hex.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, hex.
    pub outputs: BTreeMap<String, String>,
    pub cwd: String,
    pub started_unix_s: f64,
    pub elapsed_s: f64,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a subcommand touched.
#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    /// The manifest goes to `<primary>.manifest.json`.
    primary: Option<PathBuf>,
    exit_code: i32,
}

impl Outcome {
    fn seed(mut self, name: &str, v: u64) -> Self {
        self.seeds.insert(name.to_string(), v);
        self
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a failed run, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    let (name, params) = describe(&cli.command);
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Capture(a) => cmd_capture(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Latency(a) => cmd_latency(a),
        Command::Scan(a) => cmd_scan(a),
        Command::Hunt(a) => cmd_hunt(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Replay(a) => return report_error(cmd_replay(a, cli.manifest.as_deref())),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => return report_error(Err(e)),
    };
    let manifest = match build_manifest(&argv, name, params, &outcome, started, clock) {
        Ok(m) => m,
        Err(e) => return report_error(Err(e)),
    };
    let target = cli
        .manifest
        .clone()
        .or_else(|| outcome.primary.as_ref().map(|p| manifest_path_for(p)));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    match target {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e)) {
                return report_error(Err(e));
            }
        }
        None => eprintln!("{json}"),
    }
    outcome.exit_code
}

fn report_error(r: Result<i32>) -> i32 {
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `out.trace` -> `out.trace.manifest.json`; directories get `manifest.json` inside.
pub fn manifest_path_for(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        return primary.join("manifest.json");
    }
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn describe(cmd: &Command) -> (&'static str, serde_json::Value) {
    let v = |x: serde_json::Result<serde_json::Value>| x.expect("arguments serialise");
    match cmd {
        Command::Gen(a) => ("gen", v(serde_json::to_value(a))),
        Command::Capture(a) => ("capture", v(serde_json::to_value(a))),
        Command::Dataset(a) => ("dataset", v(serde_json::to_value(a))),
        Command::Train(a) => ("train", v(serde_json::to_value(a))),
        Command::Eval(a) => ("eval", v(serde_json::to_value(a))),
        Command::Sweep(a) => ("sweep", v(serde_json::to_value(a))),
        Command::Latency(a) => ("latency", v(serde_json::to_value(a))),
        Command::Scan(a) => ("scan", v(serde_json::to_value(a))),
        Command::Hunt(a) => ("hunt", v(serde_json::to_value(a))),
        Command::Gradcheck(a) => ("gradcheck", v(serde_json::to_value(a))),
        Command::Replay(a) => ("replay", v(serde_json::to_value(a))),
    }
}

fn strip_manifest_flag(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = it.next() {
        if a == "--manifest" {
            it.next();
        } else if !a.starts_with("--manifest=") {
            out.push(a);
        }
    }
    out
}

fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn build_manifest(
    argv: &[OsString],
    name: &str,
    params: serde_json::Value,
    outcome: &Outcome,
    started: SystemTime,
    clock: Instant,
) -> Result<RunManifest> {
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: name.to_string(),
        argv: strip_manifest_flag(argv),
        params,
        seeds: outcome.seeds.clone(),
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
        cwd: std::env::current_dir()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        started_unix_s: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        elapsed_s: clock.elapsed().as_secs_f64(),
        exit_code: outcome.exit_code,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn profile_set(path: Option<&Path>, apps: &[String]) -> Result<BTreeMap<AppLabel, AppProfile>> {
    let all = match path {
        Some(p) => load_profiles(p)?,
        None => builtin_profiles(),
    };
    if apps.is_empty() {
        return Ok(all);
    }
    apps.iter()
        .map(|a| {
            let label = AppLabel::from(a.as_str());
            all.get(&label)
                .cloned()
                .map(|p| (label, p))
                .ok_or_else(|| Error::invalid(format!("unknown application {a:?}")))
        })
        .collect()
}

fn load_trace(path: &Path) -> Result<Trace> {
    let parsed = read_trace(path)?;
    if parsed.resorted {
        eprintln!("warning: {}: records were not time-ordered and have been sorted", path.display());
    }
    Ok(parsed.trace)
}

fn assignment_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".assignment.csv");
    PathBuf::from(s)
}

fn cmd_gen(a: &GenArgs) -> Result<Outcome> {
    let mut outcome = Outcome::default().seed("seed", a.seed);
    let (mut trace, assignment) = match (&a.app, a.cell) {
        (Some(app), _) => {
            let profile = match &a.profiles {
                Some(p) => {
                    outcome.inputs.push(p.clone());
                    load_profiles(p)?
                        .remove(&AppLabel::from(app.as_str()))
                        .ok_or_else(|| Error::invalid(format!("profile {app:?} not in {}", p.display())))?
                }
                None => builtin_profile(app)?,
            };
            (generate(&profile, a.duration, a.rnti, a.seed)?, None)
        }
        (None, Some(n)) => {
            if let Some(p) = &a.profiles {
                outcome.inputs.push(p.clone());
            }
            let profiles = profile_set(a.profiles.as_deref(), &a.apps)?;
            let assign_seed = derive_seed(a.seed, 0xA551);
            outcome.seeds.insert("assignment".into(), assign_seed);
            let assignment = random_assignment(n, &profiles, assign_seed)?;
            (generate_cell(&assignment, a.duration, a.seed)?, Some(assignment))
        }
        (None, None) => return Err(Error::invalid("either --app or --cell is required")),
    };
    if let (Some(sig_path), Some(target)) = (&a.signature, a.target) {
        outcome.inputs.push(sig_path.clone());
        let text = std::fs::read_to_string(sig_path).map_err(|e| Error::io(sig_path, e))?;
        let spec = SignatureSpec::from_toml(&text)?;
        let inject_seed = derive_seed(a.seed, 0x516);
        outcome.seeds.insert("signature".into(), inject_seed);
        trace = inject_signature(&trace, target, &spec, a.t0_ms, inject_seed)?;
    }
    write_trace(&trace, &a.out)?;
    outcome.outputs.push(a.out.clone());
    if let Some(assignment) = assignment {
        let mut csv = String::from("rnti,app\n");
        for (rnti, p) in &assignment {
            csv.push_str(&format!("{rnti},{}\n", p.name));
        }
        let path = assignment_path(&a.out);
        write_text(&path, &csv)?;
        outcome.outputs.push(path);
    }
    println!("wrote {} records to {}", trace.len(), a.out.display());
    outcome.primary = Some(a.out.clone());
    Ok(outcome)
}

fn cmd_capture(a: &CaptureArgs) -> Result<Outcome> {
    let trace = load_trace(&a.input)?;
    let mut cfg = match (a.good_run, a.bad_run) {
        (Some(g), Some(b)) => CaptureConfig::bursty(a.prob, a.seed, g, b)?,
        _ => CaptureConfig::new(a.prob, a.seed),
    };
    cfg.jitter_ms = a.jitter_ms;
    let captured = apply_capture(&trace, &cfg)?;
    write_trace(&captured, &a.output)?;
    println!(
        "kept {} of {} records ({:.4})",
        captured.len(),
        trace.len(),
        captured.len() as f64 / trace.len().max(1) as f64
    );
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.output.clone()],
        primary: Some(a.output.clone()),
        ..Outcome::default()
    }
    .seed("seed", a.seed))
}

fn read_assignment(path: &Path) -> Result<BTreeMap<Rnti, AppLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("rnti")) {
            continue;
        }
        let (rnti, app) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected rnti,app in {}", path.display()),
        })?;
        out.insert(rnti.parse()?, AppLabel::from(app.trim()));
    }
    Ok(out)
}

fn cmd_dataset(a: &DatasetArgs) -> Result<Outcome> {
    let mut outcome = Outcome::default().seed("seed", a.seed);
    let stride = a.stride.unwrap_or(a.window);
    let assignment = match &a.assignment {
        Some(p) => {
            outcome.inputs.push(p.clone());
            Some(read_assignment(p)?)
        }
        None => None,
    };
    if let Some(p) = &a.profiles {
        outcome.inputs.push(p.clone());
    }
    let profiles = profile_set(a.profiles.as_deref(), &[])?;
    let fixed_label = a.label.as_deref().map(AppLabel::from);
    let gap_for = |label: Option<&AppLabel>| match a.burst_gap {
        BurstGap::Off => None,
        BurstGap::Ms(ms) => Some(ms),
        BurstGap::Auto => label.and_then(|l| profiles.get(l)).and_then(burst_gap_for),
    };
    let scaling = FeatureScaling::default();
    let mut samples = Vec::new();
    for path in &a.traces {
        let trace = load_trace(path)?;
        outcome.inputs.push(path.clone());
        for (rnti, records) in trace.by_rnti() {
            let label = fixed_label
                .clone()
                .or_else(|| assignment.as_ref().and_then(|m| m.get(&rnti).cloned()))
                .or_else(|| trace.meta.label.clone());
            let cfg = WindowConfig {
                window: a.window,
                stride,
                burst_gap_ms: gap_for(label.as_ref()),
            };
            samples.extend(windows_from_records(&records, label.as_ref(), &cfg, &scaling)?);
        }
    }
    let (train_s, val_s) = match a.val_fraction {
        Some(f) => stratified_split(samples, f, a.seed)?,
        None => (samples, Vec::new()),
    };
    let n_train = train_s.len();
    write_dataset(&Dataset::new(a.window, train_s)?, &a.out)?;
    outcome.outputs.push(a.out.clone());
    if let (Some(path), Some(_)) = (&a.val_out, a.val_fraction) {
        println!("{} training and {} validation windows", n_train, val_s.len());
        write_dataset(&Dataset::new(a.window, val_s)?, path)?;
        outcome.outputs.push(path.clone());
    } else {
        println!("{n_train} windows");
    }
    outcome.primary = Some(a.out.clone());
    Ok(outcome)
}

/// Per class, a shuffled `fraction` goes to the second set. Input order is
/// kept within each set.
fn stratified_split(samples: Vec<WindowSample>, fraction: f64, seed: u64) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("--val-fraction must lie in (0, 1)"));
    }
    let mut by_class: BTreeMap<Option<AppLabel>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label.clone()).or_default().push(i);
    }
    let mut rng = seeded(derive_seed(seed, 0x5971));
    let mut held = vec![false; samples.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = (idx.len() as f64 * fraction).round() as usize;
        for &i in &idx[..n] {
            held[i] = true;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (s, h) in samples.into_iter().zip(held) {
        if h {
            b.push(s);
        } else {
            a.push(s);
        }
    }
    Ok((a, b))
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let mut samples = Vec::new();
    let mut window = None;
    for path in &a.dataset {
        let ds = read_dataset(path)?;
        if *window.get_or_insert(ds.window) != ds.window {
            return Err(Error::invalid(format!(
                "{}: window {} differs from {}",
                path.display(),
                ds.window,
                window.unwrap_or(0)
            )));
        }
        samples.extend(ds.samples);
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd { momentum: a.momentum },
        },
        seed: a.seed,
        validation_fraction: a.val_fraction,
        balance: !a.no_balance,
    };
    let bundle = train(&samples, &cfg)?;
    save_model(&bundle, &a.out)?;
    let h = &bundle.history;
    println!(
        "trained on {} windows, {} classes; final train loss {:.4}, kept epoch {}, validation accuracy {:.4}",
        samples.len(),
        bundle.classes.len(),
        h.train_loss.last().copied().unwrap_or(f64::NAN),
        h.best_epoch().unwrap_or(h.train_loss.len().saturating_sub(1)) + 1,
        h.selected_val_accuracy().unwrap_or(f64::NAN)
    );
    Ok(Outcome {
        inputs: a.dataset.clone(),
        outputs: vec![a.out.clone()],
        primary: Some(a.out.clone()),
        ..Outcome::default()
    }
    .seed("seed", a.seed))
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let bundle = load_model(&a.model)?;
    let ds = read_dataset(&a.dataset)?;
    if ds.window != bundle.window() {
        return Err(Error::invalid(format!(
            "dataset window {} does not match the model window {}",
            ds.window,
            bundle.window()
        )));
    }
    let report = evaluate(&bundle, &ds.samples)?;
    let text = match a.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Kv => report.to_kv(),
    };
    write_text(&a.report, &text)?;
    println!("accuracy {:.4} on {} windows", report.accuracy, report.n_samples);
    Ok(Outcome {
        inputs: vec![a.model.clone(), a.dataset.clone()],
        outputs: vec![a.report.clone()],
        primary: Some(a.report.clone()),
        ..Outcome::default()
    })
}

fn cmd_sweep(a: &SweepArgs) -> Result<Outcome> {
    let profiles = profile_set(a.profiles.as_deref(), &a.apps)?;
    let plan = SweepPlan {
        windows: a.windows.0.clone(),
        capture_prob: a.capture,
        per_class_at_100: a.per_class_at_100,
        max_per_class: a.max_per_class,
        test_per_class: a.test_per_class,
        seed: a.seed,
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            seed: a.seed,
            ..TrainConfig::default()
        },
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let rows = synthetic_sweep(&profiles, &plan)?;
    let mut outcome = Outcome::default().seed("seed", a.seed);
    outcome.inputs.extend(a.profiles.clone());
    for row in &rows {
        let path = a.out_dir.join(format!("report_w{}.txt", row.window));
        write_text(&path, &row.report.to_table())?;
        outcome.outputs.push(path);
    }
    let summary = sweep_table(&rows);
    let path = a.out_dir.join("summary.txt");
    write_text(&path, &summary)?;
    outcome.outputs.push(path);
    print!("{summary}");
    outcome.primary = Some(a.out_dir.clone());
    Ok(outcome)
}

fn cmd_latency(a: &LatencyArgs) -> Result<Outcome> {
    let profiles = profile_set(a.profiles.as_deref(), &a.apps)?;
    let rows = synthetic_latency(&profiles, &a.windows.0, a.capture, a.trials, a.seed)?;
    let csv = latency_csv(&rows);
    write_text(&a.out, &csv)?;
    print!("{csv}");
    let mut outcome = Outcome::default().seed("seed", a.seed);
    outcome.inputs.extend(a.profiles.clone());
    outcome.outputs.push(a.out.clone());
    outcome.primary = Some(a.out.clone());
    Ok(outcome)
}

fn cmd_scan(a: &ScanArgs) -> Result<Outcome> {
    let bundle = load_model(&a.model)?;
    let trace = load_trace(&a.trace)?;
    let opts = ScanOptions {
        min_confidence: a.min_confidence,
        segment_gap_ms: a.segment_gap_ms,
        presence_gap_ms: a.presence_gap_ms,
        burst_gap_ms: match a.burst_gap {
            BurstGap::Off => None,
            BurstGap::Ms(ms) => Some(ms),
            BurstGap::Auto => return Err(Error::invalid("scan --burst-gap takes none or milliseconds")),
        },
    };
    let (text, n_rntis) = match a.rnti {
        Some(rnti) => {
            let r = track_target(&trace, rnti, &bundle, a.window, &opts)?;
            let status = match r.status {
                TrackStatus::Seen => "seen",
                TrackStatus::NotSeen => "not seen",
            };
            (format!("target {rnti}: {status}\n{}", r.report.to_text()), r.report.rntis.len())
        }
        None => {
            let r = cell_scan_with(&trace, &bundle, a.window, &opts)?;
            (r.to_text(), r.rntis.len())
        }
    };
    write_text(&a.out, &text)?;
    println!("{n_rntis} RNTIs scanned, report in {}", a.out.display());
    Ok(Outcome {
        inputs: vec![a.model.clone(), a.trace.clone()],
        outputs: vec![a.out.clone()],
        primary: Some(a.out.clone()),
        ..Outcome::default()
    })
}

fn cmd_hunt(a: &HuntArgs) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let spec = match &a.spec {
        Some(p) => {
            outcome.inputs.push(p.clone());
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            SignatureSpec::from_toml(&text)?
        }
        None => SignatureSpec::default(),
    };
    let trace = load_trace(&a.trace)?;
    outcome.inputs.push(a.trace.clone());
    let text = detect_target(&trace, &spec, a.t0_ms)?.to_text();
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            outcome.outputs.push(p.clone());
            outcome.primary = Some(p.clone());
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(outcome)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let spec = build_model(a.window, 3, a.classes)?;
    let opts = GradCheckOptions {
        seed: a.seed,
        h: a.step,
        max_params_per_layer: a.max_per_layer,
        ..GradCheckOptions::default()
    };
    let r = numeric_grad_check(&spec, &opts)?;
    let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "window {}: max relative error {:.3e} at {} ({} of {} parameters checked, {} skipped at kinks) {}",
        a.window,
        r.max_rel_error,
        r.worst,
        r.n_checked,
        r.n_params,
        r.n_kinks,
        if pass { "ok" } else { "FAILED" }
    );
    Ok(Outcome {
        exit_code: if pass { 0 } else { 1 },
        ..Outcome::default()
    }
    .seed("seed", a.seed))
}

fn cmd_replay(a: &ReplayArgs, manifest_out: Option<&Path>) -> Result<i32> {
    let recorded = RunManifest::load(&a.manifest_file)?;
    let cwd = std::env::current_dir().map(|p| p.display().to_string()).unwrap_or_default();
    if cwd != recorded.cwd && recorded.argv.iter().any(|s| is_relative_path_arg(s)) {
        return Err(Error::invalid(format!(
            "manifest uses relative paths; replay from {}",
            recorded.cwd
        )));
    }
    for (path, digest) in &recorded.inputs {
        let now = sha256_file(path)?;
        if &now != digest {
            return Err(Error::invalid(format!("input {path} changed since the recorded run")));
        }
    }
    let new_manifest = match manifest_out {
        Some(p) => p.to_path_buf(),
        None => {
            let mut s = a.manifest_file.as_os_str().to_owned();
            s.push(".replay.json");
            PathBuf::from(s)
        }
    };
    let mut argv = vec!["dcilab".to_string()];
    argv.extend(recorded.argv.iter().cloned());
    argv.push("--manifest".into());
    argv.push(new_manifest.display().to_string());
    let code = run(argv);
    if code != recorded.exit_code {
        eprintln!("replay exit code {code}, recorded {}", recorded.exit_code);
        return Ok(1);
    }
    let replayed = RunManifest::load(&new_manifest)?;
    let mut mismatches = 0;
    for (path, digest) in &recorded.outputs {
        match replayed.outputs.get(path) {
            Some(d) if d == digest => {}
            Some(_) => {
                eprintln!("differs: {path}");
                mismatches += 1;
            }
            None => {
                eprintln!("missing: {path}");
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 || replayed.outputs.len() != recorded.outputs.len() {
        eprintln!("replay of {} not reproducible", recorded.subcommand);
        return Ok(1);
    }
    println!(
        "replay of {}: {} outputs byte-identical",
        recorded.subcommand,
        recorded.outputs.len()
    );
    Ok(0)
}

fn is_relative_path_arg(s: &str) -> bool {
    let p = Path::new(s);
    !s.starts_with('-') && (s.contains('/') || s.contains('.')) && p.is_relative() && s.parse::<f64>().is_err()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_lists_parse() {
        assert_eq!("20:160:20".parse::<WindowList>().unwrap().0, vec![20, 40, 60, 80, 100, 120, 140, 160]);
        assert_eq!("20, 40,100".parse::<WindowList>().unwrap().0, vec![20, 40, 100]);
        assert!("20:10:5".parse::<WindowList>().is_err());
        assert!("0,20".parse::<WindowList>().is_err());
        assert!("20:x:5".parse::<WindowList>().is_err());
    }

    #[test]
    fn burst_gap_round_trips() {
        for s in ["auto", "none", "750"] {
            assert_eq!(s.parse::<BurstGap>().unwrap().to_string(), s);
        }
        assert!("soon".parse::<BurstGap>().is_err());
    }

    #[test]
    fn manifest_flag_is_stripped() {
        let argv: Vec<OsString> = ["dcilab", "gen", "--manifest", "m.json", "--seed", "3", "--manifest=x"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(strip_manifest_flag(&argv), vec!["gen", "--seed", "3"]);
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        assert_eq!(run(["dcilab", "gen", "--bogus"]), 2);
        assert_eq!(run(["dcilab", "frobnicate"]), 2);
        assert_eq!(run(["dcilab", "sweep", "--help"]), 0);
    }

    #[test]
    fn validation_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.trace");
        let code = run([
            "dcilab".into(),
            "gen".into(),
            "--app".into(),
            "NoSuchApp".into(),
            "--out".into(),
            out.display().to_string(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn every_flag_has_help_text() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if matches!(id, "help" | "version") {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{id}", sub.get_name());
            }
        }
    }

    #[test]
    fn stratified_split_holds_out_each_class() {
        let mk = |l: &str, t: u64| WindowSample {
            rows: Vec::new(),
            label: Some(AppLabel::from(l)),
            rnti: Rnti(1),
            t_start_ms: t,
            t_end_ms: t,
        };
        let samples: Vec<_> = (0..50).map(|t| mk("A", t)).chain((0..20).map(|t| mk("B", t))).collect();
        let (tr, va) = stratified_split(samples, 0.1, 4).unwrap();
        assert_eq!(va.iter().filter(|s| s.label == Some(AppLabel::from("A"))).count(), 5);
        assert_eq!(va.iter().filter(|s| s.label == Some(AppLabel::from("B"))).count(), 2);
        assert_eq!(tr.len(), 63);
    }
}
