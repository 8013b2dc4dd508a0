//! Command implementations behind the `tfqkd` binary.
//!
//! Each subcommand produces its artifact as a string (or a set of files
//! under `--out`) plus an exit status, so the commands can be driven
//! in-process as well as from the shell.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use tfqkd_core::bounds::{bounds_sweep, BoundsConfig, DarkAggregation};
use tfqkd_core::io::{self, Format};
use tfqkd_core::keyrate::{analyze, skr_vs_distance, CurveConfig, ForwardModel};
use tfqkd_core::montecarlo::{run_protocol, simulate_stabilization, MonteCarloConfig, PhaseNoise, Stage, StabilizerConfig};
use tfqkd_core::{validate_params, ArmSplit, DetectorParams, Error, LinkBudget, ProtocolParams, SecurityParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, Parser)]
#[command(name = "tfqkd", version, about = "Twin-field QKD key rates, capacity bounds and link simulation")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Protocol parameter file (JSON). Defaults to the built-in field-trial set where optional.
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    /// Output file, or output directory for `montecarlo`. Stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Output format; inferred from the `--out` extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Detector file (JSON with efficiency, dark_rate_hz, deadtime_s).
    #[arg(long, global = true)]
    pub detector: Option<PathBuf>,
    /// Security parameter file (JSON).
    #[arg(long, global = true)]
    pub security: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Check a parameter file, including the asymmetry condition.
    Validate {
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
    /// Run the finite-size key-rate pipeline on a counts file.
    Keyrate {
        #[arg(long)]
        counts: PathBuf,
    },
    /// Expected key rate against channel loss from the analytic link model.
    Simulate(SimulateArgs),
    /// Repeaterless and single-repeater capacity bounds against loss.
    Bounds {
        #[arg(long = "sweep-db", value_parser = parse_sweep)]
        sweep_db: Sweep,
        /// Gate rate used to turn dark-count rates into probabilities.
        #[arg(long)]
        clock_hz: Option<f64>,
        #[arg(long, value_enum, default_value_t = Aggregation::PerDetector)]
        aggregation: Aggregation,
    },
    /// Photon-level simulation of a run at one loss point.
    Montecarlo(MonteCarloArgs),
    /// Simulate the phase stabiliser and write the residual phase trace.
    Phasestab(PhaseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LinkArgs {
    #[arg(long, value_enum, default_value_t = Split::Matched)]
    pub split: Split,
    #[arg(long, default_value_t = 0.97)]
    pub visibility: f64,
    /// Residual phase jitter, rad.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long = "sweep-db", value_parser = parse_sweep, conflicts_with = "sweep_km", required_unless_present = "sweep_km")]
    pub sweep_db: Option<Sweep>,
    #[arg(long = "sweep-km", value_parser = parse_sweep)]
    pub sweep_km: Option<Sweep>,
    /// Fibre attenuation, dB/km.
    #[arg(long, default_value_t = 0.22)]
    pub atten: f64,
    /// Pulse pairs sent per point.
    #[arg(long, default_value_t = 1.36581e13)]
    pub n_tot: f64,
    #[command(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MonteCarloArgs {
    /// Total channel loss, dB.
    #[arg(long)]
    pub loss_db: f64,
    #[arg(long, default_value = "1e7", value_parser = parse_count)]
    pub slots: u64,
    #[arg(long, value_enum, default_value_t = PhaseMode::Ideal)]
    pub stage: PhaseMode,
    #[arg(long)]
    pub no_deadtime: bool,
    #[command(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PhaseArgs {
    #[arg(long, value_enum, default_value_t = PhaseMode::Fine)]
    pub stage: PhaseMode,
    /// Simulated time, s.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// Channel drift, rad per sqrt(s).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub coarse_gain: Option<f64>,
    #[arg(long)]
    pub fine_gain: Option<f64>,
    #[arg(long)]
    pub setpoint: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Offset the arms so both pulses arrive at Charlie with equal single-photon flux.
    Matched,
    Symmetric,
    /// Split in proportion to the field-trial fibre lengths.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Aggregation {
    PerDetector,
    BothDetectors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseMode {
    Ideal,
    Free,
    Coarse,
    Fine,
}

impl PhaseMode {
    fn stage(self) -> Option<Stage> {
        match self {
            PhaseMode::Ideal => None,
            PhaseMode::Free => Some(Stage::Free),
            PhaseMode::Coarse => Some(Stage::Coarse),
            PhaseMode::Fine => Some(Stage::CoarseFine),
        }
    }
}

/// Inclusive `start:stop:step` range.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep(pub Vec<f64>);

pub fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let (a, b, step) = match parts[..] {
        [a] => return Ok(Sweep(vec![a])),
        [a, b] => (a, b, 1.0),
        [a, b, step] => (a, b, step),
        _ => return Err("expected start:stop:step".into()),
    };
    if !(step > 0.0) || !a.is_finite() || !b.is_finite() || b < a {
        return Err(format!("`{s}` is not an increasing range with positive step"));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    if n > 1_000_000 {
        return Err(format!("`{s}` has too many points"));
    }
    Ok(Sweep((0..=n).map(|i| a + step * i as f64).collect()))
}

fn parse_count(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if v < 1.0 || v.fract() != 0.0 || v > 9.0e15 {
        return Err(format!("`{s}` is not a positive whole count"));
    }
    Ok(v as u64)
}

/// Text destined for stdout and the process exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { stdout, exit_code: EXIT_OK }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError {
            exit_code: exit_code(&error),
            error,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Schema { .. } | Error::MissingKey { .. } | Error::InconsistentCounts { .. } => EXIT_SCHEMA,
        _ => EXIT_VALIDATION,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl RunConfig {
    fn format_for(&self, default: Format) -> Format {
        match (self.format, &self.out) {
            (Some(OutputFormat::Json), _) => Format::Json,
            (Some(OutputFormat::Csv), _) => Format::Csv,
            (None, Some(p)) if p.extension().is_some() => Format::from_path(p),
            _ => default,
        }
    }

    fn load_params(&self, required: bool) -> CliResult<ProtocolParams> {
        match &self.params {
            Some(p) => Ok(io::read_params(p)?),
            None if required => Err(Error::arg("--params", "a parameter file is required").into()),
            None => Ok(ProtocolParams::field_trial()),
        }
    }

    fn load_detector(&self) -> CliResult<DetectorParams> {
        Ok(match &self.detector {
            Some(p) => io::read_json(p)?,
            None => DetectorParams::protocol_apd(),
        })
    }

    fn load_security(&self) -> CliResult<SecurityParams> {
        let sec: SecurityParams = match &self.security {
            Some(p) => io::read_json(p)?,
            None => SecurityParams::default(),
        };
        sec.validate()?;
        Ok(sec)
    }

    /// Writes `body` to `--out`, or returns it for stdout.
    fn emit(&self, body: String) -> CliResult<Outcome> {
        match &self.out {
            Some(p) => {
                io::write_string(p, &body)?;
                Ok(Outcome::ok(String::new()))
            }
            None => Ok(Outcome::ok(body)),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable value");
    s.push('\n');
    s
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, out);
            }
        }
        Value::String(s) => out.push((prefix.into(), s.clone())),
        Value::Null => out.push((prefix.into(), String::new())),
        other => out.push((prefix.into(), other.to_string())),
    }
}

/// `key,value` CSV of every leaf of a serialisable value.
pub fn to_key_value_csv<T: Serialize>(v: &T) -> String {
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(v).expect("serialisable value"), &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"]).expect("in-memory write");
    for (k, v) in rows {
        w.write_record([k, v]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn split_for(split: Split, params: &ProtocolParams) -> ArmSplit {
    match split {
        Split::Matched => ArmSplit::matched_arrival(params),
        Split::Symmetric => ArmSplit::Symmetric,
        Split::Proportional => ArmSplit::Proportional {
            alice_fraction: 156.7 / 253.9,
        },
    }
}

pub fn execute(cfg: &RunConfig) -> CliResult<Outcome> {
    match &cfg.command {
        Command::Validate { tolerance } => cmd_validate(cfg, *tolerance),
        Command::Keyrate { counts } => cmd_keyrate(cfg, counts),
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Bounds {
            sweep_db,
            clock_hz,
            aggregation,
        } => cmd_bounds(cfg, sweep_db, *clock_hz, *aggregation),
        Command::Montecarlo(a) => cmd_montecarlo(cfg, a),
        Command::Phasestab(a) => cmd_phasestab(cfg, a),
    }
}

pub fn cmd_validate(cfg: &RunConfig, tolerance: f64) -> CliResult<Outcome> {
    if !(tolerance >= 0.0) {
        return Err(Error::arg("--tolerance", "must be non-negative").into());
    }
    let params = cfg.load_params(true)?;
    let report = validate_params(&params, tolerance);
    let body = match cfg.format_for(Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("name,kind,passed,deviation,detail\n");
            for c in &report.checks {
                let dev = c.deviation.map(|d| d.to_string()).unwrap_or_default();
                let _ = writeln!(s, "\"{}\",{:?},{},{},\"{}\"", c.name, c.kind, c.passed, dev, c.detail.replace('"', "'"));
            }
            s
        }
    };
    let mut out = cfg.emit(body)?;
    if !report.passed() {
        out.exit_code = EXIT_VALIDATION;
    }
    Ok(out)
}

pub fn cmd_keyrate(cfg: &RunConfig, counts_path: &Path) -> CliResult<Outcome> {
    let params = cfg.load_params(true)?;
    let sec = cfg.load_security()?;
    let counts = io::read_counts(counts_path, &params)?;
    let report = analyze(&counts, &params, &sec)?;
    let body = match cfg.format_for(Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => to_key_value_csv(&report),
    };
    cfg.emit(body)
}

pub fn cmd_simulate(cfg: &RunConfig, a: &SimulateArgs) -> CliResult<Outcome> {
    let params = cfg.load_params(false)?;
    let mut curve = CurveConfig::new(params, cfg.load_detector()?);
    curve.security = cfg.load_security()?;
    curve.model = ForwardModel {
        visibility: a.link.visibility,
        phase_jitter_sigma: a.link.jitter,
    };
    curve.split = split_for(a.link.split, &curve.params);
    curve.n_tot = a.n_tot;
    curve.attenuation_db_per_km = a.atten;
    if !(a.atten > 0.0) {
        return Err(Error::arg("--atten", "must be positive").into());
    }
    let losses: Vec<f64> = match (&a.sweep_db, &a.sweep_km) {
        (Some(s), _) => s.0.clone(),
        (None, Some(s)) => s.0.iter().map(|km| km * a.atten).collect(),
        (None, None) => return Err(Error::arg("--sweep-db", "a loss or length sweep is required").into()),
    };
    let rows = skr_vs_distance(&losses, &curve)?;
    let body = match cfg.format_for(Format::Csv) {
        Format::Csv => io::rows_to_csv(&rows),
        Format::Json => to_json(&rows),
    };
    cfg.emit(body)
}

pub fn cmd_bounds(cfg: &RunConfig, sweep: &Sweep, clock_hz: Option<f64>, agg: Aggregation) -> CliResult<Outcome> {
    let clock = match clock_hz {
        Some(c) => c,
        None => cfg.load_params(false)?.clock_rate_hz,
    };
    let mut bc = BoundsConfig::new(cfg.load_detector()?, clock);
    bc.aggregation = match agg {
        Aggregation::PerDetector => DarkAggregation::PerDetector,
        Aggregation::BothDetectors => DarkAggregation::BothDetectors,
    };
    let rows = bounds_sweep(&sweep.0, &bc)?;
    let body = match cfg.format_for(Format::Csv) {
        Format::Csv => io::rows_to_csv(&rows),
        Format::Json => to_json(&rows),
    };
    cfg.emit(body)
}

/// File names written by `montecarlo` under `--out`.
pub const MC_COUNTS_JSON: &str = "counts.json";
pub const MC_COUNTS_CSV: &str = "counts.csv";
pub const MC_SUMMARY: &str = "outcome.json";
pub const MC_TRACE: &str = "trace.csv";

pub fn cmd_montecarlo(cfg: &RunConfig, a: &MonteCarloArgs) -> CliResult<Outcome> {
    let params = cfg.load_params(false)?;
    let mut det = cfg.load_detector()?;
    if a.no_deadtime {
        det = det.without_deadtime();
    }
    let link = LinkBudget::from_total_loss(a.loss_db, split_for(a.link.split, &params), None);
    let mut mc = MonteCarloConfig::new(params, link, det, a.slots, cfg.seed);
    mc.model = ForwardModel {
        visibility: a.link.visibility,
        phase_jitter_sigma: a.link.jitter,
    };
    if let Some(stage) = a.stage.stage() {
        mc.phase = PhaseNoise::Stabilized {
            stage,
            config: StabilizerConfig::default(),
        };
    }
    let out = run_protocol(&mc)?;
    let summary = out.summary();
    let Some(dir) = &cfg.out else {
        let mut counts: serde_json::Map<String, Value> = serde_json::Map::new();
        for (k, v) in io::counts_to_map(&out.counts) {
            counts.insert(k, Value::from(v));
        }
        return Ok(Outcome::ok(to_json(&serde_json::json!({ "counts": counts, "outcome": summary }))));
    };
    let counts_path = match cfg.format_for(Format::Json) {
        Format::Json => dir.join(MC_COUNTS_JSON),
        Format::Csv => dir.join(MC_COUNTS_CSV),
    };
    io::write_counts(&counts_path, &out.counts)?;
    io::write_json(&dir.join(MC_SUMMARY), &summary)?;
    if !out.phase_trace.is_empty() {
        io::write_trace_csv(&dir.join(MC_TRACE), &out.phase_trace)?;
    }
    Ok(Outcome::ok(String::new()))
}

pub fn cmd_phasestab(cfg: &RunConfig, a: &PhaseArgs) -> CliResult<Outcome> {
    let stage = a
        .stage
        .stage()
        .ok_or_else(|| Error::arg("--stage", "choose free, coarse or fine"))?;
    let mut sc = StabilizerConfig::default();
    if let Some(s) = a.sigma {
        sc.sigma_drift = s;
    }
    if let Some(g) = a.coarse_gain {
        sc.coarse_gain = g;
    }
    if let Some(g) = a.fine_gain {
        sc.fine_gain = g;
    }
    if let Some(s) = a.setpoint {
        sc.setpoint = s;
    }
    let trace = simulate_stabilization(&sc, stage, a.duration, cfg.seed)?;
    let rows = trace.rows();
    match &cfg.out {
        Some(p) => {
            match cfg.format_for(Format::Csv) {
                Format::Csv => io::write_trace_csv(p, &rows)?,
                Format::Json => io::write_json(p, &rows)?,
            }
            Ok(Outcome::ok(to_json(&trace.stats)))
        }
        None => Ok(Outcome::ok(match cfg.format_for(Format::Csv) {
            Format::Csv => io::rows_to_csv(&rows),
            Format::Json => to_json(&serde_json::json!({ "stats": trace.stats, "trace": rows })),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("0:2:1").unwrap().0, vec![0.0, 1.0, 2.0]);
        assert_eq!(parse_sweep("20:50").unwrap().0.len(), 31);
        assert_eq!(parse_sweep("0:1:0.3").unwrap().0.len(), 4);
        assert_eq!(parse_sweep("7").unwrap().0, vec![7.0]);
        assert!(parse_sweep("5:1:1").is_err());
        assert!(parse_sweep("0:1:0").is_err());
        assert!(parse_sweep("a:b").is_err());
    }

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("1e7").unwrap(), 10_000_000);
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("0").is_err());
    }

    #[test]
    fn leaf_flattening() {
        let csv = to_key_value_csv(&serde_json::json!({"a": {"b": 1.5, "c": [true]}, "d": null}));
        assert_eq!(csv, "key,value\na.b,1.5\na.c.0,true\nd,\n");
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(
            exit_code(&Error::MissingKey {
                source_name: "x".into(),
                key: "y".into()
            }),
            EXIT_SCHEMA
        );
        assert_eq!(exit_code(&Error::InvalidParams(vec![])), EXIT_VALIDATION);
    }
}
