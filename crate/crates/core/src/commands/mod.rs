//! Library side of the `pamsim` subcommands. The binary only parses flags
//! into these types and maps [`CommandError::exit_code`] to the process exit
//! status.

mod plot;
mod simulate;
mod sweep;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{load_config, ConfigError, SystemConfig};
use crate::sim::{Ablation, SimError, SystemVariant};
use crate::verify::{run_verify, SuiteResult, VerifyOptions};
use crate::workload::{load_trace, trace_to_string, RequestTrace, TraceError, TraceKind};

pub use plot::{
    cmd_report, latency_breakdown_svg, throughput_svg, ReportConfig, ReportOutcome, BREAKDOWN_SVG, THROUGHPUT_SVG,
};
pub use simulate::{cmd_simulate, SimulateOutcome, REPORT_CSV, REPORT_JSON, STEPS_CSV};
pub use sweep::{cmd_sweep, run_sweep, sweep_threads, SweepGrid, SweepPoint, SweepRow, SWEEP_CSV, SWEEP_FIXED_COLUMNS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OOM: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} property suite(s) failed", failed.len())]
    Property { failed: Vec<String> },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) | CommandError::Trace(_) | CommandError::Usage(_) => EXIT_CONFIG,
            CommandError::Sim(SimError::Config(_) | SimError::AblationVariant { .. }) => EXIT_CONFIG,
            CommandError::Sim(SimError::OutOfMemory(_)) => EXIT_OOM,
            CommandError::Sim(_) | CommandError::Io { .. } => EXIT_IO,
            CommandError::Property { .. } => EXIT_PROPERTY,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CommandError + '_ {
    move |e| CommandError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CommandError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Where request records come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    Bundled(TraceKind),
}

impl TraceSource {
    /// `bundled:<kind>` names a shipped trace; anything else is a path.
    pub fn parse(s: &str) -> Result<Self, CommandError> {
        match s.strip_prefix("bundled:") {
            Some(kind) => kind.parse().map(TraceSource::Bundled).map_err(CommandError::Usage),
            None => Ok(TraceSource::File(PathBuf::from(s))),
        }
    }

    pub fn load(&self) -> Result<Vec<RequestTrace>, CommandError> {
        match self {
            TraceSource::File(p) => Ok(load_trace(p)?),
            TraceSource::Bundled(k) => Ok(k.bundled()),
        }
    }
}

/// Inputs of one simulation run. `None` fields keep the config's value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Config file; the embedded default when absent.
    pub config: Option<PathBuf>,
    pub trace: TraceSource,
    pub variant: SystemVariant,
    pub ablation: Option<Ablation>,
    pub seed: u64,
    /// Replaces the configured SLO thresholds when nonempty.
    pub slo_ms: Vec<f64>,
    pub compression: Option<f64>,
    pub x: Option<f64>,
    pub y: Option<f64>,
    /// Keeps only the first `requests` trace records (after sorting).
    pub requests: Option<usize>,
    pub max_batch: Option<usize>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(trace: TraceSource, variant: SystemVariant, out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            trace,
            variant,
            ablation: None,
            seed: 0,
            slo_ms: Vec::new(),
            compression: None,
            x: None,
            y: None,
            requests: None,
            max_batch: None,
            out: out.into(),
        }
    }

    /// Loads the config with every override applied and validated.
    pub fn system_config(&self) -> Result<SystemConfig, CommandError> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => SystemConfig::default(),
        };
        if !self.slo_ms.is_empty() {
            cfg.sim.slo_ms.clone_from(&self.slo_ms);
        }
        if let Some(c) = self.compression {
            cfg.sparsity.compression = c;
        }
        if let Some(x) = self.x {
            cfg.scheduler.x = x;
        }
        if let Some(y) = self.y {
            cfg.scheduler.y = y;
        }
        if let Some(b) = self.max_batch {
            cfg.sim.max_batch = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_trace(&self) -> Result<Vec<RequestTrace>, CommandError> {
        let mut trace = self.trace.load()?;
        if let Some(n) = self.requests {
            if n == 0 {
                return Err(CommandError::Usage("--requests must be at least 1".into()));
            }
            trace.truncate(n);
        }
        Ok(trace)
    }
}

/// Runs every property suite and prints one line per suite.
pub fn cmd_verify(opts: &VerifyOptions, mut log: impl std::io::Write) -> Result<Vec<SuiteResult>, CommandError> {
    let results = run_verify(opts);
    for r in &results {
        let status = if r.ok() { "ok" } else { "FAILED" };
        let _ = writeln!(log, "{:<24} {}/{} {status}", r.name, r.passed, r.total);
        if let Some(f) = &r.first_failure {
            let _ = writeln!(log, "  first failure: {f}");
        }
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.ok()).map(|r| r.name.to_string()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CommandError::Property { failed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenTraceConfig {
    pub kind: TraceKind,
    pub requests: usize,
    pub seed: u64,
    pub rate_per_s: f64,
    pub out: PathBuf,
}

/// Writes a synthetic trace; the defaults reproduce the bundled files.
pub fn cmd_gen_trace(cfg: &GenTraceConfig) -> Result<Vec<RequestTrace>, CommandError> {
    if !(cfg.rate_per_s > 0.0 && cfg.rate_per_s.is_finite()) {
        return Err(CommandError::Usage(format!("arrival rate must be positive, got {}", cfg.rate_per_s)));
    }
    let trace = cfg.kind.generate(cfg.requests, cfg.rate_per_s, cfg.seed);
    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_file(&cfg.out, trace_to_string(&trace).as_bytes())?;
    Ok(trace)
}
