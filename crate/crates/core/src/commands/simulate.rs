use std::path::PathBuf;

use super::{csv_err, io_err, write_file, CommandError, RunConfig, EXIT_OK, EXIT_OOM};
use crate::sim::{simulate, write_steps_csv, RunStatus, SimOptions, SimReport};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const STEPS_CSV: &str = "steps.csv";

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub report: SimReport,
    pub files: Vec<PathBuf>,
}

impl SimulateOutcome {
    /// Out-of-memory runs still write their reports but exit nonzero.
    pub fn exit_code(&self) -> i32 {
        match self.report.status {
            RunStatus::Completed => EXIT_OK,
            RunStatus::OutOfMemory => EXIT_OOM,
        }
    }
}

/// Runs one simulation and writes report.json, report.csv and steps.csv
/// into `run.out`.
pub fn cmd_simulate(run: &RunConfig) -> Result<SimulateOutcome, CommandError> {
    let cfg = run.system_config()?;
    let trace = run.load_trace()?;
    let opts = SimOptions {
        variant: run.variant,
        ablation: run.ablation,
        seed: run.seed,
    };
    let report = simulate(&trace, &cfg, &opts)?;
    std::fs::create_dir_all(&run.out).map_err(io_err(&run.out))?;

    let json = run.out.join(REPORT_JSON);
    let mut text = report.to_json();
    text.push('\n');
    write_file(&json, text.as_bytes())?;

    let summary = run.out.join(REPORT_CSV);
    let mut buf = Vec::new();
    report.write_summary_csv(&mut buf).map_err(csv_err(&summary))?;
    write_file(&summary, &buf)?;

    let steps = run.out.join(STEPS_CSV);
    let mut buf = Vec::new();
    write_steps_csv(&report.steps, &mut buf).map_err(csv_err(&steps))?;
    write_file(&steps, &buf)?;

    Ok(SimulateOutcome {
        report,
        files: vec![json, summary, steps],
    })
}
