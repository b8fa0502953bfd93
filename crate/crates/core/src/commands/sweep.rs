use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{csv_err, io_err, write_file, CommandError, RunConfig};
use crate::sim::{fmt_num, simulate, Ablation, RunStatus, SimOptions, SimReport, SystemVariant, SCHEMA_VERSION};

pub const SWEEP_CSV: &str = "sweep.csv";

/// Leading sweep.csv columns; the report.csv metrics from `requests_total`
/// on follow.
pub const SWEEP_FIXED_COLUMNS: [&str; 9] =
    ["schema_version", "variant", "ablation", "requests", "x", "y", "seed", "status", "error"];

/// Number of leading report.csv columns already covered by the fixed sweep
/// columns (schema_version, variant, ablation, seed, status).
const SUMMARY_SKIP: usize = 5;

/// Cartesian product of run parameters. Empty `requests`, `x` or `y` lists
/// keep the base run's value; `ablations` should list `None` to include the
/// full system.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub variants: Vec<SystemVariant>,
    pub ablations: Vec<Option<Ablation>>,
    pub requests: Vec<usize>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// Points in row order: variant, ablation, requests, x, y, seed, with
    /// the last varying fastest. Ablations only pair with PAM.
    pub fn points(&self, base: &RunConfig) -> Vec<SweepPoint> {
        fn or_base<T: Copy>(list: &[T], base: Option<T>) -> Vec<Option<T>> {
            if list.is_empty() {
                vec![base]
            } else {
                list.iter().map(|&v| Some(v)).collect()
            }
        }
        let ablations = if self.ablations.is_empty() { vec![base.ablation] } else { self.ablations.clone() };
        let seeds = if self.seeds.is_empty() { vec![base.seed] } else { self.seeds.clone() };
        let requests = or_base(&self.requests, base.requests);
        let xs = or_base(&self.x, base.x);
        let ys = or_base(&self.y, base.y);
        let mut out = Vec::new();
        let variants = if self.variants.is_empty() { vec![base.variant] } else { self.variants.clone() };
        for &variant in &variants {
            for &ablation in &ablations {
                if ablation.is_some() && variant != SystemVariant::Pam {
                    continue;
                }
                for &requests in &requests {
                    for &x in &xs {
                        for &y in &ys {
                            for &seed in &seeds {
                                out.push(SweepPoint {
                                    variant,
                                    ablation,
                                    requests,
                                    x,
                                    y,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub variant: SystemVariant,
    pub ablation: Option<Ablation>,
    pub requests: Option<usize>,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub seed: u64,
}

impl SweepPoint {
    fn run_config(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            variant: self.variant,
            ablation: self.ablation,
            requests: self.requests,
            x: self.x,
            y: self.y,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: SweepPoint,
    /// Request count and scheduler ratios actually simulated.
    pub requests: usize,
    pub x: f64,
    pub y: f64,
    pub result: Result<SimReport, String>,
}

impl SweepRow {
    pub fn status(&self) -> &'static str {
        match &self.result {
            Ok(r) if r.status == RunStatus::Completed => "ok",
            Ok(_) => "oom",
            Err(_) => "error",
        }
    }
}

fn run_point(point: SweepPoint, base: &RunConfig) -> SweepRow {
    let run = point.run_config(base);
    let mut row = SweepRow {
        point,
        requests: 0,
        x: run.x.unwrap_or(f64::NAN),
        y: run.y.unwrap_or(f64::NAN),
        result: Err(String::new()),
    };
    let inputs = run.system_config().and_then(|cfg| Ok((cfg, run.load_trace()?)));
    row.result = match inputs {
        Ok((cfg, trace)) => {
            row.requests = trace.len();
            row.x = cfg.scheduler.x;
            row.y = cfg.scheduler.y;
            let opts = SimOptions {
                variant: point.variant,
                ablation: point.ablation,
                seed: point.seed,
            };
            simulate(&trace, &cfg, &opts).map_err(|e| e.to_string())
        }
        Err(e) => Err(e.to_string()),
    };
    row
}

/// Thread cap from `PAMSIM_THREADS`; `None` leaves the choice to rayon.
pub fn sweep_threads() -> Option<usize> {
    std::env::var("PAMSIM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Simulates every grid point on up to `threads` workers. Failed points are
/// kept as error rows; rows come back in grid order.
pub fn run_sweep(grid: &SweepGrid, base: &RunConfig, threads: Option<usize>) -> Result<Vec<SweepRow>, CommandError> {
    let points = grid.points(base);
    if points.is_empty() {
        return Err(CommandError::Usage("sweep grid is empty".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CommandError::Usage(format!("cannot start sweep workers: {e}")))?;
    Ok(pool.install(|| points.par_iter().map(|&p| run_point(p, base)).collect()))
}

fn write_rows(rows: &[SweepRow], path: &Path) -> Result<(), CommandError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(&mut buf);
        let metrics: Vec<String> = rows
            .iter()
            .find_map(|r| r.result.as_ref().ok())
            .map(|r| r.summary_header().split_off(SUMMARY_SKIP))
            .unwrap_or_default();
        let mut header: Vec<String> = SWEEP_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(metrics.iter().cloned());
        w.write_record(&header).map_err(csv_err(path))?;
        for r in rows {
            let p = &r.point;
            let mut rec = vec![
                SCHEMA_VERSION.to_string(),
                p.variant.name().to_string(),
                p.ablation.map(|a| a.name().to_string()).unwrap_or_default(),
                r.requests.to_string(),
                fmt_num(r.x),
                fmt_num(r.y),
                p.seed.to_string(),
                r.status().to_string(),
            ];
            match &r.result {
                Ok(report) => {
                    rec.push(String::new());
                    rec.extend(report.summary_row().split_off(SUMMARY_SKIP));
                }
                Err(e) => {
                    rec.push(e.clone());
                    rec.extend(std::iter::repeat_n(String::new(), metrics.len()));
                }
            }
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_file(path, &buf)
}

/// Runs the sweep and writes `sweep.csv` into `base.out`.
pub fn cmd_sweep(grid: &SweepGrid, base: &RunConfig, threads: Option<usize>) -> Result<(Vec<SweepRow>, PathBuf), CommandError> {
    let rows = run_sweep(grid, base, threads)?;
    std::fs::create_dir_all(&base.out).map_err(io_err(&base.out))?;
    let path = base.out.join(SWEEP_CSV);
    write_rows(&rows, &path)?;
    Ok((rows, path))
}
