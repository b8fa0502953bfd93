use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pamsim_core::commands::{
    cmd_gen_trace, cmd_report, cmd_simulate, cmd_sweep, cmd_verify, sweep_threads, CommandError, GenTraceConfig,
    ReportConfig, RunConfig, SweepGrid, TraceSource, EXIT_OK,
};
use pamsim_core::sim::{Ablation, SystemVariant};
use pamsim_core::verify::VerifyOptions;
use pamsim_core::workload::trace::{TraceKind, BUNDLED_RATE_PER_S, BUNDLED_REQUESTS, BUNDLED_SEED};

/// Simulator for LLM serving on a three-tier processing-in-memory system.
#[derive(Parser)]
#[command(name = "pamsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trace on one system variant.
    Simulate(SimulateArgs),
    /// Run the numerical and scheduling property suites.
    Verify(VerifyArgs),
    /// Simulate a grid of variants, ablations, batch sizes, ratios and seeds.
    Sweep(SweepArgs),
    /// Render SVG charts from steps.csv and sweep.csv.
    Report(ReportArgs),
    /// Write a synthetic request trace.
    GenTrace(GenTraceArgs),
}

#[derive(Args)]
struct RunArgs {
    /// System config (TOML); the built-in reference system when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file, or `bundled:sharegpt_like` / `bundled:arxiv_like`.
    #[arg(long)]
    trace: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// SLO threshold in milliseconds; repeat for several.
    #[arg(long = "slo-ms")]
    slo_ms: Vec<f64>,
    /// Sparsity compression ratio (keeps 1/c of the tokens).
    #[arg(long)]
    compression: Option<f64>,
    /// Keep only the first N trace records.
    #[arg(long)]
    requests: Option<usize>,
    /// Cap on concurrently decoding requests.
    #[arg(long)]
    max_batch: Option<usize>,
}

impl RunArgs {
    fn run_config(&self, variant: SystemVariant) -> Result<RunConfig, CommandError> {
        Ok(RunConfig {
            config: self.config.clone(),
            slo_ms: self.slo_ms.clone(),
            compression: self.compression,
            requests: self.requests,
            max_batch: self.max_batch,
            seed: self.seed,
            ..RunConfig::new(TraceSource::parse(&self.trace)?, variant, self.out.clone())
        })
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "PAM")]
    variant: SystemVariant,
    /// Switch off one PAM component.
    #[arg(long)]
    ablate: Option<Ablation>,
    /// Target HBM:SSD mean-importance ratio.
    #[arg(long)]
    x: Option<f64>,
    /// Target DDR:SSD mean-importance ratio.
    #[arg(long)]
    y: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = VerifyOptions::default().seed)]
    seed: u64,
    /// Multiplies every suite's case count.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Corrupt attention outputs so the suites must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Variants to run; all five when omitted.
    #[arg(long = "variant")]
    variants: Vec<SystemVariant>,
    /// Ablations to add to the full PAM runs.
    #[arg(long = "ablate")]
    ablate: Vec<Ablation>,
    /// Run only the ablated PAM configurations, not the full system.
    #[arg(long)]
    ablations_only: bool,
    /// Batch sizes as trace prefixes; repeat or comma-separate.
    #[arg(long = "batch", value_delimiter = ',')]
    batches: Vec<usize>,
    /// Target HBM:SSD importance ratios; repeat or comma-separate.
    #[arg(long = "x", value_delimiter = ',')]
    x: Vec<f64>,
    /// Target DDR:SSD importance ratios; repeat or comma-separate.
    #[arg(long = "y", value_delimiter = ',')]
    y: Vec<f64>,
    /// Seeds; repeat or comma-separate. Defaults to --seed.
    #[arg(long = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// steps.csv written by `simulate`.
    #[arg(long)]
    steps: Option<PathBuf>,
    /// sweep.csv written by `sweep`.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, default_value = "arxiv_like")]
    kind: TraceKind,
    #[arg(long, default_value_t = BUNDLED_REQUESTS)]
    requests: usize,
    #[arg(long, default_value_t = BUNDLED_SEED)]
    seed: u64,
    /// Mean arrival rate for sharegpt-like traces, requests per second.
    #[arg(long, default_value_t = BUNDLED_RATE_PER_S)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<i32, CommandError> {
    match cli.command {
        Command::Simulate(a) => {
            let mut run = a.run.run_config(a.variant)?;
            run.ablation = a.ablate;
            run.x = a.x;
            run.y = a.y;
            let outcome = cmd_simulate(&run)?;
            let r = &outcome.report;
            println!(
                "{} {}: {} of {} requests, {} tokens in {:.3} s, {:.1} tok/s",
                r.variant,
                r.status.name(),
                r.requests_completed,
                r.requests_total,
                r.generated_tokens,
                r.wall_time_s,
                r.throughput_tok_s
            );
            if let Some(oom) = &r.oom {
                eprintln!(
                    "out of memory at {:.3} ms: request {} needs {} KV tokens, {} of {} reserved",
                    oom.time_ms, oom.request_id, oom.demanded_tokens, oom.reserved_tokens, oom.capacity_tokens
                );
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(outcome.exit_code())
        }
        Command::Verify(a) => {
            let opts = VerifyOptions {
                seed: a.seed,
                scale: a.scale,
                inject_fault: a.inject_fault,
            };
            cmd_verify(&opts, std::io::stdout())?;
            Ok(EXIT_OK)
        }
        Command::Sweep(a) => {
            let base = a.run.run_config(SystemVariant::Pam)?;
            let mut ablations: Vec<Option<Ablation>> = Vec::new();
            if !a.ablations_only {
                ablations.push(None);
            }
            ablations.extend(a.ablate.iter().copied().map(Some));
            let variants = if a.variants.is_empty() { SystemVariant::ALL.to_vec() } else { a.variants };
            let grid = SweepGrid {
                variants,
                ablations,
                requests: a.batches,
                x: a.x,
                y: a.y,
                seeds: a.seeds,
            };
            let (rows, path) = cmd_sweep(&grid, &base, sweep_threads())?;
            let failed = rows.iter().filter(|r| r.status() == "error").count();
            println!("{} points ({failed} failed), wrote {}", rows.len(), path.display());
            for r in rows.iter().filter(|r| r.status() == "error") {
                if let Err(e) = &r.result {
                    eprintln!("{} {:?}: {e}", r.point.variant, r.point.ablation);
                }
            }
            Ok(EXIT_OK)
        }
        Command::Report(a) => {
            let outcome = cmd_report(&ReportConfig {
                steps: a.steps,
                sweep: a.sweep,
                out: a.out,
            })?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(EXIT_OK)
        }
        Command::GenTrace(a) => {
            let trace = cmd_gen_trace(&GenTraceConfig {
                kind: a.kind,
                requests: a.requests,
                seed: a.seed,
                rate_per_s: a.rate,
                out: a.out.clone(),
            })?;
            println!("wrote {} requests to {}", trace.len(), a.out.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
