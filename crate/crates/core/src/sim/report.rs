use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::device::{EnergyBreakdown, TransferPath};
use crate::tier::{PerTier, Tier};
use crate::workload::LocalityCalibration;

/// Version of the report.json, report.csv and steps.csv layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Cost breakdown of one decode step. All times are seconds summed over
/// layers; `latency_s` is exactly the sum of the critical-path components
/// `npu_s + attention_phase_s + transfer_s + final_reduction_s + swap_exposed_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub start_ns: u64,
    pub batch: usize,
    pub resident_tokens: PerTier<u64>,
    /// Tokens chosen by sparsity (all tokens when sparsity is off).
    pub selected_tokens: u64,
    /// Tokens processed per tier; sums to `selected_tokens` for token-wise
    /// attention and exceeds it under fixed tiles.
    pub active_tokens: PerTier<u64>,
    pub partials: PerTier<u64>,
    pub npu_s: f64,
    pub attention_s: PerTier<f64>,
    pub reduction_s: PerTier<f64>,
    pub exposed_reduction_s: PerTier<f64>,
    /// Tier whose attention plus exposed reduction bounds the phase.
    pub critical_tier: Option<Tier>,
    /// Device-to-NPU KV streaming before NPU attention (offloading only).
    pub kv_fetch_s: f64,
    pub npu_attention_s: f64,
    pub attention_phase_s: f64,
    pub transfer_s: f64,
    pub transfer_path: TransferPath,
    pub final_reduction_s: f64,
    pub swaps: u64,
    pub swaps_truncated: bool,
    pub swap_bytes: u64,
    pub swap_transfer_s: f64,
    pub swap_exposed_s: f64,
    pub latency_s: f64,
    pub latency_ns: u64,
    pub energy: EnergyBreakdown,
    pub numerics_max_rel_err: Option<f64>,
}

impl StepReport {
    pub fn critical_path_sum(&self) -> f64 {
        self.npu_s + self.attention_phase_s + self.transfer_s + self.final_reduction_s + self.swap_exposed_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    OutOfMemory,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::OutOfMemory => "oom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OomInfo {
    pub time_ms: f64,
    pub request_id: u64,
    pub demanded_tokens: u64,
    pub reserved_tokens: u64,
    pub capacity_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTimeline {
    pub request_id: u64,
    pub input_len: u32,
    pub output_len: u32,
    pub arrival_ms: f64,
    pub admitted_ms: Option<f64>,
    pub prefill_done_ms: Option<f64>,
    /// Completion time of every generated token.
    pub token_ms: Vec<f64>,
    pub finish_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloAttainment {
    pub threshold_ms: f64,
    /// Fraction of decode steps whose latency is within the threshold.
    pub attainment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SwapSummary {
    pub total_swaps: u64,
    pub total_bytes: u64,
    pub truncated_steps: u64,
    pub scheduled_steps: u64,
    pub transfer_s: f64,
    pub exposed_s: f64,
    /// Mean over scheduled steps of tokens moved per resident token; each
    /// swap moves two tokens.
    pub mean_swapped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalitySummary {
    /// Adjacent-step top-set overlap of the configured score process.
    pub calibration: LocalityCalibration,
    /// Mean adjacent-step overlap of the selected sets observed in the run.
    pub observed_overlap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericsSummary {
    pub steps_checked: u64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub variant: String,
    pub ablation: Option<String>,
    pub seed: u64,
    pub model: String,
    pub status: RunStatus,
    pub oom: Option<OomInfo>,
    pub requests_total: usize,
    pub requests_completed: usize,
    pub generated_tokens: u64,
    pub decode_steps: u64,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub wall_time_s: f64,
    pub throughput_tok_s: f64,
    pub mean_step_latency_ms: f64,
    pub p99_step_latency_ms: f64,
    pub peak_batch: usize,
    pub slo: Vec<SloAttainment>,
    /// Share of total decode latency spent in each tier's local attention.
    pub attention_share: PerTier<f64>,
    /// Mean fraction of resident KV on each tier over decode steps.
    pub resident_share: PerTier<f64>,
    pub swaps: SwapSummary,
    pub energy: EnergyBreakdown,
    pub energy_j: f64,
    pub energy_per_token_j: f64,
    pub locality: LocalitySummary,
    pub numerics: Option<NumericsSummary>,
    pub requests: Vec<RequestTimeline>,
    #[serde(skip)]
    pub steps: Vec<StepReport>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Column names of the summary table, in order.
    pub fn summary_header(&self) -> Vec<String> {
        let mut header: Vec<String> = SUMMARY_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.slo.iter().map(|s| format!("slo_{}ms", fmt_num(s.threshold_ms))));
        header
    }

    /// Values of the summary table, aligned with [`SimReport::summary_header`].
    pub fn summary_row(&self) -> Vec<String> {
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            self.variant.clone(),
            self.ablation.clone().unwrap_or_default(),
            self.seed.to_string(),
            self.status.name().to_string(),
            self.requests_total.to_string(),
            self.requests_completed.to_string(),
            self.generated_tokens.to_string(),
            self.decode_steps.to_string(),
            fmt_num(self.wall_time_s),
            fmt_num(self.throughput_tok_s),
            fmt_num(self.mean_step_latency_ms),
            fmt_num(self.p99_step_latency_ms),
            self.peak_batch.to_string(),
            fmt_num(self.energy_j),
            fmt_num(self.energy_per_token_j),
            fmt_num(self.attention_share.hbm),
            fmt_num(self.attention_share.ddr),
            fmt_num(self.attention_share.ssd),
            fmt_num(self.resident_share.hbm),
            fmt_num(self.resident_share.ddr),
            fmt_num(self.resident_share.ssd),
            self.swaps.total_swaps.to_string(),
            fmt_num(self.swaps.mean_swapped_fraction),
        ];
        row.extend(self.slo.iter().map(|s| fmt_num(s.attainment)));
        row
    }

    /// One-row summary table.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.summary_header())?;
        out.write_record(self.summary_row())?;
        out.flush()?;
        Ok(())
    }
}

/// Fixed leading columns of report.csv; one `slo_<ms>ms` column per
/// configured threshold follows.
pub const SUMMARY_COLUMNS: [&str; 24] = [
    "schema_version",
    "variant",
    "ablation",
    "seed",
    "status",
    "requests_total",
    "requests_completed",
    "generated_tokens",
    "decode_steps",
    "wall_time_s",
    "throughput_tok_s",
    "mean_step_latency_ms",
    "p99_step_latency_ms",
    "peak_batch",
    "energy_j",
    "energy_per_token_j",
    "attention_share_hbm",
    "attention_share_ddr",
    "attention_share_ssd",
    "resident_share_hbm",
    "resident_share_ddr",
    "resident_share_ssd",
    "swaps",
    "mean_swapped_fraction",
];

pub const STEPS_HEADER: [&str; 29] = [
    "schema_version",
    "step",
    "start_ms",
    "latency_ms",
    "batch",
    "resident_hbm",
    "resident_ddr",
    "resident_ssd",
    "selected_tokens",
    "active_hbm",
    "active_ddr",
    "active_ssd",
    "npu_ms",
    "attention_hbm_ms",
    "attention_ddr_ms",
    "attention_ssd_ms",
    "exposed_reduction_ms",
    "critical_tier",
    "kv_fetch_ms",
    "npu_attention_ms",
    "attention_phase_ms",
    "transfer_ms",
    "transfer_path",
    "final_reduction_ms",
    "swaps",
    "swap_transfer_ms",
    "swap_exposed_ms",
    "energy_j",
    "numerics_max_rel_err",
];

pub fn write_steps_csv<W: Write>(steps: &[StepReport], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(STEPS_HEADER)?;
    let ms = |s: f64| fmt_num(s * 1e3);
    for s in steps {
        let exposed = s.critical_tier.map(|t| s.exposed_reduction_s[t]).unwrap_or(0.0);
        let row: [String; 29] = [
            SCHEMA_VERSION.to_string(),
            s.step.to_string(),
            fmt_num(s.start_ns as f64 / 1e6),
            ms(s.latency_s),
            s.batch.to_string(),
            s.resident_tokens.hbm.to_string(),
            s.resident_tokens.ddr.to_string(),
            s.resident_tokens.ssd.to_string(),
            s.selected_tokens.to_string(),
            s.active_tokens.hbm.to_string(),
            s.active_tokens.ddr.to_string(),
            s.active_tokens.ssd.to_string(),
            ms(s.npu_s),
            ms(s.attention_s.hbm),
            ms(s.attention_s.ddr),
            ms(s.attention_s.ssd),
            ms(exposed),
            s.critical_tier.map(|t| t.name().to_string()).unwrap_or_default(),
            ms(s.kv_fetch_s),
            ms(s.npu_attention_s),
            ms(s.attention_phase_s),
            ms(s.transfer_s),
            match s.transfer_path {
                TransferPath::Direct => "direct".into(),
                TransferPath::HostMediated => "host_mediated".into(),
            },
            ms(s.final_reduction_s),
            s.swaps.to_string(),
            ms(s.swap_transfer_s),
            ms(s.swap_exposed_s),
            fmt_num(s.energy.total()),
            s.numerics_max_rel_err.map(fmt_num).unwrap_or_default(),
        ];
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Shortest round-trip decimal form.
pub fn fmt_num(x: f64) -> String {
    format!("{x}")
}
