//! Discrete-event simulation of LLM serving on a tiered memory system.

pub mod engine;
pub mod events;
pub mod report;
pub mod variant;

pub use engine::{simulate, PrefillReport, SimError, SimOptions, Simulator, NUMERICS_FLOOR};
pub use events::{EventQueue, SimEvent};
pub use report::{
    fmt_num, write_steps_csv, OomInfo, RequestTimeline, RunStatus, SimReport, SloAttainment, StepReport, SwapSummary,
    SCHEMA_VERSION, STEPS_HEADER, SUMMARY_COLUMNS,
};
pub use variant::{Ablation, InitialPlacement, SystemVariant, VariantPolicy};
