//! KV-cache placement and management: importance tracking, sparsity
//! selection, bank-group mapping, and inter-tier scheduling.

pub mod importance;
pub mod mapping;
pub mod placement;
pub mod scheduler;
pub mod sparsity;

use serde::{Deserialize, Serialize};

use crate::tier::Tier;

pub use importance::{device_importance, update_importance, DEFAULT_LAMBDA};
pub use mapping::{
    assign_bank_group, stream_peak_frequency, ActivationWindow, BankGroupAllocator, MappingError, MappingPolicy, StreamStep,
};
pub use placement::{Placement, PlacementError, PlacementParams};
pub use scheduler::{schedule_kv, schedule_kv_bounded, Schedule, SchedulerConfig, SwapOp, TierTokens, TokenImportance};
pub use sparsity::{select_active_tokens, DEFAULT_COMPRESSION};

/// Placement and importance state of one resident KV token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvTokenMeta {
    pub token_id: u64,
    pub request_id: u64,
    pub tier: Tier,
    pub bank_group: u32,
    pub slot: u32,
    /// Latest score `S`.
    pub score: f64,
    /// Importance factor `I`, an EMA of past scores.
    pub importance: f64,
}
