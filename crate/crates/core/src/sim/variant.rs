use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::device::TransferPath;
use crate::kv::mapping::MappingPolicy;
use crate::tier::Tier;

/// Serving-system variant under simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SystemVariant {
    #[serde(rename = "PAM")]
    Pam,
    #[serde(rename = "L_PIM")]
    LPim,
    #[serde(rename = "LS_PIM")]
    LsPim,
    #[serde(rename = "VLLM_OFFLOAD")]
    VllmOffload,
    #[serde(rename = "ATTACC")]
    Attacc,
}

impl SystemVariant {
    pub const ALL: [SystemVariant; 5] = [
        SystemVariant::Pam,
        SystemVariant::LsPim,
        SystemVariant::LPim,
        SystemVariant::VllmOffload,
        SystemVariant::Attacc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemVariant::Pam => "PAM",
            SystemVariant::LPim => "L_PIM",
            SystemVariant::LsPim => "LS_PIM",
            SystemVariant::VllmOffload => "VLLM_OFFLOAD",
            SystemVariant::Attacc => "ATTACC",
        }
    }
}

impl fmt::Display for SystemVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "PAM" => Ok(SystemVariant::Pam),
            "L_PIM" | "LPIM" => Ok(SystemVariant::LPim),
            "LS_PIM" | "LSPIM" => Ok(SystemVariant::LsPim),
            "VLLM_OFFLOAD" | "VLLM" => Ok(SystemVariant::VllmOffload),
            "ATTACC" => Ok(SystemVariant::Attacc),
            _ => Err(format!(
                "unknown variant `{s}` (expected PAM, L_PIM, LS_PIM, VLLM_OFFLOAD or ATTACC)"
            )),
        }
    }
}

/// A single component of the full system switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Attention runs on fixed KV tiles instead of individual tokens.
    Attention,
    /// Contiguous first-fit bank-group allocation instead of the greedy mapper.
    Mapping,
    /// No inter-tier scheduling.
    Scheduling,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Attention, Ablation::Mapping, Ablation::Scheduling];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Attention => "attention",
            Ablation::Mapping => "mapping",
            Ablation::Scheduling => "scheduling",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "attention" => Ok(Ablation::Attention),
            "mapping" => Ok(Ablation::Mapping),
            "scheduling" => Ok(Ablation::Scheduling),
            _ => Err(format!("unknown ablation `{s}` (expected attention, mapping or scheduling)")),
        }
    }
}

/// Where the first KV placement of a request goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPlacement {
    /// Request by request, position by position, highest tier with room.
    FillHighest,
    /// All new tokens of a batch ranked by initial importance, most important
    /// into the highest tier with room.
    ByImportance,
}

/// Everything that distinguishes one variant's execution from another's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPolicy {
    pub tiers: Vec<Tier>,
    /// Attention runs inside the memory tiers; otherwise KV streams to the NPU.
    pub pim: bool,
    pub sparsity: bool,
    pub placement: InitialPlacement,
    pub scheduling: bool,
    pub mapping: MappingPolicy,
    /// Path of every inter-tier transfer on the decode critical path and of
    /// prefill KV moved to lower tiers.
    pub path: TransferPath,
    /// Attention granularity in tokens; 1 is token-wise.
    pub tile_tokens: u32,
}

impl VariantPolicy {
    pub fn new(variant: SystemVariant, ablation: Option<Ablation>, mapping: MappingPolicy, tile_tokens: u32) -> Self {
        let all = vec![Tier::Hbm, Tier::Ddr, Tier::Ssd];
        let mut p = match variant {
            SystemVariant::Pam => VariantPolicy {
                tiers: all,
                pim: true,
                sparsity: true,
                placement: InitialPlacement::ByImportance,
                scheduling: true,
                mapping,
                path: TransferPath::Direct,
                tile_tokens: 1,
            },
            SystemVariant::LsPim => VariantPolicy {
                tiers: all,
                pim: true,
                sparsity: true,
                placement: InitialPlacement::FillHighest,
                scheduling: false,
                mapping: MappingPolicy::RoundRobin,
                path: TransferPath::HostMediated,
                tile_tokens: 1,
            },
            SystemVariant::LPim => VariantPolicy {
                tiers: all,
                pim: true,
                sparsity: false,
                placement: InitialPlacement::FillHighest,
                scheduling: false,
                mapping: MappingPolicy::RoundRobin,
                path: TransferPath::HostMediated,
                tile_tokens: 1,
            },
            SystemVariant::VllmOffload => VariantPolicy {
                tiers: all,
                pim: false,
                sparsity: false,
                placement: InitialPlacement::FillHighest,
                scheduling: false,
                mapping: MappingPolicy::RoundRobin,
                path: TransferPath::HostMediated,
                tile_tokens: 1,
            },
            SystemVariant::Attacc => VariantPolicy {
                tiers: vec![Tier::Hbm],
                pim: true,
                sparsity: false,
                placement: InitialPlacement::FillHighest,
                scheduling: false,
                mapping: MappingPolicy::RoundRobin,
                path: TransferPath::Direct,
                tile_tokens: 1,
            },
        };
        match ablation {
            Some(Ablation::Attention) => p.tile_tokens = tile_tokens.max(1),
            Some(Ablation::Mapping) => p.mapping = MappingPolicy::FirstFit,
            Some(Ablation::Scheduling) => p.scheduling = false,
            None => {}
        }
        p
    }

    /// Per-token importance is maintained every step.
    pub fn tracks_importance(&self) -> bool {
        self.scheduling
    }

    pub fn needs_scores(&self) -> bool {
        self.sparsity || self.tracks_importance()
    }
}
