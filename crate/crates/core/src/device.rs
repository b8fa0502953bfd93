//! Analytic timing and energy models for the PIM tiers, the NPU, and
//! inter-tier links.
//!
//! All durations are seconds as `f64`; the simulator converts to its integer
//! nanosecond clock at step granularity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tier::{PerTier, Tier};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("tier {tier}: {message}")]
    InvalidTier { tier: Tier, message: String },
    #[error("npu: {0}")]
    InvalidNpu(String),
    #[error("energy coefficient `{0}` must be finite and nonnegative")]
    InvalidEnergy(String),
}

/// DRAM timing used to derive per-bank-group streaming bandwidth. Cycle
/// counts are in units of `tck_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramTiming {
    pub tck_ns: f64,
    pub trcd: u32,
    pub trp: u32,
    pub tccd_l: u32,
    pub burst_bytes: u32,
    pub row_bytes: u32,
    pub banks_per_group: u32,
}

impl DramTiming {
    /// Every bank streams whole rows: activate, `row/burst` column bursts
    /// spaced `tCCD_L`, precharge. Banks of a group work in parallel.
    pub fn bank_group_bandwidth(&self) -> f64 {
        let bursts = f64::from(self.row_bytes) / f64::from(self.burst_bytes);
        let cycles = f64::from(self.trcd) + f64::from(self.trp) + bursts * f64::from(self.tccd_l);
        let row_time = cycles * self.tck_ns * 1e-9;
        f64::from(self.banks_per_group) * f64::from(self.row_bytes) / row_time
    }
}

/// NAND channel parameters used to derive per-channel read bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashTiming {
    pub dies_per_channel: u32,
    pub page_bytes: u32,
    pub t_read_us: f64,
    pub bus_mt_s: f64,
    pub bus_width_bytes: u32,
}

impl FlashTiming {
    /// The lesser of the channel bus rate and the aggregate die read rate.
    pub fn channel_bandwidth(&self) -> f64 {
        let bus = self.bus_mt_s * 1e6 * f64::from(self.bus_width_bytes);
        let array = f64::from(self.dies_per_channel) * f64::from(self.page_bytes) / (self.t_read_us * 1e-6);
        bus.min(array)
    }
}

/// One tier as written in the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierConfig {
    pub devices: u32,
    pub capacity_per_device_bytes: u64,
    pub bank_groups_per_device: u32,
    pub pu_flops_per_device: f64,
    /// Aggregate reduction-unit merge rate of the tier, partials per second.
    pub ru_merge_rate: f64,
    pub link_bandwidth: f64,
    pub link_latency: f64,
    pub host_path_penalty: f64,
    /// Fixed latency of the first access in a bank group per step.
    #[serde(default)]
    pub access_latency: f64,
    /// Overrides any timing-derived value when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bank_group_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dram: Option<DramTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flash: Option<FlashTiming>,
}

/// Derived, validated parameters of one whole tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub tier: Tier,
    pub capacity_bytes: u64,
    pub bank_groups: u32,
    pub per_bank_group_bandwidth: f64,
    /// Aggregate PU throughput of the tier, FLOP/s.
    pub pu_flops: f64,
    pub ru_merge_rate: f64,
    pub link_bandwidth: f64,
    pub link_latency: f64,
    pub host_path_penalty: f64,
    pub access_latency: f64,
}

impl TierConfig {
    pub fn derive(&self, tier: Tier) -> Result<TierSpec, DeviceError> {
        let bad = |message: &str| DeviceError::InvalidTier {
            tier,
            message: message.to_string(),
        };
        let bw = match (self.per_bank_group_bandwidth, self.dram, self.flash) {
            (Some(bw), _, _) => bw,
            (None, Some(d), None) => d.bank_group_bandwidth(),
            (None, None, Some(f)) => f.channel_bandwidth(),
            (None, None, None) => return Err(bad("needs per_bank_group_bandwidth, [dram] or [flash]")),
            (None, Some(_), Some(_)) => return Err(bad("[dram] and [flash] are mutually exclusive")),
        };
        let spec = TierSpec {
            tier,
            capacity_bytes: u64::from(self.devices) * self.capacity_per_device_bytes,
            bank_groups: self.devices * self.bank_groups_per_device,
            per_bank_group_bandwidth: bw,
            pu_flops: f64::from(self.devices) * self.pu_flops_per_device,
            ru_merge_rate: self.ru_merge_rate,
            link_bandwidth: self.link_bandwidth,
            link_latency: self.link_latency,
            host_path_penalty: self.host_path_penalty,
            access_latency: self.access_latency,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TierSpec {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |message: String| DeviceError::InvalidTier {
            tier: self.tier,
            message,
        };
        if self.bank_groups == 0 {
            return Err(bad("needs at least one bank group".into()));
        }
        for (name, v) in [
            ("per_bank_group_bandwidth", self.per_bank_group_bandwidth),
            ("pu_flops", self.pu_flops),
            ("ru_merge_rate", self.ru_merge_rate),
            ("link_bandwidth", self.link_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("link_latency", self.link_latency), ("access_latency", self.access_latency)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.host_path_penalty.is_finite() && self.host_path_penalty >= 1.0) {
            return Err(bad(format!(
                "host_path_penalty must be at least 1, got {}",
                self.host_path_penalty
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn flops_per_bank_group(&self) -> f64 {
        self.pu_flops / f64::from(self.bank_groups)
    }

    /// Time for one bank group to process `tokens` tokens.
    #[inline]
    pub fn bank_group_time(&self, tokens: u64, bytes_per_token: f64, flops_per_token: f64) -> f64 {
        if tokens == 0 {
            return 0.0;
        }
        let n = tokens as f64;
        let t = (n * bytes_per_token / self.per_bank_group_bandwidth).max(n * flops_per_token / self.flops_per_bank_group());
        t + self.access_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpuSpec {
    pub peak_flops: f64,
    pub hbm_bandwidth: f64,
}

impl NpuSpec {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.peak_flops > 0.0 && self.hbm_bandwidth > 0.0 && self.peak_flops.is_finite() && self.hbm_bandwidth.is_finite() {
            Ok(())
        } else {
            Err(DeviceError::InvalidNpu("peak_flops and hbm_bandwidth must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPath {
    /// Device-to-device over the inter-tier link.
    Direct,
    /// Through the host CPU, which re-lays-out the data.
    HostMediated,
}

/// Slowest bank group's time: `max_g max(bytes_g / bw, flops_g / (pu_flops / groups))`,
/// plus the tier's access latency when any group is busy.
///
/// # Panics
/// If `counts.len()` differs from `tier.bank_groups`.
pub fn local_attention_time(tier: &TierSpec, counts: &[u32], bytes_per_token: f64, flops_per_token: f64) -> f64 {
    assert_eq!(counts.len(), tier.bank_groups as usize, "one count per bank group");
    let busiest = counts.iter().copied().max().unwrap_or(0);
    tier.bank_group_time(u64::from(busiest), bytes_per_token, flops_per_token)
}

/// Merge time of `num_partials` partial results at the tier's RU rate.
#[inline]
pub fn reduction_time(tier: &TierSpec, num_partials: u64) -> f64 {
    num_partials as f64 / tier.ru_merge_rate
}

/// Portion of a reduction left on the critical path when up to
/// `overlap * reduction` of it runs concurrently with `pu_time`.
#[inline]
pub fn exposed_reduction(reduction: f64, pu_time: f64, overlap: f64) -> f64 {
    let hidden = (overlap.clamp(0.0, 1.0) * reduction).min(pu_time);
    reduction - hidden
}

pub fn transfer_time(src: &TierSpec, dst: &TierSpec, bytes: u64, path: TransferPath) -> f64 {
    let direct = src.link_latency.max(dst.link_latency) + bytes as f64 / src.link_bandwidth.min(dst.link_bandwidth);
    match path {
        TransferPath::Direct => direct,
        TransferPath::HostMediated => direct * src.host_path_penalty.max(dst.host_path_penalty),
    }
}

/// Roofline time `max(flops / peak, bytes / bandwidth)`.
#[inline]
pub fn npu_op_time(npu: &NpuSpec, flops: f64, bytes: f64) -> f64 {
    (flops / npu.peak_flops).max(bytes / npu.hbm_bandwidth)
}

/// Energy coefficients of one tier, joules per byte or per FLOP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierEnergy {
    pub access_j_per_byte: f64,
    pub flop_j: f64,
    pub link_j_per_byte: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCoefficients {
    pub hbm: TierEnergy,
    pub ddr: TierEnergy,
    pub ssd: TierEnergy,
    pub npu_flop_j: f64,
    pub npu_hbm_j_per_byte: f64,
    /// Multiplier on link energy for host-mediated transfers.
    pub host_path_multiplier: f64,
}

impl EnergyCoefficients {
    pub fn tier(&self, t: Tier) -> &TierEnergy {
        match t {
            Tier::Hbm => &self.hbm,
            Tier::Ddr => &self.ddr,
            Tier::Ssd => &self.ssd,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let mut fields = vec![
            ("npu_flop_j".to_string(), self.npu_flop_j),
            ("npu_hbm_j_per_byte".to_string(), self.npu_hbm_j_per_byte),
            ("host_path_multiplier".to_string(), self.host_path_multiplier),
        ];
        for t in Tier::ALL {
            let e = self.tier(t);
            fields.push((format!("{t}.access_j_per_byte"), e.access_j_per_byte));
            fields.push((format!("{t}.flop_j"), e.flop_j));
            fields.push((format!("{t}.link_j_per_byte"), e.link_j_per_byte));
        }
        match fields.into_iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, _)) => Err(DeviceError::InvalidEnergy(name)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferActivity {
    /// Tier whose link carries the bytes.
    pub link: Tier,
    pub bytes: u64,
    pub path: TransferPath,
}

/// Activity counts of one simulated interval.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepActivity {
    pub tier_bytes: PerTier<f64>,
    pub tier_flops: PerTier<f64>,
    pub npu_flops: f64,
    pub npu_bytes: f64,
    pub transfers: Vec<TransferActivity>,
}

impl StepActivity {
    pub fn scaled(&self, k: f64) -> StepActivity {
        StepActivity {
            tier_bytes: self.tier_bytes.map(|_, v| v * k),
            tier_flops: self.tier_flops.map(|_, v| v * k),
            npu_flops: self.npu_flops * k,
            npu_bytes: self.npu_bytes * k,
            transfers: self
                .transfers
                .iter()
                .map(|t| TransferActivity {
                    bytes: (t.bytes as f64 * k).round() as u64,
                    ..*t
                })
                .collect(),
        }
    }
}

/// Itemized energy, joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub access: PerTier<f64>,
    pub compute: PerTier<f64>,
    pub link: PerTier<f64>,
    pub npu: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.access.sum() + self.compute.sum() + self.link.sum() + self.npu
    }

    pub fn add(&mut self, other: &EnergyBreakdown) {
        for t in Tier::ALL {
            self.access[t] += other.access[t];
            self.compute[t] += other.compute[t];
            self.link[t] += other.link[t];
        }
        self.npu += other.npu;
    }
}

pub fn energy_of_step(activity: &StepActivity, coeffs: &EnergyCoefficients) -> EnergyBreakdown {
    let mut e = EnergyBreakdown {
        access: PerTier::from_fn(|t| activity.tier_bytes[t] * coeffs.tier(t).access_j_per_byte),
        compute: PerTier::from_fn(|t| activity.tier_flops[t] * coeffs.tier(t).flop_j),
        link: PerTier::default(),
        npu: activity.npu_flops * coeffs.npu_flop_j + activity.npu_bytes * coeffs.npu_hbm_j_per_byte,
    };
    for tr in &activity.transfers {
        let mult = match tr.path {
            TransferPath::Direct => 1.0,
            TransferPath::HostMediated => coeffs.host_path_multiplier,
        };
        e.link[tr.link] += tr.bytes as f64 * coeffs.tier(tr.link).link_j_per_byte * mult;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bg: u32) -> TierSpec {
        TierSpec {
            tier: Tier::Hbm,
            capacity_bytes: 1 << 30,
            bank_groups: bg,
            per_bank_group_bandwidth: 1e9,
            pu_flops: 1e15,
            ru_merge_rate: 1e9,
            link_bandwidth: 16.0 * (1u64 << 30) as f64,
            link_latency: 1e-6,
            host_path_penalty: 20.0,
            access_latency: 0.0,
        }
    }

    #[test]
    fn max_rule_in_bandwidth_regime() {
        let s = spec(3);
        let t = 64.0 / 1e9;
        let got = local_attention_time(&s, &[10, 20, 30], 64.0, 1.0);
        assert!((got - 30.0 * t).abs() < 1e-18);
        assert_eq!(local_attention_time(&s, &[0, 0, 0], 64.0, 1.0), 0.0);
        assert_eq!(local_attention_time(&s, &[30, 10, 20], 64.0, 1.0), got);
    }

    #[test]
    fn compute_regime() {
        let mut s = spec(2);
        s.pu_flops = 2e9;
        // 1 GFLOP/s per group, 100 flops per token.
        assert!((local_attention_time(&s, &[5, 1], 1.0, 100.0) - 5e-7).abs() < 1e-18);
    }

    #[test]
    #[should_panic(expected = "one count per bank group")]
    fn wrong_count_length_panics() {
        local_attention_time(&spec(2), &[1], 1.0, 1.0);
    }

    #[test]
    fn reduction_and_overlap() {
        let s = spec(1);
        assert_eq!(reduction_time(&s, 0), 0.0);
        assert_eq!(reduction_time(&s, 500), 5e-7);
        assert_eq!(exposed_reduction(1.0, 0.4, 1.0), 0.6);
        assert_eq!(exposed_reduction(1.0, 5.0, 1.0), 0.0);
        assert_eq!(exposed_reduction(1.0, 5.0, 0.0), 1.0);
        assert_eq!(exposed_reduction(1.0, 5.0, 0.5), 0.5);
    }

    #[test]
    fn transfers() {
        let s = spec(1);
        assert_eq!(transfer_time(&s, &s, 0, TransferPath::Direct), 1e-6);
        let mib = 1u64 << 20;
        let want = 1e-6 + mib as f64 / (16.0 * (1u64 << 30) as f64);
        assert!((transfer_time(&s, &s, mib, TransferPath::Direct) - want).abs() < 1e-18);
        let mut z = s;
        z.link_latency = 0.0;
        let ratio = transfer_time(&z, &z, mib, TransferPath::HostMediated) / transfer_time(&z, &z, mib, TransferPath::Direct);
        assert_eq!(ratio, 20.0);
    }

    #[test]
    fn roofline() {
        let npu = NpuSpec {
            peak_flops: 1e12,
            hbm_bandwidth: 1e9,
        };
        assert_eq!(npu_op_time(&npu, 0.0, 1e9), 1.0);
        assert_eq!(npu_op_time(&npu, 1e12, 0.0), 1.0);
    }

    #[test]
    fn dram_and_flash_derivations() {
        let d = DramTiming {
            tck_ns: 1.0,
            trcd: 10,
            trp: 10,
            tccd_l: 2,
            burst_bytes: 32,
            row_bytes: 1024,
            banks_per_group: 2,
        };
        // 2 banks x 1024 B every (10 + 10 + 32*2) ns.
        assert!((d.bank_group_bandwidth() - 2048.0 / 84e-9).abs() < 1e-3);
        let f = FlashTiming {
            dies_per_channel: 4,
            page_bytes: 16384,
            t_read_us: 30.0,
            bus_mt_s: 2400.0,
            bus_width_bytes: 1,
        };
        assert!((f.channel_bandwidth() - 4.0 * 16384.0 / 30e-6).abs() < 1e-3);
    }

    #[test]
    fn config_derivation_errors() {
        let cfg = TierConfig {
            devices: 2,
            capacity_per_device_bytes: 10,
            bank_groups_per_device: 4,
            pu_flops_per_device: 1.0,
            ru_merge_rate: 1.0,
            link_bandwidth: 1.0,
            link_latency: 0.0,
            host_path_penalty: 20.0,
            access_latency: 0.0,
            per_bank_group_bandwidth: None,
            dram: None,
            flash: None,
        };
        assert!(cfg.derive(Tier::Ddr).is_err());
        let ok = TierConfig {
            per_bank_group_bandwidth: Some(5.0),
            ..cfg.clone()
        };
        let s = ok.derive(Tier::Ddr).unwrap();
        assert_eq!((s.capacity_bytes, s.bank_groups, s.pu_flops), (20, 8, 2.0));
        let low_penalty = TierConfig {
            host_path_penalty: 0.5,
            ..ok
        };
        assert!(low_penalty.derive(Tier::Ddr).is_err());
    }

    #[test]
    fn energy_is_linear_and_itemized() {
        let c = EnergyCoefficients {
            hbm: TierEnergy {
                access_j_per_byte: 1.0,
                flop_j: 2.0,
                link_j_per_byte: 3.0,
            },
            ddr: TierEnergy::default(),
            ssd: TierEnergy {
                access_j_per_byte: 0.0,
                flop_j: 0.0,
                link_j_per_byte: 5.0,
            },
            npu_flop_j: 7.0,
            npu_hbm_j_per_byte: 11.0,
            host_path_multiplier: 2.0,
        };
        assert_eq!(energy_of_step(&StepActivity::default(), &c).total(), 0.0);
        let a = StepActivity {
            tier_bytes: PerTier {
                hbm: 1.0,
                ddr: 100.0,
                ssd: 0.0,
            },
            tier_flops: PerTier {
                hbm: 1.0,
                ddr: 0.0,
                ssd: 0.0,
            },
            npu_flops: 1.0,
            npu_bytes: 1.0,
            transfers: vec![
                TransferActivity {
                    link: Tier::Ssd,
                    bytes: 1,
                    path: TransferPath::HostMediated,
                },
                TransferActivity {
                    link: Tier::Hbm,
                    bytes: 1,
                    path: TransferPath::Direct,
                },
            ],
        };
        let e = energy_of_step(&a, &c);
        assert_eq!(e.total(), 1.0 + 2.0 + 7.0 + 11.0 + 10.0 + 3.0);
        assert_eq!(e.link.ssd, 10.0);
        assert_eq!(energy_of_step(&a.scaled(2.0), &c).total(), 2.0 * e.total());
    }
}
