//! Greedy inter-tier KV scheduling toward a target device-importance ratio
//! `x : y : 1` for HBM : DDR : SSD.
//!
//! Phase 1 exchanges the least important DDR token with the most important SSD
//! token while `x* + y* < x + y`. Phase 2 then exchanges the least important
//! HBM token with the most important DDR token while `x* / y* < x / y`. Here
//! `x* = IS_H / IS_S` and `y* = IS_D / IS_S`, where `IS_T` is the mean
//! importance of tier `T`. A loop also stops when its candidate pair would not
//! move a strictly more important token upward.
//!
//! With an empty SSD tier phase 1 has nothing to exchange and the ratios are
//! taken relative to 1 instead of `IS_S`; phase 2 only depends on `x*/y*`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::importance::mean_or_zero;
use super::mapping::DEFAULT_WINDOW;
use crate::tier::Tier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub lambda: f64,
    pub x: f64,
    pub y: f64,
    pub window: usize,
    pub swap_cadence: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lambda: super::importance::DEFAULT_LAMBDA,
            x: 4.0,
            y: 4.0,
            window: DEFAULT_WINDOW,
            swap_cadence: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerConfigError {
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("target ratios must be positive, got x = {x}, y = {y}")]
    Ratio { x: f64, y: f64 },
    #[error("window must be at least 1")]
    Window,
    #[error("swap cadence must be at least 1")]
    Cadence,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerConfigError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SchedulerConfigError::Lambda(self.lambda));
        }
        if !(self.x > 0.0 && self.y > 0.0 && self.x.is_finite() && self.y.is_finite()) {
            return Err(SchedulerConfigError::Ratio { x: self.x, y: self.y });
        }
        if self.window == 0 {
            return Err(SchedulerConfigError::Window);
        }
        if self.swap_cadence == 0 {
            return Err(SchedulerConfigError::Cadence);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    pub token_id: u64,
    pub importance: f64,
}

/// Exchange of two tokens' placements: `token_a` moves up from `src_tier`
/// into the slot `token_b` vacates on `dst_tier`, and `token_b` moves down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapOp {
    pub token_a: u64,
    pub token_b: u64,
    pub src_tier: Tier,
    pub dst_tier: Tier,
    /// Bytes moved in each direction.
    pub bytes: u64,
}

/// Tokens resident on each tier.
#[derive(Debug, Clone, Copy)]
pub struct TierTokens<'a> {
    pub hbm: &'a [TokenImportance],
    pub ddr: &'a [TokenImportance],
    pub ssd: &'a [TokenImportance],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub swaps: Vec<SwapOp>,
    /// Ratios after the returned swaps; `None` when they are undefined
    /// (all tiers empty, or a nonempty SSD tier with zero importance).
    pub ratios: Option<(f64, f64)>,
    /// Whether the loops stopped only because `max_swaps` was reached.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy)]
struct Key(f64, u64);

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Pops the most important token, lowest id first on ties.
type MaxHeap = BinaryHeap<Key>;
/// Pops the least important token, lowest id first on ties.
type MinHeap = BinaryHeap<Reverse<MinKey>>;

#[derive(Debug, Clone, Copy)]
struct MinKey(f64, u64);

impl PartialEq for MinKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for MinKey {}
impl PartialOrd for MinKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MinKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

struct Sums {
    h: f64,
    d: f64,
    s: f64,
    nh: usize,
    nd: usize,
    ns: usize,
}

impl Sums {
    /// `(x*, y*)`, or `None` when SSD is populated but carries no importance.
    fn ratios(&self) -> Option<(f64, f64)> {
        let ih = mean_or_zero(self.h, self.nh);
        let id = mean_or_zero(self.d, self.nd);
        if self.ns == 0 {
            return Some((ih, id));
        }
        let is = mean_or_zero(self.s, self.ns);
        if is > 0.0 {
            Some((ih / is, id / is))
        } else {
            None
        }
    }
}

/// Runs both scheduling phases to completion.
pub fn schedule_kv(tiers: TierTokens<'_>, cfg: &SchedulerConfig, bytes_per_token: u64) -> Schedule {
    schedule_kv_bounded(tiers, cfg, bytes_per_token, usize::MAX)
}

/// [`schedule_kv`] stopped after `max_swaps` swaps; the result is always a
/// prefix of the unbounded swap list.
pub fn schedule_kv_bounded(
    tiers: TierTokens<'_>,
    cfg: &SchedulerConfig,
    bytes_per_token: u64,
    max_swaps: usize,
) -> Schedule {
    let sum = |ts: &[TokenImportance]| ts.iter().map(|t| t.importance).sum::<f64>();
    let mut sums = Sums {
        h: sum(tiers.hbm),
        d: sum(tiers.ddr),
        s: sum(tiers.ssd),
        nh: tiers.hbm.len(),
        nd: tiers.ddr.len(),
        ns: tiers.ssd.len(),
    };
    let mut swaps = Vec::new();
    if sums.nh + sums.nd + sums.ns == 0 {
        return Schedule {
            swaps,
            ratios: None,
            truncated: false,
        };
    }
    let Some(mut ratios) = sums.ratios() else {
        return Schedule {
            swaps,
            ratios: None,
            truncated: false,
        };
    };
    let mut truncated = false;
    let (x, y) = (cfg.x, cfg.y);

    let mut ddr_min: MinHeap = tiers.ddr.iter().map(|t| Reverse(MinKey(t.importance, t.token_id))).collect();

    if sums.ns > 0 {
        let mut ssd_max: MaxHeap = tiers.ssd.iter().map(|t| Key(t.importance, t.token_id)).collect();
        while ratios.0 + ratios.1 < x + y {
            let (Some(&Reverse(low)), Some(&high)) = (ddr_min.peek(), ssd_max.peek()) else {
                break;
            };
            if high.0 <= low.0 {
                break;
            }
            if swaps.len() >= max_swaps {
                truncated = true;
                break;
            }
            ddr_min.pop();
            ssd_max.pop();
            swaps.push(SwapOp {
                token_a: high.1,
                token_b: low.1,
                src_tier: Tier::Ssd,
                dst_tier: Tier::Ddr,
                bytes: bytes_per_token,
            });
            sums.d += high.0 - low.0;
            sums.s += low.0 - high.0;
            ddr_min.push(Reverse(MinKey(high.0, high.1)));
            ssd_max.push(Key(low.0, low.1));
            match sums.ratios() {
                Some(r) => ratios = r,
                None => {
                    return Schedule {
                        swaps,
                        ratios: None,
                        truncated,
                    }
                }
            }
        }
    }

    if !truncated {
        let mut hbm_min: MinHeap = tiers.hbm.iter().map(|t| Reverse(MinKey(t.importance, t.token_id))).collect();
        let mut ddr_max: MaxHeap = ddr_min.into_iter().map(|Reverse(MinKey(i, id))| Key(i, id)).collect();
        while ratios.0 / ratios.1 < x / y {
            let (Some(&Reverse(low)), Some(&high)) = (hbm_min.peek(), ddr_max.peek()) else {
                break;
            };
            if high.0 <= low.0 {
                break;
            }
            if swaps.len() >= max_swaps {
                truncated = true;
                break;
            }
            hbm_min.pop();
            ddr_max.pop();
            swaps.push(SwapOp {
                token_a: high.1,
                token_b: low.1,
                src_tier: Tier::Ddr,
                dst_tier: Tier::Hbm,
                bytes: bytes_per_token,
            });
            sums.h += high.0 - low.0;
            sums.d += low.0 - high.0;
            hbm_min.push(Reverse(MinKey(high.0, high.1)));
            ddr_max.push(Key(low.0, low.1));
            ratios = sums.ratios().expect("phase 2 leaves SSD importance unchanged");
        }
    }

    Schedule {
        swaps,
        ratios: Some(ratios),
        truncated,
    }
}
