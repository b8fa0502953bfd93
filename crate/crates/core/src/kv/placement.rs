//! Slot-level placement state for every resident KV token.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mapping::{ActivationWindow, BankGroupAllocator, MappingError, MappingPolicy};
use super::scheduler::{SwapOp, TokenImportance};
use super::KvTokenMeta;
use crate::tier::{PerTier, Tier};

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("tier {0} has no free slot")]
    TierFull(Tier),
    #[error("unknown or released token {0}")]
    UnknownToken(u64),
    #[error("swap partners {a} and {b} are both on tier {tier}")]
    SameTier { a: u64, b: u64, tier: Tier },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("snapshot csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Slot bookkeeping for one tier: each bank group owns a fixed number of slots.
#[derive(Debug, Clone)]
struct TierLayout {
    capacity: Vec<u32>,
    fresh: Vec<u32>,
    recycled: Vec<Vec<u32>>,
    free: Vec<u32>,
    used: u64,
}

impl TierLayout {
    fn new(capacity_tokens: u64, bank_groups: usize) -> Self {
        let groups = bank_groups.max(1) as u64;
        let base = capacity_tokens / groups;
        let extra = capacity_tokens % groups;
        let capacity: Vec<u32> = (0..groups)
            .map(|g| (base + u64::from(g < extra)).min(u64::from(u32::MAX)) as u32)
            .collect();
        Self {
            free: capacity.clone(),
            fresh: vec![0; capacity.len()],
            recycled: vec![Vec::new(); capacity.len()],
            capacity,
            used: 0,
        }
    }

    fn take(&mut self, group: usize) -> u32 {
        debug_assert!(self.free[group] > 0);
        self.free[group] -= 1;
        self.used += 1;
        self.recycled[group].pop().unwrap_or_else(|| {
            let s = self.fresh[group];
            self.fresh[group] += 1;
            s
        })
    }

    fn give_back(&mut self, group: usize, slot: u32) {
        self.free[group] += 1;
        self.used -= 1;
        self.recycled[group].push(slot);
    }

    fn total_capacity(&self) -> u64 {
        self.capacity.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Construction parameters for [`Placement`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementParams {
    pub capacity_tokens: PerTier<u64>,
    pub bank_groups: PerTier<usize>,
    pub window: usize,
    pub policy: MappingPolicy,
    pub seed: u64,
}

/// Owner of all token placements. Token ids are slot indices into an
/// internal table and are reused once released.
#[derive(Debug, Clone)]
pub struct Placement {
    metas: Vec<KvTokenMeta>,
    live: Vec<bool>,
    free_ids: Vec<u64>,
    layouts: PerTier<TierLayout>,
    windows: PerTier<ActivationWindow>,
    allocators: PerTier<BankGroupAllocator>,
}

impl Placement {
    pub fn new(p: PlacementParams) -> Self {
        Self {
            metas: Vec::new(),
            live: Vec::new(),
            free_ids: Vec::new(),
            layouts: PerTier::from_fn(|t| TierLayout::new(p.capacity_tokens[t], p.bank_groups[t])),
            windows: PerTier::from_fn(|t| ActivationWindow::new(p.window, p.bank_groups[t].max(1))),
            allocators: PerTier::from_fn(|t| BankGroupAllocator::new(p.policy, p.seed ^ (t.index() as u64 + 1))),
        }
    }

    pub fn capacity(&self, tier: Tier) -> u64 {
        self.layouts[tier].total_capacity()
    }

    pub fn used(&self, tier: Tier) -> u64 {
        self.layouts[tier].used
    }

    pub fn free(&self, tier: Tier) -> u64 {
        self.capacity(tier) - self.used(tier)
    }

    pub fn bank_groups(&self, tier: Tier) -> usize {
        self.layouts[tier].capacity.len()
    }

    pub fn live_tokens(&self) -> u64 {
        Tier::ALL.iter().map(|&t| self.used(t)).sum()
    }

    pub fn window(&self, tier: Tier) -> &ActivationWindow {
        &self.windows[tier]
    }

    /// Adds per-bank-group activation counts observed at `step`.
    pub fn record_activations(&mut self, tier: Tier, step: u64, counts: &[u32]) -> Result<(), PlacementError> {
        self.windows[tier].record_counts(step, counts)?;
        Ok(())
    }

    /// Places a new token on `tier`, choosing its bank group with the
    /// configured mapping policy.
    pub fn allocate(
        &mut self,
        request_id: u64,
        tier: Tier,
        step: u64,
        score: f64,
        importance: f64,
    ) -> Result<u64, PlacementError> {
        if self.free(tier) == 0 {
            return Err(PlacementError::TierFull(tier));
        }
        let layout = &mut self.layouts[tier];
        let group = self.allocators[tier].assign(&mut self.windows[tier], &layout.free, step)?;
        let slot = layout.take(group);
        let meta = KvTokenMeta {
            token_id: 0,
            request_id,
            tier,
            bank_group: group as u32,
            slot,
            score,
            importance,
        };
        let id = match self.free_ids.pop() {
            Some(id) => {
                self.metas[id as usize] = KvTokenMeta { token_id: id, ..meta };
                self.live[id as usize] = true;
                id
            }
            None => {
                let id = self.metas.len() as u64;
                self.metas.push(KvTokenMeta { token_id: id, ..meta });
                self.live.push(true);
                id
            }
        };
        Ok(id)
    }

    /// Places a token on the first tier in `order` with room.
    pub fn allocate_first_fit(
        &mut self,
        request_id: u64,
        order: &[Tier],
        step: u64,
        score: f64,
        importance: f64,
    ) -> Result<u64, PlacementError> {
        let tier = order
            .iter()
            .copied()
            .find(|&t| self.free(t) > 0)
            .ok_or(PlacementError::TierFull(*order.last().unwrap_or(&Tier::Hbm)))?;
        self.allocate(request_id, tier, step, score, importance)
    }

    pub fn release(&mut self, token_id: u64) -> Result<(), PlacementError> {
        let m = *self.get(token_id).ok_or(PlacementError::UnknownToken(token_id))?;
        self.layouts[m.tier].give_back(m.bank_group as usize, m.slot);
        self.allocators[m.tier].invalidate();
        self.live[token_id as usize] = false;
        self.free_ids.push(token_id);
        Ok(())
    }

    pub fn get(&self, token_id: u64) -> Option<&KvTokenMeta> {
        let i = token_id as usize;
        (i < self.metas.len() && self.live[i]).then(|| &self.metas[i])
    }

    /// Unchecked mutable access for tokens known to be live.
    #[inline]
    pub fn meta_mut(&mut self, token_id: u64) -> &mut KvTokenMeta {
        debug_assert!(self.live[token_id as usize]);
        &mut self.metas[token_id as usize]
    }

    #[inline]
    pub fn meta(&self, token_id: u64) -> &KvTokenMeta {
        debug_assert!(self.live[token_id as usize]);
        &self.metas[token_id as usize]
    }

    /// Exchanges the `(tier, bank_group, slot)` of the two swap partners.
    pub fn apply_swap(&mut self, op: &SwapOp) -> Result<(), PlacementError> {
        let a = *self.get(op.token_a).ok_or(PlacementError::UnknownToken(op.token_a))?;
        let b = *self.get(op.token_b).ok_or(PlacementError::UnknownToken(op.token_b))?;
        if a.tier == b.tier {
            return Err(PlacementError::SameTier {
                a: a.token_id,
                b: b.token_id,
                tier: a.tier,
            });
        }
        let ma = &mut self.metas[op.token_a as usize];
        (ma.tier, ma.bank_group, ma.slot) = (b.tier, b.bank_group, b.slot);
        let mb = &mut self.metas[op.token_b as usize];
        (mb.tier, mb.bank_group, mb.slot) = (a.tier, a.bank_group, a.slot);
        Ok(())
    }

    /// Live tokens on each tier, ordered by token id.
    pub fn tier_tokens(&self) -> PerTier<Vec<TokenImportance>> {
        let mut out = PerTier::from_fn(|t| Vec::with_capacity(self.used(t) as usize));
        for (m, _) in self.metas.iter().zip(&self.live).filter(|(_, &l)| l) {
            out[m.tier].push(TokenImportance {
                token_id: m.token_id,
                importance: m.importance,
            });
        }
        out
    }

    /// Live tokens ordered by token id.
    pub fn snapshot(&self) -> Vec<KvTokenMeta> {
        self.metas
            .iter()
            .zip(&self.live)
            .filter(|(_, &l)| l)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PlacementError> {
        write_snapshot_csv(&self.snapshot(), w)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotRow {
    token_id: u64,
    request_id: u64,
    tier: Tier,
    bank_group: u32,
    slot: u32,
    #[serde(rename = "S")]
    score: f64,
    #[serde(rename = "I")]
    importance: f64,
}

/// Writes `token_id,request_id,tier,bank_group,slot,S,I` rows.
pub fn write_snapshot_csv<W: Write>(tokens: &[KvTokenMeta], w: W) -> Result<(), PlacementError> {
    let mut out = csv::Writer::from_writer(w);
    for m in tokens {
        out.serialize(SnapshotRow {
            token_id: m.token_id,
            request_id: m.request_id,
            tier: m.tier,
            bank_group: m.bank_group,
            slot: m.slot,
            score: m.score,
            importance: m.importance,
        })?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_snapshot_csv<R: Read>(r: R) -> Result<Vec<KvTokenMeta>, PlacementError> {
    csv::Reader::from_reader(r)
        .deserialize::<SnapshotRow>()
        .map(|row| {
            let row = row?;
            Ok(KvTokenMeta {
                token_id: row.token_id,
                request_id: row.request_id,
                tier: row.tier,
                bank_group: row.bank_group,
                slot: row.slot,
                score: row.score,
                importance: row.importance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(hbm: u64, ddr: u64, ssd: u64, groups: usize) -> PlacementParams {
        PlacementParams {
            capacity_tokens: PerTier { hbm, ddr, ssd },
            bank_groups: PerTier {
                hbm: groups,
                ddr: groups,
                ssd: groups,
            },
            window: 10,
            policy: MappingPolicy::Greedy,
            seed: 0,
        }
    }

    #[test]
    fn capacity_is_split_over_bank_groups() {
        let p = Placement::new(params(10, 3, 0, 4));
        assert_eq!(p.capacity(Tier::Hbm), 10);
        assert_eq!(p.capacity(Tier::Ddr), 3);
        assert_eq!(p.capacity(Tier::Ssd), 0);
    }

    #[test]
    fn allocate_spills_and_releases() {
        let mut p = Placement::new(params(2, 2, 2, 2));
        let order = [Tier::Hbm, Tier::Ddr, Tier::Ssd];
        let ids: Vec<u64> = (0..6)
            .map(|_| p.allocate_first_fit(7, &order, 0, 0.0, 0.0).unwrap())
            .collect();
        let tiers: Vec<Tier> = ids.iter().map(|&i| p.meta(i).tier).collect();
        assert_eq!(tiers, [Tier::Hbm, Tier::Hbm, Tier::Ddr, Tier::Ddr, Tier::Ssd, Tier::Ssd]);
        assert!(matches!(
            p.allocate_first_fit(7, &order, 0, 0.0, 0.0),
            Err(PlacementError::TierFull(_))
        ));
        p.release(ids[1]).unwrap();
        assert_eq!(p.free(Tier::Hbm), 1);
        let again = p.allocate(8, Tier::Hbm, 1, 0.0, 0.0).unwrap();
        assert_eq!(again, ids[1]);
        assert!(p.release(99).is_err());
    }

    #[test]
    fn slots_are_unique_per_bank_group() {
        let mut p = Placement::new(params(64, 0, 0, 4));
        for _ in 0..64 {
            p.allocate(0, Tier::Hbm, 0, 0.0, 0.0).unwrap();
        }
        let mut seen: Vec<(u32, u32)> = p.snapshot().iter().map(|m| (m.bank_group, m.slot)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn swap_exchanges_locations() {
        let mut p = Placement::new(params(1, 1, 1, 1));
        let a = p.allocate(0, Tier::Hbm, 0, 0.0, 0.1).unwrap();
        let b = p.allocate(0, Tier::Ssd, 0, 0.0, 0.9).unwrap();
        let (ma, mb) = (*p.meta(a), *p.meta(b));
        p.apply_swap(&SwapOp {
            token_a: b,
            token_b: a,
            src_tier: Tier::Ssd,
            dst_tier: Tier::Hbm,
            bytes: 1,
        })
        .unwrap();
        assert_eq!((p.meta(a).tier, p.meta(a).slot), (mb.tier, mb.slot));
        assert_eq!((p.meta(b).tier, p.meta(b).slot), (ma.tier, ma.slot));
        assert_eq!(p.used(Tier::Hbm), 1);
        let tt = p.tier_tokens();
        assert_eq!(tt.hbm[0].token_id, b);
    }

    #[test]
    fn csv_round_trip() {
        let mut p = Placement::new(params(4, 4, 4, 2));
        for i in 0..6 {
            p.allocate_first_fit(i % 2, &[Tier::Hbm, Tier::Ddr], 0, 0.25 * i as f64, 0.1 * i as f64)
                .unwrap();
        }
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("token_id,request_id,tier,bank_group,slot,S,I\n"));
        assert_eq!(read_snapshot_csv(&buf[..]).unwrap(), p.snapshot());
    }
}
