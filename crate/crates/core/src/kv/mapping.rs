//! Intra-device bank-group mapping: sliding-window activation counters and the
//! policies that pick a bank group for a newly written token.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default activation-frequency window, in decode steps.
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("every bank group is full")]
    Full,
    #[error("step {step} precedes the last recorded step {last}")]
    NonMonotonicStep { step: u64, last: u64 },
    #[error("bank group {index} out of range for {groups} groups")]
    OutOfRange { index: usize, groups: usize },
}

/// Per-bank-group activation counts over the last `window` steps.
///
/// Step `s` covers activations recorded at steps `s - window + 1 ..= s`.
#[derive(Debug, Clone)]
pub struct ActivationWindow {
    window: usize,
    groups: usize,
    ring: Vec<u32>,
    totals: Vec<u32>,
    current: Option<u64>,
    version: u64,
}

impl ActivationWindow {
    pub fn new(window: usize, groups: usize) -> Self {
        let window = window.max(1);
        Self {
            window,
            groups,
            ring: vec![0; window * groups],
            totals: vec![0; groups],
            current: None,
            version: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Incremented whenever any counter changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.totals
    }

    /// Moves the window forward so it ends at `step`, expiring older steps.
    pub fn advance_to(&mut self, step: u64) -> Result<(), MappingError> {
        let Some(last) = self.current else {
            self.current = Some(step);
            return Ok(());
        };
        if step < last {
            return Err(MappingError::NonMonotonicStep { step, last });
        }
        let expire = (step - last).min(self.window as u64);
        for t in last + 1..=last + expire {
            let row = (t % self.window as u64) as usize * self.groups;
            let mut changed = false;
            for (total, cell) in self.totals.iter_mut().zip(&mut self.ring[row..row + self.groups]) {
                changed |= *cell != 0;
                *total -= *cell;
                *cell = 0;
            }
            if changed {
                self.version += 1;
            }
        }
        self.current = Some(step);
        Ok(())
    }

    fn row(&self, step: u64) -> usize {
        (step % self.window as u64) as usize * self.groups
    }

    /// Records one activation per listed bank group (repeats count) at `step`.
    pub fn record(&mut self, step: u64, bank_groups: &[usize]) -> Result<(), MappingError> {
        self.advance_to(step)?;
        let row = self.row(step);
        for &g in bank_groups {
            if g >= self.groups {
                return Err(MappingError::OutOfRange {
                    index: g,
                    groups: self.groups,
                });
            }
            self.ring[row + g] += 1;
            self.totals[g] += 1;
        }
        if !bank_groups.is_empty() {
            self.version += 1;
        }
        Ok(())
    }

    /// Adds `counts[g]` activations to every bank group `g` at `step`.
    pub fn record_counts(&mut self, step: u64, counts: &[u32]) -> Result<(), MappingError> {
        self.advance_to(step)?;
        let row = self.row(step);
        let mut any = false;
        for (g, &c) in counts.iter().enumerate().take(self.groups) {
            if c > 0 {
                self.ring[row + g] += c;
                self.totals[g] += c;
                any = true;
            }
        }
        if any {
            self.version += 1;
        }
        Ok(())
    }
}

/// The minimum-frequency bank group that still has a free slot; ties go to
/// the lowest index.
pub fn assign_bank_group(frequencies: &[u32], free_slots: &[u32]) -> Result<usize, MappingError> {
    frequencies
        .iter()
        .zip(free_slots)
        .enumerate()
        .filter(|(_, (_, &free))| free > 0)
        .min_by_key(|(i, (&f, _))| (f, *i))
        .map(|(i, _)| i)
        .ok_or(MappingError::Full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingPolicy {
    /// Lowest windowed activation frequency.
    Greedy,
    /// Cycle through bank groups.
    RoundRobin,
    /// Lowest-index bank group with room (contiguous fill).
    FirstFit,
    /// Seeded uniform start, then the next group with room.
    Random,
}

/// Stateful bank-group chooser for one tier.
///
/// Every assignment counts as an activation of the chosen bank group at the
/// assignment step, since writing a token occupies the group just as reading
/// it does.
#[derive(Debug, Clone)]
pub struct BankGroupAllocator {
    policy: MappingPolicy,
    cursor: usize,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Reverse<(u32, usize)>>,
    heap_version: Option<u64>,
}

impl BankGroupAllocator {
    pub fn new(policy: MappingPolicy, seed: u64) -> Self {
        Self {
            policy,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            heap: BinaryHeap::new(),
            heap_version: None,
        }
    }

    pub fn policy(&self) -> MappingPolicy {
        self.policy
    }

    /// Must be called whenever slots are freed outside [`Self::assign`].
    pub fn invalidate(&mut self) {
        self.heap_version = None;
        if self.policy == MappingPolicy::FirstFit {
            self.cursor = 0;
        }
    }

    /// Chooses a bank group with `free_slots[g] > 0` and records the write.
    /// The caller is responsible for consuming the slot.
    pub fn assign(
        &mut self,
        window: &mut ActivationWindow,
        free_slots: &[u32],
        step: u64,
    ) -> Result<usize, MappingError> {
        window.advance_to(step)?;
        let groups = free_slots.len();
        if groups == 0 {
            return Err(MappingError::Full);
        }
        let chosen = match self.policy {
            MappingPolicy::Greedy => self.greedy(window, free_slots)?,
            MappingPolicy::RoundRobin => {
                let g = next_free(free_slots, self.cursor % groups).ok_or(MappingError::Full)?;
                self.cursor = g + 1;
                g
            }
            MappingPolicy::FirstFit => {
                let g = next_free_linear(free_slots, self.cursor).ok_or(MappingError::Full)?;
                self.cursor = g;
                g
            }
            MappingPolicy::Random => {
                let start = self.rng.gen_range(0..groups);
                next_free(free_slots, start).ok_or(MappingError::Full)?
            }
        };
        window.record(step, &[chosen])?;
        if self.policy == MappingPolicy::Greedy {
            if free_slots[chosen] > 1 {
                self.heap.push(Reverse((window.frequencies()[chosen], chosen)));
            }
            self.heap_version = Some(window.version());
        }
        Ok(chosen)
    }

    fn greedy(&mut self, window: &ActivationWindow, free_slots: &[u32]) -> Result<usize, MappingError> {
        let freqs = window.frequencies();
        if self.heap_version != Some(window.version()) {
            self.heap = free_slots
                .iter()
                .enumerate()
                .filter(|(_, &f)| f > 0)
                .map(|(g, _)| Reverse((freqs[g], g)))
                .collect();
        }
        while let Some(Reverse((f, g))) = self.heap.pop() {
            if free_slots[g] == 0 {
                continue;
            }
            if f != freqs[g] {
                self.heap.push(Reverse((freqs[g], g)));
                continue;
            }
            return Ok(g);
        }
        Err(MappingError::Full)
    }
}

/// One step of a synthetic access stream: `writes` new tokens are placed,
/// then the tokens at the listed indices (in placement order) are read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStep {
    pub writes: usize,
    pub reads: Vec<usize>,
}

/// Places a stream's tokens with `policy` on `groups` unbounded bank groups
/// and returns the largest windowed activation count (writes plus reads)
/// that any bank group reaches after any step.
///
/// # Panics
/// If a step reads a token that has not been written yet.
pub fn stream_peak_frequency(
    policy: MappingPolicy,
    seed: u64,
    groups: usize,
    window: usize,
    stream: &[StreamStep],
) -> u32 {
    let mut w = ActivationWindow::new(window, groups);
    let mut alloc = BankGroupAllocator::new(policy, seed);
    let free = vec![u32::MAX; groups];
    let mut placed: Vec<usize> = Vec::new();
    let mut reads = Vec::new();
    let mut peak = 0;
    for (s, st) in stream.iter().enumerate() {
        let step = s as u64 + 1;
        for _ in 0..st.writes {
            placed.push(alloc.assign(&mut w, &free, step).expect("unbounded groups"));
        }
        reads.clear();
        reads.extend(st.reads.iter().map(|&t| placed[t]));
        w.record(step, &reads).expect("valid step and groups");
        peak = peak.max(w.frequencies().iter().copied().max().unwrap_or(0));
    }
    peak
}

fn next_free(free_slots: &[u32], start: usize) -> Option<usize> {
    let n = free_slots.len();
    (0..n).map(|k| (start + k) % n).find(|&g| free_slots[g] > 0)
}

fn next_free_linear(free_slots: &[u32], start: usize) -> Option<usize> {
    (start..free_slots.len())
        .find(|&g| free_slots[g] > 0)
        .or_else(|| (0..start.min(free_slots.len())).find(|&g| free_slots[g] > 0))
}
