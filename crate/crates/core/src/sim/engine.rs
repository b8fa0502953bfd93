use std::collections::VecDeque;

use thiserror::Error;

use crate::attention::{
    hierarchical_attention, max_relative_error, reference_attention, softmax_stats, AttentionError,
    AttentionOptions, KvBlock, QueryVector,
};
use crate::config::{Admission, ConfigError, SystemConfig};
use crate::device::{
    energy_of_step, exposed_reduction, local_attention_time, npu_op_time, reduction_time, transfer_time,
    EnergyBreakdown, StepActivity, TierSpec, TransferActivity, TransferPath,
};
use crate::kv::importance::ema;
use crate::kv::placement::{Placement, PlacementError, PlacementParams};
use crate::kv::scheduler::{schedule_kv_bounded, TierTokens};
use crate::kv::sparsity::{overlap_fraction, select_active_into};
use crate::tier::{PerTier, Tier};
use crate::workload::{measure_locality, LocalityModel, LocalityProcess, RandomWalkEmbeddings, RequestTrace};

use super::events::{EventQueue, SimEvent};
use super::report::{
    LocalitySummary, NumericsSummary, OomInfo, RequestTimeline, RunStatus, SimReport, SloAttainment, StepReport,
    SwapSummary, SCHEMA_VERSION,
};
use super::variant::{Ablation, InitialPlacement, SystemVariant, VariantPolicy};

/// Relative-error floor used when comparing attention outputs.
pub const NUMERICS_FLOOR: f64 = 1e-9;
/// Context and step count of the locality calibration recorded in reports.
const CALIBRATION_CONTEXT: usize = 4096;
const CALIBRATION_STEPS: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("ablation `{ablation}` applies to PAM only, not {variant}")]
    AblationVariant { ablation: Ablation, variant: SystemVariant },
    #[error("KV placement failed: {0}")]
    Placement(#[from] PlacementError),
    #[error("attention numerics failed: {0}")]
    Attention(#[from] AttentionError),
    #[error("out of memory: request {} needs {} KV tokens, {} of {} reserved", .0.request_id, .0.demanded_tokens, .0.reserved_tokens, .0.capacity_tokens)]
    OutOfMemory(OomInfo),
    #[error("no live requests to decode")]
    NoLiveRequests,
}

/// Cost of one prefill batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrefillReport {
    /// Prompt tokens placed on each tier.
    pub tokens: PerTier<u64>,
    pub npu_s: f64,
    pub transfer_s: f64,
    pub latency_s: f64,
    pub latency_ns: u64,
    pub energy: EnergyBreakdown,
}

/// KV slots reserved for a request over its lifetime.
fn demand_of(r: &RequestTrace) -> u64 {
    u64::from(r.input_len) + u64::from(r.output_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub variant: SystemVariant,
    pub ablation: Option<Ablation>,
    pub seed: u64,
}

impl SimOptions {
    pub fn new(variant: SystemVariant) -> Self {
        Self {
            variant,
            ablation: None,
            seed: 0,
        }
    }
}

/// Runs `trace` to completion (or out-of-memory) on the configured system.
pub fn simulate(trace: &[RequestTrace], cfg: &SystemConfig, opts: &SimOptions) -> Result<SimReport, SimError> {
    let mut engine = Simulator::new(trace, cfg, opts)?;
    engine.run()?;
    Ok(engine.into_report())
}

/// Seconds to integer nanoseconds, rounding up so that nonzero work
/// always advances the clock.
fn to_ns(s: f64) -> u64 {
    (s * 1e9).ceil() as u64
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

struct Numerics {
    emb: RandomWalkEmbeddings,
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl Numerics {
    fn push_token(&mut self) {
        let (k, v) = self.emb.next_kv();
        self.keys.extend(k);
        self.values.extend(v);
    }

    /// True attention weights of `q` over every token of the request.
    fn scores(&self, q: &QueryVector, out: &mut Vec<f64>) -> Result<(), AttentionError> {
        let scale = AttentionOptions::default().score_scale(self.dim);
        let raw: Vec<f64> = self
            .keys
            .chunks_exact(self.dim)
            .map(|k| scale * k.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let (_, w) = softmax_stats(&raw)?;
        out.clear();
        out.extend(w);
        Ok(())
    }

    fn block(&self, positions: &[usize], tokens: &[u64]) -> Result<KvBlock, AttentionError> {
        let d = self.dim;
        let mut k = Vec::with_capacity(positions.len() * d);
        let mut v = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            k.extend_from_slice(&self.keys[p * d..(p + 1) * d]);
            v.extend_from_slice(&self.values[p * d..(p + 1) * d]);
        }
        KvBlock::new(d, k, v, positions.iter().map(|&p| tokens[p]).collect())
    }
}

struct Live {
    index: usize,
    request_id: u64,
    output_len: u32,
    tokens: Vec<u64>,
    generated: u32,
    scores: LocalityProcess,
    numerics: Option<Numerics>,
    prev_selected: Vec<usize>,
    has_prev: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Busy {
    Idle,
    Prefill,
    Step,
}

/// Simulator state. [`simulate`] drives it from the trace's arrival events;
/// [`Simulator::run_prefill`] and [`Simulator::run_decode_step`] expose the
/// individual phases.
pub struct Simulator<'a> {
    trace: &'a [RequestTrace],
    cfg: &'a SystemConfig,
    opts: SimOptions,
    policy: VariantPolicy,
    specs: PerTier<TierSpec>,
    locality: LocalityModel,
    placement: Placement,
    capacity_tokens: u64,
    reserved_tokens: u64,
    queue: EventQueue,
    clock_ns: u64,
    busy: Busy,
    waiting: VecDeque<usize>,
    running: Vec<Live>,
    timelines: Vec<RequestTimeline>,
    step: u64,
    step_start_ns: u64,
    steps: Vec<StepReport>,
    prefill_s: f64,
    energy: EnergyBreakdown,
    oom: Option<OomInfo>,
    peak_batch: usize,
    swaps: SwapSummary,
    swapped_fraction_sum: f64,
    overlap_sum: f64,
    overlap_count: u64,
    numerics: Option<NumericsSummary>,
    // Per-step scratch.
    counts: PerTier<Vec<u32>>,
    stamps: PerTier<Vec<u64>>,
    stamp: u64,
    score_buf: Vec<f64>,
    selected: Vec<usize>,
    expanded: Vec<usize>,
}

impl<'a> Simulator<'a> {
    pub fn new(trace: &'a [RequestTrace], cfg: &'a SystemConfig, opts: &SimOptions) -> Result<Self, SimError> {
        cfg.validate()?;
        if let Some(ablation) = opts.ablation {
            if opts.variant != SystemVariant::Pam {
                return Err(SimError::AblationVariant {
                    ablation,
                    variant: opts.variant,
                });
            }
        }
        let policy = VariantPolicy::new(
            opts.variant,
            opts.ablation,
            cfg.sim.mapping,
            cfg.sparsity.attention_tile_tokens,
        );
        let specs = cfg.tier_specs()?;
        let kv_bytes = cfg.model.kv_bytes_per_token();
        let capacity = PerTier::from_fn(|t| {
            if !policy.tiers.contains(&t) {
                return 0;
            }
            let mut bytes = specs[t].capacity_bytes;
            if t == Tier::Hbm && cfg.sim.weights_in_hbm {
                bytes = bytes.saturating_sub(cfg.model.weight_bytes());
            }
            bytes / kv_bytes
        });
        let bank_groups = specs.map(|_, s| s.bank_groups as usize);
        let placement = Placement::new(PlacementParams {
            capacity_tokens: capacity,
            bank_groups,
            window: cfg.scheduler.window,
            policy: policy.mapping,
            seed: opts.seed,
        });
        let mut locality = cfg.locality;
        locality.seed ^= opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let timelines = trace
            .iter()
            .map(|r| RequestTimeline {
                request_id: r.request_id,
                input_len: r.input_len,
                output_len: r.output_len,
                arrival_ms: r.arrival_ms,
                admitted_ms: None,
                prefill_done_ms: None,
                token_ms: Vec::new(),
                finish_ms: None,
            })
            .collect();
        let numerics = (cfg.sim.verify_numerics).then_some(NumericsSummary {
            steps_checked: 0,
            max_rel_err: 0.0,
        });
        Ok(Self {
            trace,
            cfg,
            opts: *opts,
            counts: bank_groups.map(|_, &g| vec![0; g]),
            stamps: bank_groups.map(|_, &g| vec![0; g]),
            policy,
            specs,
            locality,
            capacity_tokens: capacity.sum(),
            placement,
            reserved_tokens: 0,
            queue: EventQueue::new(),
            clock_ns: 0,
            busy: Busy::Idle,
            waiting: VecDeque::new(),
            running: Vec::new(),
            timelines,
            step: 0,
            step_start_ns: 0,
            steps: Vec::new(),
            prefill_s: 0.0,
            energy: EnergyBreakdown::default(),
            oom: None,
            peak_batch: 0,
            swaps: SwapSummary::default(),
            swapped_fraction_sum: 0.0,
            overlap_sum: 0.0,
            overlap_count: 0,
            numerics,
            stamp: 0,
            score_buf: Vec::new(),
            selected: Vec::new(),
            expanded: Vec::new(),
        })
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn policy(&self) -> &VariantPolicy {
        &self.policy
    }

    pub fn clock_ns(&self) -> u64 {
        self.clock_ns
    }

    pub fn live_requests(&self) -> usize {
        self.running.len()
    }

    /// Token ids of a live request, by position.
    pub fn request_tokens(&self, request_id: u64) -> Option<&[u64]> {
        self.running
            .iter()
            .find(|l| l.request_id == request_id)
            .map(|l| l.tokens.as_slice())
    }

    pub fn steps(&self) -> &[StepReport] {
        &self.steps
    }

    fn run(&mut self) -> Result<(), SimError> {
        for (i, r) in self.trace.iter().enumerate() {
            self.queue.push(to_ns(r.arrival_ms / 1e3), SimEvent::Arrival { index: i });
        }
        while let Some((t, event)) = self.queue.pop() {
            match event {
                SimEvent::Arrival { index } => self.waiting.push_back(index),
                SimEvent::PrefillDone | SimEvent::StepDone => self.busy = Busy::Idle,
            }
            if self.busy == Busy::Idle {
                self.clock_ns = t;
                if self.queue.peek_time() != Some(t) {
                    self.dispatch()?;
                }
            }
            if self.oom.is_some() {
                break;
            }
        }
        Ok(())
    }

    /// Admits waiting requests into a prefill batch, or else runs one decode
    /// step of the running batch.
    fn dispatch(&mut self) -> Result<(), SimError> {
        let mut batch = Vec::new();
        let mut demand_total = 0;
        while let Some(&index) = self.waiting.front() {
            if self.running.len() + batch.len() >= self.cfg.sim.max_batch {
                break;
            }
            let r = &self.trace[index];
            let demand = demand_of(r);
            if self.reserved_tokens + demand_total + demand > self.capacity_tokens {
                let hopeless = self.running.is_empty() && batch.is_empty();
                if self.cfg.sim.admission == Admission::Strict || hopeless {
                    self.oom = Some(OomInfo {
                        time_ms: ms(self.clock_ns),
                        request_id: r.request_id,
                        demanded_tokens: demand,
                        reserved_tokens: self.reserved_tokens + demand_total,
                        capacity_tokens: self.capacity_tokens,
                    });
                    return Ok(());
                }
                break;
            }
            demand_total += demand;
            self.waiting.pop_front();
            batch.push(index);
        }
        if !batch.is_empty() {
            self.run_prefill(&batch)?;
            self.busy = Busy::Prefill;
            self.queue.push(self.clock_ns, SimEvent::PrefillDone);
        } else if !self.running.is_empty() {
            self.run_decode_step()?;
            self.busy = Busy::Step;
            self.queue.push(self.clock_ns, SimEvent::StepDone);
        }
        Ok(())
    }

    fn new_live(&self, index: usize) -> Live {
        let r = &self.trace[index];
        let numerics = (self.cfg.sim.verify_numerics || self.cfg.sim.numeric_scores).then(|| Numerics {
            emb: RandomWalkEmbeddings::new(self.cfg.sim.numeric_dim, self.cfg.sim.numeric_rho, self.locality.seed, r.request_id),
            dim: self.cfg.sim.numeric_dim,
            keys: Vec::new(),
            values: Vec::new(),
        });
        Live {
            index,
            request_id: r.request_id,
            output_len: r.output_len,
            tokens: Vec::with_capacity((r.input_len + r.output_len) as usize),
            generated: 0,
            scores: LocalityProcess::new(self.locality, r.request_id),
            numerics,
            prev_selected: Vec::new(),
            has_prev: false,
        }
    }

    /// Admits the trace records `batch` at the current clock: reserves their
    /// KV capacity, places prompt KV per the variant's initial-placement
    /// policy, and advances the clock by the prefill latency.
    pub fn run_prefill(&mut self, batch: &[usize]) -> Result<PrefillReport, SimError> {
        if batch.is_empty() {
            return Ok(PrefillReport::default());
        }
        let demand: u64 = batch.iter().map(|&i| demand_of(&self.trace[i])).sum();
        if self.reserved_tokens + demand > self.capacity_tokens {
            let info = OomInfo {
                time_ms: ms(self.clock_ns),
                request_id: self.trace[batch[0]].request_id,
                demanded_tokens: demand,
                reserved_tokens: self.reserved_tokens,
                capacity_tokens: self.capacity_tokens,
            };
            self.oom = Some(info.clone());
            return Err(SimError::OutOfMemory(info));
        }
        self.reserved_tokens += demand;
        let model = &self.cfg.model;
        let mut lives: Vec<Live> = batch.iter().map(|&i| self.new_live(i)).collect();

        // Initial importance of every prompt token.
        let mut initial: Vec<Vec<f64>> = Vec::with_capacity(lives.len());
        for (live, &i) in lives.iter_mut().zip(batch) {
            let n = self.trace[i].input_len as usize;
            let scores = match &mut live.numerics {
                Some(nm) if self.cfg.sim.numeric_scores => {
                    for _ in 0..n {
                        nm.push_token();
                    }
                    let q = nm.emb.next_query();
                    let mut s = Vec::new();
                    nm.scores(&q, &mut s)?;
                    s
                }
                other => {
                    if let Some(nm) = other {
                        for _ in 0..n {
                            nm.push_token();
                        }
                    }
                    (0..n).map(|p| self.locality.recency((n - 1 - p) as u64)).collect()
                }
            };
            initial.push(scores);
        }

        let step = self.step;
        let tiers = self.policy.tiers.clone();
        match self.policy.placement {
            InitialPlacement::FillHighest => {
                for (live, scores) in lives.iter_mut().zip(&initial) {
                    for &s in scores {
                        let id = self.placement.allocate_first_fit(live.request_id, &tiers, step, s, s)?;
                        live.tokens.push(id);
                    }
                }
            }
            InitialPlacement::ByImportance => {
                let mut order: Vec<(usize, usize)> = initial
                    .iter()
                    .enumerate()
                    .flat_map(|(b, s)| (0..s.len()).map(move |p| (b, p)))
                    .collect();
                order.sort_by(|&(ba, pa), &(bb, pb)| {
                    initial[bb][pb]
                        .total_cmp(&initial[ba][pa])
                        .then(ba.cmp(&bb))
                        .then(pb.cmp(&pa))
                });
                for (live, s) in lives.iter_mut().zip(&initial) {
                    live.tokens.resize(s.len(), u64::MAX);
                }
                for (b, p) in order {
                    let s = initial[b][p];
                    let id = self.placement.allocate_first_fit(lives[b].request_id, &tiers, step, s, s)?;
                    lives[b].tokens[p] = id;
                }
            }
        }

        // Cost: one NPU pass over all prompt tokens, then KV shipped to the
        // lower tiers in parallel.
        let layers = f64::from(model.layers);
        let n_tokens: u64 = batch.iter().map(|&i| u64::from(self.trace[i].input_len)).sum();
        let params = (model.qkv_params_per_layer() + model.post_params_per_layer()) as f64;
        let linear_flops = 2.0 * n_tokens as f64 * params;
        let attn_flops: f64 = batch
            .iter()
            .map(|&i| {
                let l = f64::from(self.trace[i].input_len);
                2.0 * model.q_dim() as f64 * l * l
            })
            .sum();
        let kv_layer = model.kv_bytes_per_token_layer() as f64;
        let npu_bytes = params * model.element_bytes as f64 + n_tokens as f64 * kv_layer;
        let npu_s = layers * npu_op_time(&self.cfg.npu, linear_flops + attn_flops, npu_bytes);

        let mut per_tier = PerTier::<u64>::default();
        for live in &lives {
            for &id in &live.tokens {
                per_tier[self.placement.meta(id).tier] += 1;
            }
        }
        let kv_bytes = model.kv_bytes_per_token();
        let mut transfer_s: f64 = 0.0;
        let mut activity = StepActivity {
            npu_flops: layers * (linear_flops + attn_flops),
            npu_bytes: layers * npu_bytes,
            ..Default::default()
        };
        for t in Tier::ALL {
            activity.tier_bytes[t] = (per_tier[t] * kv_bytes) as f64;
            if t != Tier::Hbm && per_tier[t] > 0 {
                let bytes = per_tier[t] * kv_bytes;
                transfer_s = transfer_s.max(transfer_time(&self.specs[t], &self.specs.hbm, bytes, self.policy.path));
                activity.transfers.push(TransferActivity {
                    link: t,
                    bytes,
                    path: self.policy.path,
                });
            }
        }
        let energy = energy_of_step(&activity, &self.cfg.energy);
        self.energy.add(&energy);
        let latency_s = npu_s + transfer_s;
        let latency_ns = to_ns(latency_s);
        self.prefill_s += latency_s;
        let start = self.clock_ns;
        self.clock_ns += latency_ns;
        for &i in batch {
            self.timelines[i].admitted_ms = Some(ms(start));
            self.timelines[i].prefill_done_ms = Some(ms(self.clock_ns));
        }
        self.running.extend(lives);
        Ok(PrefillReport {
            tokens: per_tier,
            npu_s,
            transfer_s,
            latency_s,
            latency_ns,
            energy,
        })
    }

    /// One decode step of every live request. Requests that produce their
    /// last token retire at the end of the step, and the clock advances by
    /// the step latency.
    pub fn run_decode_step(&mut self) -> Result<StepReport, SimError> {
        if self.running.is_empty() {
            return Err(SimError::NoLiveRequests);
        }
        self.step_start_ns = self.clock_ns;
        let report = self.decode_step()?;
        self.clock_ns += report.latency_ns;
        self.complete_step(self.clock_ns)?;
        self.steps.push(report.clone());
        Ok(report)
    }

    fn decode_step(&mut self) -> Result<StepReport, SimError> {
        self.step += 1;
        let step = self.step;
        let cfg = self.cfg;
        let model = &cfg.model;
        let tiers = self.policy.tiers.clone();
        let numeric_scores = cfg.sim.numeric_scores;

        // Each request appends the KV of the token it is decoding.
        for live in &mut self.running {
            let init = self.locality.recency(0);
            let id = self.placement.allocate_first_fit(live.request_id, &tiers, step, init, init)?;
            live.tokens.push(id);
            if let Some(nm) = &mut live.numerics {
                nm.push_token();
            }
        }
        self.peak_batch = self.peak_batch.max(self.running.len());

        for t in Tier::ALL {
            self.counts[t].fill(0);
        }
        let mut partials = PerTier::<u64>::default();
        let mut requests_on = PerTier::<u64>::default();
        let mut final_partials: u64 = 0;
        let mut selected_total: u64 = 0;
        let mut step_err: Option<f64> = None;
        let lambda = cfg.scheduler.lambda;

        let mut running = std::mem::take(&mut self.running);
        for live in &mut running {
            let n = live.tokens.len();
            let mut query = None;
            if let Some(nm) = &mut live.numerics {
                query = Some(nm.emb.next_query());
            }
            if self.policy.needs_scores() {
                match (&live.numerics, &query) {
                    (Some(nm), Some(q)) if numeric_scores => nm.scores(q, &mut self.score_buf)?,
                    _ => live.scores.next_scores(n, &mut self.score_buf),
                }
            }
            if self.policy.sparsity {
                select_active_into(&self.score_buf, cfg.sparsity.compression, &mut self.selected);
                if live.has_prev {
                    self.overlap_sum += overlap_fraction(&live.prev_selected, &self.selected);
                    self.overlap_count += 1;
                }
                live.prev_selected.clone_from(&self.selected);
                live.has_prev = true;
            } else {
                self.selected.clear();
                self.selected.extend(0..n);
            }
            selected_total += self.selected.len() as u64;

            let tile = self.policy.tile_tokens as usize;
            let active: &[usize] = if tile > 1 {
                expand_tiles(&self.selected, tile, n, &mut self.expanded);
                &self.expanded
            } else {
                &self.selected
            };

            if self.policy.tracks_importance() {
                for (&id, &s) in live.tokens.iter().zip(&self.score_buf) {
                    let m = self.placement.meta_mut(id);
                    m.score = s;
                    m.importance = ema(s, m.importance, lambda);
                }
            }

            self.stamp += 1;
            let mut touched = PerTier::<bool>::default();
            for &p in active {
                let m = self.placement.meta(live.tokens[p]);
                let (t, g) = (m.tier, m.bank_group as usize);
                self.counts[t][g] += 1;
                if self.stamps[t][g] != self.stamp {
                    self.stamps[t][g] = self.stamp;
                    partials[t] += 1;
                }
                touched[t] = true;
            }
            let spanned = Tier::ALL.iter().filter(|&&t| touched[t]).count() as u64;
            for t in Tier::ALL {
                requests_on[t] += u64::from(touched[t]);
            }
            if spanned > 1 {
                final_partials += spanned;
            }

            if let (Some(nm), Some(q), true) = (&live.numerics, &query, cfg.sim.verify_numerics) {
                let err = verify_step(nm, q, active, &live.tokens, &self.placement)?;
                step_err = Some(step_err.map_or(err, |e: f64| e.max(err)));
            }
        }
        self.running = running;

        // Cost model, per layer.
        let layers = f64::from(model.layers);
        let heads = model.heads;
        let bpt = model.kv_bytes_per_token_layer() as f64;
        let fpt = model.attention_flops_per_token_layer() as f64;
        let b = self.running.len() as f64;
        let elem = model.element_bytes as f64;
        let (qkv, post) = (model.qkv_params_per_layer() as f64, model.post_params_per_layer() as f64);
        let npu_layer = npu_op_time(&cfg.npu, 2.0 * b * qkv, qkv * elem) + npu_op_time(&cfg.npu, 2.0 * b * post, post * elem);
        let active_tokens = PerTier::from_fn(|t| self.counts[t].iter().map(|&c| u64::from(c)).sum::<u64>());
        let active_total = active_tokens.sum() as f64;

        let mut attention = PerTier::<f64>::default();
        let mut reduction = PerTier::<f64>::default();
        let mut exposed = PerTier::<f64>::default();
        let mut critical_tier = None;
        let mut phase_layer: f64 = 0.0;
        let mut transfer_layer: f64 = 0.0;
        let mut final_layer = 0.0;
        let mut kv_fetch_layer: f64 = 0.0;
        let mut npu_attn_layer = 0.0;
        let mut activity = StepActivity {
            npu_flops: 2.0 * b * (qkv + post),
            npu_bytes: (qkv + post) * elem,
            ..Default::default()
        };
        let partial_bytes = model.partial_bytes();
        if self.policy.pim {
            for t in Tier::ALL {
                if active_tokens[t] > 0 {
                    attention[t] = local_attention_time(&self.specs[t], &self.counts[t], bpt, fpt);
                }
                reduction[t] = reduction_time(&self.specs[t], partials[t] * heads);
                exposed[t] = exposed_reduction(reduction[t], attention[t], cfg.sim.reduction_overlap);
                let total = attention[t] + exposed[t];
                if total > phase_layer {
                    phase_layer = total;
                    critical_tier = Some(t);
                }
                activity.tier_bytes[t] = active_tokens[t] as f64 * bpt;
                activity.tier_flops[t] = active_tokens[t] as f64 * fpt;
                if t != Tier::Hbm && requests_on[t] > 0 {
                    let bytes = requests_on[t] * heads * partial_bytes;
                    transfer_layer =
                        transfer_layer.max(transfer_time(&self.specs[t], &self.specs.hbm, bytes, self.policy.path));
                    activity.transfers.push(TransferActivity {
                        link: t,
                        bytes,
                        path: self.policy.path,
                    });
                }
            }
            final_layer = reduction_time(&self.specs.hbm, final_partials * heads);
        } else {
            for t in Tier::ALL {
                activity.tier_bytes[t] = active_tokens[t] as f64 * bpt;
                if t != Tier::Hbm && active_tokens[t] > 0 {
                    let bytes = (active_tokens[t] as f64 * bpt) as u64;
                    kv_fetch_layer =
                        kv_fetch_layer.max(transfer_time(&self.specs[t], &self.specs.hbm, bytes, self.policy.path));
                    activity.npu_bytes += bytes as f64;
                    activity.transfers.push(TransferActivity {
                        link: t,
                        bytes,
                        path: self.policy.path,
                    });
                }
            }
            npu_attn_layer = npu_op_time(&cfg.npu, active_total * fpt, active_total * bpt);
            activity.npu_flops += active_total * fpt;
            activity.npu_bytes += active_total * bpt;
            phase_layer = kv_fetch_layer + npu_attn_layer;
        }
        let mut energy = energy_of_step(&activity.scaled(layers), &cfg.energy);

        let npu_s = npu_layer * layers;
        let attention_phase_s = phase_layer * layers;
        let transfer_s = transfer_layer * layers;
        let final_reduction_s = final_layer * layers;
        let compute_s = npu_s + attention_phase_s + transfer_s + final_reduction_s;

        // Inter-tier migration, overlapped with the step.
        let (mut swaps, mut swaps_truncated, mut swap_bytes, mut swap_transfer_s) = (0u64, false, 0u64, 0.0);
        let scheduled = self.policy.scheduling && step.is_multiple_of(cfg.scheduler.swap_cadence);
        if scheduled {
            let kv_bytes = model.kv_bytes_per_token();
            let max_swaps = if cfg.sim.migration_budget {
                self.swap_budget(compute_s, kv_bytes)
            } else {
                usize::MAX
            };
            let tt = self.placement.tier_tokens();
            let schedule = schedule_kv_bounded(
                TierTokens {
                    hbm: &tt.hbm,
                    ddr: &tt.ddr,
                    ssd: &tt.ssd,
                },
                &cfg.scheduler,
                kv_bytes,
                max_swaps,
            );
            let mut moved = PerTier::<u64>::default();
            let mut swap_activity = StepActivity::default();
            for op in &schedule.swaps {
                self.placement.apply_swap(op)?;
                moved[op.src_tier] += 2 * op.bytes;
                swap_activity.tier_bytes[op.src_tier] += 2.0 * op.bytes as f64;
                swap_activity.tier_bytes[op.dst_tier] += 2.0 * op.bytes as f64;
            }
            for t in [Tier::Ssd, Tier::Ddr] {
                if moved[t] > 0 {
                    let up = if t == Tier::Ssd { Tier::Ddr } else { Tier::Hbm };
                    swap_transfer_s += transfer_time(&self.specs[t], &self.specs[up], moved[t], TransferPath::Direct);
                    swap_activity.transfers.push(TransferActivity {
                        link: t,
                        bytes: moved[t],
                        path: TransferPath::Direct,
                    });
                }
            }
            energy.add(&energy_of_step(&swap_activity, &cfg.energy));
            swaps = schedule.swaps.len() as u64;
            let resident: u64 = Tier::ALL.iter().map(|&t| self.placement.used(t)).sum();
            if resident > 0 {
                self.swapped_fraction_sum += 2.0 * swaps as f64 / resident as f64;
            }
            swaps_truncated = schedule.truncated;
            swap_bytes = moved.sum();
        }
        let swap_exposed_s = (swap_transfer_s - compute_s).max(0.0);
        let latency_s = compute_s + swap_exposed_s;
        self.swaps.total_swaps += swaps;
        self.swaps.total_bytes += swap_bytes;
        self.swaps.truncated_steps += u64::from(swaps_truncated);
        self.swaps.scheduled_steps += u64::from(scheduled);
        self.swaps.transfer_s += swap_transfer_s;
        self.swaps.exposed_s += swap_exposed_s;

        for t in Tier::ALL {
            self.placement.record_activations(t, step, &self.counts[t])?;
        }
        self.energy.add(&energy);
        if let (Some(summary), Some(err)) = (&mut self.numerics, step_err) {
            summary.steps_checked += 1;
            summary.max_rel_err = summary.max_rel_err.max(err);
        }

        Ok(StepReport {
            step,
            start_ns: self.step_start_ns,
            batch: self.running.len(),
            resident_tokens: PerTier::from_fn(|t| self.placement.used(t)),
            selected_tokens: selected_total,
            active_tokens,
            partials,
            npu_s,
            attention_s: attention.map(|_, &x| x * layers),
            reduction_s: reduction.map(|_, &x| x * layers),
            exposed_reduction_s: exposed.map(|_, &x| x * layers),
            critical_tier,
            kv_fetch_s: kv_fetch_layer * layers,
            npu_attention_s: npu_attn_layer * layers,
            attention_phase_s,
            transfer_s,
            transfer_path: self.policy.path,
            final_reduction_s,
            swaps,
            swaps_truncated,
            swap_bytes,
            swap_transfer_s,
            swap_exposed_s,
            latency_s,
            latency_ns: to_ns(latency_s),
            energy,
            numerics_max_rel_err: step_err,
        })
    }

    /// Swaps whose traffic fits the slowest inter-tier link within
    /// `window_s`; at least one so scheduling always makes progress.
    fn swap_budget(&self, window_s: f64, kv_bytes: u64) -> usize {
        let bw = Tier::ALL.iter().map(|&t| self.specs[t].link_bandwidth).fold(f64::INFINITY, f64::min);
        let lat = Tier::ALL.iter().map(|&t| self.specs[t].link_latency).fold(0.0, f64::max);
        let n = ((window_s - 2.0 * lat).max(0.0) * bw / (2.0 * kv_bytes as f64)).floor();
        (n as usize).max(1)
    }

    fn complete_step(&mut self, t: u64) -> Result<(), SimError> {
        let mut still = Vec::with_capacity(self.running.len());
        for mut live in std::mem::take(&mut self.running) {
            live.generated += 1;
            let tl = &mut self.timelines[live.index];
            tl.token_ms.push(ms(t));
            if live.generated >= live.output_len {
                tl.finish_ms = Some(ms(t));
                for &id in &live.tokens {
                    self.placement.release(id)?;
                }
                self.reserved_tokens -= demand_of(&self.trace[live.index]);
            } else {
                still.push(live);
            }
        }
        self.running = still;
        Ok(())
    }

    pub fn into_report(self) -> SimReport {
        let generated: u64 = self.timelines.iter().map(|t| t.token_ms.len() as u64).sum();
        let wall_time_s = self.clock_ns as f64 / 1e9;
        let decode_s = self.steps.iter().fold(0.0, |acc, s| acc + s.latency_s);
        let mut lat_ms: Vec<f64> = self.steps.iter().map(|s| s.latency_s * 1e3).collect();
        lat_ms.sort_by(f64::total_cmp);
        let n_steps = lat_ms.len();
        let mean = if n_steps == 0 { 0.0 } else { lat_ms.iter().sum::<f64>() / n_steps as f64 };
        let p99 = if n_steps == 0 {
            0.0
        } else {
            lat_ms[((n_steps as f64 * 0.99).ceil() as usize).clamp(1, n_steps) - 1]
        };
        let slo = self
            .cfg
            .sim
            .slo_ms
            .iter()
            .map(|&thr| SloAttainment {
                threshold_ms: thr,
                attainment: if n_steps == 0 {
                    0.0
                } else {
                    lat_ms.iter().filter(|&&l| l <= thr).count() as f64 / n_steps as f64
                },
            })
            .collect();
        let attention_share = PerTier::from_fn(|t| {
            if decode_s > 0.0 {
                self.steps.iter().map(|s| s.attention_s[t]).sum::<f64>() / decode_s
            } else {
                0.0
            }
        });
        let resident_share = PerTier::from_fn(|t| {
            if n_steps == 0 {
                return 0.0;
            }
            self.steps
                .iter()
                .map(|s| {
                    let total = s.resident_tokens.sum();
                    if total == 0 {
                        0.0
                    } else {
                        s.resident_tokens[t] as f64 / total as f64
                    }
                })
                .sum::<f64>()
                / n_steps as f64
        });
        let mut swaps = self.swaps;
        if swaps.scheduled_steps > 0 {
            swaps.mean_swapped_fraction = self.swapped_fraction_sum / swaps.scheduled_steps as f64;
        }
        let energy_j = self.energy.total();
        let requests_completed = self.timelines.iter().filter(|t| t.finish_ms.is_some()).count();
        SimReport {
            schema_version: SCHEMA_VERSION,
            variant: self.opts.variant.name().to_string(),
            ablation: self.opts.ablation.map(|a| a.name().to_string()),
            seed: self.opts.seed,
            model: self.cfg.model.name.clone(),
            status: if self.oom.is_some() {
                RunStatus::OutOfMemory
            } else {
                RunStatus::Completed
            },
            oom: self.oom,
            requests_total: self.trace.len(),
            requests_completed,
            generated_tokens: generated,
            decode_steps: n_steps as u64,
            prefill_s: self.prefill_s,
            decode_s,
            wall_time_s,
            throughput_tok_s: if wall_time_s > 0.0 { generated as f64 / wall_time_s } else { 0.0 },
            mean_step_latency_ms: mean,
            p99_step_latency_ms: p99,
            peak_batch: self.peak_batch,
            slo,
            attention_share,
            resident_share,
            swaps,
            energy: self.energy,
            energy_j,
            energy_per_token_j: if generated > 0 { energy_j / generated as f64 } else { 0.0 },
            locality: LocalitySummary {
                calibration: measure_locality(
                    &self.locality,
                    CALIBRATION_CONTEXT,
                    CALIBRATION_STEPS,
                    1.0 / self.cfg.sparsity.compression,
                ),
                observed_overlap: (self.overlap_count > 0).then(|| self.overlap_sum / self.overlap_count as f64),
            },
            numerics: self.numerics,
            requests: self.timelines,
            steps: self.steps,
        }
    }
}

/// Replaces each selected position by its whole aligned tile.
fn expand_tiles(selected: &[usize], tile: usize, n: usize, out: &mut Vec<usize>) {
    out.clear();
    let mut last_tile = usize::MAX;
    for &p in selected {
        let t = p / tile;
        if t != last_tile {
            out.extend(t * tile..((t + 1) * tile).min(n));
            last_tile = t;
        }
    }
}

/// Attention over the active tokens computed the way the hardware does it
/// (per bank group, then per tier, then across tiers) against the exact
/// single-pass result. Returns the largest relative error.
fn verify_step(
    nm: &Numerics,
    q: &QueryVector,
    active: &[usize],
    tokens: &[u64],
    placement: &Placement,
) -> Result<f64, SimError> {
    if active.is_empty() {
        return Ok(0.0);
    }
    let opts = AttentionOptions::default();
    let mut keyed: Vec<(Tier, u32, usize)> = active
        .iter()
        .map(|&p| {
            let m = placement.meta(tokens[p]);
            (m.tier, m.bank_group, p)
        })
        .collect();
    keyed.sort_unstable();
    let mut groups: Vec<Vec<KvBlock>> = Vec::new();
    let mut i = 0;
    let mut cur_tier = None;
    while i < keyed.len() {
        let (t, g, _) = keyed[i];
        let j = keyed[i..].iter().position(|&(tt, gg, _)| (tt, gg) != (t, g)).map_or(keyed.len(), |k| i + k);
        let positions: Vec<usize> = keyed[i..j].iter().map(|&(_, _, p)| p).collect();
        if cur_tier != Some(t) {
            groups.push(Vec::new());
            cur_tier = Some(t);
        }
        groups.last_mut().expect("pushed above").push(nm.block(&positions, tokens)?);
        i = j;
    }
    let got = hierarchical_attention(q, &groups, opts)?;
    let want = reference_attention(q, &nm.block(active, tokens)?, opts)?;
    Ok(max_relative_error(&got, &want, NUMERICS_FLOOR))
}
