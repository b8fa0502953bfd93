//! Property suites behind `pamsim verify`. Each suite draws seeded random
//! cases, checks one property against an oracle and counts passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{
    local_attention, max_relative_error, pam_attention, reduce_partials, reference_attention, AttentionOptions,
    KvBlock, PartialAttention, QueryVector,
};
use crate::config::SystemConfig;
use crate::kv::mapping::StreamStep;
use crate::kv::sparsity::select_active_into;
use crate::kv::scheduler::{schedule_kv, SchedulerConfig, SwapOp, TierTokens, TokenImportance};
use crate::sim::{simulate, SimOptions, SystemVariant};
use crate::tier::Tier;
use crate::workload::{LocalityModel, LocalityProcess, RequestTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplies every suite's case count.
    pub scale: f64,
    /// Negates one output element before every attention comparison, so the
    /// attention suites must fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            scale: 1.0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub first_failure: Option<String>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    first_failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            first_failure: None,
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.first_failure.is_none() {
            self.first_failure = Some(describe());
        }
    }

    fn done(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            first_failure: self.first_failure,
        }
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let n = |base: usize| ((base as f64 * opts.scale).ceil() as usize).max(1);
    vec![
        attention_equivalence(opts, n(1000)),
        partition_invariance(opts, n(100)),
        merge_associativity(opts, n(500)),
        scheduler_oracle(opts, n(500)),
        simulation_numerics(opts),
        determinism(opts),
    ]
}

fn rng_for(opts: &VerifyOptions, suite: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(suite);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_case(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (QueryVector, KvBlock) {
    let q = QueryVector::new(normals(rng, d)).expect("finite query");
    let kv = KvBlock::new(d, normals(rng, n * d), normals(rng, n * d), (0..n as u64).collect()).expect("consistent block");
    (q, kv)
}

/// Assigns every row of `kv` to one of `k` blocks uniformly at random and
/// drops the blocks left empty.
pub fn random_partition(rng: &mut ChaCha8Rng, kv: &KvBlock, k: usize) -> Vec<KvBlock> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for r in 0..kv.len() {
        rows[rng.gen_range(0..k)].push(r);
    }
    rows.iter()
        .filter(|r| !r.is_empty())
        .map(|r| kv.select(r).expect("rows in range"))
        .collect()
}

fn perturb(out: &mut [f64], inject: bool) {
    if inject {
        if let Some(x) = out.first_mut() {
            *x = -*x;
        }
    }
}

fn attention_equivalence(opts: &VerifyOptions, cases: usize) -> SuiteResult {
    let mut rng = rng_for(opts, 1);
    let mut t = Tally::new("attention_equivalence");
    let ao = AttentionOptions::default();
    for c in 0..cases {
        let n = rng.gen_range(1..=2048);
        let d = [16, 64, 128][rng.gen_range(0..3)];
        let k = rng.gen_range(1..=16);
        let (q, kv) = random_case(&mut rng, n, d);
        let parts = random_partition(&mut rng, &kv, k);
        let mut got = pam_attention(&q, &parts, ao).expect("valid partition");
        perturb(&mut got, opts.inject_fault);
        let want = reference_attention(&q, &kv, ao).expect("valid block");
        let err = max_relative_error(&got, &want, 1e-12);
        t.check(err <= 1e-5, || format!("case {c}: n={n} d={d} k={k} rel err {err:e}"));
    }
    t.done()
}

fn partition_invariance(opts: &VerifyOptions, cases: usize) -> SuiteResult {
    let mut rng = rng_for(opts, 2);
    let mut t = Tally::new("partition_invariance");
    let ao = AttentionOptions::default();
    for c in 0..cases {
        let n = rng.gen_range(1..=512);
        let d = [16, 64][rng.gen_range(0..2)];
        let (q, kv) = random_case(&mut rng, n, d);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let k = rng.gen_range(1..=16);
            let parts = random_partition(&mut rng, &kv, k);
            let mut partials: Vec<PartialAttention> =
                parts.iter().map(|b| local_attention(&q, b, ao).expect("valid block")).collect();
            partials.shuffle(&mut rng);
            outs.push(reduce_partials(&partials).expect("same dims").normalized());
        }
        perturb(&mut outs[1], opts.inject_fault);
        let err = max_relative_error(&outs[1], &outs[0], 1e-12);
        t.check(err <= 1e-10, || format!("case {c}: n={n} d={d} rel err {err:e}"));
    }
    t.done()
}

fn merge_associativity(opts: &VerifyOptions, cases: usize) -> SuiteResult {
    let mut rng = rng_for(opts, 3);
    let mut t = Tally::new("merge_associativity");
    let ao = AttentionOptions::default();
    for c in 0..cases {
        let d = 16;
        let n = rng.gen_range(3..=96);
        let (q, kv) = random_case(&mut rng, n, d);
        let a = rng.gen_range(1..n - 1);
        let b = rng.gen_range(a + 1..n);
        let parts = [kv.slice(0, a), kv.slice(a, b), kv.slice(b, n)].map(|r| r.expect("nonempty slice"));
        let p: Vec<PartialAttention> = parts.iter().map(|b| local_attention(&q, b, ao).expect("valid block")).collect();
        let merge = |a: &PartialAttention, b: &PartialAttention| reduce_partials(&[a.clone(), b.clone()]).expect("same dims");
        let left = merge(&merge(&p[0], &p[1]), &p[2]).normalized();
        let mut right = merge(&p[0], &merge(&p[1], &p[2])).normalized();
        let swapped = merge(&merge(&p[1], &p[0]), &p[2]).normalized();
        perturb(&mut right, opts.inject_fault);
        let err = max_relative_error(&right, &left, 1e-12).max(max_relative_error(&swapped, &left, 1e-12));
        t.check(err <= 1e-12, || format!("case {c}: rel err {err:e}"));
    }
    t.done()
}

/// `(up, down, up_from_tier)` swaps and the final ratios.
pub type OracleSchedule = (Vec<(u64, u64, Tier)>, Option<(f64, f64)>);

/// Straight-line restatement of the two-phase scheduler: linear scans
/// instead of heaps, tier lists mutated in place.
pub fn schedule_oracle(
    hbm: &[TokenImportance],
    ddr: &[TokenImportance],
    ssd: &[TokenImportance],
    x: f64,
    y: f64,
) -> OracleSchedule {
    let (mut h, mut d, mut s) = (hbm.to_vec(), ddr.to_vec(), ssd.to_vec());
    let total = |v: &[TokenImportance]| v.iter().map(|t| t.importance).sum::<f64>();
    let (mut sh, mut sd, mut ss) = (total(&h), total(&d), total(&s));
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let ratios = |sh: f64, sd: f64, ss: f64, nh: usize, nd: usize, ns: usize| -> Option<(f64, f64)> {
        if ns == 0 {
            return Some((mean(sh, nh), mean(sd, nd)));
        }
        let is = mean(ss, ns);
        (is > 0.0).then(|| (mean(sh, nh) / is, mean(sd, nd) / is))
    };
    // Most important, lowest id on ties.
    let argmax = |v: &[TokenImportance]| {
        (0..v.len()).reduce(|a, b| {
            if v[b].importance > v[a].importance || (v[b].importance == v[a].importance && v[b].token_id < v[a].token_id) {
                b
            } else {
                a
            }
        })
    };
    // Least important, lowest id on ties.
    let argmin = |v: &[TokenImportance]| {
        (0..v.len()).reduce(|a, b| {
            if v[b].importance < v[a].importance || (v[b].importance == v[a].importance && v[b].token_id < v[a].token_id) {
                b
            } else {
                a
            }
        })
    };
    let mut swaps = Vec::new();
    if h.is_empty() && d.is_empty() && s.is_empty() {
        return (swaps, None);
    }
    let Some(mut r) = ratios(sh, sd, ss, h.len(), d.len(), s.len()) else {
        return (swaps, None);
    };
    if !s.is_empty() {
        while r.0 + r.1 < x + y {
            let (Some(lo), Some(hi)) = (argmin(&d), argmax(&s)) else { break };
            if s[hi].importance <= d[lo].importance {
                break;
            }
            swaps.push((s[hi].token_id, d[lo].token_id, Tier::Ddr));
            sd += s[hi].importance - d[lo].importance;
            ss += d[lo].importance - s[hi].importance;
            std::mem::swap(&mut s[hi], &mut d[lo]);
            match ratios(sh, sd, ss, h.len(), d.len(), s.len()) {
                Some(v) => r = v,
                None => return (swaps, None),
            }
        }
    }
    while r.0 / r.1 < x / y {
        let (Some(lo), Some(hi)) = (argmin(&h), argmax(&d)) else { break };
        if d[hi].importance <= h[lo].importance {
            break;
        }
        swaps.push((d[hi].token_id, h[lo].token_id, Tier::Hbm));
        sh += d[hi].importance - h[lo].importance;
        sd += h[lo].importance - d[hi].importance;
        std::mem::swap(&mut d[hi], &mut h[lo]);
        r = ratios(sh, sd, ss, h.len(), d.len(), s.len()).expect("SSD importance unchanged");
    }
    (swaps, Some(r))
}

/// Random scheduler instance: up to `max_tokens` tokens spread over three
/// tiers with importances on a coarse grid so that ties occur.
pub fn random_schedule_instance(
    rng: &mut ChaCha8Rng,
    max_tokens: usize,
) -> (Vec<TokenImportance>, Vec<TokenImportance>, Vec<TokenImportance>, f64, f64) {
    let n = rng.gen_range(0..=max_tokens);
    let mut tiers: [Vec<TokenImportance>; 3] = Default::default();
    for id in 0..n as u64 {
        let importance = if rng.gen_bool(0.3) {
            f64::from(rng.gen_range(0..4u32)) / 4.0
        } else {
            rng.gen::<f64>()
        };
        tiers[rng.gen_range(0..3)].push(TokenImportance { token_id: id, importance });
    }
    let x = rng.gen_range(0.25..8.0);
    let y = rng.gen_range(0.25..8.0);
    let [h, d, s] = tiers;
    (h, d, s, x, y)
}

fn swap_triples(swaps: &[SwapOp]) -> Vec<(u64, u64, Tier)> {
    swaps.iter().map(|s| (s.token_a, s.token_b, s.dst_tier)).collect()
}

fn scheduler_oracle(opts: &VerifyOptions, cases: usize) -> SuiteResult {
    let mut rng = rng_for(opts, 4);
    let mut t = Tally::new("scheduler_oracle");
    for c in 0..cases {
        let (h, d, s, x, y) = random_schedule_instance(&mut rng, 12);
        let cfg = SchedulerConfig {
            x,
            y,
            ..Default::default()
        };
        let got = schedule_kv(TierTokens { hbm: &h, ddr: &d, ssd: &s }, &cfg, 1);
        let (want_swaps, want_ratios) = schedule_oracle(&h, &d, &s, x, y);
        let ok = swap_triples(&got.swaps) == want_swaps && got.ratios == want_ratios && !got.truncated;
        t.check(ok, || format!("case {c}: {} vs {} swaps", got.swaps.len(), want_swaps.len()));
    }
    t.done()
}

/// Decode-like access stream over token ids in write order. Step 0 writes
/// every request's prompt; each later step writes one token per request.
/// Each request reads its top `1/compression` tokens under a locality score
/// process, so reads recur on recently active tokens.
pub fn locality_access_stream(rng: &mut ChaCha8Rng, steps: usize, compression: f64) -> Vec<StreamStep> {
    let reqs = rng.gen_range(1..=8);
    let model = LocalityModel {
        seed: rng.gen(),
        ..Default::default()
    };
    let mut procs: Vec<LocalityProcess> = (0..reqs).map(|r| LocalityProcess::new(model, r as u64)).collect();
    let prompts: Vec<usize> = (0..reqs).map(|_| rng.gen_range(32..=512)).collect();
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); reqs];
    let mut next = 0usize;
    let mut scores = Vec::new();
    let mut sel = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut writes = 0;
        for (r, own) in ids.iter_mut().enumerate() {
            let w = if s == 0 { prompts[r] } else { 1 };
            own.extend(next..next + w);
            next += w;
            writes += w;
        }
        let mut reads = Vec::new();
        for (p, own) in procs.iter_mut().zip(&ids) {
            p.next_scores(own.len(), &mut scores);
            select_active_into(&scores, compression, &mut sel);
            reads.extend(sel.iter().map(|&i| own[i]));
        }
        out.push(StreamStep { writes, reads });
    }
    out
}

fn tiny_trace(n: u64, input_len: u32, output_len: u32) -> Vec<RequestTrace> {
    (0..n)
        .map(|i| RequestTrace {
            request_id: i,
            arrival_ms: i as f64 * 0.01,
            input_len: input_len + i as u32 * 37,
            output_len,
        })
        .collect()
}

fn simulation_numerics(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("simulation_numerics");
    let mut cfg = SystemConfig::tiny();
    cfg.sim.verify_numerics = true;
    let trace = tiny_trace(3, 600, 8);
    for v in [SystemVariant::Pam, SystemVariant::LsPim, SystemVariant::LPim] {
        let o = SimOptions {
            seed: opts.seed,
            ..SimOptions::new(v)
        };
        match simulate(&trace, &cfg, &o) {
            Ok(r) => {
                let n = r.numerics.expect("numerics enabled");
                let mut err = n.max_rel_err;
                if opts.inject_fault {
                    err = f64::INFINITY;
                }
                t.check(n.steps_checked == r.decode_steps && err <= 1e-9, || {
                    format!("{v}: {} of {} steps checked, max rel err {err:e}", n.steps_checked, r.decode_steps)
                });
            }
            Err(e) => t.check(false, || format!("{v}: {e}")),
        }
    }
    t.done()
}

fn determinism(opts: &VerifyOptions) -> SuiteResult {
    let mut t = Tally::new("determinism");
    let cfg = SystemConfig::tiny();
    let trace = tiny_trace(6, 500, 12);
    for v in SystemVariant::ALL {
        let o = SimOptions {
            seed: opts.seed,
            ..SimOptions::new(v)
        };
        let run = || {
            simulate(&trace, &cfg, &o).map(|r| {
                let mut steps = Vec::new();
                crate::sim::write_steps_csv(&r.steps, &mut steps).expect("in-memory write");
                (r.to_json(), steps)
            })
        };
        match (run(), run()) {
            (Ok(a), Ok(b)) => t.check(a == b, || format!("{v}: outputs differ")),
            (Err(e), _) | (_, Err(e)) => t.check(false, || format!("{v}: {e}")),
        }
    }
    t.done()
}
