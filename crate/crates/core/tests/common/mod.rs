//! Independent oracles shared by the integration tests. Nothing here calls
//! the library code it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-pass softmax attention over row-major `keys` / `values`, scores scaled
/// by `1/sqrt(d)`.
pub fn naive_attention(q: &[f64], keys: &[f64], values: &[f64]) -> Vec<f64> {
    let d = q.len();
    let n = keys.len() / d;
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..n)
        .map(|i| scale * (0..d).map(|j| q[j] * keys[i * d + j]).sum::<f64>())
        .collect();
    let mut m = f64::NEG_INFINITY;
    for &s in &scores {
        if s > m {
            m = s;
        }
    }
    let weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            out[j] += weights[i] / total * values[i * d + j];
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-9))
        .fold(0.0, f64::max)
}

/// `(token_id, importance)`.
pub type Tok = (u64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSchedule {
    /// `(up, down, up_from_tier)` with tiers 0 = HBM, 1 = DDR, 2 = SSD.
    pub swaps: Vec<(u64, u64, u8)>,
    pub ratios: Option<(f64, f64)>,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ratios(h: f64, d: f64, s: f64, nh: usize, nd: usize, ns: usize) -> Option<(f64, f64)> {
    let (ih, id) = (mean(h, nh), mean(d, nd));
    if ns == 0 {
        return Some((ih, id));
    }
    let is = mean(s, ns);
    if is > 0.0 {
        Some((ih / is, id / is))
    } else {
        None
    }
}

/// Index of the least important token, lowest id on ties.
fn argmin(v: &[Tok]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..v.len() {
        best = match best {
            None => Some(i),
            Some(b) if v[i].1 < v[b].1 || (v[i].1 == v[b].1 && v[i].0 < v[b].0) => Some(i),
            keep => keep,
        };
    }
    best
}

/// Index of the most important token, lowest id on ties.
fn argmax(v: &[Tok]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..v.len() {
        best = match best {
            None => Some(i),
            Some(b) if v[i].1 > v[b].1 || (v[i].1 == v[b].1 && v[i].0 < v[b].0) => Some(i),
            keep => keep,
        };
    }
    best
}

/// One step of two-phase tier scheduling written as plain loops over vectors.
pub fn schedule(hbm: &[Tok], ddr: &[Tok], ssd: &[Tok], x: f64, y: f64) -> OracleSchedule {
    let (mut h, mut d, mut s) = (hbm.to_vec(), ddr.to_vec(), ssd.to_vec());
    let mut sh: f64 = h.iter().map(|t| t.1).sum();
    let mut sd: f64 = d.iter().map(|t| t.1).sum();
    let mut ss: f64 = s.iter().map(|t| t.1).sum();
    let mut swaps = Vec::new();
    if h.is_empty() && d.is_empty() && s.is_empty() {
        return OracleSchedule { swaps, ratios: None };
    }
    let Some(mut r) = ratios(sh, sd, ss, h.len(), d.len(), s.len()) else {
        return OracleSchedule { swaps, ratios: None };
    };
    if !s.is_empty() {
        while r.0 + r.1 < x + y {
            let (Some(lo), Some(hi)) = (argmin(&d), argmax(&s)) else { break };
            if s[hi].1 <= d[lo].1 {
                break;
            }
            let (up, down) = (s[hi], d[lo]);
            swaps.push((up.0, down.0, 2));
            sd += up.1 - down.1;
            ss += down.1 - up.1;
            d[lo] = up;
            s[hi] = down;
            match ratios(sh, sd, ss, h.len(), d.len(), s.len()) {
                Some(v) => r = v,
                None => return OracleSchedule { swaps, ratios: None },
            }
        }
    }
    while r.0 / r.1 < x / y {
        let (Some(lo), Some(hi)) = (argmin(&h), argmax(&d)) else { break };
        if d[hi].1 <= h[lo].1 {
            break;
        }
        let (up, down) = (d[hi], h[lo]);
        swaps.push((up.0, down.0, 1));
        sh += up.1 - down.1;
        sd += down.1 - up.1;
        h[lo] = up;
        d[hi] = down;
        r = ratios(sh, sd, ss, h.len(), d.len(), s.len()).expect("SSD unchanged in phase 2");
    }
    OracleSchedule { swaps, ratios: Some(r) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Greedy,
    RoundRobin,
    Random,
}

/// Replays a stream of `(writes, reads)` steps on `groups` unbounded bank
/// groups and returns the peak windowed activation count of any group.
/// Writes count as activations at their step.
pub fn replay_peak(policy: Policy, seed: u64, groups: usize, window: u64, stream: &[(usize, Vec<usize>)]) -> u32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // history[g] holds the steps at which group g was activated.
    let mut history: Vec<Vec<u64>> = vec![Vec::new(); groups];
    let freq = |h: &Vec<u64>, step: u64| h.iter().filter(|&&s| s + window > step).count() as u32;
    let mut placed = Vec::new();
    let mut cursor = 0;
    let mut peak = 0;
    for (i, (writes, reads)) in stream.iter().enumerate() {
        let step = i as u64 + 1;
        for _ in 0..*writes {
            let g = match policy {
                Policy::Greedy => (0..groups).min_by_key(|&g| (freq(&history[g], step), g)).unwrap(),
                Policy::RoundRobin => {
                    let g = cursor % groups;
                    cursor += 1;
                    g
                }
                Policy::Random => rng.gen_range(0..groups),
            };
            history[g].push(step);
            placed.push(g);
        }
        for &t in reads {
            history[placed[t]].push(step);
        }
        for h in &history {
            peak = peak.max(freq(h, step));
        }
    }
    peak
}
