//! Synthetic attention-score process with context locality.
//!
//! Token `i` of a context of length `n` scores
//! `a * exp(-(n - 1 - i) / tau) + b * [i persistent] + noise * u`, `u ~ U[0, 1)`.
//! The persistent set holds `round(fraction * n)` positions; each member is
//! replaced by a random non-member with probability `drift_rate` per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::sparsity::{overlap_fraction, select_active_into};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityModel {
    /// Recency decay constant `tau`, in tokens.
    pub recency_decay: f64,
    pub persistent_fraction: f64,
    pub drift_rate: f64,
    pub noise_scale: f64,
    #[serde(default = "one")]
    pub recency_weight: f64,
    #[serde(default = "one")]
    pub persistent_weight: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for LocalityModel {
    fn default() -> Self {
        Self {
            recency_decay: 50.0,
            persistent_fraction: 0.08,
            drift_rate: 0.01,
            noise_scale: 0.1,
            recency_weight: 1.0,
            persistent_weight: 1.0,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("locality model: {0}")]
pub struct LocalityError(pub String);

impl LocalityModel {
    pub fn validate(&self) -> Result<(), LocalityError> {
        if !(self.recency_decay > 0.0 && self.recency_decay.is_finite()) {
            return Err(LocalityError("recency_decay must be positive".into()));
        }
        for (name, v) in [
            ("persistent_fraction", self.persistent_fraction),
            ("drift_rate", self.drift_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LocalityError(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("recency_weight", self.recency_weight),
            ("persistent_weight", self.persistent_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LocalityError(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }

    /// Recency term alone; the importance of a token before any score exists.
    #[inline]
    pub fn recency(&self, age: u64) -> f64 {
        self.recency_weight * (-(age as f64) / self.recency_decay).exp()
    }
}

/// Score state of one request's context.
#[derive(Debug, Clone)]
pub struct LocalityProcess {
    model: LocalityModel,
    rng: ChaCha8Rng,
    members: Vec<u32>,
    is_member: Vec<bool>,
    steps: u64,
}

impl LocalityProcess {
    pub fn new(model: LocalityModel, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        rng.set_stream(stream);
        Self {
            model,
            rng,
            members: Vec::new(),
            is_member: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn persistent_set(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.members.iter().map(|&m| m as usize).collect();
        v.sort_unstable();
        v
    }

    fn random_non_member(&mut self, n: usize) -> Option<u32> {
        for _ in 0..64 {
            let p = self.rng.gen_range(0..n);
            if !self.is_member[p] {
                return Some(p as u32);
            }
        }
        None
    }

    fn evolve(&mut self, n: usize) {
        if self.is_member.len() < n {
            self.is_member.resize(n, false);
        }
        let target = (self.model.persistent_fraction * n as f64).round() as usize;
        while self.members.len() < target {
            match self.random_non_member(n) {
                Some(p) => {
                    self.is_member[p as usize] = true;
                    self.members.push(p);
                }
                None => break,
            }
        }
        if self.model.drift_rate > 0.0 {
            for k in 0..self.members.len() {
                if self.rng.gen::<f64>() < self.model.drift_rate {
                    if let Some(p) = self.random_non_member(n) {
                        self.is_member[self.members[k] as usize] = false;
                        self.is_member[p as usize] = true;
                        self.members[k] = p;
                    }
                }
            }
        }
    }

    /// Advances one step for a context of `n` tokens and writes its scores.
    /// `n` must not shrink between calls.
    pub fn next_scores(&mut self, n: usize, out: &mut Vec<f64>) {
        out.clear();
        if n == 0 {
            self.steps += 1;
            return;
        }
        self.evolve(n);
        let m = &self.model;
        let decay = (-1.0 / m.recency_decay).exp();
        out.resize(n, 0.0);
        let mut r = m.recency_weight;
        for i in (0..n).rev() {
            out[i] = r;
            r *= decay;
        }
        let noise = m.noise_scale;
        for (i, s) in out.iter_mut().enumerate() {
            if self.is_member[i] {
                *s += m.persistent_weight;
            }
            if noise > 0.0 {
                *s += noise * self.rng.gen::<f64>();
            }
        }
        self.steps += 1;
    }
}

/// Scores at step `j` (zero-based) of a fresh process over `n` tokens.
pub fn synth_scores(model: &LocalityModel, j: u64, n: usize) -> Vec<f64> {
    let mut p = LocalityProcess::new(*model, 0);
    let mut out = Vec::new();
    for _ in 0..=j {
        p.next_scores(n, &mut out);
    }
    out
}

/// Adjacent-step locality statistic of a score process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityCalibration {
    pub context: usize,
    pub steps: usize,
    pub top_fraction: f64,
    pub mean_overlap: f64,
    pub min_overlap: f64,
}

/// Mean overlap between the top-`top_fraction` sets of adjacent steps, for a
/// context that starts at `context` tokens and grows by one per step.
pub fn measure_locality(model: &LocalityModel, context: usize, steps: usize, top_fraction: f64) -> LocalityCalibration {
    let mut p = LocalityProcess::new(*model, 0);
    let (mut scores, mut prev, mut cur) = (Vec::new(), Vec::new(), Vec::new());
    let (mut sum, mut min) = (0.0, f64::INFINITY);
    for s in 0..=steps {
        p.next_scores(context + s, &mut scores);
        select_active_into(&scores, 1.0 / top_fraction, &mut cur);
        if s > 0 {
            let o = overlap_fraction(&prev, &cur);
            sum += o;
            min = min.min(o);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    LocalityCalibration {
        context,
        steps,
        top_fraction,
        mean_overlap: if steps == 0 { 1.0 } else { sum / steps as f64 },
        min_overlap: if steps == 0 { 1.0 } else { min },
    }
}
