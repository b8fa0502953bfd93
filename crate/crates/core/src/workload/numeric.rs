//! Ground-truth attention scores from small synthetic embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{softmax_stats, AttentionError, AttentionOptions, KvBlock, QueryVector};

/// True attention weights `softmax(q K^T / sqrt(d))`.
pub fn numeric_scores(q: &QueryVector, keys: &KvBlock) -> Result<Vec<f64>, AttentionError> {
    if q.dim() != keys.dim() {
        return Err(AttentionError::DimensionMismatch {
            expected: q.dim(),
            found: keys.dim(),
        });
    }
    let scale = AttentionOptions::default().score_scale(q.dim());
    let s: Vec<f64> = (0..keys.len())
        .map(|r| scale * q.as_slice().iter().zip(keys.key(r)).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(softmax_stats(&s)?.1)
}

/// Correlated embedding sequences: each new vector is
/// `rho * previous + sqrt(1 - rho^2) * noise`, so neighbouring tokens and
/// neighbouring queries resemble each other.
#[derive(Debug, Clone)]
pub struct RandomWalkEmbeddings {
    dim: usize,
    rho: f64,
    rng: ChaCha8Rng,
    key: Vec<f64>,
    query: Vec<f64>,
}

impl RandomWalkEmbeddings {
    pub fn new(dim: usize, rho: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let init = |rng: &mut ChaCha8Rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        let key = init(&mut rng);
        let query = init(&mut rng);
        Self {
            dim,
            rho: rho.clamp(0.0, 1.0),
            rng,
            key,
            query,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn step(rng: &mut ChaCha8Rng, rho: f64, state: &mut [f64]) {
        let k = (1.0 - rho * rho).sqrt();
        for x in state.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = rho * *x + k * z;
        }
    }

    /// Key and value rows for the next token.
    pub fn next_kv(&mut self) -> (Vec<f64>, Vec<f64>) {
        Self::step(&mut self.rng, self.rho, &mut self.key);
        let value: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        (self.key.clone(), value)
    }

    pub fn next_query(&mut self) -> QueryVector {
        Self::step(&mut self.rng, self.rho, &mut self.query);
        QueryVector::new(self.query.clone()).expect("finite nonempty query")
    }
}
