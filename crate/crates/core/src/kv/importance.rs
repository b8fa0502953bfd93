use thiserror::Error;

use super::KvTokenMeta;

/// Default EMA weight given to the newest score.
pub const DEFAULT_LAMBDA: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImportanceError {
    #[error("scores must be nonnegative (S = {score}, I_prev = {previous})")]
    NegativeInput { score: f64, previous: f64 },
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
}

/// `lambda * score + (1 - lambda) * previous`.
pub fn update_importance(score: f64, previous: f64, lambda: f64) -> Result<f64, ImportanceError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ImportanceError::LambdaOutOfRange(lambda));
    }
    if !(score >= 0.0 && previous >= 0.0) {
        return Err(ImportanceError::NegativeInput { score, previous });
    }
    Ok(ema(score, previous, lambda))
}

/// Unchecked form of [`update_importance`] for hot loops with validated inputs.
#[inline]
pub fn ema(score: f64, previous: f64, lambda: f64) -> f64 {
    lambda * score + (1.0 - lambda) * previous
}

/// Mean importance of the tokens on one tier; 0 for an empty tier.
pub fn device_importance(tokens: &[KvTokenMeta]) -> f64 {
    mean_or_zero(tokens.iter().map(|t| t.importance).sum(), tokens.len())
}

#[inline]
pub fn mean_or_zero(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
