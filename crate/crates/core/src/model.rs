use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("model: {0}")]
pub struct ModelError(pub String);

/// Transformer shape used for FLOP and byte accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub layers: u32,
    pub d_model: u64,
    pub heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    /// Weight matrices in each FFN block (2 for a plain MLP, 3 for gated).
    pub ffn_matrices: u64,
    pub element_bytes: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("layers", u64::from(self.layers)),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("ffn_matrices", self.ffn_matrices),
            ("element_bytes", self.element_bytes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError(format!("{name} must be positive")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(ModelError("heads must be a multiple of kv_heads".into()));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> u64 {
        self.heads * self.head_dim
    }

    pub fn kv_dim(&self) -> u64 {
        self.kv_heads * self.head_dim
    }

    pub fn qkv_params_per_layer(&self) -> u64 {
        self.d_model * (self.q_dim() + 2 * self.kv_dim())
    }

    /// Output projection plus FFN.
    pub fn post_params_per_layer(&self) -> u64 {
        self.q_dim() * self.d_model + self.ffn_matrices * self.d_model * self.ffn_dim
    }

    pub fn weight_bytes(&self) -> u64 {
        u64::from(self.layers) * (self.qkv_params_per_layer() + self.post_params_per_layer()) * self.element_bytes
    }

    /// Key plus value bytes of one token in one layer.
    pub fn kv_bytes_per_token_layer(&self) -> u64 {
        2 * self.kv_dim() * self.element_bytes
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        u64::from(self.layers) * self.kv_bytes_per_token_layer()
    }

    /// Score and weighted-sum FLOPs of one token in one layer across all query heads.
    pub fn attention_flops_per_token_layer(&self) -> u64 {
        4 * self.q_dim()
    }

    /// Bytes of one head's partial result `(O, m, l)`.
    pub fn partial_bytes(&self) -> u64 {
        (self.head_dim + 2) * self.element_bytes
    }

    pub fn opt_175b() -> Self {
        Self {
            name: "opt-175b".into(),
            layers: 96,
            d_model: 12288,
            heads: 96,
            kv_heads: 96,
            head_dim: 128,
            ffn_dim: 49152,
            ffn_matrices: 2,
            element_bytes: 2,
        }
    }

    pub fn llama3_70b() -> Self {
        Self {
            name: "llama3-70b".into(),
            layers: 80,
            d_model: 8192,
            heads: 64,
            kv_heads: 8,
            head_dim: 128,
            ffn_dim: 28672,
            ffn_matrices: 3,
            element_bytes: 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opt_175b_sizes() {
        let m = ModelSpec::opt_175b();
        m.validate().unwrap();
        assert_eq!(m.kv_bytes_per_token(), 4_718_592);
        let params = m.weight_bytes() / m.element_bytes;
        assert!((params as f64 / 1e9 - 174.0).abs() < 1.0, "{params}");
    }

    #[test]
    fn llama3_70b_params() {
        let m = ModelSpec::llama3_70b();
        m.validate().unwrap();
        let params = m.weight_bytes() / m.element_bytes;
        // Excludes embeddings (~1B).
        assert!((params as f64 / 1e9 - 68.5).abs() < 1.0, "{params}");
        assert_eq!(m.kv_bytes_per_token_layer(), 4096);
    }

    #[test]
    fn rejects_zero_fields() {
        let mut m = ModelSpec::opt_175b();
        m.kv_heads = 0;
        assert!(m.validate().is_err());
        m.kv_heads = 7;
        assert!(m.validate().is_err());
    }
}
