use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the meta-model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Depth of the encoder and of the decoder.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_in: usize,
    /// Context patch length; 1 disables patching.
    pub patch_len: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub sigma_min: f64,
    /// Residual-branch dropout rate during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 12,
            n_heads: 4,
            d_ff: 512,
            n_in: 10,
            patch_len: 1,
            n_u: 1,
            n_y: 1,
            sigma_min: 1e-4,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient and locality checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            n_in: 2,
            patch_len: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("model.n_layers and model.d_ff must be positive".into());
        }
        if self.n_in == 0 {
            return bad("model.n_in must be at least 1".into());
        }
        if self.patch_len == 0 {
            return bad("model.patch_len must be at least 1".into());
        }
        if self.n_u == 0 || self.n_y == 0 {
            return bad("model.n_u and model.n_y must be positive".into());
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return bad(format!("model.sigma_min must be positive, got {}", self.sigma_min));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Number of encoder positions for a context of length `m`.
    pub fn patches(&self, m: usize) -> Result<usize> {
        if m == 0 || m % self.patch_len != 0 {
            return Err(Error::Config(format!(
                "context length {m} is not a positive multiple of patch_len {}",
                self.patch_len
            )));
        }
        Ok(m / self.patch_len)
    }

    /// Trainable scalar count, in closed form.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let (nu, ny) = (self.n_u, self.n_y);
        let ln = 2 * d;
        let attn = 4 * d * d + 3 * d;
        let ffn = 2 * d * f + f + d;
        let enc_layer = 2 * ln + attn + ffn;
        let dec_layer = 3 * ln + 2 * attn + ffn;
        let ctx = if self.patch_len > 1 {
            (nu + ny) * d + d * d + d + d * d + d
        } else {
            (nu + ny) * d + d
        };
        let ic = (nu + ny) * d + d;
        let qry = nu * d + d;
        let head = d * 2 * ny + 2 * ny;
        ctx + self.n_layers * (enc_layer + dec_layer) + 2 * ln + ic + qry + head
    }
}
