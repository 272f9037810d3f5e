use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::NormMode;

/// Feed-forward hidden width as a multiple of `d_model`.
pub const FF_MULT: usize = 4;

/// Shape of the patch-based encoder.
///
/// Defaults are the desk-scale configuration; [`EncoderConfig::ucr_large`]
/// gives the large classification configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_len: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_prototypes: usize,
    pub dropout: f64,
    pub norm_mode: NormMode,
    pub ema_alpha: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_len: 128,
            channels: 1,
            patch_size: 16,
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            n_prototypes: 4,
            dropout: 0.15,
            norm_mode: NormMode::Proto,
            ema_alpha: 0.05,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// 512 steps, patch 50, width 256, 8 heads, 12 layers.
    pub fn ucr_large(n_prototypes: usize) -> Self {
        EncoderConfig {
            input_len: 512,
            channels: 1,
            patch_size: 50,
            d_model: 256,
            n_heads: 8,
            n_layers: 12,
            n_prototypes,
            dropout: 0.15,
            ..Self::default()
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.input_len.div_ceil(self.patch_size)
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn projection_dim(&self) -> usize {
        self.d_model / 2
    }

    /// LayerNorm pairs held by each normalization site.
    pub fn norm_pairs(&self) -> usize {
        match self.norm_mode {
            NormMode::Plain => 1,
            _ => self.n_prototypes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_len == 0 || self.channels == 0 || self.patch_size == 0 {
            return bad("input_len, channels and patch_size must be positive".into());
        }
        if self.patch_size > self.input_len {
            return bad(format!(
                "patch_size {} exceeds input_len {}",
                self.patch_size, self.input_len
            ));
        }
        if self.d_model < 2 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be positive".into());
        }
        if self.n_prototypes == 0 {
            return bad("n_prototypes must be at least 1".into());
        }
        if self.n_prototypes > self.d_model {
            return bad(format!(
                "n_prototypes {} exceeds d_model {}; orthonormal prototypes need n <= d",
                self.n_prototypes, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha must lie in (0, 1], got {}", self.ema_alpha));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }
}
