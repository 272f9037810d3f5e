use super::config::{EncoderConfig, FF_MULT};
use crate::norm::NormMode;

/// Head attached to the encoder when counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Projection,
    Classifier(usize),
}

/// Closed-form parameter count of an encoder built from `cfg` with `head`.
pub fn count_parameters(cfg: &EncoderConfig, head: HeadKind) -> usize {
    let d = cfg.d_model;
    let embed = cfg.patch_width() * d + d + cfg.n_tokens() * d;
    let attention = 4 * (d * d + d);
    let ff = d * FF_MULT * d + FF_MULT * d + FF_MULT * d * d + d;
    let norms_per_site = cfg.norm_pairs() * 2 * d;
    let prototypes_per_site = if cfg.norm_mode == NormMode::Proto {
        cfg.n_prototypes * d
    } else {
        0
    };
    let block = attention + ff + 2 * (norms_per_site + prototypes_per_site);
    embed + cfg.n_layers * block + head_parameters(cfg, head)
}

fn head_parameters(cfg: &EncoderConfig, head: HeadKind) -> usize {
    let d = cfg.d_model;
    match head {
        HeadKind::None => 0,
        HeadKind::Projection => d * d + d + d * cfg.projection_dim() + cfg.projection_dim(),
        HeadKind::Classifier(c) => d * c + c,
    }
}

/// Per-sample forward multiply-accumulate counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    /// Patch embedding, attention and feed-forward matmuls.
    pub encoder_matmul: u64,
    /// `gamma * xhat` products, one per token feature per site.
    pub norm_affine: u64,
    pub head: u64,
    /// Prototype distance evaluation, `n * d` per site in prototype mode.
    pub gating_distance: u64,
}

impl MacCount {
    /// Work that does not depend on the prototype count.
    pub fn core(&self) -> u64 {
        self.encoder_matmul + self.norm_affine
    }

    pub fn total(&self) -> u64 {
        self.core() + self.head + self.gating_distance
    }
}

pub fn count_forward_macs(cfg: &EncoderConfig, head: HeadKind) -> MacCount {
    let (t, d) = (cfg.n_tokens() as u64, cfg.d_model as u64);
    let l = cfg.n_layers as u64;
    let embed = t * cfg.patch_width() as u64 * d;
    let projections = 4 * t * d * d;
    let attention = 2 * t * t * d;
    let ff = 2 * t * d * FF_MULT as u64 * d;
    let sites = 2 * l;
    let head = match head {
        HeadKind::None => 0,
        HeadKind::Projection => d * d + d * cfg.projection_dim() as u64,
        HeadKind::Classifier(c) => d * c as u64,
    };
    let gating_distance = if cfg.norm_mode == NormMode::Proto {
        sites * cfg.n_prototypes as u64 * d
    } else {
        0
    };
    MacCount {
        encoder_matmul: embed + l * (projections + attention + ff),
        norm_affine: sites * t * d,
        head,
        gating_distance,
    }
}
