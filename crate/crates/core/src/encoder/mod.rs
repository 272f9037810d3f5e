//! Patch-based Transformer encoder whose normalization sites are
//! [`ProtoNormLayer`]s.
//!
//! Each block is post-norm: `h = Norm1(x + Attn(x))`, `y = Norm2(h + FF(h))`.
//! The sample representation is the mean over tokens of the final block
//! output, followed by a projection head during pretraining or a linear
//! classifier afterwards.

mod complexity;
mod config;
mod patch;

pub use complexity::{count_forward_macs, count_parameters, HeadKind, MacCount};
pub use config::{EncoderConfig, FF_MULT};
pub use patch::{patchify, patchify_batch, unpatchify};

use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};
use crate::norm::{EmaOutcome, NormMode, ProtoNormLayer, Routing};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// Which phase a forward pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Contrastive pretraining: dropout on, projection head.
    Pretrain,
    /// Contrastive validation: dropout off, projection head.
    Validate,
    /// Supervised training: dropout on, classifier head.
    Finetune,
    /// Inference: dropout off, classifier head.
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        matches!(self, Phase::Pretrain | Phase::Finetune)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    fn new(name: &str, d: usize, n_heads: usize, seed: u64) -> Self {
        MultiHeadAttention {
            query: Linear::new(&format!("{name}.query"), d, d, seed),
            key: Linear::new(&format!("{name}.key"), d, d, seed),
            value: Linear::new(&format!("{name}.value"), d, d, seed),
            out: Linear::new(&format!("{name}.out"), d, d, seed),
            n_heads,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, dropout: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        let (b, t, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let h = self.n_heads;
        let dh = d / h;
        let split = |g: &mut Graph, v: Var, perm: &[usize]| -> Result<Var> {
            let r = g.reshape(v, &[b, t, h, dh])?;
            g.permute(r, perm)
        };
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let q = split(g, q, &[0, 2, 1, 3])?;
        let kt = split(g, k, &[0, 2, 3, 1])?;
        let v = split(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores, -1)?;
        let att = g.dropout(att, dropout, train, rng);
        let ctx = g.matmul(att, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.out.forward(g, ctx)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attention: MultiHeadAttention,
    pub norm1: ProtoNormLayer,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: ProtoNormLayer,
}

impl Block {
    fn new(name: &str, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let site = |s: &str| {
            ProtoNormLayer::new(
                &format!("{name}.{s}"),
                d,
                cfg.n_prototypes,
                cfg.norm_mode,
                cfg.ln_eps,
                cfg.ema_alpha,
                seed,
            )
        };
        Ok(Block {
            attention: MultiHeadAttention::new(&format!("{name}.attention"), d, cfg.n_heads, seed),
            norm1: site("norm1")?,
            ff_in: Linear::new(&format!("{name}.ff_in"), d, FF_MULT * d, seed),
            ff_out: Linear::new(&format!("{name}.ff_out"), FF_MULT * d, d, seed),
            norm2: site("norm2")?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
        routings: &mut Vec<Routing>,
        site_outputs: &mut Vec<Var>,
    ) -> Result<Var> {
        let a = self.attention.forward(g, x, ctx.dropout, ctx.train, ctx.rng)?;
        let a = g.dropout(a, ctx.dropout, ctx.train, ctx.rng);
        let x1 = g.add(x, a)?;
        let (h, r1) = self.norm1.forward(g, x1, ctx.dataset_ids)?;
        let f = self.ff_in.forward(g, h)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f)?;
        let f = g.dropout(f, ctx.dropout, ctx.train, ctx.rng);
        let x2 = g.add(h, f)?;
        let (y, r2) = self.norm2.forward(g, x2, ctx.dataset_ids)?;
        routings.push(r1);
        routings.push(r2);
        site_outputs.push(h);
        site_outputs.push(y);
        Ok(y)
    }
}

impl Module for Block {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.attention.visit(f);
        self.norm1.visit(f);
        self.ff_in.visit(f);
        self.ff_out.visit(f);
        self.norm2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attention.visit_mut(f);
        self.norm1.visit_mut(f);
        self.ff_in.visit_mut(f);
        self.ff_out.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// Output head attached after pooling.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// `d -> d -> d/2` MLP for the contrastive objective.
    Projection { hidden: Linear, out: Linear },
    /// `d -> n_classes`.
    Classifier(Linear),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Projection { .. } => HeadKind::Projection,
            Head::Classifier(l) => HeadKind::Classifier(l.fan_out()),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Head::Projection { hidden, out } => {
                let h = hidden.forward(g, x)?;
                let h = g.gelu(h);
                out.forward(g, h)
            }
            Head::Classifier(l) => l.forward(g, x),
        }
    }
}

impl Module for Head {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Head::Projection { hidden, out } => {
                hidden.visit(f);
                out.visit(f);
            }
            Head::Classifier(l) => l.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Head::Projection { hidden, out } => {
                hidden.visit_mut(f);
                out.visit_mut(f);
            }
            Head::Classifier(l) => l.visit_mut(f),
        }
    }
}

struct ForwardCtx<'a> {
    train: bool,
    dropout: f64,
    dataset_ids: Option<&'a [usize]>,
    rng: &'a mut Rng,
}

/// Result of one encoder pass.
#[derive(Debug)]
pub struct EncodeOutput {
    /// Token-averaged final block output, `[B, d_model]`.
    pub pooled: Var,
    /// Head output: projections `[B, d/2]` or logits `[B, n_classes]`.
    pub output: Var,
    /// One routing per normalization site, in block order (norm1, norm2, ...).
    pub routings: Vec<Routing>,
    /// Output of each normalization site, `[B, T, d_model]`, same order.
    pub site_outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    seed: u64,
    pub patch_embed: Linear,
    /// Learned per-token position embedding, `[T, d_model]`.
    pub position: Param,
    pub blocks: Vec<Block>,
    pub head: Head,
}

impl Encoder {
    /// Fresh encoder with a projection head. All initial values derive from `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(&format!("blocks.{i}"), &cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        let mut pos_rng = rng::stream(seed, "position");
        let mut enc = Encoder {
            patch_embed: Linear::new("patch_embed", cfg.patch_width(), d, seed),
            position: Param::new("position", Tensor::randn(&[cfg.n_tokens(), d], 0.02, &mut pos_rng)),
            blocks,
            head: Head::Projection {
                hidden: Linear::new("projection.hidden", d, d, seed),
                out: Linear::new("projection.out", d, cfg.projection_dim(), seed),
            },
            cfg,
            seed,
        };
        enc.assign_ids();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Drops the projection head and attaches a freshly initialized linear classifier.
    pub fn attach_classifier(&mut self, n_classes: usize) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        self.head = Head::Classifier(Linear::new("classifier", self.cfg.d_model, n_classes, self.seed));
        self.assign_ids();
        Ok(())
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.head {
            Head::Classifier(l) => Some(l.fan_out()),
            Head::Projection { .. } => None,
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = &ProtoNormLayer> {
        self.blocks.iter().flat_map(|b| [&b.norm1, &b.norm2])
    }

    pub fn sites_mut(&mut self) -> impl Iterator<Item = &mut ProtoNormLayer> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.norm1, &mut b.norm2])
    }

    pub fn set_prototypes_frozen(&mut self, frozen: bool) {
        for s in self.sites_mut() {
            s.bank.frozen = frozen;
        }
    }

    pub fn prototypes_frozen(&self) -> bool {
        self.sites().all(|s| s.bank.frozen)
    }

    /// Runs `batch [B, C, L]` through the encoder and the head matching `phase`.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        dataset_ids: Option<&[usize]>,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<EncodeOutput> {
        match (phase, &self.head) {
            (Phase::Pretrain | Phase::Validate, Head::Projection { .. }) => {}
            (Phase::Finetune | Phase::Eval, Head::Classifier(_)) => {}
            (p, h) => {
                return Err(Error::Contract(format!(
                    "{p:?} phase cannot use the {:?} head",
                    h.kind()
                )))
            }
        }
        let s = batch.shape();
        if s.len() != 3 || s[1] != self.cfg.channels || s[2] != self.cfg.input_len {
            return Err(Error::shape(
                "encode",
                s,
                &[0, self.cfg.channels, self.cfg.input_len],
            ));
        }
        if self.cfg.norm_mode == NormMode::Dataset && dataset_ids.is_none() {
            return Err(Error::Contract(
                "dataset-indexed normalization needs dataset ids".into(),
            ));
        }
        let b = s[0];
        let mut ctx = ForwardCtx {
            train: phase.is_train(),
            dropout: self.cfg.dropout,
            dataset_ids,
            rng,
        };
        let tokens = g.constant(patchify_batch(batch, self.cfg.patch_size)?);
        let x = self.patch_embed.forward(g, tokens)?;
        let pos = self.position.bind(g);
        let x = g.add(x, pos)?;
        let mut x = g.dropout(x, ctx.dropout, ctx.train, ctx.rng);
        let mut routings = Vec::with_capacity(2 * self.blocks.len());
        let mut site_outputs = Vec::with_capacity(2 * self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, x, &mut ctx, &mut routings, &mut site_outputs)?;
        }
        let pooled = g.mean(x, 1)?;
        let pooled = g.reshape(pooled, &[b, self.cfg.d_model])?;
        let output = self.head.forward(g, pooled)?;
        Ok(EncodeOutput {
            pooled,
            output,
            routings,
            site_outputs,
        })
    }

    /// Feeds training-time routings to every site (counts and EMA queue).
    pub fn record_routings(&mut self, routings: &[Routing]) -> Result<()> {
        let n_sites = 2 * self.blocks.len();
        if routings.len() % n_sites != 0 {
            return Err(Error::Contract(format!(
                "{} routings do not cover {n_sites} sites",
                routings.len()
            )));
        }
        for chunk in routings.chunks(n_sites) {
            for (site, r) in self.sites_mut().zip(chunk) {
                site.record(r);
            }
        }
        Ok(())
    }

    /// Applies queued EMA updates on every site.
    pub fn apply_ema(&mut self) -> Vec<EmaOutcome> {
        self.sites_mut().map(|s| s.apply_ema()).collect()
    }

    /// `||P Pᵀ - I||²_F` for every site whose prototypes are trainable
    /// (prototype mode, bank not frozen).
    pub fn orthogonality_losses(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.sites()
            .filter(|s| s.prototypes_are_parameters() && !s.bank.frozen)
            .map(|s| {
                let p = s.bank.prototypes.bind(g);
                crate::norm::orthogonality_loss(g, p)
            })
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.patch_embed.visit(f);
        f(&self.position);
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.position);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
