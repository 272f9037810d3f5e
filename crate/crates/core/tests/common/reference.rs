//! Graph-free forward of the encoder and the pretraining objective, written
//! directly from the model definition. Used as a finite-difference oracle for
//! the tape gradients.
//!
//! Every intermediate stage is cached, so a perturbed parameter only
//! re-evaluates what lies downstream of it.

use std::borrow::Cow;
use std::collections::HashMap;

use protonorm::encoder::{Encoder, Head, FF_MULT};
use protonorm::nn::Module;
use protonorm::norm::NormMode;
use protonorm::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, `0.5 x (1 + tanh(u)) = x / (1 + exp(-2u))`.
fn gelu(x: f64) -> f64 {
    x / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

/// `a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n);
    let mut c = vec![0.0; m * n];
    // SAFETY: the slices are exactly m×k, k×n and m×n, row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Where a re-evaluation starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Embed,
    Block(usize, Part),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Attention,
    Norm1,
    Ff,
    Norm2,
}

#[derive(Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

struct Site {
    /// `(gamma, beta)` parameter slots per LayerNorm pair.
    norms: Vec<(usize, usize)>,
    prototypes: Option<usize>,
    orthogonality: bool,
}

struct BlockIdx {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ff_in: Lin,
    ff_out: Lin,
    norm1: Site,
    norm2: Site,
}

#[derive(Clone, Debug, Default)]
struct BlockTrace {
    x1: Vec<f64>,
    h: Vec<f64>,
    x2: Vec<f64>,
    y: Vec<f64>,
}

/// All intermediate values of one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    embed: Vec<f64>,
    blocks: Vec<BlockTrace>,
    /// Routes per site, block order.
    pub routes: Vec<Vec<usize>>,
    pub loss_nt: f64,
    pub loss_orth: f64,
    pub loss: f64,
}

pub struct Reference {
    pub names: Vec<String>,
    pub params: Vec<Vec<f64>>,
    stages: Vec<Stage>,
    mode: NormMode,
    eps: f64,
    n_heads: usize,
    d: usize,
    t: usize,
    b: usize,
    tokens: Vec<f64>,
    ids: Vec<usize>,
    embed: Lin,
    position: usize,
    blocks: Vec<BlockIdx>,
    proj_hidden: Lin,
    proj_out: Lin,
    temperature: f64,
    lambda: f64,
}

impl Reference {
    /// Objective `nt_xent(head(encoder(views))) + lambda * sum orth` over
    /// `views [2N, C, L]`, without dropout.
    pub fn new(enc: &Encoder, views: &Tensor, ids: &[usize], temperature: f64, lambda: f64) -> Self {
        let cfg = enc.config().clone();
        let mut names = Vec::new();
        let mut params = Vec::new();
        enc.visit(&mut |p| {
            names.push(p.name.clone());
            params.push(p.value.data().to_vec());
        });
        let index: HashMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        let lin = |name: &str, fan_in: usize, fan_out: usize| Lin {
            w: index[&format!("{name}.weight")],
            b: index[&format!("{name}.bias")],
            fan_in,
            fan_out,
        };
        let d = cfg.d_model;
        let sites: Vec<_> = enc.sites().collect();
        let site = |name: &str, s: usize| Site {
            norms: (0..sites[s].norms.len())
                .map(|j| {
                    (
                        index[&format!("{name}.norm{j}.gamma")],
                        index[&format!("{name}.norm{j}.beta")],
                    )
                })
                .collect(),
            prototypes: index.get(&format!("{name}.prototypes")).copied(),
            orthogonality: cfg.norm_mode == NormMode::Proto && !sites[s].bank.frozen,
        };
        let blocks = (0..cfg.n_layers)
            .map(|k| {
                let n = format!("blocks.{k}");
                BlockIdx {
                    q: lin(&format!("{n}.attention.query"), d, d),
                    k: lin(&format!("{n}.attention.key"), d, d),
                    v: lin(&format!("{n}.attention.value"), d, d),
                    o: lin(&format!("{n}.attention.out"), d, d),
                    ff_in: lin(&format!("{n}.ff_in"), d, FF_MULT * d),
                    ff_out: lin(&format!("{n}.ff_out"), FF_MULT * d, d),
                    norm1: site(&format!("{n}.norm1"), 2 * k),
                    norm2: site(&format!("{n}.norm2"), 2 * k + 1),
                }
            })
            .collect();
        assert!(matches!(enc.head, Head::Projection { .. }), "reference needs the projection head");
        let stages = names
            .iter()
            .map(|n| {
                let parts: Vec<&str> = n.split('.').collect();
                match parts[0] {
                    "patch_embed" | "position" => Stage::Embed,
                    "projection" => Stage::Head,
                    "blocks" => {
                        let k: usize = parts[1].parse().expect("block index");
                        let part = match parts[2] {
                            "attention" => Part::Attention,
                            "norm1" => Part::Norm1,
                            "ff_in" | "ff_out" => Part::Ff,
                            "norm2" => Part::Norm2,
                            other => panic!("unknown block part {other}"),
                        };
                        Stage::Block(k, part)
                    }
                    other => panic!("unknown parameter {other}"),
                }
            })
            .collect();

        let (b, c, l) = (views.shape()[0], views.shape()[1], views.shape()[2]);
        let p = cfg.patch_size;
        let t = l.div_ceil(p);
        let mut tokens = vec![0.0; b * t * c * p];
        for s in 0..b {
            for ch in 0..c {
                for i in 0..l {
                    let (tok, off) = (i / p, i % p);
                    tokens[(s * t + tok) * c * p + ch * p + off] = views.data()[(s * c + ch) * l + i];
                }
            }
        }
        Reference {
            stages,
            mode: cfg.norm_mode,
            eps: cfg.ln_eps,
            n_heads: cfg.n_heads,
            d,
            t,
            b,
            tokens,
            ids: ids.to_vec(),
            embed: lin("patch_embed", c * p, d),
            position: index["position"],
            blocks,
            proj_hidden: lin("projection.hidden", d, d),
            proj_out: lin("projection.out", d, d / 2),
            temperature,
            lambda,
            names,
            params,
        }
    }

    fn linear(&self, x: &[f64], rows: usize, l: Lin) -> Vec<f64> {
        let mut y = gemm(x, &self.params[l.w], rows, l.fan_in, l.fan_out);
        let bias = &self.params[l.b];
        for row in y.chunks_mut(l.fan_out) {
            row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        y
    }

    fn attention(&self, x: &[f64], blk: &BlockIdx) -> Vec<f64> {
        let (t, d, h) = (self.t, self.d, self.n_heads);
        let dh = d / h;
        let rows = self.b * t;
        let q = self.linear(x, rows, blk.q);
        let k = self.linear(x, rows, blk.k);
        let v = self.linear(x, rows, blk.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = vec![0.0; rows * d];
        let mut w = vec![0.0; t];
        for s in 0..self.b {
            for head in 0..h {
                let col = head * dh;
                for i in 0..t {
                    let qi = &q[(s * t + i) * d + col..][..dh];
                    for (j, wj) in w.iter_mut().enumerate() {
                        let kj = &k[(s * t + j) * d + col..][..dh];
                        *wj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    w.iter_mut().for_each(|x| *x = (*x - m).exp());
                    let z: f64 = w.iter().sum();
                    let out = &mut ctx[(s * t + i) * d + col..][..dh];
                    for (j, &wj) in w.iter().enumerate() {
                        let vj = &v[(s * t + j) * d + col..][..dh];
                        out.iter_mut().zip(vj).for_each(|(o, x)| *o += wj / z * x);
                    }
                }
            }
        }
        self.linear(&ctx, rows, blk.o)
    }

    fn route(&self, site: &Site, x: &[f64]) -> Vec<usize> {
        let (t, d) = (self.t, self.d);
        (0..self.b)
            .map(|s| match self.mode {
                NormMode::Plain => 0,
                NormMode::Dataset => self.ids[s],
                NormMode::Proto => {
                    let mut f = vec![0.0; d];
                    for tok in 0..t {
                        f.iter_mut().zip(&x[(s * t + tok) * d..][..d]).for_each(|(a, v)| *a += v);
                    }
                    f.iter_mut().for_each(|a| *a /= t as f64);
                    let protos = &self.params[site.prototypes.expect("proto mode has prototypes")];
                    let mut best = (f64::INFINITY, 0);
                    for (p, row) in protos.chunks(d).enumerate() {
                        let dist: f64 = row.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
                        if dist < best.0 {
                            best = (dist, p);
                        }
                    }
                    best.1
                }
            })
            .collect()
    }

    fn norm(&self, site: &Site, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let (t, d) = (self.t, self.d);
        let routes = self.route(site, x);
        let mut y = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks(d).zip(y.chunks_mut(d)).enumerate() {
            let (gamma, beta) = site.norms[routes[r / t]];
            let (gamma, beta) = (&self.params[gamma], &self.params[beta]);
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let sd = (var + self.eps).sqrt();
            for i in 0..d {
                yr[i] = gamma[i] * ((xr[i] - mu) / sd) + beta[i];
            }
        }
        (y, routes)
    }

    fn orthogonality(&self) -> f64 {
        let d = self.d;
        let mut total = 0.0;
        for site in self.blocks.iter().flat_map(|b| [&b.norm1, &b.norm2]) {
            if !site.orthogonality {
                continue;
            }
            let p = &self.params[site.prototypes.expect("proto mode has prototypes")];
            let n = p.len() / d;
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = p[i * d..][..d].iter().zip(&p[j * d..][..d]).map(|(a, b)| a * b).sum();
                    let e = dot - if i == j { 1.0 } else { 0.0 };
                    total += e * e;
                }
            }
        }
        total
    }

    fn nt_xent(&self, z: &[f64], dim: usize) -> f64 {
        let two_n = self.b;
        let n = two_n / 2;
        let unit: Vec<Vec<f64>> = z
            .chunks(dim)
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..two_n {
            let sims: Vec<(usize, f64)> = (0..two_n)
                .filter(|&j| j != i)
                .map(|j| (j, unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / self.temperature))
                .collect();
            let m = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + sims.iter().map(|s| (s.1 - m).exp()).sum::<f64>().ln();
            let pos = sims.iter().find(|s| s.0 == (i + n) % two_n).expect("positive pair").1;
            total += lse - pos;
        }
        total / two_n as f64
    }

    /// Full evaluation, keeping every stage.
    pub fn evaluate(&self) -> Trace {
        self.run(Stage::Embed, None, true)
    }

    /// Re-evaluates from `start`, borrowing earlier stages from `base`. Stage
    /// values are kept only when `keep` is set.
    pub fn run(&self, start: Stage, base: Option<&Trace>, keep: bool) -> Trace {
        let (t, d) = (self.t, self.d);
        let rows = self.b * t;
        let n_blocks = self.blocks.len();
        let cached = |f: &dyn Fn(&Trace) -> &Vec<f64>| -> Cow<'_, [f64]> {
            Cow::Borrowed(f(base.expect("a partial run needs a base trace")))
        };
        let mut tr = Trace {
            routes: base.map_or_else(|| vec![Vec::new(); 2 * n_blocks], |b| b.routes.clone()),
            ..Trace::default()
        };
        let mut x: Cow<'_, [f64]> = match start {
            Stage::Embed => {
                let mut x = self.linear(&self.tokens, rows, self.embed);
                let pos = &self.params[self.position];
                for row in x.chunks_mut(t * d) {
                    row.iter_mut().zip(pos).for_each(|(a, p)| *a += p);
                }
                if keep {
                    tr.embed = x.clone();
                }
                Cow::Owned(x)
            }
            Stage::Block(0, _) => cached(&|b| &b.embed),
            Stage::Block(j, _) => cached(&|b| &b.blocks[j - 1].y),
            Stage::Head => cached(&|b| &b.blocks[n_blocks - 1].y),
        };
        for (k, blk) in self.blocks.iter().enumerate() {
            let from = match start {
                Stage::Embed => Part::Attention,
                Stage::Block(j, p) if j == k => p,
                Stage::Block(j, _) if j < k => Part::Attention,
                _ => continue,
            };
            let x1: Cow<'_, [f64]> = if from <= Part::Attention {
                let a = self.attention(&x, blk);
                Cow::Owned(x.iter().zip(&a).map(|(x, a)| x + a).collect())
            } else {
                cached(&|b| &b.blocks[k].x1)
            };
            let h: Cow<'_, [f64]> = if from <= Part::Norm1 {
                let (h, r) = self.norm(&blk.norm1, &x1);
                tr.routes[2 * k] = r;
                Cow::Owned(h)
            } else {
                cached(&|b| &b.blocks[k].h)
            };
            let x2: Cow<'_, [f64]> = if from <= Part::Ff {
                let mut f = self.linear(&h, rows, blk.ff_in);
                f.iter_mut().for_each(|v| *v = gelu(*v));
                let f = self.linear(&f, rows, blk.ff_out);
                Cow::Owned(h.iter().zip(&f).map(|(x, f)| x + f).collect())
            } else {
                cached(&|b| &b.blocks[k].x2)
            };
            let (y, r) = self.norm(&blk.norm2, &x2);
            tr.routes[2 * k + 1] = r;
            if keep {
                tr.blocks.push(BlockTrace {
                    x1: x1.into_owned(),
                    h: h.into_owned(),
                    x2: x2.into_owned(),
                    y: y.clone(),
                });
            }
            x = Cow::Owned(y);
        }
        let mut pooled = vec![0.0; self.b * d];
        for (s, p) in pooled.chunks_mut(d).enumerate() {
            for tok in 0..t {
                p.iter_mut().zip(&x[(s * t + tok) * d..][..d]).for_each(|(a, v)| *a += v);
            }
            p.iter_mut().for_each(|a| *a /= t as f64);
        }
        let mut hid = self.linear(&pooled, self.b, self.proj_hidden);
        hid.iter_mut().for_each(|v| *v = gelu(*v));
        let z = self.linear(&hid, self.b, self.proj_out);
        tr.loss_nt = self.nt_xent(&z, self.proj_out.fan_out);
        tr.loss_orth = self.orthogonality();
        tr.loss = tr.loss_nt + self.lambda * tr.loss_orth;
        tr
    }

    /// Central differences of the objective over every entry of every
    /// parameter, plus the number of perturbations that changed any route.
    pub fn numeric_gradient(&mut self, h: f64) -> (Vec<Vec<f64>>, usize) {
        let base = self.evaluate();
        let mut flips = 0;
        let mut grads = Vec::with_capacity(self.params.len());
        for pid in 0..self.params.len() {
            let stage = self.stages[pid];
            let mut grad = vec![0.0; self.params[pid].len()];
            for (i, slot) in grad.iter_mut().enumerate() {
                let orig = self.params[pid][i];
                self.params[pid][i] = orig + h;
                let up = self.run(stage, Some(&base), false);
                self.params[pid][i] = orig - h;
                let down = self.run(stage, Some(&base), false);
                self.params[pid][i] = orig;
                flips += (up.routes != base.routes) as usize + (down.routes != base.routes) as usize;
                *slot = (up.loss - down.loss) / (2.0 * h);
            }
            grads.push(grad);
        }
        (grads, flips)
    }
}
