use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{Graph, Tensor, Var};

/// Result of an EMA refresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaOutcome {
    /// Number of prototypes that moved.
    Applied(usize),
    /// The bank is frozen; nothing changed.
    SkippedFrozen,
}

/// `n` prototype rows of width `d` plus EMA bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[n, d]`, one prototype per row.
    pub prototypes: Param,
    pub ema_alpha: f64,
    pub frozen: bool,
    /// Training-time routing counts, for diagnostics only.
    pub assignment_counts: Vec<u64>,
    pending: Vec<(Vec<f64>, u64)>,
}

impl PrototypeBank {
    /// Bank with orthonormal rows drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(name: &str, n: usize, d: usize, ema_alpha: f64, rng: &mut R) -> Result<Self> {
        Self::from_matrix(name, init_orthogonal(n, d, rng)?, ema_alpha)
    }

    pub fn from_matrix(name: &str, prototypes: Tensor, ema_alpha: f64) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.shape()[0] == 0 {
            return Err(Error::Config(format!(
                "prototype matrix must be [n >= 1, d], got {:?}",
                prototypes.shape()
            )));
        }
        if !(ema_alpha > 0.0 && ema_alpha <= 1.0) {
            return Err(Error::Config(format!("ema_alpha must lie in (0, 1], got {ema_alpha}")));
        }
        if !prototypes.is_finite() {
            return Err(Error::Input("prototype matrix has non-finite entries".into()));
        }
        let (n, d) = (prototypes.shape()[0], prototypes.shape()[1]);
        Ok(PrototypeBank {
            prototypes: Param::new(format!("{name}.prototypes"), prototypes),
            ema_alpha,
            frozen: false,
            assignment_counts: vec![0; n],
            pending: vec![(vec![0.0; d], 0); n],
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.value.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.value.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.prototypes.value.row(i)
    }

    /// Queues one routed feature vector for the next [`PrototypeBank::apply_pending`].
    pub(crate) fn push_assignment(&mut self, index: usize, features: &[f64]) {
        self.assignment_counts[index] += 1;
        if self.frozen {
            return;
        }
        let (sum, count) = &mut self.pending[index];
        for (s, &x) in sum.iter_mut().zip(features) {
            *s += x;
        }
        *count += 1;
    }

    /// Applies the EMA step with the per-prototype mean of everything queued
    /// since the last call, then clears the queue.
    pub fn apply_pending(&mut self) -> EmaOutcome {
        let d = self.dim();
        let batch: Vec<(usize, Vec<f64>)> = self
            .pending
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c > 0)
            .map(|(i, (sum, c))| (i, sum.iter().map(|s| s / *c as f64).collect()))
            .collect();
        for slot in &mut self.pending {
            *slot = (vec![0.0; d], 0);
        }
        self.ema_update(&batch)
            .expect("queued features are finite and correctly sized")
    }

    pub fn has_pending(&self) -> bool {
        self.pending.iter().any(|(_, c)| *c > 0)
    }

    /// `p_i <- (1 - alpha) p_i + alpha * mean_i` for each `(i, mean_i)`.
    /// Prototypes not listed are untouched.
    pub fn ema_update(&mut self, assigned: &[(usize, Vec<f64>)]) -> Result<EmaOutcome> {
        if self.frozen {
            return Ok(EmaOutcome::SkippedFrozen);
        }
        let (n, d) = (self.len(), self.dim());
        for (i, mean) in assigned {
            if *i >= n || mean.len() != d {
                return Err(Error::shape("ema_update", &[n, d], &[*i, mean.len()]));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite EMA target for prototype {i}")));
            }
        }
        let a = self.ema_alpha;
        let data = self.prototypes.value.data_mut();
        for (i, mean) in assigned {
            for (p, &x) in data[i * d..(i + 1) * d].iter_mut().zip(mean) {
                *p = (1.0 - a) * *p + a * x;
            }
        }
        Ok(EmaOutcome::Applied(assigned.len()))
    }
}

impl Module for PrototypeBank {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.prototypes);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.prototypes);
    }
}

/// Squared Euclidean distance from `features` to every row of `prototypes`.
pub fn squared_distances(features: &[f64], prototypes: &Tensor) -> Vec<f64> {
    let d = prototypes.shape()[1];
    prototypes
        .data()
        .chunks(d)
        .map(|p| p.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

/// Index of the nearest prototype; ties go to the lowest index.
pub fn gate(features: &[f64], bank: &PrototypeBank) -> Result<usize> {
    if features.len() != bank.dim() {
        return Err(Error::shape("gate", &[features.len()], &[bank.len(), bank.dim()]));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("gating features contain non-finite values".into()));
    }
    let dist = squared_distances(features, &bank.prototypes.value);
    let mut best = 0;
    for (i, &v) in dist.iter().enumerate().skip(1) {
        if v < dist[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `||P Pᵀ - I||²_F` as a differentiable scalar.
///
/// Only reaches zero when `n <= d`.
pub fn orthogonality_loss(g: &mut Graph, prototypes: Var) -> Result<Var> {
    let n = g.shape(prototypes)[0];
    let pt = g.transpose(prototypes, 0, 1)?;
    let gram = g.matmul(prototypes, pt)?;
    let eye = g.constant(Tensor::eye(n));
    let diff = g.sub(gram, eye)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum_all(sq))
}

/// Plain-value version of [`orthogonality_loss`].
pub fn orthogonality_loss_value(p: &Tensor) -> f64 {
    let n = p.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
            let e = dot - if i == j { 1.0 } else { 0.0 };
            total += e * e;
        }
    }
    total
}

/// `n` orthonormal rows of width `d`: Gram-Schmidt (two passes) over Gaussian draws.
pub fn init_orthogonal<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::Config("prototype bank needs n >= 1 and d >= 1".into()));
    }
    if n > d {
        return Err(Error::Config(format!(
            "cannot draw {n} orthonormal prototypes in dimension {d}; raise d_model or lower n_prototypes"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a draw that collapsed into the span of earlier rows is redrawn
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    Tensor::new(vec![n, d], rows.concat())
}
