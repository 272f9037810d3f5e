use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Batches, Dataset};
use crate::encoder::{Encoder, Phase};
use crate::error::Result;
use crate::rng;
use crate::tensor::Graph;

/// Routing of a pool through one normalization site.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteAudit {
    /// `counts[p][k]`: samples of the `k`-th pool dataset sent to LayerNorm `p`.
    pub counts: Vec<Vec<u64>>,
    /// Share of samples routed to the majority dataset of their LayerNorm.
    pub purity: f64,
    /// Samples whose recorded route differs from a fresh nearest-prototype
    /// search over the recorded features.
    pub mismatches: u64,
}

/// Runs `pool` through `encoder` without dropout and, at every site,
/// recomputes the nearest prototype of each sample by direct distance
/// evaluation.
pub fn audit_gating(encoder: &Encoder, pool: &[Dataset], batch_size: usize) -> Result<Vec<SiteAudit>> {
    let phase = if encoder.n_classes().is_some() { Phase::Eval } else { Phase::Validate };
    let sites: Vec<_> = encoder.sites().collect();
    let mut counts: Vec<Vec<Vec<u64>>> = sites.iter().map(|s| vec![vec![0; pool.len()]; s.norms.len()]).collect();
    let mut mismatches = vec![0u64; sites.len()];
    let position: BTreeMap<usize, usize> = pool.iter().enumerate().map(|(k, d)| (d.dataset_id, k)).collect();
    let mut unused = rng::stream(0, "audit");
    for batch in Batches::sequential(pool, batch_size)? {
        let mut g = Graph::new();
        let out = encoder.forward(&mut g, &batch.x, Some(&batch.dataset_ids), phase, &mut unused)?;
        for (s, routing) in out.routings.iter().enumerate() {
            let bank = &sites[s].bank;
            for (i, (&route, f)) in routing.routes.iter().zip(&routing.features).enumerate() {
                counts[s][route][position[&batch.dataset_ids[i]]] += 1;
                if sites[s].prototypes_are_parameters() {
                    let mut best = (f64::INFINITY, 0);
                    for p in 0..bank.len() {
                        let d: f64 = bank.row(p).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best.0 {
                            best = (d, p);
                        }
                    }
                    mismatches[s] += (best.1 != route) as u64;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .zip(mismatches)
        .map(|(counts, mismatches)| {
            let total: u64 = counts.iter().flatten().sum();
            let majority: u64 = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
            SiteAudit {
                purity: majority as f64 / total as f64,
                counts,
                mismatches,
            }
        })
        .collect())
}
