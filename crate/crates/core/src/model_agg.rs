//! Contribution-aware model aggregation and the sample-weighted averaging baseline.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::models::{evaluate_complete, ModelParams};
use crate::numeric::weighted_sum;
use crate::synthdata::MultimodalDataset;
use crate::textio::fmt_f64;
use crate::{Error, Result};

/// Floor applied to each contribution metric before normalization.
pub const METRIC_FLOOR: f64 = 1e-8;

/// Which global-contribution metric drives the aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionMode {
    /// Proxy loss reduction of the local model over the global one.
    #[default]
    LossProxy,
    /// Proxy accuracy change of a hypothetical single-node update.
    ExactGlobal,
    /// Sample-count weights; no contribution is measured.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub node_id: usize,
    pub p_local: Option<f64>,
    pub delta_p_global: Option<f64>,
    pub delta_loss: Option<f64>,
    pub n_k: usize,
    pub alpha: f64,
}

/// A node's uploaded parameters relative to the round's global model.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub node_id: usize,
    /// Flattened local parameters `ω_k`; the update is `ω_k − ω`.
    pub local: Vec<f64>,
    pub n_k: usize,
}

impl UpdateDelta {
    pub fn new(node_id: usize, local: &ModelParams, n_k: usize) -> Self {
        Self { node_id, local: local.flatten(), n_k }
    }

    pub fn delta(&self, global: &[f64]) -> Result<Vec<f64>> {
        if global.len() != self.local.len() {
            return Err(Error::Protocol(format!(
                "update of length {} for model of {}",
                self.local.len(),
                global.len()
            )));
        }
        Ok(self.local.iter().zip(global).map(|(l, g)| l - g).collect())
    }
}

/// Accuracy of a node model on the proxy set.
pub fn local_contribution(model: &ModelParams, proxy: &MultimodalDataset) -> Result<f64> {
    Ok(evaluate_complete(model, proxy)?.0)
}

/// `𝒫(ω + ηΔω_k) − 𝒫(ω)` on the proxy set.
pub fn global_contribution_exact(
    global: &ModelParams,
    delta: &[f64],
    proxy: &MultimodalDataset,
    eta: f64,
) -> Result<f64> {
    let base = global.flatten();
    if delta.len() != base.len() {
        return Err(Error::Protocol(format!("delta of length {} for model of {}", delta.len(), base.len())));
    }
    let moved: Vec<f64> = base.iter().zip(delta).map(|(w, d)| w + eta * d).collect();
    let hypothetical = global.with_flat(&moved)?;
    Ok(local_contribution(&hypothetical, proxy)? - local_contribution(global, proxy)?)
}

/// `ℒ(ω) − ℒ(ω_k)` with ℒ the mean proxy cross entropy.
pub fn loss_reduction_proxy(global: &ModelParams, local: &ModelParams, proxy: &MultimodalDataset) -> Result<f64> {
    Ok(evaluate_complete(global, proxy)?.1 - evaluate_complete(local, proxy)?.1)
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values.iter().map(|v| v / total).collect()
}

/// `α_k ∝ n_k · P̃_k · Δ̃_k` with both metrics floored at [`METRIC_FLOOR`] and
/// normalized across nodes. Equal metrics give exactly `n_k / n`.
pub fn aggregation_weights(p_local: &[f64], delta: &[f64], n_k: &[usize]) -> Result<Vec<f64>> {
    let k = n_k.len();
    if k == 0 || p_local.len() != k || delta.len() != k {
        return Err(Error::Protocol(format!(
            "aggregation weights need matching non-empty inputs, got {}/{}/{}",
            p_local.len(),
            delta.len(),
            k
        )));
    }
    if n_k.contains(&0) {
        return Err(Error::Protocol("node with zero samples".into()));
    }
    if p_local.iter().chain(delta).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN contribution metric".into()));
    }
    let floor = |v: &[f64]| v.iter().map(|x| x.max(METRIC_FLOOR)).collect::<Vec<_>>();
    let (p, d) = (floor(p_local), floor(delta));
    let counts: Vec<f64> = n_k.iter().map(|&n| n as f64).collect();
    if p.iter().chain(&d).all(|&x| x == METRIC_FLOOR) {
        warn!("every node is at the metric floor; falling back to sample-count weights");
        return Ok(sample_weights(n_k));
    }
    let score: Vec<f64> = normalized(&p).iter().zip(normalized(&d)).map(|(a, b)| a * b).collect();
    let top = score.iter().copied().fold(f64::MIN, f64::max);
    let raw: Vec<f64> = counts.iter().zip(&score).map(|(n, s)| n * (s / top)).collect();
    Ok(normalized(&raw))
}

/// `n_k / Σ n_j`.
pub fn sample_weights(n_k: &[usize]) -> Vec<f64> {
    let total = n_k.iter().sum::<usize>() as f64;
    n_k.iter().map(|&n| n as f64 / total).collect()
}

/// `ω + η Σ α_k (ω_k − ω)`, evaluated as `(1−η)·ω + η·Σ α_k ω_k` so that
/// `η = 1` is exactly the weighted average of the local models.
pub fn apply_update(global: &ModelParams, updates: &[UpdateDelta], alphas: &[f64], eta: f64) -> Result<ModelParams> {
    let base = global.flatten();
    if let Some(u) = updates.iter().find(|u| u.local.len() != base.len()) {
        return Err(Error::Protocol(format!("update from node {} has the wrong shape", u.node_id)));
    }
    let locals: Vec<&[f64]> = updates.iter().map(|u| u.local.as_slice()).collect();
    let mixed = weighted_sum(&locals, alphas)?;
    let next: Vec<f64> = base.iter().zip(&mixed).map(|(w, m)| (1.0 - eta) * w + eta * m).collect();
    global.with_flat(&next)
}

/// Sample-count weighted average of local models.
pub fn fedavg(local_models: &[&ModelParams], sample_counts: &[usize]) -> Result<ModelParams> {
    let first = local_models.first().ok_or_else(|| Error::Protocol("fedavg over zero models".into()))?;
    let flats: Vec<Vec<f64>> = local_models.iter().map(|m| m.flatten()).collect();
    let refs: Vec<&[f64]> = flats.iter().map(Vec::as_slice).collect();
    if sample_counts.len() != refs.len() {
        return Err(Error::Protocol("one sample count per model required".into()));
    }
    first.with_flat(&weighted_sum(&refs, &sample_weights(sample_counts))?)
}

/// Measures every node's contributions (in parallel) and computes the
/// aggregation weights. In `Off` mode nothing is measured.
pub fn contribution_reports(
    global: &ModelParams,
    locals: &[(usize, &ModelParams, usize)],
    proxy: &MultimodalDataset,
    mode: ContributionMode,
    eta: f64,
    exec: Execution,
) -> Result<Vec<ContributionReport>> {
    let n_k: Vec<usize> = locals.iter().map(|l| l.2).collect();
    if mode == ContributionMode::Off {
        return Ok(locals
            .iter()
            .zip(sample_weights(&n_k))
            .map(|(&(node_id, _, n), alpha)| ContributionReport {
                node_id,
                p_local: None,
                delta_p_global: None,
                delta_loss: None,
                n_k: n,
                alpha,
            })
            .collect());
    }
    let base = global.flatten();
    let metrics = exec::map(exec, locals.to_vec(), |(_, model, _)| -> Result<(f64, f64, f64)> {
        let p = local_contribution(model, proxy)?;
        let dl = loss_reduction_proxy(global, model, proxy)?;
        let delta: Vec<f64> = model.flatten().iter().zip(&base).map(|(l, g)| l - g).collect();
        let dp = global_contribution_exact(global, &delta, proxy, eta)?;
        Ok((p, dl, dp))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = metrics.iter().map(|m| m.0).collect();
    let driver: Vec<f64> =
        metrics.iter().map(|m| if mode == ContributionMode::LossProxy { m.1 } else { m.2 }).collect();
    let alphas = aggregation_weights(&p, &driver, &n_k)?;
    Ok(locals
        .iter()
        .zip(metrics)
        .zip(alphas)
        .map(|((&(node_id, _, n), (p, dl, dp)), alpha)| ContributionReport {
            node_id,
            p_local: Some(p),
            delta_p_global: Some(dp),
            delta_loss: Some(dl),
            n_k: n,
            alpha,
        })
        .collect())
}

pub const CONTRIBUTIONS_HEADER: &str = "round,node_id,p_local,delta_loss,delta_p_global,n_k,alpha";

/// CSV rows for one round; unmeasured metrics are left empty.
pub fn contribution_rows(round: usize, reports: &[ContributionReport]) -> String {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    reports
        .iter()
        .map(|r| {
            format!(
                "{round},{},{},{},{},{},{}\n",
                r.node_id,
                opt(r.p_local),
                opt(r.delta_loss),
                opt(r.delta_p_global),
                r.n_k,
                fmt_f64(r.alpha)
            )
        })
        .collect()
}
