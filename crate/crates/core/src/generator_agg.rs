//! Server-side generator aggregation: embed uploaded generators, group them
//! with k-means, value cluster representatives with exact Shapley values and
//! mix them into the global generator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::models::{accuracy, GeneratorParams, ModelParams};
use crate::numeric::{mean, weighted_sum, Mode};
use crate::seed::{self, tag};
use crate::{Error, Result};

/// Largest player count accepted by [`shapley_exact`] (2^16 coalitions).
pub const MAX_EXACT_PLAYERS: usize = 16;
/// Shift added before normalizing Shapley values.
pub const PHI_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEmbedding {
    pub node_id: usize,
    pub vector: Vec<f64>,
}

/// Class-balanced probe labels of size `max(64, 4C)` rounded up to a
/// multiple of `C`, drawn from the classes present in `proxy_labels`.
pub fn probe_labels(proxy_labels: &[usize], num_classes: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if let Some(c) = (0..num_classes).find(|c| !proxy_labels.contains(c)) {
        return Err(Error::Proxy(format!("proxy has no sample of class {c}")));
    }
    let per_class = 64usize.max(4 * num_classes).div_ceil(num_classes);
    let mut labels: Vec<usize> = (0..num_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    labels.shuffle(&mut seed::rng(seed, &[tag::PROBE, round as u64]));
    Ok(labels)
}

/// Per-class mean latents (eval mode) over `probe`, class-major then modality.
pub fn embed_generators(generators: &[(usize, &GeneratorParams)], probe: &[usize]) -> Result<Vec<GeneratorEmbedding>> {
    let Some((_, first)) = generators.first() else {
        return Ok(Vec::new());
    };
    let dims = first.latent_dims();
    let classes = first.num_classes();
    let mut out = Vec::with_capacity(generators.len());
    for &(node_id, g) in generators {
        if g.latent_dims() != dims || g.num_classes() != classes {
            return Err(Error::Protocol(format!("generator of node {node_id} has a different shape")));
        }
        let z = g.generate(probe, Mode::Eval)?;
        let mut vector = Vec::with_capacity(classes * dims.iter().sum::<usize>());
        for c in 0..classes {
            let rows: Vec<usize> = (0..probe.len()).filter(|&i| probe[i] == c).collect();
            for block in &z.blocks {
                let mut m = vec![0.0; block.cols()];
                for &r in &rows {
                    m.iter_mut().zip(block.row(r)).for_each(|(a, b)| *a += b);
                }
                if !rows.is_empty() {
                    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
                }
                vector.extend(m);
            }
        }
        out.push(GeneratorEmbedding { node_id, vector });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each update step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn centroid_means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let members: Vec<&[f64]> =
                points.iter().zip(assignments).filter(|(_, &a)| a == c).map(|(p, _)| p.as_slice()).collect();
            mean(&members).expect("clusters are non-empty after repair")
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its centroid in the
/// currently largest cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..k).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
        let far = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .fold(None::<(usize, f64)>, |best, i| {
                let d = sq_dist(&points[i], &centroids[largest]);
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            })
            .expect("largest cluster is non-empty")
            .0;
        assignments[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iters` update steps have run.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Cluster(format!("cannot form {k} clusters from {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Cluster("points must be finite and of equal length".into()));
    }
    let mut rng = seed::rng(seed, &[tag::KMEANS]);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if t < d {
                        break;
                    }
                    t -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let nearest = |p: &[f64], centroids: &[Vec<f64>], current: Option<usize>| -> usize {
        let mut best = current.unwrap_or(0);
        let mut best_d = sq_dist(p, &centroids[best]);
        for (c, cen) in centroids.iter().enumerate() {
            let d = sq_dist(p, cen);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    };

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids, None)).collect();
    repair_empty(points, &mut assignments, &mut centroids);
    centroids = centroid_means(points, &assignments, k);
    let mut inertia_history = vec![inertia(points, &assignments, &centroids)];
    for _ in 1..max_iters.max(1) {
        let mut next: Vec<usize> =
            points.iter().zip(&assignments).map(|(p, &a)| nearest(p, &centroids, Some(a))).collect();
        repair_empty(points, &mut next, &mut centroids);
        if next == assignments {
            break;
        }
        assignments = next;
        centroids = centroid_means(points, &assignments, k);
        inertia_history.push(inertia(points, &assignments, &centroids));
    }
    Ok(KMeansResult { assignments, centroids, inertia_history })
}

/// Element-wise mean of full generator states (parameters and running statistics).
pub fn average_params(params: &[&GeneratorParams]) -> Result<GeneratorParams> {
    let first = params.first().ok_or_else(|| Error::Protocol("cannot average zero generators".into()))?;
    let states: Vec<Vec<f64>> = params.iter().map(|g| g.full_state()).collect();
    check_shapes(params)?;
    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    let mut out = (*first).clone();
    out.load_full_state(&mean(&refs)?)?;
    Ok(out)
}

/// Element-wise `Σ w_i ψ_i` of full generator states.
pub fn aggregate_generators(representatives: &[&GeneratorParams], weights: &[f64]) -> Result<GeneratorParams> {
    let first = representatives.first().ok_or_else(|| Error::Protocol("cannot aggregate zero generators".into()))?;
    check_shapes(representatives)?;
    let states: Vec<Vec<f64>> = representatives.iter().map(|g| g.full_state()).collect();
    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    let mut out = (*first).clone();
    out.load_full_state(&weighted_sum(&refs, weights)?)?;
    Ok(out)
}

fn check_shapes(params: &[&GeneratorParams]) -> Result<()> {
    let specs = |g: &GeneratorParams| (g.trunk.specs(), g.heads.iter().map(|h| h.specs()).collect::<Vec<_>>());
    let s0 = specs(params[0]);
    if params.iter().any(|g| specs(g) != s0) {
        return Err(Error::Protocol("generators differ in architecture".into()));
    }
    Ok(())
}

/// Nodes grouped into clusters, with one parameter-averaged representative each.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// `node_id → cluster`.
    pub assignments: BTreeMap<usize, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub representatives: Vec<GeneratorParams>,
    pub inertia_history: Vec<f64>,
}

pub fn cluster_generators(
    generators: &[(usize, &GeneratorParams)],
    probe: &[usize],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterResult> {
    let emb = embed_generators(generators, probe)?;
    let points: Vec<Vec<f64>> = emb.iter().map(|e| e.vector.clone()).collect();
    let km = kmeans(&points, k, seed, max_iters)?;
    let representatives = (0..k)
        .map(|c| {
            let members: Vec<&GeneratorParams> =
                generators.iter().zip(&km.assignments).filter(|(_, &a)| a == c).map(|((_, g), _)| *g).collect();
            average_params(&members)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterResult {
        assignments: generators.iter().zip(&km.assignments).map(|((id, _), &a)| (*id, a)).collect(),
        centroids: km.centroids,
        representatives,
        inertia_history: km.inertia_history,
    })
}

/// Accuracy of the global fusion head on latents generated for `probe` by
/// the average of the coalition's representatives. The empty coalition is worth 0.
pub fn coalition_value(
    mask: usize,
    representatives: &[GeneratorParams],
    global_model: &ModelParams,
    probe: &[usize],
) -> Result<f64> {
    if mask == 0 {
        return Ok(0.0);
    }
    let members: Vec<&GeneratorParams> =
        representatives.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, g)| g).collect();
    let psi = average_params(&members)?;
    let z = psi.generate(probe, Mode::Eval)?;
    let logits = global_model.classify(&z.fused(), Mode::Eval)?;
    Ok(accuracy(&logits, probe))
}

/// Values of all `2^n` coalitions, indexed by bitmask.
pub fn coalition_values(
    representatives: &[GeneratorParams],
    global_model: &ModelParams,
    probe: &[usize],
    exec: Execution,
) -> Result<Vec<f64>> {
    let n = representatives.len();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Size(n));
    }
    exec::map_range(exec, 1 << n, |mask| coalition_value(mask, representatives, global_model, probe))
        .into_iter()
        .collect()
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for i in 1..=n {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

/// Exact Shapley values from a table of coalition values indexed by bitmask.
pub fn shapley_from_table(n: usize, values: &[f64]) -> Result<Vec<f64>> {
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Size(n));
    }
    if values.len() != 1 << n {
        return Err(Error::Shape(format!("{} coalition values for {n} players", values.len())));
    }
    let f = factorials(n);
    let weight: Vec<f64> = (0..n).map(|s| f[s] * f[n - s - 1] / f[n]).collect();
    Ok((0..n)
        .map(|i| {
            let bit = 1 << i;
            (0..1usize << n)
                .filter(|s| s & bit == 0)
                .map(|s| weight[s.count_ones() as usize] * (values[s | bit] - values[s]))
                .sum()
        })
        .collect())
}

/// Exact Shapley values of the game `v` on `n` players; each coalition is evaluated once.
pub fn shapley_exact(n: usize, v: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Size(n));
    }
    let table: Vec<f64> = (0..1usize << n).map(v).collect();
    shapley_from_table(n, &table)
}

/// Shifts `phi` to be non-negative (plus [`PHI_EPSILON`]) and projects onto
/// the simplex. Equal entries give exactly uniform weights.
pub fn normalize_shapley(phi: &[f64]) -> Result<Vec<f64>> {
    if phi.is_empty() {
        return Err(Error::Protocol("no Shapley values to normalize".into()));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite Shapley values {phi:?}")));
    }
    let n = phi.len();
    if phi.iter().all(|&v| v == phi[0]) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let min = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = -min.min(0.0) + PHI_EPSILON;
    let shifted: Vec<f64> = phi.iter().map(|v| v + shift).collect();
    let total: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyResult {
    pub phi: Vec<f64>,
    pub normalized_weights: Vec<f64>,
    /// Indexed by coalition bitmask.
    pub coalition_values: Vec<f64>,
    pub probe_labels: Vec<usize>,
}

/// Full clustered-Shapley aggregation of one round's uploads.
pub fn clustered_shapley_aggregate(
    generators: &[(usize, &GeneratorParams)],
    global_model: &ModelParams,
    probe: &[usize],
    k: usize,
    seed: u64,
    max_iters: usize,
    exec: Execution,
) -> Result<(GeneratorParams, ClusterResult, ShapleyResult)> {
    let clusters = cluster_generators(generators, probe, k, seed, max_iters)?;
    let values = coalition_values(&clusters.representatives, global_model, probe, exec)?;
    let phi = shapley_from_table(clusters.representatives.len(), &values)?;
    let weights = normalize_shapley(&phi)?;
    let reps: Vec<&GeneratorParams> = clusters.representatives.iter().collect();
    let global = aggregate_generators(&reps, &weights)?;
    let shapley =
        ShapleyResult { phi, normalized_weights: weights, coalition_values: values, probe_labels: probe.to_vec() };
    Ok((global, clusters, shapley))
}

/// One round's entry in `shapley.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyRecord {
    pub round: usize,
    pub phi: Vec<f64>,
    pub weights: Vec<f64>,
    pub assignments: BTreeMap<usize, usize>,
    /// Keyed by coalition bitmask.
    pub coalition_values: BTreeMap<usize, f64>,
}

impl ShapleyRecord {
    pub fn new(round: usize, clusters: &ClusterResult, shapley: &ShapleyResult) -> Self {
        Self {
            round,
            phi: shapley.phi.clone(),
            weights: shapley.normalized_weights.clone(),
            assignments: clusters.assignments.clone(),
            coalition_values: shapley.coalition_values.iter().copied().enumerate().collect(),
        }
    }
}

#[cfg(test)]
mod tests;
