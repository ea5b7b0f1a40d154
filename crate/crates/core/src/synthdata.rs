//! Synthetic multimodal classification data, node partitioning, missing
//! modality masks and the server-side proxy set.
//!
//! Each class has one Gaussian mean per modality. Modalities are made
//! complementary by zeroing the mean of a disjoint group of classes in each
//! modality: inside modality `m` the classes `{c : c % M == m}` share the
//! origin and cannot be told apart, while the fused features separate every
//! pair.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::Tensor2;
use crate::seed::{self, tag};
use crate::textio::{fmt_f64, io_err, parse_f64};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    /// Replaced by the master seed when a full experiment is run.
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.modalities.is_empty() {
            return Err(Error::Spec("need at least one modality".into()));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.dim < 2) {
            return Err(Error::Spec(format!("modality {} has dim {} < 2", m.name, m.dim)));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Spec(format!("class_separation must be > 0, got {}", self.class_separation)));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Spec(format!("noise_scale must be > 0, got {}", self.noise_scale)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Spec("samples_per_class must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-modality feature matrices with shared labels and global sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<ModalitySpec>,
    pub features: Vec<Tensor2>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub num_classes: usize,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            modalities: self.modalities.clone(),
            features: self.features.iter().map(|f| f.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Features of all modalities concatenated per row.
    pub fn fused_features(&self) -> Tensor2 {
        let refs: Vec<&Tensor2> = self.features.iter().collect();
        Tensor2::hcat(&refs).expect("modalities share row count")
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        self.class_counts().iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c).collect()
    }

    fn check(&self) -> Result<()> {
        if self.features.len() != self.modalities.len() {
            return Err(Error::Shape("feature blocks do not match modality list".into()));
        }
        for (f, m) in self.features.iter().zip(&self.modalities) {
            if f.rows() != self.labels.len() || f.cols() != m.dim {
                return Err(Error::Shape(format!("modality {} has shape {:?}", m.name, f.shape())));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Label { label: l, num_classes: self.num_classes });
        }
        Ok(())
    }
}

/// Class means indexed `[class][modality]`, as used by [`make_synthetic_dataset`].
pub fn class_means(spec: &DatasetSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[tag::DATA]);
    Ok(draw_means(spec, &mut rng))
}

fn draw_means<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    let m_count = spec.modalities.len();
    let mut means: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|c| {
            spec.modalities
                .iter()
                .enumerate()
                .map(|(m, ms)| {
                    let v: Vec<f64> = (0..ms.dim).map(|_| rng.sample(StandardNormal)).collect();
                    if m_count > 1 && c % m_count == m {
                        vec![0.0; ms.dim]
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<Vec<f64>> = means.iter().map(|per| per.concat()).collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..flat.len() {
        for b in a + 1..flat.len() {
            let d = flat[a].iter().zip(&flat[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let s = spec.class_separation / min_dist;
    means.iter_mut().flatten().flatten().for_each(|v| *v *= s);
    means
}

/// Class-conditional Gaussian samples, deterministic per `spec.seed`.
/// Rows are ordered class-major and `sample_id` equals the row index.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[tag::DATA]);
    let means = draw_means(spec, &mut rng);
    let n = spec.num_classes * spec.samples_per_class;
    let mut features: Vec<Tensor2> = spec.modalities.iter().map(|m| Tensor2::zeros(n, m.dim)).collect();
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, class_means) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for (f, mu) in features.iter_mut().zip(class_means) {
                for (x, &m) in f.row_mut(row).iter_mut().zip(mu) {
                    let e: f64 = rng.sample(StandardNormal);
                    *x = m + spec.noise_scale * e;
                }
            }
            labels.push(c);
            row += 1;
        }
    }
    Ok(MultimodalDataset {
        modalities: spec.modalities.clone(),
        features,
        labels,
        sample_ids: (0..n).collect(),
        num_classes: spec.num_classes,
    })
}

/// Row indices in stratified order: classes are shuffled independently and
/// interleaved round-robin, so any prefix is class-balanced within ±1.
fn stratified_order<R: Rng>(ds: &MultimodalDataset, rng: &mut R) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    per_class.iter_mut().for_each(|v| v.shuffle(rng));
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(ds.len());
    for k in 0..longest {
        for v in &per_class {
            if let Some(&i) = v.get(k) {
                order.push(i);
            }
        }
    }
    order
}

fn round_half_up(x: f64) -> usize {
    // guard against 0.6 * 100 = 60.000000000000007 style noise
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn split_stratified(
    ds: &MultimodalDataset,
    take: usize,
    master: u64,
    stream: u64,
) -> (MultimodalDataset, MultimodalDataset) {
    let mut rng = seed::rng(master, &[stream]);
    let order = stratified_order(ds, &mut rng);
    let mut head: Vec<usize> = order[..take].to_vec();
    let mut tail: Vec<usize> = order[take..].to_vec();
    head.sort_unstable();
    tail.sort_unstable();
    (ds.subset(&head), ds.subset(&tail))
}

/// Splits off a class-balanced held-out set of `round(fraction · n)` rows.
/// Returns `(node_pool, held_out)`.
pub fn split_holdout(
    ds: &MultimodalDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let take = round_half_up(fraction * ds.len() as f64);
    let (held, pool) = split_stratified(ds, take, seed, tag::HOLDOUT);
    Ok((pool, held))
}

/// Draws the complete-modality, label-balanced proxy set from held-out
/// data. Returns `(proxy, remainder)`; the remainder serves as test set.
pub fn make_proxy(
    held_out: &MultimodalDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(Error::Proxy(format!("proxy fraction must lie in (0, 0.5), got {fraction}")));
    }
    let take = round_half_up(fraction * held_out.len() as f64);
    let (proxy, rest) = split_stratified(held_out, take, seed, tag::PROXY);
    let present = proxy.label_set().len();
    let available = held_out.label_set().len();
    if proxy.is_empty() || present < available {
        return Err(Error::Proxy(format!(
            "{} held-out samples give a proxy of {} covering {present}/{available} classes",
            held_out.len(),
            proxy.len()
        )));
    }
    Ok((proxy, rest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Iid,
    /// Two-level split: each node first draws a majority share from one
    /// class (node index modulo class count), then is topped up from the
    /// shuffled remainder.
    LabelSkew,
}

/// Fraction of a label-skewed node drawn from its majority class.
pub const LABEL_SKEW_MAJOR_SHARE: f64 = 0.6;

/// Disjoint partition of `ds` over `k` nodes.
pub fn partition(
    ds: &MultimodalDataset,
    k: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<MultimodalDataset>> {
    ds.check()?;
    if k == 0 || k > ds.len() / ds.num_classes {
        return Err(Error::Partition(format!(
            "{k} nodes is more than {} samples / {} classes allows",
            ds.len(),
            ds.num_classes
        )));
    }
    let mut rng = seed::rng(seed, &[tag::PARTITION]);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    match scheme {
        PartitionScheme::Iid => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                per_class[l].push(i);
            }
            let mut next = 0;
            for v in &mut per_class {
                v.shuffle(&mut rng);
                for &i in v.iter() {
                    buckets[next % k].push(i);
                    next += 1;
                }
            }
        }
        PartitionScheme::LabelSkew => {
            let n = ds.len();
            let targets: Vec<usize> = (0..k).map(|j| n / k + usize::from(j < n % k)).collect();
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                per_class[l].push(i);
            }
            per_class.iter_mut().for_each(|v| v.shuffle(&mut rng));
            for (j, b) in buckets.iter_mut().enumerate() {
                let major = j % ds.num_classes;
                let quota = (LABEL_SKEW_MAJOR_SHARE * targets[j] as f64).floor() as usize;
                let pool = &mut per_class[major];
                let take = quota.min(pool.len());
                b.extend(pool.drain(pool.len() - take..));
            }
            let mut rest: Vec<usize> = per_class.into_iter().flatten().collect();
            rest.shuffle(&mut rng);
            let mut it = rest.into_iter();
            for (b, &t) in buckets.iter_mut().zip(&targets) {
                while b.len() < t {
                    b.push(it.next().expect("targets sum to dataset size"));
                }
            }
        }
    }
    let parts: Vec<MultimodalDataset> = buckets
        .into_iter()
        .map(|mut b| {
            b.sort_unstable();
            ds.subset(&b)
        })
        .collect();
    for (j, p) in parts.iter().enumerate() {
        if p.label_set().len() < 2 {
            return Err(Error::Partition(format!("node {j} received fewer than 2 classes")));
        }
    }
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Every node misses one modality type at rate `beta`.
    #[default]
    Uniform,
    /// Node `k` misses `missing_type_counts[k]` modality types at rate `beta`.
    Scenario1,
    /// Node `k` misses one modality type at its own rate `betas[k]`.
    Scenario2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    #[default]
    RandomPerNode,
    /// Start at `fixed_modality` and continue cyclically when more than one
    /// type is missing.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub missing_type_counts: Vec<usize>,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub target_modality_policy: TargetPolicy,
    #[serde(default)]
    pub fixed_modality: usize,
}

impl ScenarioSpec {
    pub fn uniform(beta: f64) -> Self {
        Self {
            kind: ScenarioKind::Uniform,
            beta,
            missing_type_counts: Vec::new(),
            betas: Vec::new(),
            target_modality_policy: TargetPolicy::RandomPerNode,
            fixed_modality: 0,
        }
    }

    pub fn validate(&self, num_modalities: usize, num_nodes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.fixed_modality >= num_modalities {
            return bad(format!("fixed_modality {} out of range", self.fixed_modality));
        }
        match self.kind {
            ScenarioKind::Uniform | ScenarioKind::Scenario1 => {
                if !(0.0..=1.0).contains(&self.beta) {
                    return bad(format!("beta must lie in [0, 1], got {}", self.beta));
                }
            }
            ScenarioKind::Scenario2 => {
                if self.betas.len() != num_nodes {
                    return bad(format!("scenario2 needs {num_nodes} betas, got {}", self.betas.len()));
                }
                if let Some(b) = self.betas.iter().find(|b| !(0.2..=0.8).contains(*b)) {
                    return bad(format!("scenario2 betas must lie in [0.2, 0.8], got {b}"));
                }
            }
        }
        if self.kind == ScenarioKind::Scenario1 {
            if self.missing_type_counts.len() != num_nodes {
                return bad(format!(
                    "scenario1 needs {num_nodes} missing-type counts, got {}",
                    self.missing_type_counts.len()
                ));
            }
            if let Some(c) = self.missing_type_counts.iter().find(|&&c| c >= num_modalities) {
                return bad(format!("missing-type count {c} must be < {num_modalities} modalities"));
            }
        }
        Ok(())
    }

    /// `(number of missing modality types, missing rate)` for a node.
    pub fn node_profile(&self, node_index: usize) -> Result<(usize, f64)> {
        let missing = || Error::Config(format!("no scenario entry for node {node_index}"));
        Ok(match self.kind {
            ScenarioKind::Uniform => (1, self.beta),
            ScenarioKind::Scenario1 => (*self.missing_type_counts.get(node_index).ok_or_else(missing)?, self.beta),
            ScenarioKind::Scenario2 => (1, *self.betas.get(node_index).ok_or_else(missing)?),
        })
    }
}

/// One node's data with per-sample, per-modality presence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPartition {
    pub data: MultimodalDataset,
    /// Row-major `samples × modalities`.
    presence: Vec<bool>,
    /// Modalities chosen as missing targets for this node.
    pub masked_modalities: Vec<usize>,
}

impl MaskedPartition {
    /// A partition with every modality present.
    pub fn complete(data: MultimodalDataset) -> Self {
        let presence = vec![true; data.len() * data.num_modalities()];
        Self { data, presence, masked_modalities: Vec::new() }
    }

    pub fn from_presence(data: MultimodalDataset, presence: Vec<Vec<bool>>) -> Result<Self> {
        let m = data.num_modalities();
        if presence.len() != data.len() || presence.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("presence matrix does not match partition".into()));
        }
        if let Some(i) = presence.iter().position(|r| !r.iter().any(|&p| p)) {
            return Err(Error::Mask(format!("sample {i} has no modality present")));
        }
        let masked_modalities = (0..m).filter(|&j| presence.iter().any(|r| !r[j])).collect();
        Ok(Self { data, presence: presence.concat(), masked_modalities })
    }

    pub fn n_k(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_present(&self, sample: usize, modality: usize) -> bool {
        self.presence[sample * self.data.num_modalities() + modality]
    }

    pub fn presence_row(&self, sample: usize) -> &[bool] {
        let m = self.data.num_modalities();
        &self.presence[sample * m..(sample + 1) * m]
    }

    pub fn absent_count(&self, modality: usize) -> usize {
        (0..self.n_k()).filter(|&i| !self.is_present(i, modality)).count()
    }

    pub fn fully_present(&self, modality: usize) -> bool {
        self.absent_count(modality) == 0
    }
}

/// Marks `round(β · n_k)` samples absent in each of the node's target
/// modalities. Masks depend only on `(partition, scenario, node_index, seed)`.
pub fn apply_missingness(
    part: &MultimodalDataset,
    scenario: &ScenarioSpec,
    node_index: usize,
    seed: u64,
) -> Result<MaskedPartition> {
    let m = part.num_modalities();
    let (count, beta) = scenario.node_profile(node_index)?;
    if count >= m && beta > 0.0 {
        return Err(Error::Mask(format!("cannot mask {count} of {m} modalities")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed, &[tag::MASK, node_index as u64]);
    let targets: Vec<usize> = match scenario.target_modality_policy {
        TargetPolicy::RandomPerNode => {
            let mut all: Vec<usize> = (0..m).collect();
            all.shuffle(&mut rng);
            all.truncate(count);
            all
        }
        TargetPolicy::Fixed => (0..count).map(|j| (scenario.fixed_modality + j) % m).collect(),
    };
    let n = part.len();
    let absent = round_half_up(beta * n as f64).min(n);
    let mut presence = vec![vec![true; m]; n];
    for &t in &targets {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        for &r in &rows[..absent] {
            presence[r][t] = false;
        }
    }
    let mut mp = MaskedPartition::from_presence(part.clone(), presence)?;
    mp.masked_modalities = if absent > 0 { targets } else { Vec::new() };
    Ok(mp)
}

/// Writes one CSV per modality (`sample_id,f0..f{d-1}`), `labels.csv`
/// (`sample_id,label`) and, when given, `mask.csv` (`sample_id,modality,present`).
pub fn write_dataset_csv(ds: &MultimodalDataset, mask: Option<&MaskedPartition>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (mi, (spec, f)) in ds.modalities.iter().zip(&ds.features).enumerate() {
        let mut s = String::from("sample_id");
        for j in 0..spec.dim {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for r in 0..f.rows() {
            s.push_str(&ds.sample_ids[r].to_string());
            for v in f.row(r) {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        let path = dir.join(format!("{mi}_{}.csv", spec.name));
        fs::write(&path, s).map_err(io_err(&path))?;
    }
    let mut s = String::from("sample_id,label\n");
    for (id, l) in ds.sample_ids.iter().zip(&ds.labels) {
        s.push_str(&format!("{id},{l}\n"));
    }
    let path = dir.join("labels.csv");
    fs::write(&path, s).map_err(io_err(&path))?;
    if let Some(mp) = mask {
        let mut s = String::from("sample_id,modality,present\n");
        for i in 0..mp.n_k() {
            for (j, &p) in mp.presence_row(i).iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", mp.data.sample_ids[i], j, u8::from(p)));
            }
        }
        let path = dir.join("mask.csv");
        fs::write(&path, s).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset_csv`] given its modality list.
pub fn read_dataset_csv(dir: &Path, modalities: &[ModalitySpec], num_classes: usize) -> Result<MultimodalDataset> {
    let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
    let lpath = dir.join("labels.csv");
    let mut sample_ids = Vec::new();
    let mut labels = Vec::new();
    for line in read(&lpath)?.lines().skip(1) {
        let (id, l) =
            line.split_once(',').ok_or_else(|| Error::Data(format!("malformed line in labels.csv: {line}")))?;
        sample_ids.push(id.parse().map_err(|_| Error::Data(format!("bad sample id {id}")))?);
        labels.push(l.parse().map_err(|_| Error::Data(format!("bad label {l}")))?);
    }
    let mut features = Vec::new();
    for (mi, spec) in modalities.iter().enumerate() {
        let path = dir.join(format!("{mi}_{}.csv", spec.name));
        let mut data = Vec::with_capacity(labels.len() * spec.dim);
        for line in read(&path)?.lines().skip(1) {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != spec.dim + 1 {
                return Err(Error::Data(format!("{}: expected {} columns", path.display(), spec.dim + 1)));
            }
            for v in &vals[1..] {
                data.push(parse_f64(v)?);
            }
        }
        features.push(Tensor2::from_vec(labels.len(), spec.dim, data)?);
    }
    let ds = MultimodalDataset { modalities: modalities.to_vec(), features, labels, sample_ids, num_classes };
    ds.check()?;
    Ok(ds)
}
