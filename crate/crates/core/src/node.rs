//! One node's local round: coupled training of the local model and the local
//! generator, plus the zero-fill and random-fill baselines.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::{fuse_with_substitution, GeneratorCache, GeneratorParams, LatentBlock, ModelParams};
use crate::numeric::{sgd_step, softmax_cross_entropy, softmax_kl, ForwardCache, Mode, OptimizerState, Tensor2};
use crate::seed::{self, tag};
use crate::synthdata::MaskedPartition;
use crate::{Error, Result};

/// How absent modality latents are filled in during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMode {
    #[default]
    Fedmobile,
    ZeroFill,
    RandomFill,
}

impl ImputationMode {
    pub fn uses_generator(self) -> bool {
        self == ImputationMode::Fedmobile
    }
}

/// Scalar multipliers on the four local objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub j_gen: f64,
    pub kl_present: f64,
    pub kl_missing: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { j_gen: 1.0, kl_present: 1.0, kl_missing: 1.0, ce: 1.0 }
    }
}

/// Weighted objective terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LocalLossBreakdown {
    pub j_gen: f64,
    pub kl_present: f64,
    pub kl_missing: f64,
    pub ce: f64,
    pub total: f64,
}

impl LocalLossBreakdown {
    pub fn from_terms(j_gen: f64, kl_present: f64, kl_missing: f64, ce: f64) -> Self {
        Self { j_gen, kl_present, kl_missing, ce, total: j_gen + kl_present + kl_missing + ce }
    }

    pub fn mean(items: &[Self]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let s = |f: fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_terms(s(|b| b.j_gen), s(|b| b.kl_present), s(|b| b.kl_missing), s(|b| b.ce))
    }
}

/// A mini-batch with presence flags. Raw features of absent entries are zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Tensor2>,
    pub presence: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_partition(part: &MaskedPartition, idx: &[usize]) -> Self {
        let mut features: Vec<Tensor2> = part.data.features.iter().map(|f| f.select_rows(idx)).collect();
        let presence: Vec<Vec<bool>> = idx.iter().map(|&i| part.presence_row(i).to_vec()).collect();
        for (r, p) in presence.iter().enumerate() {
            for (m, f) in features.iter_mut().enumerate() {
                if !p[m] {
                    f.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let labels = idx.iter().map(|&i| part.data.labels[i]).collect();
        Self { features, presence, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn present_rows(&self, m: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.presence[r][m]).collect()
    }
}

/// Where substitute latents for absent entries come from.
#[derive(Debug, Clone)]
pub enum Fill {
    Generator,
    Zeros,
    /// Pre-drawn noise; only rows/blocks of absent entries are read.
    Noise(LatentBlock),
}

impl Fill {
    fn for_mode<R: Rng + ?Sized>(mode: ImputationMode, batch: &Batch, dims: &[usize], rng: &mut R) -> Self {
        match mode {
            ImputationMode::Fedmobile => Fill::Generator,
            ImputationMode::ZeroFill => Fill::Zeros,
            ImputationMode::RandomFill => {
                let mut noise = LatentBlock::zeros(batch.len(), dims);
                for (r, p) in batch.presence.iter().enumerate() {
                    for (m, block) in noise.blocks.iter_mut().enumerate() {
                        if !p[m] {
                            block.row_mut(r).iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
                        }
                    }
                }
                Fill::Noise(noise)
            }
        }
    }
}

struct Encoded {
    latents: LatentBlock,
    caches: Vec<ForwardCache>,
}

fn encode_batch(model: &ModelParams, batch: &Batch) -> Result<Encoded> {
    if batch.features.len() != model.num_modalities() {
        return Err(Error::Shape(format!(
            "batch has {} modalities, model {}",
            batch.features.len(),
            model.num_modalities()
        )));
    }
    let mut blocks = Vec::with_capacity(batch.features.len());
    let mut caches = Vec::with_capacity(batch.features.len());
    for (m, x) in batch.features.iter().enumerate() {
        let (e, c) = model.encode_cached(m, x, Mode::Train)?;
        blocks.push(e);
        caches.push(c);
    }
    Ok(Encoded { latents: LatentBlock::new(blocks)?, caches })
}

fn zero_grads(z: &LatentBlock) -> Vec<Tensor2> {
    z.blocks.iter().map(|b| Tensor2::zeros(b.rows(), b.cols())).collect()
}

/// KL between encoder and generated latents of modality `m`, over `rows`
/// (all rows when `None`); gradient is scattered into `dz[m]`.
fn kl_rows(enc: &LatentBlock, z: &LatentBlock, m: usize, rows: Option<&[usize]>, dz: &mut [Tensor2]) -> Result<f64> {
    match rows {
        None => {
            let (loss, g) = softmax_kl(&enc.blocks[m], &z.blocks[m])?;
            dz[m].add_assign(&g)?;
            Ok(loss)
        }
        Some([]) => Ok(0.0),
        Some(idx) => {
            let (loss, g) = softmax_kl(&enc.blocks[m].select_rows(idx), &z.blocks[m].select_rows(idx))?;
            for (k, &r) in idx.iter().enumerate() {
                dz[m].row_mut(r).iter_mut().zip(g.row(k)).for_each(|(a, b)| *a += b);
            }
            Ok(loss)
        }
    }
}

fn kl_present_from(enc: &LatentBlock, z: &LatentBlock, modalities: &[usize], dz: &mut [Tensor2]) -> Result<f64> {
    modalities.iter().try_fold(0.0, |acc, &m| Ok(acc + kl_rows(enc, z, m, None, dz)?))
}

fn kl_missing_from(
    enc: &LatentBlock,
    z: &LatentBlock,
    batch: &Batch,
    modalities: &[usize],
    dz: &mut [Tensor2],
) -> Result<f64> {
    modalities.iter().try_fold(0.0, |acc, &m| Ok(acc + kl_rows(enc, z, m, Some(&batch.present_rows(m)), dz)?))
}

/// Cross entropy through substitution. Returns the loss, model gradient,
/// and the gradient with respect to the substitute latents.
fn ce_from(
    model: &ModelParams,
    enc: &Encoded,
    substitutes: Option<&LatentBlock>,
    batch: &Batch,
) -> Result<(f64, Vec<f64>, Vec<Tensor2>)> {
    let fused = fuse_with_substitution(&enc.latents, &batch.presence, substitutes)?;
    let (logits, head_cache) = model.fusion_head.forward(&fused, Mode::Train)?;
    let (ce, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
    let (dfused, head_grad) = model.fusion_head.backward(&head_cache, &dlogits)?;
    let mut blocks = dfused.hsplit(&enc.latents.dims())?;
    let mut dsub: Vec<Tensor2> = blocks.iter().map(|b| Tensor2::zeros(b.rows(), b.cols())).collect();
    for (r, p) in batch.presence.iter().enumerate() {
        for (m, block) in blocks.iter_mut().enumerate() {
            if !p[m] {
                dsub[m].row_mut(r).copy_from_slice(block.row(r));
                block.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let mut grad = Vec::with_capacity(model.num_params());
    for ((enc_net, cache), de) in model.encoders.iter().zip(&enc.caches).zip(&blocks) {
        grad.extend(enc_net.backward(cache, de)?.1);
    }
    grad.extend(head_grad);
    Ok((ce, grad, dsub))
}

/// CE of the fusion head (held constant) on generated latents for `labels`.
fn j_from(model: &ModelParams, z: &LatentBlock, labels: &[usize]) -> Result<(f64, Vec<Tensor2>)> {
    let (logits, cache) = model.fusion_head.forward(&z.fused(), Mode::Train)?;
    let (j, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let dfused = model.fusion_head.backward(&cache, &dlogits)?.0;
    Ok((j, dfused.hsplit(&z.dims())?))
}

/// Generator objective on labels `y_r`: cross entropy of the fusion head on
/// the fused generated latents, gradient to the generator only.
pub fn generator_objective(
    model: &ModelParams,
    generator: &GeneratorParams,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Data("generator objective needs a non-empty label batch".into()));
    }
    let (z, cache) = generator.generate_cached(labels, Mode::Train)?;
    let (j, dz) = j_from(model, &z, labels)?;
    Ok((j, generator.backward(&cache, &dz)?))
}

/// Sum over `modalities` of the mean KL from encoder to generated latents.
pub fn kl_present_term(
    model: &ModelParams,
    generator: &GeneratorParams,
    batch: &Batch,
    modalities: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let enc = encode_batch(model, batch)?;
    let (z, cache) = generator.generate_cached(&batch.labels, Mode::Train)?;
    let mut dz = zero_grads(&z);
    let loss = kl_present_from(&enc.latents, &z, modalities, &mut dz)?;
    Ok((loss, generator.backward(&cache, &dz)?))
}

/// As [`kl_present_term`] but each modality only over the rows where it is present.
pub fn kl_missing_term(
    model: &ModelParams,
    generator: &GeneratorParams,
    batch: &Batch,
    modalities: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let enc = encode_batch(model, batch)?;
    let (z, cache) = generator.generate_cached(&batch.labels, Mode::Train)?;
    let mut dz = zero_grads(&z);
    let loss = kl_missing_from(&enc.latents, &z, batch, modalities, &mut dz)?;
    Ok((loss, generator.backward(&cache, &dz)?))
}

/// Classification loss with substitution. Returns the loss, the model
/// gradient and the generator gradient (zeros unless `fill` is the generator).
pub fn task_loss(
    model: &ModelParams,
    generator: &GeneratorParams,
    batch: &Batch,
    fill: &Fill,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let enc = encode_batch(model, batch)?;
    match fill {
        Fill::Generator => {
            let (z, cache) = generator.generate_cached(&batch.labels, Mode::Train)?;
            let (ce, g, dsub) = ce_from(model, &enc, Some(&z), batch)?;
            Ok((ce, g, generator.backward(&cache, &dsub)?))
        }
        Fill::Zeros => {
            let zeros = LatentBlock::zeros(batch.len(), &enc.latents.dims());
            let (ce, g, _) = ce_from(model, &enc, Some(&zeros), batch)?;
            Ok((ce, g, vec![0.0; generator.num_params()]))
        }
        Fill::Noise(noise) => {
            let (ce, g, _) = ce_from(model, &enc, Some(noise), batch)?;
            Ok((ce, g, vec![0.0; generator.num_params()]))
        }
    }
}

/// Which objective terms apply to each modality of a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityRoles {
    pub fully_present: Vec<usize>,
    pub partially_missing: Vec<usize>,
}

impl ModalityRoles {
    pub fn of(part: &MaskedPartition) -> Self {
        let (fully_present, partially_missing) = (0..part.data.num_modalities()).partition(|&m| part.fully_present(m));
        Self { fully_present, partially_missing }
    }
}

/// Value and gradients of the full local objective at one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: LocalLossBreakdown,
    pub model_grad: Vec<f64>,
    pub generator_grad: Vec<f64>,
    caches: Vec<GeneratorCache>,
}

/// Weighted sum of the generator objective on `y_r`, both KL terms and the
/// substituted cross entropy. In baseline modes only the cross entropy is used.
pub fn local_objective(
    model: &ModelParams,
    generator: &GeneratorParams,
    batch: &Batch,
    y_r: &[usize],
    roles: &ModalityRoles,
    fill: &Fill,
    w: &LossWeights,
) -> Result<ObjectiveEval> {
    local_objective_frozen(model, model, generator, batch, y_r, roles, fill, w)
}

/// [`local_objective`] with the constant operands taken from `frozen`: the
/// encoder targets of both KL terms and the fusion head of the generator
/// objective. The returned gradients are exact derivatives of this function.
#[allow(clippy::too_many_arguments)]
pub fn local_objective_frozen(
    model: &ModelParams,
    frozen: &ModelParams,
    generator: &GeneratorParams,
    batch: &Batch,
    y_r: &[usize],
    roles: &ModalityRoles,
    fill: &Fill,
    w: &LossWeights,
) -> Result<ObjectiveEval> {
    let enc = encode_batch(model, batch)?;
    let frozen_enc;
    let targets = if std::ptr::eq(model, frozen) {
        &enc.latents
    } else {
        frozen_enc = encode_batch(frozen, batch)?;
        &frozen_enc.latents
    };
    let mut gen_grad = vec![0.0; generator.num_params()];
    let mut caches = Vec::new();
    let (mut j, mut kp, mut km) = (0.0, 0.0, 0.0);

    let (ce, mut model_grad) = if let Fill::Generator = fill {
        let (z, cache) = generator.generate_cached(&batch.labels, Mode::Train)?;
        let mut dz = zero_grads(&z);
        let mut scratch = zero_grads(&z);
        let mut accumulate = |scratch: &mut Vec<Tensor2>, weight: f64| -> Result<()> {
            for (d, s) in dz.iter_mut().zip(scratch.iter_mut()) {
                s.scale(weight);
                d.add_assign(s)?;
                s.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            Ok(())
        };
        if w.kl_present != 0.0 && !roles.fully_present.is_empty() {
            kp = w.kl_present * kl_present_from(targets, &z, &roles.fully_present, &mut scratch)?;
            accumulate(&mut scratch, w.kl_present)?;
        }
        if w.kl_missing != 0.0 && !roles.partially_missing.is_empty() {
            km = w.kl_missing * kl_missing_from(targets, &z, batch, &roles.partially_missing, &mut scratch)?;
            accumulate(&mut scratch, w.kl_missing)?;
        }
        let (ce, mg, mut dsub) = ce_from(model, &enc, Some(&z), batch)?;
        accumulate(&mut dsub, w.ce)?;
        let g = generator.backward(&cache, &dz)?;
        gen_grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        caches.push(cache);

        if w.j_gen != 0.0 {
            if y_r.is_empty() {
                return Err(Error::Data("generator objective needs a non-empty label batch".into()));
            }
            let (zr, cache_r) = generator.generate_cached(y_r, Mode::Train)?;
            let (jv, mut dzr) = j_from(frozen, &zr, y_r)?;
            dzr.iter_mut().for_each(|t| t.scale(w.j_gen));
            let g = generator.backward(&cache_r, &dzr)?;
            gen_grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            j = w.j_gen * jv;
            caches.push(cache_r);
        }
        (ce, mg)
    } else {
        let sub = match fill {
            Fill::Noise(n) => n.clone(),
            _ => LatentBlock::zeros(batch.len(), &enc.latents.dims()),
        };
        let (ce, mg, _) = ce_from(model, &enc, Some(&sub), batch)?;
        (ce, mg)
    };
    model_grad.iter_mut().for_each(|g| *g *= w.ce);
    Ok(ObjectiveEval {
        loss: LocalLossBreakdown::from_terms(j, kp, km, w.ce * ce),
        model_grad,
        generator_grad: gen_grad,
        caches,
    })
}

/// Optimizer hyperparameters shared by the model and generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// What a node uploads after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub node_id: usize,
    pub model: ModelParams,
    pub generator: GeneratorParams,
    /// Mean loss breakdown per epoch.
    pub history: Vec<LocalLossBreakdown>,
    pub n_k: usize,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub partition: MaskedPartition,
    pub model: ModelParams,
    pub generator: GeneratorParams,
    model_opt: OptimizerState,
    gen_opt: OptimizerState,
    pub imputation_mode: ImputationMode,
    pub weights: LossWeights,
    roles: ModalityRoles,
    seed: u64,
}

impl NodeState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        node_id: usize,
        partition: MaskedPartition,
        model: ModelParams,
        generator: GeneratorParams,
        optim: OptimSettings,
        imputation_mode: ImputationMode,
        weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        let dims = partition.data.modality_dims();
        let enc_in: Vec<usize> = model.encoders.iter().map(|e| e.in_dim()).collect();
        if enc_in != dims {
            return Err(Error::Shape(format!("encoders expect {enc_in:?}, partition has {dims:?}")));
        }
        if generator.latent_dims() != model.latent_dims() || generator.num_classes() != model.num_classes() {
            return Err(Error::Shape("generator does not match model latent space".into()));
        }
        let model_opt =
            OptimizerState::new(optim.learning_rate, optim.momentum, optim.weight_decay, model.num_params())?;
        let gen_opt =
            OptimizerState::new(optim.learning_rate, optim.momentum, optim.weight_decay, generator.num_params())?;
        let roles = ModalityRoles::of(&partition);
        Ok(Self { node_id, partition, model, generator, model_opt, gen_opt, imputation_mode, weights, roles, seed })
    }

    pub fn n_k(&self) -> usize {
        self.partition.n_k()
    }

    pub fn roles(&self) -> &ModalityRoles {
        &self.roles
    }

    /// Loads the global model (and the global generator when given), then
    /// runs `epochs` passes of shuffled mini-batches.
    pub fn local_train(
        &mut self,
        global_model: &ModelParams,
        global_generator: Option<&GeneratorParams>,
        epochs: usize,
        batch_size: usize,
        round: usize,
    ) -> Result<LocalUpdate> {
        if epochs == 0 || batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        let n = self.n_k();
        if n == 0 {
            return Err(Error::Data(format!("node {} has no samples", self.node_id)));
        }
        self.model.clone_from(global_model);
        if let Some(g) = global_generator {
            self.generator.clone_from(g);
        }
        self.model_opt.reset();
        self.gen_opt.reset();

        let id = self.node_id as u64;
        let r = round as u64;
        let mut shuffle_rng = seed::rng(self.seed, &[tag::SHUFFLE, id, r]);
        let mut label_rng = seed::rng(self.seed, &[tag::GEN_LABELS, id, r]);
        let mut fill_rng = seed::rng(self.seed, &[tag::RANDOM_FILL, id, r]);
        let train_generator = self.imputation_mode.uses_generator();
        let dims = self.model.latent_dims();

        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut shuffle_rng);
            let mut losses = Vec::new();
            for (b, idx) in batches(&order, batch_size).into_iter().enumerate() {
                let batch = Batch::from_partition(&self.partition, idx);
                let y_r: Vec<usize> = if train_generator && self.weights.j_gen != 0.0 {
                    (0..batch_size).map(|_| self.partition.data.labels[label_rng.random_range(0..n)]).collect()
                } else {
                    Vec::new()
                };
                let fill = Fill::for_mode(self.imputation_mode, &batch, &dims, &mut fill_rng);
                let ctx = |e: Error| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("node {} epoch {epoch} batch {b}: {msg}", self.node_id))
                    }
                    other => other,
                };
                let eval =
                    local_objective(&self.model, &self.generator, &batch, &y_r, &self.roles, &fill, &self.weights)
                        .map_err(ctx)?;
                if !eval.loss.total.is_finite() {
                    return Err(ctx(Error::Numeric(format!("non-finite loss {}", eval.loss.total))));
                }
                let mut theta = self.model.flatten();
                sgd_step(&mut theta, &eval.model_grad, &mut self.model_opt).map_err(ctx)?;
                self.model.load_flat(&theta)?;
                if train_generator {
                    let mut psi = self.generator.flatten();
                    sgd_step(&mut psi, &eval.generator_grad, &mut self.gen_opt).map_err(ctx)?;
                    self.generator.load_flat(&psi)?;
                    for c in &eval.caches {
                        self.generator.update_running_stats(c);
                    }
                }
                losses.push(eval.loss);
            }
            history.push(LocalLossBreakdown::mean(&losses));
        }
        Ok(LocalUpdate {
            node_id: self.node_id,
            model: self.model.clone(),
            generator: self.generator.clone(),
            history,
            n_k: n,
        })
    }
}

/// Consecutive chunks of `order`; a trailing single-sample chunk is merged
/// into the previous one so batchnorm always sees at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}
