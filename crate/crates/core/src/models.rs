//! Multimodal local model (per-modality encoders feeding a fusion head) and
//! the label-conditioned latent generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{
    mlp_specs, softmax_cross_entropy, ActivationKind, ForwardCache, LayerSpec, Mode, Network, Tensor2,
};
use crate::synthdata::MultimodalDataset;
use crate::textio::{fmt_f64, io_err, parse_f64};
use crate::{Error, Result};

/// Layer widths shared by the model and generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub generator_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { latent_dim: 16, encoder_hidden: 32, generator_hidden: 32 }
    }
}

/// Encoders `f_m` (affine → rectifier → affine) and a single affine fusion head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoders: Vec<Network>,
    pub fusion_head: Network,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(
        modality_dims: &[usize],
        num_classes: usize,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoders = modality_dims
            .iter()
            .map(|&d| Network::new(&mlp_specs(&[d, arch.encoder_hidden, arch.latent_dim]), rng))
            .collect::<Result<Vec<_>>>()?;
        let fused = arch.latent_dim * modality_dims.len();
        let fusion_head = Network::new(&mlp_specs(&[fused, num_classes]), rng)?;
        Self::from_parts(encoders, fusion_head)
    }

    pub fn from_parts(encoders: Vec<Network>, fusion_head: Network) -> Result<Self> {
        let fused: usize = encoders.iter().map(Network::out_dim).sum();
        if fused != fusion_head.in_dim() {
            return Err(Error::Shape(format!(
                "encoder outputs sum to {fused} but fusion head expects {}",
                fusion_head.in_dim()
            )));
        }
        Ok(Self { encoders, fusion_head })
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.fusion_head.out_dim()
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(Network::out_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.encoders.iter().map(Network::num_params).sum::<usize>() + self.fusion_head.num_params()
    }

    /// Encoders in modality order, then the fusion head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.encoders.iter().for_each(|e| e.write_params(&mut v));
        self.fusion_head.write_params(&mut v);
        v
    }

    pub fn load_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::Protocol(format!("model expects {} parameters, got {}", self.num_params(), src.len())));
        }
        let mut off = 0;
        for e in &mut self.encoders {
            off += e.read_params(&src[off..])?;
        }
        self.fusion_head.read_params(&src[off..])?;
        Ok(())
    }

    pub fn with_flat(&self, src: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.load_flat(src)?;
        Ok(m)
    }

    pub fn encode(&self, modality: usize, x: &Tensor2, mode: Mode) -> Result<Tensor2> {
        Ok(self.encode_cached(modality, x, mode)?.0)
    }

    pub fn encode_cached(&self, modality: usize, x: &Tensor2, mode: Mode) -> Result<(Tensor2, ForwardCache)> {
        let enc =
            self.encoders.get(modality).ok_or_else(|| Error::Shape(format!("no encoder for modality {modality}")))?;
        enc.forward(x, mode)
    }

    pub fn classify(&self, fused: &Tensor2, mode: Mode) -> Result<Tensor2> {
        Ok(self.fusion_head.forward(fused, mode)?.0)
    }

    /// Logits on a complete-modality dataset (no substitution), eval mode.
    pub fn predict_complete(&self, ds: &MultimodalDataset) -> Result<Tensor2> {
        if ds.num_modalities() != self.num_modalities() {
            return Err(Error::Shape(format!(
                "dataset has {} modalities, model {}",
                ds.num_modalities(),
                self.num_modalities()
            )));
        }
        let latents =
            ds.features.iter().enumerate().map(|(m, x)| self.encode(m, x, Mode::Eval)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor2> = latents.iter().collect();
        self.classify(&Tensor2::hcat(&refs)?, Mode::Eval)
    }
}

/// Accuracy and mean cross entropy of `model` on complete-modality data.
pub fn evaluate_complete(model: &ModelParams, ds: &MultimodalDataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let logits = model.predict_complete(ds)?;
    Ok((accuracy(&logits, &ds.labels), softmax_cross_entropy(&logits, &ds.labels)?.0))
}

pub fn accuracy(logits: &Tensor2, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Per-modality latent matrices sharing a row count.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub blocks: Vec<Tensor2>,
}

impl LatentBlock {
    pub fn new(blocks: Vec<Tensor2>) -> Result<Self> {
        if let Some(r) = blocks.first().map(Tensor2::rows) {
            if blocks.iter().any(|b| b.rows() != r) {
                return Err(Error::Shape("latent blocks differ in row count".into()));
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(rows: usize, dims: &[usize]) -> Self {
        Self { blocks: dims.iter().map(|&d| Tensor2::zeros(rows, d)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.blocks.first().map_or(0, Tensor2::rows)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Tensor2::cols).collect()
    }

    pub fn fused(&self) -> Tensor2 {
        let refs: Vec<&Tensor2> = self.blocks.iter().collect();
        Tensor2::hcat(&refs).expect("blocks share row count")
    }
}

/// Label → per-modality latents: a shared trunk
/// (affine without bias → batchnorm → rectifier) and one affine head per
/// modality. The trunk affine has no bias because batchnorm cancels it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub trunk: Network,
    pub heads: Vec<Network>,
}

/// Forward record of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    trunk: ForwardCache,
    heads: Vec<ForwardCache>,
}

impl GeneratorParams {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, latent_dims: &[usize], hidden: usize, rng: &mut R) -> Result<Self> {
        let trunk = Network::new(
            &[
                LayerSpec::Affine { in_dim: num_classes, out_dim: hidden, bias: false },
                LayerSpec::Batchnorm { dim: hidden },
                LayerSpec::Activation { dim: hidden, kind: ActivationKind::Rectifier },
            ],
            rng,
        )?;
        let heads = latent_dims
            .iter()
            .map(|&d| Network::new(&[LayerSpec::Affine { in_dim: hidden, out_dim: d, bias: true }], rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(trunk, heads)
    }

    pub fn from_parts(trunk: Network, heads: Vec<Network>) -> Result<Self> {
        if let Some(h) = heads.iter().find(|h| h.in_dim() != trunk.out_dim()) {
            return Err(Error::Shape(format!(
                "generator head expects {} inputs, trunk emits {}",
                h.in_dim(),
                trunk.out_dim()
            )));
        }
        Ok(Self { trunk, heads })
    }

    pub fn num_classes(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.heads.iter().map(Network::out_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.heads.iter().map(Network::num_params).sum::<usize>()
    }

    /// Trainable parameters: trunk, then heads in modality order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.trunk.write_params(&mut v);
        self.heads.iter().for_each(|h| h.write_params(&mut v));
        v
    }

    pub fn load_flat(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::Protocol(format!(
                "generator expects {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let mut off = self.trunk.read_params(src)?;
        for h in &mut self.heads {
            off += h.read_params(&src[off..])?;
        }
        Ok(())
    }

    /// Trainable parameters followed by the running batchnorm statistics.
    pub fn full_state(&self) -> Vec<f64> {
        let mut v = self.flatten();
        self.trunk.write_buffers(&mut v);
        v
    }

    pub fn load_full_state(&mut self, src: &[f64]) -> Result<()> {
        let p = self.num_params();
        if src.len() != p + self.trunk.num_buffers() {
            return Err(Error::Protocol(format!(
                "generator state expects {} values, got {}",
                p + self.trunk.num_buffers(),
                src.len()
            )));
        }
        self.load_flat(&src[..p])?;
        self.trunk.read_buffers(&src[p..])?;
        Ok(())
    }

    pub fn generate(&self, labels: &[usize], mode: Mode) -> Result<LatentBlock> {
        Ok(self.generate_cached(labels, mode)?.0)
    }

    pub fn generate_cached(&self, labels: &[usize], mode: Mode) -> Result<(LatentBlock, GeneratorCache)> {
        let onehot = Tensor2::one_hot(labels, self.num_classes())?;
        let (h, trunk) = self.trunk.forward(&onehot, mode)?;
        let mut blocks = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (z, c) = head.forward(&h, mode)?;
            blocks.push(z);
            heads.push(c);
        }
        Ok((LatentBlock { blocks }, GeneratorCache { trunk, heads }))
    }

    /// Gradient of a scalar loss with respect to the trainable parameters,
    /// given its gradient with respect to every latent block.
    pub fn backward(&self, cache: &GeneratorCache, latent_grads: &[Tensor2]) -> Result<Vec<f64>> {
        if latent_grads.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} latent gradients for {} heads",
                latent_grads.len(),
                self.heads.len()
            )));
        }
        let mut head_grads = Vec::with_capacity(self.heads.len());
        let mut dh: Option<Tensor2> = None;
        for ((head, c), g) in self.heads.iter().zip(&cache.heads).zip(latent_grads) {
            let (dx, gp) = head.backward(c, g)?;
            match dh.as_mut() {
                Some(acc) => acc.add_assign(&dx)?,
                None => dh = Some(dx),
            }
            head_grads.push(gp);
        }
        let dh = dh.ok_or_else(|| Error::Shape("generator without heads".into()))?;
        let (_, mut grads) = self.trunk.backward(&cache.trunk, &dh)?;
        for g in head_grads {
            grads.extend(g);
        }
        Ok(grads)
    }

    pub fn update_running_stats(&mut self, cache: &GeneratorCache) {
        self.trunk.update_running_stats(&cache.trunk);
    }
}

/// Concatenates, per sample, the encoder latent of each present modality and
/// the substitute latent of each absent one.
pub fn fuse_with_substitution(
    encoded: &LatentBlock,
    presence: &[Vec<bool>],
    substitutes: Option<&LatentBlock>,
) -> Result<Tensor2> {
    let rows = encoded.rows();
    let m = encoded.blocks.len();
    if presence.len() != rows || presence.iter().any(|p| p.len() != m) {
        return Err(Error::Shape(format!("presence mask does not match {rows}x{m} latents")));
    }
    let any_absent = presence.iter().flatten().any(|&p| !p);
    if any_absent {
        match substitutes {
            None => return Err(Error::Substitution("absent entries but no substitute latents".into())),
            Some(s) if s.rows() != rows || s.dims() != encoded.dims() => {
                return Err(Error::Substitution(format!(
                    "substitutes {:?}x{} do not match latents {:?}x{rows}",
                    s.dims(),
                    s.rows(),
                    encoded.dims()
                )))
            }
            _ => {}
        }
    }
    let dims = encoded.dims();
    let width: usize = dims.iter().sum();
    let mut out = Tensor2::zeros(rows, width);
    for (r, pres) in presence.iter().enumerate() {
        let mut off = 0;
        let row = out.row_mut(r);
        for (j, &d) in dims.iter().enumerate() {
            let src =
                if pres[j] { encoded.blocks[j].row(r) } else { substitutes.expect("checked above").blocks[j].row(r) };
            row[off..off + d].copy_from_slice(src);
            off += d;
        }
    }
    Ok(out)
}

fn manifest_lines(sections: &[(String, &Network)]) -> Vec<String> {
    let mut lines = Vec::new();
    for (name, net) in sections {
        for (i, spec) in net.specs().iter().enumerate() {
            let desc = match *spec {
                LayerSpec::Affine { in_dim, out_dim, bias } => {
                    format!(
                        "affine weight {out_dim}x{in_dim}{}",
                        if bias { format!(" bias {out_dim}") } else { String::new() }
                    )
                }
                LayerSpec::Batchnorm { dim } => format!("batchnorm scale {dim} shift {dim} running {dim}x2"),
                LayerSpec::Activation { dim, kind } => format!("activation {kind:?} {dim}").to_lowercase(),
            };
            lines.push(format!("{name}.{i} {desc}"));
        }
    }
    lines
}

fn checkpoint_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".params");
    let mut m = prefix.as_os_str().to_owned();
    m.push(".manifest");
    (PathBuf::from(p), PathBuf::from(m))
}

fn write_checkpoint(prefix: &Path, values: &[f64], manifest: Vec<String>) -> Result<()> {
    let (pp, mp) = checkpoint_paths(prefix);
    let mut body = String::with_capacity(values.len() * 24);
    for v in values {
        body.push_str(&fmt_f64(*v));
        body.push('\n');
    }
    fs::write(&pp, body).map_err(io_err(&pp))?;
    let mut text = manifest.join("\n");
    text.push_str(&format!("\nvalues {}\n", values.len()));
    fs::write(&mp, text).map_err(io_err(&mp))
}

fn read_checkpoint(prefix: &Path, expected_manifest: Vec<String>, expected_len: usize) -> Result<Vec<f64>> {
    let (pp, mp) = checkpoint_paths(prefix);
    let manifest = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let mut expect = expected_manifest.join("\n");
    expect.push_str(&format!("\nvalues {expected_len}\n"));
    if manifest != expect {
        return Err(Error::Protocol(format!("{} does not match this architecture", mp.display())));
    }
    let values = fs::read_to_string(&pp).map_err(io_err(&pp))?.lines().map(parse_f64).collect::<Result<Vec<_>>>()?;
    if values.len() != expected_len {
        return Err(Error::Protocol(format!(
            "{} holds {} values, expected {expected_len}",
            pp.display(),
            values.len()
        )));
    }
    Ok(values)
}

impl ModelParams {
    fn sections(&self) -> Vec<(String, &Network)> {
        let mut s: Vec<(String, &Network)> =
            self.encoders.iter().enumerate().map(|(i, e)| (format!("encoder{i}"), e)).collect();
        s.push(("fusion_head".into(), &self.fusion_head));
        s
    }

    /// Writes `<prefix>.params` (one value per line) and `<prefix>.manifest`.
    pub fn save_checkpoint(&self, prefix: &Path) -> Result<()> {
        write_checkpoint(prefix, &self.flatten(), manifest_lines(&self.sections()))
    }

    /// Loads values saved by [`ModelParams::save_checkpoint`] into a model of the same shape.
    pub fn load_checkpoint(&mut self, prefix: &Path) -> Result<()> {
        let v = read_checkpoint(prefix, manifest_lines(&self.sections()), self.num_params())?;
        self.load_flat(&v)
    }
}

impl GeneratorParams {
    fn sections(&self) -> Vec<(String, &Network)> {
        let mut s = vec![("trunk".to_string(), &self.trunk)];
        s.extend(self.heads.iter().enumerate().map(|(i, h)| (format!("head{i}"), h)));
        s
    }

    pub fn save_checkpoint(&self, prefix: &Path) -> Result<()> {
        write_checkpoint(prefix, &self.full_state(), manifest_lines(&self.sections()))
    }

    pub fn load_checkpoint(&mut self, prefix: &Path) -> Result<()> {
        let n = self.num_params() + self.trunk.num_buffers();
        let v = read_checkpoint(prefix, manifest_lines(&self.sections()), n)?;
        self.load_full_state(&v)
    }
}
