//! Masked autoencoder over event patches.
//!
//! Pipeline for pre-training:
//!
//! 1. [`mask_patches`] hides `round(ratio * m)` patches.
//! 2. Visible patches are embedded by a shared per-point MLP followed by a
//!    max-pool over the patch (a PointNet-style set encoder).
//! 3. Patch centers go through a positional MLP; the result is added to the
//!    tokens at the encoder input and again at the decoder input.
//! 4. The encoder sees only visible tokens. The decoder sees the encoded
//!    visible tokens plus one shared learned mask token per hidden patch.
//! 5. A single affine layer maps each decoded mask slot to `k * 3` values,
//!    compared against the hidden patch with the Chamfer distance.
//!
//! For classification every patch is encoded (no masking) and a small head
//! reads the mean- and max-pooled encoder output.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{chamfer_patch, softmax_in_place, Graph, ParamId, ParamStore, Var};
use crate::patch::PatchSet;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("masking would leave no visible patch")]
    AllMasked,
    #[error("need at least {needed} patches, found {found}")]
    TooFewPatches { needed: usize, found: usize },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("empty point set")]
    EmptySet,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub n_classes: usize,
    /// Points per patch; fixes the reconstruction head width.
    pub patch_k: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            encoder_depth: 3,
            decoder_depth: 2,
            heads: 4,
            mlp_ratio: 2,
            mask_ratio: 0.8,
            n_classes: 10,
            patch_k: 32,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::InvalidConfig(s));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} not in [0, 1)", self.mask_ratio));
        }
        if self.mlp_ratio == 0 || self.patch_k == 0 || self.n_classes == 0 {
            return bad("mlp_ratio, patch_k and n_classes must be >= 1".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0".into());
        }
        Ok(())
    }
}

/// Visible/hidden split of one patch set.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// `v x k x 3`, patch-local.
    pub visible_patches: Tensor,
    /// `v x 3`.
    pub visible_centers: Tensor,
    /// `(m - v) x 3`.
    pub masked_centers: Tensor,
    /// `(m - v) x k x 3`, patch-local.
    pub gt_masked: Tensor,
    pub visible_indices: Vec<usize>,
    pub mask_indices: Vec<usize>,
    pub k: usize,
}

impl MaskedBatch {
    pub fn n_visible(&self) -> usize {
        self.visible_indices.len()
    }

    pub fn n_masked(&self) -> usize {
        self.mask_indices.len()
    }
}

fn patches_tensor(set: &PatchSet, idx: &[usize]) -> (Tensor, Tensor) {
    let k = set.k;
    let mut pts = Vec::with_capacity(idx.len() * k * 3);
    let mut centers = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        let p = &set.patches[i];
        pts.extend(p.local.iter().flatten());
        centers.extend_from_slice(&p.center);
    }
    (
        Tensor::new(vec![idx.len(), k, 3], pts),
        Tensor::new(vec![idx.len(), 3], centers),
    )
}

/// Hides `round(ratio * m)` uniformly chosen patches.
pub fn mask_patches<R: Rng + ?Sized>(set: &PatchSet, ratio: f64, rng: &mut R) -> Result<MaskedBatch, ModelError> {
    let m = set.len();
    if m < 2 {
        return Err(ModelError::TooFewPatches { needed: 2, found: m });
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(ModelError::InvalidConfig(format!("mask ratio {ratio} not in [0, 1)")));
    }
    let n_mask = (ratio * m as f64).round() as usize;
    if n_mask >= m {
        return Err(ModelError::AllMasked);
    }
    let mut hidden = index::sample(rng, m, n_mask).into_vec();
    hidden.sort_unstable();
    let mut is_hidden = vec![false; m];
    for &i in &hidden {
        is_hidden[i] = true;
    }
    let visible: Vec<usize> = (0..m).filter(|&i| !is_hidden[i]).collect();
    let (visible_patches, visible_centers) = patches_tensor(set, &visible);
    let (gt_masked, masked_centers) = patches_tensor(set, &hidden);
    Ok(MaskedBatch {
        visible_patches,
        visible_centers,
        masked_centers,
        gt_masked,
        visible_indices: visible,
        mask_indices: hidden,
        k: set.k,
    })
}

/// Every patch of a set as `m x k x 3` local points and `m x 3` centers.
pub fn unmasked_tensors(set: &PatchSet) -> (Tensor, Tensor) {
    let all: Vec<usize> = (0..set.len()).collect();
    patches_tensor(set, &all)
}

/// Symmetric squared-L2 Chamfer distance between two point sets:
/// `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2`.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, ModelError> {
    if a.is_empty() || b.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    Ok(chamfer_patch(&fa, &fb).0)
}

/// Chamfer distance averaged over patches; both tensors are `P x k x 3`.
pub fn chamfer_batch(pred: &Tensor, gt: &Tensor) -> Result<f64, ModelError> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 || pred.shape()[2] != 3 {
        return Err(ModelError::ShapeMismatch(format!(
            "chamfer expects equal P x k x 3 tensors, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (p, k) = (pred.shape()[0], pred.shape()[1]);
    if k == 0 {
        return Err(ModelError::EmptySet);
    }
    if p == 0 {
        return Ok(0.0);
    }
    let w = 3 * k;
    let total: f64 = (0..p)
        .map(|i| chamfer_patch(&pred.data()[i * w..(i + 1) * w], &gt.data()[i * w..(i + 1) * w]).0)
        .sum();
    Ok(total / p as f64)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp2 {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp2 {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    mlp: Mlp2,
}

impl Block {
    /// Pre-norm residual block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    fn forward(&self, g: &mut Graph, x: Var, heads: usize) -> Var {
        let dim = g.value(x).cols();
        let hd = dim / heads;
        let h = self.norm1.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let scale = 1.0 / (hd as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|i| {
                let qh = g.slice_cols(q, i * hd, hd);
                let kh = g.slice_cols(k, i * hd, hd);
                let vh = g.slice_cols(v, i * hd, hd);
                let s = g.matmul_bt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s);
                g.matmul(a, vh)
            })
            .collect();
        let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let att = self.proj.forward(g, att);
        let x = g.add(x, att);
        let h = self.norm2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// Parameter layout and forward passes of the masked autoencoder.
#[derive(Debug, Clone)]
pub struct MaeModel {
    cfg: ModelConfig,
    params: ParamStore,
    embed: Mlp2,
    pos: Mlp2,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    mask_token: ParamId,
    recon: Linear,
    cls: Mlp2,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    std: f64,
}

impl Init {
    /// Truncated at two standard deviations.
    fn trunc_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect()
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Init,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.init.trunc_normal(fan_in * fan_out);
        Linear {
            w: self.store.add(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn mlp(&mut self, name: &str, i: usize, h: usize, o: usize) -> Mlp2 {
        Mlp2 {
            fc1: self.linear(&format!("{name}.fc1"), i, h),
            fc2: self.linear(&format!("{name}.fc2"), h, o),
        }
    }

    fn block(&mut self, name: &str, dim: usize, ratio: usize) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), dim),
            q: self.linear(&format!("{name}.attn.q"), dim, dim),
            k: self.linear(&format!("{name}.attn.k"), dim, dim),
            v: self.linear(&format!("{name}.attn.v"), dim, dim),
            proj: self.linear(&format!("{name}.attn.proj"), dim, dim),
            norm2: self.norm(&format!("{name}.norm2"), dim),
            mlp: self.mlp(&format!("{name}.mlp"), dim, dim * ratio, dim),
        }
    }
}

impl MaeModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            normal: Normal::new(0.0, cfg.init_std).expect("validated std"),
            std: cfg.init_std,
        };
        let mut b = Builder {
            store: &mut params,
            init: &mut init,
        };
        let embed = b.mlp("embed", 3, c, c);
        let pos = b.mlp("pos", 3, c, c);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| b.block(&format!("encoder.{i}"), c, cfg.mlp_ratio))
            .collect();
        let decoder = (0..cfg.decoder_depth)
            .map(|i| b.block(&format!("decoder.{i}"), c, cfg.mlp_ratio))
            .collect();
        let mt = b.init.trunc_normal(c);
        let mask_token = b.store.add("mask_token", Tensor::matrix(1, c, mt));
        let recon = b.linear("recon", c, 3 * cfg.patch_k);
        let cls = b.mlp("cls", 2 * c, c, cfg.n_classes);
        Ok(MaeModel {
            cfg,
            params,
            embed,
            pos,
            encoder,
            decoder,
            mask_token,
            recon,
            cls,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ids of the classification head parameters.
    pub fn head_params(&self) -> Vec<ParamId> {
        let c = self.cls;
        vec![c.fc1.w, c.fc1.b, c.fc2.w, c.fc2.b]
    }

    /// Replaces the classification head with a freshly initialized one for
    /// `n_classes` outputs, keeping every other parameter.
    pub fn with_new_head(&self, n_classes: usize, seed: u64) -> Result<MaeModel, ModelError> {
        let cfg = ModelConfig {
            n_classes,
            seed,
            ..self.cfg.clone()
        };
        let mut fresh = MaeModel::new(cfg)?;
        let head: Vec<ParamId> = fresh.head_params();
        for (_, name, value) in self.params.iter() {
            if let Some(fid) = fresh.params.id(name) {
                if !head.contains(&fid) {
                    *fresh.params.get_mut(fid) = value.clone();
                }
            }
        }
        Ok(fresh)
    }

    /// Restores parameter values by name. Every parameter must be present
    /// with a matching shape.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        if named.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != value.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.params.get(id).shape(),
                    value.shape()
                )));
            }
            *self.params.get_mut(id) = value;
        }
        Ok(())
    }

    /// PointNet-style embedding: `v x k x 3` patches to `v x C` tokens.
    pub fn embed_patches(&self, g: &mut Graph, patches: &Tensor) -> Result<Var, ModelError> {
        let s = patches.shape();
        if s.len() != 3 || s[2] != 3 || s[1] == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "patches must be v x k x 3 with k >= 1, got {s:?}"
            )));
        }
        let (v, k) = (s[0], s[1]);
        let x = g.input(patches.clone().reshape(vec![v * k, 3]));
        let h = self.embed.forward(g, x);
        Ok(g.group_max(h, k))
    }

    /// Positional embedding of `j x 3` centers.
    pub fn pos_embed(&self, g: &mut Graph, centers: &Tensor) -> Result<Var, ModelError> {
        if centers.cols() != 3 || centers.shape().len() != 2 {
            return Err(ModelError::ShapeMismatch(format!(
                "centers must be j x 3, got {:?}",
                centers.shape()
            )));
        }
        let x = g.input(centers.clone());
        Ok(self.pos.forward(g, x))
    }

    pub fn encoder_forward(&self, g: &mut Graph, tokens: Var, pos: Var) -> Result<Var, ModelError> {
        if g.value(tokens).rows() == 0 {
            return Err(ModelError::ShapeMismatch("encoder needs at least one token".into()));
        }
        let mut x = g.add(tokens, pos);
        for b in &self.encoder {
            x = b.forward(g, x, self.cfg.heads);
        }
        if !g.value(x).all_finite() {
            return Err(ModelError::NonFiniteActivation("encoder"));
        }
        Ok(x)
    }

    /// Runs the decoder over `[latents; mask tokens]` with positional
    /// embeddings `all_pos` in the same row order, returning the rows of the
    /// `n_masked` mask slots.
    pub fn decoder_forward(&self, g: &mut Graph, latents: Var, all_pos: Var, n_masked: usize) -> Result<Var, ModelError> {
        let v = g.value(latents).rows();
        if g.value(all_pos).rows() != v + n_masked {
            return Err(ModelError::ShapeMismatch(format!(
                "decoder positions: expected {} rows, got {}",
                v + n_masked,
                g.value(all_pos).rows()
            )));
        }
        let seq = if n_masked > 0 {
            let mt = g.param(self.mask_token);
            let mt = g.broadcast_row(mt, n_masked);
            g.concat_rows(&[latents, mt])
        } else {
            latents
        };
        let mut x = g.add(seq, all_pos);
        for b in &self.decoder {
            x = b.forward(g, x, self.cfg.heads);
        }
        if !g.value(x).all_finite() {
            return Err(ModelError::NonFiniteActivation("decoder"));
        }
        let idx: Vec<usize> = (v..v + n_masked).collect();
        Ok(g.gather_rows(x, &idx))
    }

    /// `(m - v) x C` to `(m - v) x 3k` (one flattened patch per row).
    pub fn reconstruct_head(&self, g: &mut Graph, decoded: Var) -> Var {
        self.recon.forward(g, decoded)
    }

    /// Forward pass of pre-training: returns `(loss, reconstruction)`.
    pub fn pretrain_forward(&self, g: &mut Graph, batch: &MaskedBatch) -> Result<(Var, Var), ModelError> {
        let k = self.cfg.patch_k;
        if batch.k != k {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects k = {k}, batch has k = {}",
                batch.k
            )));
        }
        let (v, nm) = (batch.n_visible(), batch.n_masked());
        let c = self.cfg.embed_dim;

        let tokens = self.embed_patches(g, &batch.visible_patches)?;
        ledger(g, tokens, v, c, "T_v")?;
        let pos_vis = self.pos_embed(g, &batch.visible_centers)?;
        let latents = self.encoder_forward(g, tokens, pos_vis)?;

        let pos_mask = self.pos_embed(g, &batch.masked_centers)?;
        let all_pos = if nm > 0 { g.concat_rows(&[pos_vis, pos_mask]) } else { pos_vis };
        let decoded = self.decoder_forward(g, latents, all_pos, nm)?;
        ledger(g, decoded, nm, c, "D")?;
        let recon = self.reconstruct_head(g, decoded);
        ledger(g, recon, nm, 3 * k, "P_pre")?;
        let loss = g.chamfer(recon, batch.gt_masked.clone(), k);
        Ok((loss, recon))
    }

    /// Reconstructed hidden patches, `(m - v) x k x 3` in patch-local coordinates.
    pub fn reconstruct(&self, batch: &MaskedBatch) -> Result<Tensor, ModelError> {
        let mut g = Graph::new(&self.params);
        let (_, recon) = self.pretrain_forward(&mut g, batch)?;
        let nm = batch.n_masked();
        Ok(g.value(recon).clone().reshape(vec![nm, self.cfg.patch_k, 3]))
    }

    pub fn pretrain_loss(&self, batch: &MaskedBatch) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.params);
        let (loss, _) = self.pretrain_forward(&mut g, batch)?;
        Ok(g.scalar(loss))
    }

    /// Encodes every patch and returns `1 x n_classes` logits.
    pub fn classify_forward(&self, g: &mut Graph, set: &PatchSet) -> Result<Var, ModelError> {
        if set.is_empty() {
            return Err(ModelError::TooFewPatches { needed: 1, found: 0 });
        }
        if set.k != self.cfg.patch_k {
            return Err(ModelError::ShapeMismatch(format!(
                "model expects k = {}, patches have k = {}",
                self.cfg.patch_k, set.k
            )));
        }
        let (pts, centers) = unmasked_tensors(set);
        let tokens = self.embed_patches(g, &pts)?;
        let pos = self.pos_embed(g, &centers)?;
        let enc = self.encoder_forward(g, tokens, pos)?;
        let mean = g.mean_rows(enc);
        let m = g.value(enc).rows();
        let max = g.group_max(enc, m);
        let feat = g.concat_cols(&[mean, max]);
        let logits = self.cls.forward(g, feat);
        if !g.value(logits).all_finite() {
            return Err(ModelError::NonFiniteActivation("classifier"));
        }
        Ok(logits)
    }

    pub fn logits(&self, set: &PatchSet) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let l = self.classify_forward(&mut g, set)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Cross-entropy loss node for one labeled patch set.
    pub fn classify_loss(&self, g: &mut Graph, set: &PatchSet, label: usize) -> Result<Var, ModelError> {
        if label >= self.cfg.n_classes {
            return Err(ModelError::LabelOutOfRange {
                label,
                n_classes: self.cfg.n_classes,
            });
        }
        let logits = self.classify_forward(g, set)?;
        Ok(g.cross_entropy(logits, label))
    }
}

fn ledger(g: &Graph, v: Var, rows: usize, cols: usize, what: &str) -> Result<(), ModelError> {
    let t = g.value(v);
    if t.rows() != rows || t.cols() != cols {
        return Err(ModelError::ShapeMismatch(format!(
            "{what}: expected {rows} x {cols}, got {} x {}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::Patch;

    pub(crate) fn synthetic_set(m: usize, k: usize, seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..m)
            .map(|_| {
                let center = [rng.random(), rng.random(), rng.random()];
                let local: Vec<[f64; 3]> = (0..k)
                    .map(|_| {
                        [
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                            rng.random_range(-0.05..0.05),
                        ]
                    })
                    .collect();
                Patch {
                    center,
                    center_index: 0,
                    neighbor_indices: vec![0; k],
                    points: local
                        .iter()
                        .map(|d| [center[0] - d[0], center[1] - d[1], center[2] - d[2]])
                        .collect(),
                    local,
                    polarity: 1,
                    residual: 0.0,
                    fallback: false,
                }
            })
            .collect();
        PatchSet { patches, k }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            patch_k: 8,
            n_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn mask_counts() {
        let set = synthetic_set(64, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = mask_patches(&set, 0.8, &mut rng).unwrap();
        assert_eq!((b.n_masked(), b.n_visible()), (51, 13));
        let b0 = mask_patches(&set, 0.0, &mut rng).unwrap();
        assert_eq!((b0.n_masked(), b0.n_visible()), (0, 64));
        let a = mask_patches(&set, 0.8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = mask_patches(&set, 0.8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.mask_indices.iter().chain(&a.visible_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn mask_rejects_all_hidden() {
        let set = synthetic_set(2, 4, 0);
        assert_eq!(
            mask_patches(&set, 0.75, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ModelError::AllMasked)
        );
        let one = synthetic_set(1, 4, 0);
        assert!(mask_patches(&one, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn embed_shape_and_permutation_invariance() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let set = synthetic_set(13, 8, 1);
        let (pts, _) = unmasked_tensors(&set);
        let mut g = Graph::new(model.params());
        let t = model.embed_patches(&mut g, &pts).unwrap();
        assert_eq!((g.value(t).rows(), g.value(t).cols()), (13, 16));
        let first = g.value(t).row(0).to_vec();

        let mut permuted = set.clone();
        permuted.patches[0].local.reverse();
        permuted.patches[0].local.swap(1, 5);
        let (pts2, _) = unmasked_tensors(&permuted);
        let mut g2 = Graph::new(model.params());
        let t2 = model.embed_patches(&mut g2, &pts2).unwrap();
        assert_eq!(g2.value(t2).row(0), &first[..]);

        let bad = Tensor::zeros(&[2, 3]);
        assert!(model.embed_patches(&mut g2, &bad).is_err());
    }

    #[test]
    fn embed_repeated_point() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let pt = [0.01, -0.02, 0.03];
        let rep = Tensor::new(vec![1, 8, 3], (0..8).flat_map(|_| pt).collect());
        let single = Tensor::new(vec![1, 1, 3], pt.to_vec());
        let mut g = Graph::new(model.params());
        let a = model.embed_patches(&mut g, &rep).unwrap();
        let b = model.embed_patches(&mut g, &single).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn pos_embed_edges() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let mut g = Graph::new(model.params());
        let e = model.pos_embed(&mut g, &Tensor::zeros(&[0, 3])).unwrap();
        assert_eq!(g.value(e).len(), 0);
        let c = Tensor::matrix(2, 3, vec![0.3, 0.4, 0.5, 0.3, 0.4, 0.5]);
        let e = model.pos_embed(&mut g, &c).unwrap();
        assert_eq!(g.value(e).row(0), g.value(e).row(1));
        assert_eq!(g.value(e).cols(), 16);
    }

    #[test]
    fn zero_depth_encoder_is_sum() {
        let cfg = ModelConfig {
            encoder_depth: 0,
            ..small_cfg()
        };
        let model = MaeModel::new(cfg).unwrap();
        let set = synthetic_set(5, 8, 2);
        let (pts, centers) = unmasked_tensors(&set);
        let mut g = Graph::new(model.params());
        let t = model.embed_patches(&mut g, &pts).unwrap();
        let p = model.pos_embed(&mut g, &centers).unwrap();
        let out = model.encoder_forward(&mut g, t, p).unwrap();
        let want: Vec<f64> = g.value(t).data().iter().zip(g.value(p).data()).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(out).data(), &want[..]);
    }

    #[test]
    fn zero_recon_head_gives_zero_output() {
        let mut model = MaeModel::new(small_cfg()).unwrap();
        for name in ["recon.w", "recon.b"] {
            let id = model.params().id(name).unwrap();
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let set = synthetic_set(10, 8, 3);
        let b = mask_patches(&set, 0.6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = model.reconstruct(&b).unwrap();
        assert_eq!(r.shape(), &[6, 8, 3]);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_masked_slots() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let set = synthetic_set(6, 8, 3);
        let b = mask_patches(&set, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = model.reconstruct(&b).unwrap();
        assert_eq!(r.shape(), &[0, 8, 3]);
        assert_eq!(model.pretrain_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_basics() {
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        let a = [[0.1, 0.2, 0.3], [0.5, 0.1, 0.0]];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[], &a), Err(ModelError::EmptySet));
        assert!(chamfer_batch(&Tensor::zeros(&[2, 3, 3]), &Tensor::zeros(&[2, 4, 3])).is_err());
    }

    #[test]
    fn classifier_shape_and_softmax() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let set = synthetic_set(64, 8, 4);
        let l1 = model.logits(&set).unwrap();
        let l2 = model.logits(&set).unwrap();
        assert_eq!(l1.len(), 3);
        assert_eq!(l1, l2);
        assert!((softmax(&l1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut g = Graph::new(model.params());
        assert!(matches!(
            model.classify_loss(&mut g, &set, 3),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        assert!(MaeModel::new(ModelConfig {
            embed_dim: 10,
            heads: 4,
            ..Default::default()
        })
        .is_err());
        assert!(MaeModel::new(ModelConfig {
            mask_ratio: 1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn new_head_keeps_backbone() {
        let model = MaeModel::new(small_cfg()).unwrap();
        let other = model.with_new_head(5, 99).unwrap();
        assert_eq!(other.config().n_classes, 5);
        let id = model.params().id("encoder.0.attn.q.w").unwrap();
        let id2 = other.params().id("encoder.0.attn.q.w").unwrap();
        assert_eq!(model.params().get(id), other.params().get(id2));
    }
}
