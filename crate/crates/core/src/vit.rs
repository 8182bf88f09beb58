//! ViT backbone, patch masking and masked event modeling.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::data::{HistogramSource, InputSpec};
use crate::dvae::{self, argmax, patchify, patchify_batch, unpatchify, DvaeError, DvaeModel, TokenGrid};
use crate::histogram::{render, ChannelLayout, EventHistogram};
use crate::{rng_from_seed, step_rng};
use crate::tensor::{
    clip_global_norm, AdamConfig, LrSchedule, OptimizerState, ParamId, ParamOptions, ParamStore, Tape, Tensor,
    TensorError, Var,
};

pub const DEFAULT_MASK_RATIO: f64 = 0.5;
const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("mask is empty; the masked-token loss is undefined")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dvae(#[from] DvaeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, VitError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub layout: ChannelLayout,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Width of the masked-token head; equals the dVAE codebook size.
    pub vocab: usize,
    /// Adds the linear pixel-regression head used by the eMAE objectives.
    pub pixel_head: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// L=4, D=128, 4 heads, MLP 256 on 2×64×64 inputs with 16×16 patches.
    pub fn desk() -> Self {
        VitConfig {
            layout: ChannelLayout::TwoPolarity,
            height: 64,
            width: 64,
            patch: 16,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_dim: 256,
            vocab: 128,
            pixel_head: false,
        }
    }

    /// ViT-Base: L=12, D=768, 12 heads, MLP 3072 on 224×224 inputs.
    pub fn base() -> Self {
        VitConfig {
            height: 224,
            width: 224,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            vocab: dvae::REFERENCE_VOCAB,
            ..Self::desk()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.layout.channels() * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VitError::InvalidConfig(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} is not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.mlp_dim == 0 || self.vocab < 2 {
            return bad("depth, mlp_dim must be positive and vocab at least 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it shifts every score of a query equally and cancels
    /// in the softmax.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// `[(2R-1)(2C-1), heads]`, indexed by (Δrow, Δcol).
    pub rel_bias: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub mask_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    /// Masked-token head; dropped when a task head is attached.
    pub mem: Option<(ParamId, ParamId)>,
    pub pixel: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    pub params: ParamStore,
    pub ids: VitParams,
    rel_index: Vec<usize>,
}

/// Flattened (Δrow, Δcol) table index for every ordered pair of patches.
pub fn relative_position_index(rows: usize, cols: usize) -> Vec<usize> {
    let n = rows * cols;
    let span = 2 * cols - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = (i / cols) + rows - 1 - (j / cols);
            let dc = (i % cols) + cols - 1 - (j % cols);
            out.push(dr * span + dc);
        }
    }
    out
}

/// Block index owning a parameter: 0 for the patch embedding and mask
/// embedding, `ℓ` for block `ℓ` (1-based), `depth` for the final norm and heads.
pub fn layer_id(name: &str, depth: usize) -> usize {
    if name.starts_with("patch_embed") || name == "mask_embedding" {
        0
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        rest.split('.').next().and_then(|s| s.parse::<usize>().ok()).map_or(depth, |l| l + 1)
    } else {
        depth
    }
}

impl VitModel {
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, m, pd) = (config.dim, config.mlp_dim, config.patch_dim());
        let (rows, cols) = config.grid();
        let table = (2 * rows - 1) * (2 * cols - 1);
        let mut p = ParamStore::new();
        let mut w = |p: &mut ParamStore, name: String, shape: &[usize]| p.add(name, Tensor::randn(shape, INIT_STD, rng));
        let patch_w = w(&mut p, "patch_embed.w".into(), &[pd, d]);
        let patch_b = p.add("patch_embed.b", Tensor::zeros(&[d]));
        let mask_emb = w(&mut p, "mask_embedding".into(), &[d]);
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let n = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: p.add(n("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: p.add(n("ln1.b"), Tensor::zeros(&[d])),
                wq: w(&mut p, n("attn.wq"), &[d, d]),
                bq: p.add(n("attn.bq"), Tensor::zeros(&[d])),
                wk: w(&mut p, n("attn.wk"), &[d, d]),
                wv: w(&mut p, n("attn.wv"), &[d, d]),
                bv: p.add(n("attn.bv"), Tensor::zeros(&[d])),
                wo: w(&mut p, n("attn.wo"), &[d, d]),
                bo: p.add(n("attn.bo"), Tensor::zeros(&[d])),
                rel_bias: p.add(n("attn.rel_bias"), Tensor::zeros(&[table, config.heads])),
                ln2_g: p.add(n("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: p.add(n("ln2.b"), Tensor::zeros(&[d])),
                w1: w(&mut p, n("mlp.w1"), &[d, m]),
                b1: p.add(n("mlp.b1"), Tensor::zeros(&[m])),
                w2: w(&mut p, n("mlp.w2"), &[m, d]),
                b2: p.add(n("mlp.b2"), Tensor::zeros(&[d])),
            });
        }
        let norm_g = p.add("norm.g", Tensor::full(&[d], 1.0));
        let norm_b = p.add("norm.b", Tensor::zeros(&[d]));
        let mem_w = w(&mut p, "mem_head.w".into(), &[d, config.vocab]);
        let mem_b = p.add("mem_head.b", Tensor::zeros(&[config.vocab]));
        let pixel = config.pixel_head.then(|| {
            let pw = w(&mut p, "pixel_head.w".into(), &[d, pd]);
            (pw, p.add("pixel_head.b", Tensor::zeros(&[pd])))
        });
        let ids = VitParams { patch_w, patch_b, mask_emb, blocks, norm_g, norm_b, mem: Some((mem_w, mem_b)), pixel };
        Ok(VitModel { config, params: p, ids, rel_index: relative_position_index(rows, cols) })
    }

    /// Rebuilds a model from a checkpointed store; parameters are looked up
    /// by name.
    pub fn from_params(config: VitConfig, params: ParamStore) -> Result<Self> {
        let mut model = VitModel::new(config, &mut rng_from_seed(0))?;
        let expected = model.params.len();
        if model.params.load_matching(&params) != expected {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint does not provide all {expected} parameters of this configuration"
            ))
            .into());
        }
        Ok(model)
    }

    /// Per-parameter learning-rate multipliers `decay^(L - ℓ)`; decay is
    /// disabled for gains, biases, the mask embedding and position tables.
    pub fn param_options(&self, layer_decay: f64) -> Vec<ParamOptions> {
        let depth = self.config.depth;
        self.params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(name, t)| ParamOptions {
                lr_scale: layer_decay.powi((depth - layer_id(name, depth)) as i32),
                decay: t.ndim() > 1 && !name.ends_with("rel_bias"),
            })
            .collect()
    }

    /// Zeroes every relative position table.
    pub fn zero_position_bias(&mut self) {
        for b in self.ids.blocks.clone() {
            self.params.get_mut(b.rel_bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn affine_ln<'t>(&self, bound: &[Var<'t>], x: Var<'t>, g: ParamId, b: ParamId) -> Result<Var<'t>> {
        Ok(x.layer_norm(LN_EPS)?.mul(bound[g.0])?.add(bound[b.0])?)
    }

    fn block<'t>(
        &self,
        bound: &[Var<'t>],
        bp: &BlockParams,
        x: Var<'t>,
        attn_out: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let p = |id: ParamId| bound[id.0];
        let shape = x.shape();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let n = self.affine_ln(bound, x, bp.ln1_g, bp.ln1_b)?;
        let split = |x: Var<'t>, axes: &[usize]| -> Result<Var<'t>> { Ok(x.reshape(&[b, s, h, dh])?.permute(axes)?) };
        let q = split(n.matmul(p(bp.wq))?.add(p(bp.bq))?, &[0, 2, 1, 3])?;
        let kt = split(n.matmul(p(bp.wk))?, &[0, 2, 3, 1])?;
        let v = split(n.matmul(p(bp.wv))?.add(p(bp.bv))?, &[0, 2, 1, 3])?;
        let bias = p(bp.rel_bias).index_select(&self.rel_index)?.reshape(&[s, s, h])?.permute(&[2, 0, 1])?;
        let scores = q.matmul(kt)?.scale(1.0 / (dh as f64).sqrt()).add(bias)?;
        let attn = scores.softmax()?;
        if let Some(out) = attn_out.as_deref_mut() {
            out.push((*attn.value()).clone());
        }
        let o = attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
        let x = x.add(o.matmul(p(bp.wo))?.add(p(bp.bo))?)?;
        let n2 = self.affine_ln(bound, x, bp.ln2_g, bp.ln2_b)?;
        let mlp = n2.matmul(p(bp.w1))?.add(p(bp.b1))?.gelu().matmul(p(bp.w2))?.add(p(bp.b2))?;
        Ok(x.add(mlp)?)
    }

    /// Backbone on stacked patches `[B, S, C·P·P]`, returning normalized
    /// features `[B, S, D]`. Masked positions have their embedding replaced
    /// by the mask embedding before any mixing.
    pub fn forward_var<'t>(
        &self,
        bound: &[Var<'t>],
        patches: Var<'t>,
        masks: Option<&[MaskSet]>,
        mut attn_out: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        let shape = patches.shape();
        let (s, d) = (self.config.num_patches(), self.config.dim);
        if shape.len() != 3 || shape[1] != s || shape[2] != self.config.patch_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "vit_forward",
                shapes: vec![shape, vec![0, s, self.config.patch_dim()]],
            }
            .into());
        }
        let b = shape[0];
        let p = |id: ParamId| bound[id.0];
        let mut x = patches.matmul(p(self.ids.patch_w))?.add(p(self.ids.patch_b))?;
        if let Some(masks) = masks {
            if masks.len() != b {
                return Err(VitError::InvalidConfig(format!("{} masks for a batch of {b}", masks.len())));
            }
            if masks.iter().any(|m| !m.is_empty()) {
                let mut keep = Tensor::full(&[b, s, d], 1.0);
                let mut fill = Tensor::zeros(&[b, s, d]);
                for (bi, m) in masks.iter().enumerate() {
                    for &k in &m.indices {
                        let at = (bi * s + k) * d;
                        keep.data_mut()[at..at + d].iter_mut().for_each(|v| *v = 0.0);
                        fill.data_mut()[at..at + d].iter_mut().for_each(|v| *v = 1.0);
                    }
                }
                let tape = patches.tape();
                let masked = tape.constant(fill).mul(p(self.ids.mask_emb))?;
                x = x.mul(tape.constant(keep))?.add(masked)?;
            }
        }
        for bp in &self.ids.blocks {
            x = self.block(bound, bp, x, &mut attn_out)?;
        }
        self.affine_ln(bound, x, self.ids.norm_g, self.ids.norm_b)
    }

    /// MEM-head logits `[B·S, N]` from features `[B, S, D]`.
    pub fn mem_logits<'t>(&self, bound: &[Var<'t>], features: Var<'t>) -> Result<Var<'t>> {
        let (w, b) = self.ids.mem.ok_or_else(|| VitError::InvalidConfig("model has no MEM head".into()))?;
        let shape = features.shape();
        let f = features.reshape(&[shape[0] * shape[1], self.config.dim])?;
        Ok(f.matmul(bound[w.0])?.add(bound[b.0])?)
    }

    /// Number of leading parameters that make up the backbone (everything
    /// up to and including the final norm).
    pub fn backbone_len(&self) -> usize {
        self.ids.norm_b.0 + 1
    }

    /// Drops the MEM and pixel heads, keeping only backbone parameters.
    pub fn strip_heads(&mut self) {
        let keep = self.backbone_len();
        self.params.truncate(keep);
        self.ids.mem = None;
        self.ids.pixel = None;
    }

    /// Pixel-head patch reconstructions `[B·S, C·P·P]`.
    pub fn pixel_output<'t>(&self, bound: &[Var<'t>], features: Var<'t>) -> Result<Var<'t>> {
        let (pw, pb) = self
            .ids
            .pixel
            .ok_or_else(|| VitError::InvalidConfig("model has no pixel head".into()))?;
        let shape = features.shape();
        let f = features.reshape(&[shape[0] * shape[1], self.config.dim])?;
        Ok(f.matmul(bound[pw.0])?.add(bound[pb.0])?)
    }

    /// Stacks histograms into the `[B, S, C·P·P]` input layout.
    pub fn batch_input(&self, hists: &[EventHistogram]) -> Result<Tensor> {
        let flat = patchify_batch(hists, self.config.patch)?;
        Ok(flat.reshaped(&[hists.len(), self.config.num_patches(), self.config.patch_dim()])?)
    }
}

/// Sorted, distinct masked patch indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    pub num_patches: usize,
    pub indices: Vec<usize>,
}

impl MaskSet {
    pub fn new(num_patches: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= num_patches) {
            return Err(TensorError::IndexOutOfRange { index: *indices.last().unwrap(), len: num_patches }.into());
        }
        Ok(MaskSet { num_patches, indices })
    }

    pub fn empty(num_patches: usize) -> Self {
        MaskSet { num_patches, indices: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }
}

/// Uniform sample of `round(ratio · num_patches)` distinct patches.
pub fn sample_mask<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> MaskSet {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio must lie in [0, 1]");
    let k = ((ratio * num_patches as f64).round() as usize).min(num_patches);
    let mut indices = sample(rng, num_patches, k).into_vec();
    indices.sort_unstable();
    MaskSet { num_patches, indices }
}

/// Row indices of masked positions in the flattened `[B·S]` layout.
fn masked_rows(masks: &[MaskSet], s: usize) -> Vec<usize> {
    masks.iter().enumerate().flat_map(|(b, m)| m.indices.iter().map(move |&k| b * s + k)).collect()
}

/// Cross-entropy between MEM logits and dVAE tokens over masked positions.
/// `tokens` holds one id per patch, flattened in batch order.
pub fn mem_loss_from_logits<'t>(logits: Var<'t>, tokens: &[usize], masks: &[MaskSet], s: usize) -> Result<Var<'t>> {
    let rows = masked_rows(masks, s);
    if rows.is_empty() {
        return Err(VitError::EmptyMask);
    }
    let targets: Vec<usize> = rows.iter().map(|&r| tokens[r]).collect();
    Ok(logits.index_select(&rows)?.cross_entropy(&targets)?)
}

/// Masked-token loss and accuracy on one batch.
pub fn mem_loss_var<'t>(
    model: &VitModel,
    bound: &[Var<'t>],
    patches: Var<'t>,
    tokens: &[usize],
    masks: &[MaskSet],
) -> Result<(Var<'t>, f64)> {
    let feats = model.forward_var(bound, patches, Some(masks), None)?;
    let logits = model.mem_logits(bound, feats)?;
    let s = model.config.num_patches();
    let loss = mem_loss_from_logits(logits, tokens, masks, s)?;
    let value = logits.value();
    let rows = masked_rows(masks, s);
    let hits = rows.iter().filter(|&&r| argmax(value.row(r)) == tokens[r]).count();
    Ok((loss, hits as f64 / rows.len() as f64))
}

/// Masked-token loss for a single histogram.
pub fn mem_loss(model: &VitModel, hist: &EventHistogram, tokens: &TokenGrid, mask: &MaskSet) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let x = tape.constant(model.batch_input(std::slice::from_ref(hist))?);
    let (loss, _) = mem_loss_var(model, &bound, x, &tokens.ids, std::slice::from_ref(mask))?;
    Ok(loss.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mem,
    EmaeOnlyMask,
    EmaeEntire,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Mem => "mem",
            Objective::EmaeOnlyMask => "emae-only-mask",
            Objective::EmaeEntire => "emae-entire",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaeMode {
    OnlyMask,
    EntireHist,
}

/// Pixel-regression loss: MSE between head output and true patches over the
/// masked rows (`OnlyMask`) or all rows (`EntireHist`).
pub fn emae_loss_from_output<'t>(
    output: Var<'t>,
    target: Var<'t>,
    masks: &[MaskSet],
    s: usize,
    mode: EmaeMode,
) -> Result<Var<'t>> {
    match mode {
        EmaeMode::EntireHist => Ok(output.mse(target)?),
        EmaeMode::OnlyMask => {
            let rows = masked_rows(masks, s);
            if rows.is_empty() {
                return Err(VitError::EmptyMask);
            }
            Ok(output.index_select(&rows)?.mse(target.index_select(&rows)?)?)
        }
    }
}

pub fn emae_loss_var<'t>(
    model: &VitModel,
    bound: &[Var<'t>],
    patches: Var<'t>,
    masks: &[MaskSet],
    mode: EmaeMode,
) -> Result<Var<'t>> {
    let feats = model.forward_var(bound, patches, Some(masks), None)?;
    let out = model.pixel_output(bound, feats)?;
    let shape = patches.shape();
    let target = patches.reshape(&[shape[0] * shape[1], shape[2]])?;
    emae_loss_from_output(out, target, masks, model.config.num_patches(), mode)
}

pub fn emae_loss(model: &VitModel, hist: &EventHistogram, mask: &MaskSet, mode: EmaeMode) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let x = tape.constant(model.batch_input(std::slice::from_ref(hist))?);
    Ok(emae_loss_var(model, &bound, x, std::slice::from_ref(mask), mode)?.item())
}

/// Backbone features `[num_patches, D]` for one histogram.
pub fn forward_backbone(model: &VitModel, hist: &EventHistogram, mask: Option<&MaskSet>) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let x = tape.constant(model.batch_input(std::slice::from_ref(hist))?);
    let masks = mask.map(|m| vec![m.clone()]);
    let f = model.forward_var(&bound, x, masks.as_deref(), None)?;
    Ok((*f.value()).clone().reshaped(&[model.config.num_patches(), model.config.dim])?)
}

/// Attention probabilities of every block, `[1, heads, S, S]` each.
pub fn attention_maps(model: &VitModel, hist: &EventHistogram) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let x = tape.constant(model.batch_input(std::slice::from_ref(hist))?);
    let mut maps = Vec::new();
    model.forward_var(&bound, x, None, Some(&mut maps))?;
    Ok(maps)
}

/// Token ids for a batch, flattened in batch order.
pub fn tokenize_batch(dvae: &DvaeModel, hists: &[EventHistogram]) -> Result<Vec<usize>> {
    let x = patchify_batch(hists, dvae.config.patch)?;
    let tape = Tape::new();
    let bound = dvae.params.bind_frozen(&tape);
    let logits = dvae.encode_var(&bound, tape.constant(x))?.value();
    Ok(logits.data().chunks(dvae.config.vocab).map(argmax).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: VitConfig,
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub mask_ratio: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: VitConfig::desk(),
            objective: Objective::Mem,
            steps: 2500,
            batch_size: 16,
            optimizer: AdamConfig { lr: 1.5e-3, ..AdamConfig::pretrain() },
            warmup_steps: 250,
            min_lr: 1e-6,
            mask_ratio: DEFAULT_MASK_RATIO,
            augment: AugmentConfig::desk(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Absent for the pixel-regression objectives.
    pub masked_token_accuracy: Option<f64>,
}

pub fn pretrain_curve_csv(rows: &[PretrainLogRow]) -> String {
    let mut out = String::from("step,loss,lr,masked_token_accuracy\n");
    for r in rows {
        let acc = r.masked_token_accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, acc));
    }
    out
}

/// Resumable pretraining state.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub model: VitModel,
    pub opt: OptimizerState,
    pub step: usize,
}

impl Pretrainer {
    pub fn new(config: &PretrainConfig) -> Result<Self> {
        let mut model_cfg = config.model;
        model_cfg.pixel_head |= config.objective != Objective::Mem;
        let model = VitModel::new(model_cfg, &mut rng_from_seed(config.seed))?;
        let opt = OptimizerState::with_options(config.optimizer, &model.params, model.param_options(1.0));
        Ok(Pretrainer { model, opt, step: 0 })
    }

    fn schedule(config: &PretrainConfig) -> LrSchedule {
        LrSchedule::Cosine {
            warmup_steps: config.warmup_steps as u64,
            total_steps: config.steps as u64,
            min_lr: config.min_lr,
        }
    }

    /// Runs one optimization step on a fresh augmented batch.
    pub fn step(
        &mut self,
        dvae: Option<&DvaeModel>,
        source: &HistogramSource,
        config: &PretrainConfig,
    ) -> Result<PretrainLogRow> {
        let mcfg = self.model.config;
        let spec = InputSpec { layout: mcfg.layout, size: (mcfg.height, mcfg.width) };
        if source.is_empty() {
            return Err(VitError::InvalidConfig("pretraining needs at least one stream".into()));
        }
        let mut rng = step_rng(config.seed, self.step as u64);
        let hists: Vec<EventHistogram> = source
            .batch_indices(config.seed, self.step, config.batch_size)
            .into_iter()
            .map(|i| source.train_input(i, &spec, &config.augment, &mut rng))
            .collect();
        let s = mcfg.num_patches();
        let masks: Vec<MaskSet> = (0..hists.len()).map(|_| sample_mask(s, config.mask_ratio, &mut rng)).collect();
        let lr = Self::schedule(config).lr_at(config.optimizer.lr, self.step as u64);
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape);
        let x = tape.constant(self.model.batch_input(&hists)?);
        let (loss, acc) = match config.objective {
            Objective::Mem => {
                let dvae = dvae.ok_or_else(|| VitError::InvalidConfig("masked-token objective needs a dVAE".into()))?;
                if dvae.config.vocab != mcfg.vocab {
                    return Err(VitError::InvalidConfig(format!(
                        "dVAE codebook has {} entries but the MEM head has {}",
                        dvae.config.vocab, mcfg.vocab
                    )));
                }
                let tokens = tokenize_batch(dvae, &hists)?;
                let (l, a) = mem_loss_var(&self.model, &bound, x, &tokens, &masks)?;
                (l, Some(a))
            }
            Objective::EmaeOnlyMask => (emae_loss_var(&self.model, &bound, x, &masks, EmaeMode::OnlyMask)?, None),
            Objective::EmaeEntire => (emae_loss_var(&self.model, &bound, x, &masks, EmaeMode::EntireHist)?, None),
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(TensorError::InvalidArgument(format!("non-finite pretraining loss at step {}", self.step)).into());
        }
        let grads = tape.backward(loss)?;
        let mut g = self.model.params.collect_grads(&bound, &grads);
        if let Some(max) = config.optimizer.clip_norm {
            clip_global_norm(&mut g, max);
        }
        self.opt.step(&mut self.model.params, &g, lr)?;
        let row = PretrainLogRow { step: self.step, loss: value, lr, masked_token_accuracy: acc };
        self.step += 1;
        Ok(row)
    }
}

/// Pretrains a fresh ViT; deterministic per `config.seed`. The dVAE is only
/// read (and only needed for the masked-token objective).
pub fn pretrain(
    dvae: Option<&DvaeModel>,
    source: &HistogramSource,
    config: &PretrainConfig,
) -> Result<(VitModel, Vec<PretrainLogRow>)> {
    let mut trainer = Pretrainer::new(config)?;
    let mut curve = Vec::with_capacity(config.steps);
    while trainer.step < config.steps {
        curve.push(trainer.step(dvae, source, config)?);
    }
    Ok((trainer.model, curve))
}

/// Masked input, token-level reconstruction and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTriple {
    pub masked_input: EventHistogram,
    pub reconstruction: EventHistogram,
    pub ground_truth: EventHistogram,
}

/// Decodes the dVAE tokens of visible patches together with the ViT's
/// predicted tokens at masked patches.
pub fn reconstruct_masked(dvae: &DvaeModel, vit: &VitModel, hist: &EventHistogram, mask: &MaskSet) -> Result<ReconTriple> {
    let mut tokens = dvae::tokenize(dvae, hist)?;
    if !mask.is_empty() {
        let tape = Tape::new();
        let bound = vit.params.bind_frozen(&tape);
        let x = tape.constant(vit.batch_input(std::slice::from_ref(hist))?);
        let feats = vit.forward_var(&bound, x, Some(std::slice::from_ref(mask)), None)?;
        let logits = vit.mem_logits(&bound, feats)?.value();
        for &k in &mask.indices {
            tokens.ids[k] = argmax(logits.row(k));
        }
    }
    let reconstruction = dvae::decode_tokens(dvae, &tokens)?;
    let p = vit.config.patch;
    let mut patches = patchify(hist, p)?;
    let dim = patches.shape()[1];
    for &k in &mask.indices {
        patches.data_mut()[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
    }
    let masked_input = unpatchify(&patches, hist.layout, hist.height, hist.width, p)?;
    Ok(ReconTriple { masked_input, reconstruction, ground_truth: hist.clone() })
}

impl ReconTriple {
    /// Writes `{prefix}_masked.ppm`, `{prefix}_recon.ppm`, `{prefix}_truth.ppm`.
    pub fn write_ppm(&self, dir: &Path, prefix: &str) -> Result<()> {
        render(&self.masked_input, &dir.join(format!("{prefix}_masked.ppm")))?;
        render(&self.reconstruction, &dir.join(format!("{prefix}_recon.ppm")))?;
        render(&self.ground_truth, &dir.join(format!("{prefix}_truth.ppm")))?;
        Ok(())
    }
}
