//! The discrete VAE event tokenizer.
//!
//! Encoder and decoder are per-patch two-layer MLPs with weights shared across
//! patches, so every token corresponds to exactly one transformer patch.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::data::{HistogramSource, InputSpec};
use crate::histogram::{ChannelLayout, EventHistogram};
use crate::{rng_from_seed, step_rng};
use crate::tensor::{
    clip_global_norm, AdamConfig, LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Tensor, TensorError, Var,
};

/// Reference codebook size; the desk default is much smaller.
pub const REFERENCE_VOCAB: usize = 8092;
pub const DEFAULT_KL_WEIGHT: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DvaeError {
    #[error("histogram {height}x{width} is not divisible into {patch}x{patch} patches")]
    IndivisibleShape { height: usize, width: usize, patch: usize },
    #[error("temperature must be positive, got {0}")]
    NonpositiveTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, DvaeError>;

/// Splits a histogram into row-major `P×P` patches, each flattened
/// channel-major into `C·P·P` values. Output shape `[rows·cols, C·P·P]`.
pub fn patchify(hist: &EventHistogram, patch: usize) -> Result<Tensor> {
    let (h, w, c) = (hist.height, hist.width, hist.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(DvaeError::IndivisibleShape { height: h, width: w, patch });
    }
    let (rows, cols) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for col in 0..cols {
            for ch in 0..c {
                for py in 0..patch {
                    let at = hist.index(ch, r * patch + py, col * patch);
                    data.extend_from_slice(&hist.values[at..at + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, dim], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, layout: ChannelLayout, height: usize, width: usize, patch: usize) -> Result<EventHistogram> {
    let c = layout.channels();
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(DvaeError::IndivisibleShape { height, width, patch });
    }
    let (rows, cols) = (height / patch, width / patch);
    let dim = c * patch * patch;
    if patches.shape() != [rows * cols, dim] {
        return Err(TensorError::ShapeMismatch { op: "unpatchify", shapes: vec![patches.shape().to_vec(), vec![rows * cols, dim]] }.into());
    }
    let mut hist = EventHistogram::zeros(layout, height, width);
    for r in 0..rows {
        for col in 0..cols {
            let src = patches.row(r * cols + col);
            for ch in 0..c {
                for py in 0..patch {
                    let at = hist.index(ch, r * patch + py, col * patch);
                    let off = (ch * patch + py) * patch;
                    hist.values[at..at + patch].copy_from_slice(&src[off..off + patch]);
                }
            }
        }
    }
    Ok(hist)
}

/// Stacks the patches of several histograms: `[B·S, C·P·P]`.
pub fn patchify_batch(hists: &[EventHistogram], patch: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = 0;
    for h in hists {
        let p = patchify(h, patch)?;
        rows += p.shape()[0];
        dim = p.shape()[1];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[rows, dim], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvaeConfig {
    pub layout: ChannelLayout,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub latent: usize,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        DvaeConfig {
            layout: ChannelLayout::TwoPolarity,
            height: 64,
            width: 64,
            patch: 16,
            hidden: 256,
            vocab: 128,
            latent: 32,
        }
    }
}

impl DvaeConfig {
    /// Full-size preset: 224×224 input and an 8092-entry codebook.
    pub fn reference() -> Self {
        DvaeConfig { height: 224, width: 224, hidden: 2048, vocab: REFERENCE_VOCAB, latent: 256, ..Self::default() }
    }

    pub fn patch_dim(&self) -> usize {
        self.layout.channels() * self.patch * self.patch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(DvaeError::IndivisibleShape { height: self.height, width: self.width, patch: self.patch });
        }
        if self.vocab < 2 {
            return Err(TensorError::InvalidArgument("codebook needs at least two entries".into()).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DvaeParams {
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub enc_w2: ParamId,
    pub enc_b2: ParamId,
    pub codebook: ParamId,
    pub dec_w1: ParamId,
    pub dec_b1: ParamId,
    pub dec_w2: ParamId,
    pub dec_b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvaeModel {
    pub config: DvaeConfig,
    pub params: ParamStore,
    pub ids: DvaeParams,
}

/// Decoder output bias at initialization; keeps initial reconstructions
/// inside the clamp range.
const DEC_BIAS_INIT: f64 = 0.05;

impl DvaeModel {
    pub fn new<R: Rng + ?Sized>(config: DvaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (pd, hd, n, d) = (config.patch_dim(), config.hidden, config.vocab, config.latent);
        let mut p = ParamStore::new();
        let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let ids = DvaeParams {
            enc_w1: p.add("dvae.enc.w1", Tensor::randn(&[pd, hd], lecun(pd), rng)),
            enc_b1: p.add("dvae.enc.b1", Tensor::zeros(&[hd])),
            enc_w2: p.add("dvae.enc.w2", Tensor::randn(&[hd, n], lecun(hd), rng)),
            enc_b2: p.add("dvae.enc.b2", Tensor::zeros(&[n])),
            codebook: p.add("dvae.codebook", Tensor::randn(&[n, d], 1.0, rng)),
            dec_w1: p.add("dvae.dec.w1", Tensor::randn(&[d, hd], lecun(d), rng)),
            dec_b1: p.add("dvae.dec.b1", Tensor::zeros(&[hd])),
            dec_w2: p.add("dvae.dec.w2", Tensor::randn(&[hd, pd], 0.1 * lecun(hd), rng)),
            dec_b2: p.add("dvae.dec.b2", Tensor::full(&[pd], DEC_BIAS_INIT)),
        };
        Ok(DvaeModel { config, params: p, ids })
    }

    /// Rebuilds a model from a checkpointed parameter store.
    pub fn from_params(config: DvaeConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| DvaeError::Tensor(TensorError::Checkpoint(format!("missing parameter {name}"))))
        };
        let ids = DvaeParams {
            enc_w1: find("dvae.enc.w1")?,
            enc_b1: find("dvae.enc.b1")?,
            enc_w2: find("dvae.enc.w2")?,
            enc_b2: find("dvae.enc.b2")?,
            codebook: find("dvae.codebook")?,
            dec_w1: find("dvae.dec.w1")?,
            dec_b1: find("dvae.dec.b1")?,
            dec_w2: find("dvae.dec.w2")?,
            dec_b2: find("dvae.dec.b2")?,
        };
        let expect = [
            (ids.enc_w1, vec![config.patch_dim(), config.hidden]),
            (ids.enc_w2, vec![config.hidden, config.vocab]),
            (ids.codebook, vec![config.vocab, config.latent]),
            (ids.dec_w2, vec![config.hidden, config.patch_dim()]),
        ];
        for (id, shape) in expect {
            if params.get(id).shape() != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "dvae_from_params",
                    shapes: vec![params.get(id).shape().to_vec(), shape],
                }
                .into());
            }
        }
        Ok(DvaeModel { config, params, ids })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.ids.codebook)
    }

    /// Encoder logits for stacked patches `[rows, C·P·P] -> [rows, N]`.
    pub fn encode_var<'t>(&self, bound: &[Var<'t>], patches: Var<'t>) -> Result<Var<'t>> {
        let p = |id: ParamId| bound[id.0];
        let h = patches.matmul(p(self.ids.enc_w1))?.add(p(self.ids.enc_b1))?.gelu();
        Ok(h.matmul(p(self.ids.enc_w2))?.add(p(self.ids.enc_b2))?)
    }

    /// Decoder before the output clamp; training regresses this directly so
    /// that outputs pushed below zero still receive gradient.
    pub fn decode_raw_var<'t>(&self, bound: &[Var<'t>], assignments: Var<'t>) -> Result<Var<'t>> {
        let p = |id: ParamId| bound[id.0];
        let latent = assignments.matmul(p(self.ids.codebook))?;
        let h = latent.matmul(p(self.ids.dec_w1))?.add(p(self.ids.dec_b1))?.gelu();
        Ok(h.matmul(p(self.ids.dec_w2))?.add(p(self.ids.dec_b2))?)
    }

    /// Decoder: soft assignments `[rows, N]` to patch values in `[0, 1]`.
    pub fn decode_var<'t>(&self, bound: &[Var<'t>], assignments: Var<'t>) -> Result<Var<'t>> {
        Ok(self.decode_raw_var(bound, assignments)?.clamp(0.0, 1.0))
    }
}

/// Per-patch encoder logits, shape `[num_patches, N]`.
pub fn encode(model: &DvaeModel, hist: &EventHistogram) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let x = tape.constant(patchify(hist, model.config.patch)?);
    Ok((*model.encode_var(&bound, x)?.value()).clone())
}

/// Standard Gumbel noise `-ln(-ln U)`.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// One-hot of the row-wise argmax; ties go to the lowest index.
pub fn one_hot_argmax(t: &Tensor) -> Tensor {
    let cols = *t.shape().last().unwrap();
    let mut out = Tensor::zeros(t.shape());
    for (r, row) in t.data().chunks(cols).enumerate() {
        out.data_mut()[r * cols + argmax(row)] = 1.0;
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `softmax((logits + noise) / tau)` row-wise. In hard mode the forward value
/// is the one-hot argmax while gradients follow the soft relaxation.
pub fn gumbel_softmax_with_noise<'t>(logits: Var<'t>, tau: f64, noise: &Tensor, hard: bool) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(DvaeError::NonpositiveTemperature(tau));
    }
    let g = logits.tape().constant(noise.clone());
    let soft = logits.add(g)?.scale(1.0 / tau).softmax()?;
    if hard {
        let hard_value = one_hot_argmax(&soft.value());
        Ok(soft.straight_through(hard_value)?)
    } else {
        Ok(soft)
    }
}

pub fn gumbel_softmax<'t, R: Rng + ?Sized>(logits: Var<'t>, tau: f64, rng: &mut R, hard: bool) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(DvaeError::NonpositiveTemperature(tau));
    }
    let noise = sample_gumbel(&logits.shape(), rng);
    gumbel_softmax_with_noise(logits, tau, &noise, hard)
}

/// `KL(q || uniform) = ln N - H(q)` for an explicit distribution.
pub fn kl_to_uniform(q: &[f64]) -> f64 {
    let ln_n = (q.len() as f64).ln();
    q.iter().filter(|&&p| p > 0.0).map(|&p| p * (p.ln() + ln_n)).sum()
}

/// Mean over rows of `KL(softmax(logits) || uniform)`, in-graph.
pub fn mean_kl_to_uniform<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let n = *logits.shape().last().unwrap() as f64;
    let logq = logits.log_softmax()?;
    let q = logits.softmax()?;
    let rows = logq.add_scalar(n.ln()).mul(q)?.sum_axis(1)?;
    Ok(rows.mean())
}

/// Terms of the negative ELBO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon_mse: f64,
    pub kl: f64,
}

/// `MSE(recon, target) + kl_weight · mean KL(q || uniform)`; returns the loss
/// var together with its two terms.
pub fn elbo_loss<'t>(target: Var<'t>, recon: Var<'t>, logits: Var<'t>, kl_weight: f64) -> Result<(Var<'t>, ElboTerms)> {
    let mse = recon.mse(target)?;
    let kl = mean_kl_to_uniform(logits)?;
    let loss = mse.add(kl.scale(kl_weight))?;
    let terms = ElboTerms { loss: loss.item(), recon_mse: mse.item(), kl: kl.item() };
    Ok((loss, terms))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
}

impl TokenGrid {
    pub fn get(&self, r: usize, c: usize) -> usize {
        self.ids[r * self.cols + c]
    }
}

/// Deterministic tokens: argmax of the encoder logits per patch.
pub fn tokenize(model: &DvaeModel, hist: &EventHistogram) -> Result<TokenGrid> {
    let logits = encode(model, hist)?;
    let n = model.config.vocab;
    let (rows, cols) = (hist.height / model.config.patch, hist.width / model.config.patch);
    let ids = logits.data().chunks(n).map(argmax).collect();
    Ok(TokenGrid { rows, cols, ids })
}

/// Decodes a token grid (one-hot assignments) back to a histogram.
pub fn decode_tokens(model: &DvaeModel, tokens: &TokenGrid) -> Result<EventHistogram> {
    let n = model.config.vocab;
    let mut onehot = Tensor::zeros(&[tokens.ids.len(), n]);
    for (r, &id) in tokens.ids.iter().enumerate() {
        onehot.data_mut()[r * n + id] = 1.0;
    }
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let out = model.decode_var(&bound, tape.constant(onehot))?;
    let c = model.config;
    unpatchify(&out.value(), c.layout, tokens.rows * c.patch, tokens.cols * c.patch, c.patch)
}

/// Hard autoencode: tokenize then decode.
pub fn reconstruct(model: &DvaeModel, hist: &EventHistogram) -> Result<EventHistogram> {
    decode_tokens(model, &tokenize(model, hist)?)
}

pub fn histogram_mse(a: &EventHistogram, b: &EventHistogram) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.values.len() as f64
}

/// Temperature annealing: exponential from `start` to `end` over the first
/// `anneal_frac` of training, then constant; the last `hard_frac` of steps
/// use straight-through hard sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_frac: f64,
    pub hard_frac: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule { start: 1.0, end: 0.5, anneal_frac: 0.6, hard_frac: 0.1 }
    }
}

impl TauSchedule {
    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        let anneal = (self.anneal_frac * total as f64).max(1.0);
        let f = (step as f64 / anneal).min(1.0);
        self.start * (self.end / self.start).powf(f)
    }

    pub fn hard_at(&self, step: usize, total: usize) -> bool {
        (step as f64) >= (1.0 - self.hard_frac) * total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvaeTrainConfig {
    pub model: DvaeConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub kl_weight: f64,
    pub tau: TauSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for DvaeTrainConfig {
    fn default() -> Self {
        DvaeTrainConfig {
            model: DvaeConfig::default(),
            steps: 1200,
            batch_size: 16,
            optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::dvae() },
            lr_decay: 0.99,
            kl_weight: DEFAULT_KL_WEIGHT,
            tau: TauSchedule::default(),
            augment: AugmentConfig::desk(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvaeLogRow {
    pub step: usize,
    pub recon_mse: f64,
    pub kl: f64,
    pub tau: f64,
}

pub fn loss_curve_csv(rows: &[DvaeLogRow]) -> String {
    let mut out = String::from("step,recon_mse,kl,tau\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.recon_mse, r.kl, r.tau));
    }
    out
}

/// One optimization step on a batch of histograms. Returns the ELBO terms.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DvaeModel,
    opt: &mut OptimizerState,
    batch: &[EventHistogram],
    tau: f64,
    hard: bool,
    kl_weight: f64,
    lr: f64,
    rng: &mut R,
) -> Result<ElboTerms> {
    let x = patchify_batch(batch, model.config.patch)?;
    let noise = sample_gumbel(&[x.shape()[0], model.config.vocab], rng);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let input = tape.constant(x);
    let logits = model.encode_var(&bound, input)?;
    let z = gumbel_softmax_with_noise(logits, tau, &noise, hard)?;
    let recon = model.decode_raw_var(&bound, z)?;
    let (loss, terms) = elbo_loss(input, recon, logits, kl_weight)?;
    let grads = tape.backward(loss)?;
    let mut g = model.params.collect_grads(&bound, &grads);
    if let Some(max) = opt.config.clip_norm {
        clip_global_norm(&mut g, max);
    }
    opt.step(&mut model.params, &g, lr)?;
    Ok(terms)
}

/// Resumable dVAE training state.
#[derive(Debug, Clone)]
pub struct DvaeTrainer {
    pub model: DvaeModel,
    pub opt: OptimizerState,
    pub step: usize,
}

impl DvaeTrainer {
    pub fn new(config: &DvaeTrainConfig) -> Result<Self> {
        let model = DvaeModel::new(config.model, &mut rng_from_seed(config.seed))?;
        let opt = OptimizerState::new(config.optimizer, &model.params);
        Ok(DvaeTrainer { model, opt, step: 0 })
    }

    /// Runs training step `self.step` on `source`.
    pub fn step(&mut self, source: &HistogramSource, config: &DvaeTrainConfig) -> Result<DvaeLogRow> {
        if source.is_empty() {
            return Err(TensorError::InvalidArgument("dVAE training needs at least one stream".into()).into());
        }
        let step = self.step;
        let steps_per_epoch = (source.len() / config.batch_size.max(1)).max(1) as u64;
        let schedule = LrSchedule::Exponential { gamma: config.lr_decay, steps_per_epoch };
        let spec = InputSpec { layout: config.model.layout, size: (config.model.height, config.model.width) };
        let mut rng = step_rng(config.seed, step as u64);
        let batch: Vec<EventHistogram> = source
            .batch_indices(config.seed, step, config.batch_size)
            .into_iter()
            .map(|i| source.train_input(i, &spec, &config.augment, &mut rng))
            .collect();
        let tau = config.tau.tau_at(step, config.steps);
        let hard = config.tau.hard_at(step, config.steps);
        let lr = schedule.lr_at(config.optimizer.lr, step as u64);
        let terms = train_step(&mut self.model, &mut self.opt, &batch, tau, hard, config.kl_weight, lr, &mut rng)?;
        if !terms.loss.is_finite() {
            return Err(TensorError::InvalidArgument(format!("non-finite dVAE loss at step {step}")).into());
        }
        self.step += 1;
        Ok(DvaeLogRow { step, recon_mse: terms.recon_mse, kl: terms.kl, tau })
    }
}

/// Trains a dVAE from scratch on `source`, deterministic per `config.seed`.
pub fn train_dvae(source: &HistogramSource, config: &DvaeTrainConfig) -> Result<(DvaeModel, Vec<DvaeLogRow>)> {
    let mut trainer = DvaeTrainer::new(config)?;
    let mut curve = Vec::with_capacity(config.steps);
    while trainer.step < config.steps {
        curve.push(trainer.step(source, config)?);
    }
    Ok((trainer.model, curve))
}

/// Mean hard-reconstruction MSE over histograms.
pub fn mean_reconstruction_mse(model: &DvaeModel, hists: &[EventHistogram]) -> Result<f64> {
    let mut total = 0.0;
    for h in hists {
        total += histogram_mse(&reconstruct(model, h)?, h);
    }
    Ok(total / hists.len().max(1) as f64)
}

/// Fraction of codebook entries that appear in the tokenization of `hists`.
pub fn codebook_usage(model: &DvaeModel, hists: &[EventHistogram]) -> Result<f64> {
    let mut used = vec![false; model.config.vocab];
    for h in hists {
        for id in tokenize(model, h)?.ids {
            used[id] = true;
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

/// `ln N` for a codebook of `n` entries.
pub fn ln_vocab(n: usize) -> f64 {
    if n.is_power_of_two() {
        n.trailing_zeros() as f64 * LN_2
    } else {
        (n as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::EventHistogram;

    fn small_cfg() -> DvaeConfig {
        DvaeConfig { height: 32, width: 32, patch: 16, hidden: 8, vocab: 6, latent: 4, ..DvaeConfig::default() }
    }

    #[test]
    fn patchify_shapes_and_order() {
        let mut h = EventHistogram::zeros(ChannelLayout::TwoPolarity, 32, 32);
        h.set(1, 20, 3, 7.0); // patch row 1, col 0
        let p = patchify(&h, 16).unwrap();
        assert_eq!(p.shape(), &[4, 512]);
        let patch_idx = 1 * 2;
        let within = (16 + 4) * 16 + 3;
        assert_eq!(p.row(patch_idx)[within], 7.0);
        assert_eq!(p.sum(), 7.0);
        assert_eq!(unpatchify(&p, ChannelLayout::TwoPolarity, 32, 32, 16).unwrap(), h);
        assert!(matches!(patchify(&h, 10), Err(DvaeError::IndivisibleShape { .. })));
    }

    #[test]
    fn zero_input_zero_head_gives_uniform_logits() {
        let mut m = DvaeModel::new(small_cfg(), &mut rng_from_seed(0)).unwrap();
        let w2 = m.ids.enc_w2;
        m.params.get_mut(w2).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let h = EventHistogram::zeros(ChannelLayout::TwoPolarity, 32, 32);
        let logits = encode(&m, &h).unwrap();
        assert_eq!(logits.shape(), &[4, 6]);
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn gumbel_fixed_noise() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let noise = Tensor::new(&[1, 2], vec![0.1, -0.2]).unwrap();
        let y = gumbel_softmax_with_noise(logits, 1.0, &noise, false).unwrap().value();
        let e = (-0.7f64).exp();
        assert!((y.data()[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((y.data()[0] - 0.332).abs() < 1e-3);
        assert!(matches!(
            gumbel_softmax_with_noise(logits, 0.0, &noise, false),
            Err(DvaeError::NonpositiveTemperature(_))
        ));
    }

    #[test]
    fn gumbel_low_temperature_approaches_argmax() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 3], vec![0.2, 0.9, 0.5]).unwrap());
        let y = gumbel_softmax_with_noise(logits, 1e-3, &Tensor::zeros(&[1, 3]), false).unwrap().value();
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_mode_is_one_hot_with_soft_gradient() {
        let mut rng = rng_from_seed(3);
        let raw = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let noise = sample_gumbel(&[5, 7], &mut rng);
        let w = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let run = |hard: bool| {
            let tape = Tape::new();
            let x = tape.leaf(raw.clone());
            let y = gumbel_softmax_with_noise(x, 0.5, &noise, hard).unwrap();
            let v = (*y.value()).clone();
            let loss = y.mul(tape.constant(w.clone())).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            (v, g.wrt(x).unwrap().clone())
        };
        let (hv, hg) = run(true);
        let (_, sg) = run(false);
        for r in 0..5 {
            let row = hv.row(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(hg, sg);
    }

    #[test]
    fn kl_bounds() {
        let uniform = vec![1.0 / 128.0; 128];
        assert_eq!(kl_to_uniform(&uniform), 0.0);
        let mut onehot = vec![0.0; 128];
        onehot[5] = 1.0;
        assert!((kl_to_uniform(&onehot) - 128f64.ln()).abs() < 1e-12);
        assert!((128f64.ln() - 4.852_030_263_919_617).abs() < 1e-12);
        assert_eq!(ln_vocab(128), 7.0 * LN_2);
    }

    #[test]
    fn elbo_zero_for_perfect_uniform() {
        let tape = Tape::new();
        let target = tape.constant(Tensor::full(&[3, 4], 0.25));
        let logits = tape.constant(Tensor::zeros(&[3, 128]));
        let (loss, terms) = elbo_loss(target, target, logits, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(terms.kl, 0.0);
    }

    #[test]
    fn onehot_assignment_selects_codebook_row() {
        let m = DvaeModel::new(small_cfg(), &mut rng_from_seed(2)).unwrap();
        let tape = Tape::new();
        let bound = m.params.bind_frozen(&tape);
        let mut a = Tensor::zeros(&[1, 6]);
        a.data_mut()[4] = 1.0;
        let latent = tape.constant(a).matmul(bound[m.ids.codebook.0]).unwrap();
        assert_eq!(latent.value().data(), m.codebook().row(4));
        let grid = TokenGrid { rows: 2, cols: 2, ids: vec![0, 1, 2, 5] };
        let out = decode_tokens(&m, &grid).unwrap();
        assert_eq!((out.height, out.width, out.channels()), (32, 32, 2));
        assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tokenize_is_deterministic_and_in_range() {
        let m = DvaeModel::new(small_cfg(), &mut rng_from_seed(5)).unwrap();
        let mut h = EventHistogram::zeros(ChannelLayout::TwoPolarity, 32, 32);
        let mut rng = rng_from_seed(6);
        h.values.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let a = tokenize(&m, &h).unwrap();
        assert_eq!(a, tokenize(&m, &h).unwrap());
        assert_eq!((a.rows, a.cols), (2, 2));
        assert!(a.ids.iter().all(|&i| i < 6));
    }

    #[test]
    fn tau_schedule_endpoints() {
        let s = TauSchedule { end: 0.0625, ..TauSchedule::default() };
        assert_eq!(s.tau_at(0, 100), 1.0);
        assert!((s.tau_at(60, 100) - 0.0625).abs() < 1e-15);
        assert!((s.tau_at(99, 100) - 0.0625).abs() < 1e-15);
        assert!(!s.hard_at(89, 100));
        assert!(s.hard_at(90, 100));
    }
}
