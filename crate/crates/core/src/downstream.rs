//! Classification finetuning, linear probing, few-label splits and
//! a per-patch segmentation head.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::data::{HistogramSource, InputSpec};
use crate::dvae::argmax;
use crate::histogram::EventHistogram;
use crate::{rng_from_seed, step_rng};
use crate::synth::SegSample;
use crate::tensor::{AdamConfig, LrSchedule, OptimizerState, ParamId, ParamOptions, Tape, Tensor, TensorError, Var};
use crate::vit::{VitConfig, VitError, VitModel};

pub const DEFAULT_LAYER_DECAY: f64 = 0.65;
/// Finetuning passes per label fraction in the few-label comparison.
pub const FEWLABEL_EPOCHS: usize = 40;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("class {0} has too few samples for the requested label fractions")]
    InsufficientSamples(usize),
    #[error("invalid label fractions: {0}")]
    InvalidFractions(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, DownstreamError>;

/// Backbone plus a mean-pooled linear K-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub vit: VitModel,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub num_classes: usize,
}

/// Discards the pretraining heads and attaches a zero-initialized linear
/// head on mean-pooled patch features.
pub fn attach_classifier(backbone: &VitModel, num_classes: usize) -> ClassifierModel {
    let mut vit = backbone.clone();
    vit.strip_heads();
    let d = vit.config.dim;
    let head_w = vit.params.add("cls_head.w", Tensor::zeros(&[d, num_classes]));
    let head_b = vit.params.add("cls_head.b", Tensor::zeros(&[num_classes]));
    ClassifierModel { vit, head_w, head_b, num_classes }
}

impl ClassifierModel {
    /// Rebuilds a classifier from a checkpoint written by [`ClassifierModel`].
    pub fn from_params(config: VitConfig, num_classes: usize, params: crate::tensor::ParamStore) -> Result<Self> {
        let fresh = VitModel::new(VitConfig { pixel_head: false, ..config }, &mut rng_from_seed(0))?;
        let mut model = attach_classifier(&fresh, num_classes);
        let expected = model.vit.params.len();
        if model.vit.params.load_matching(&params) != expected {
            return Err(TensorError::Checkpoint("checkpoint does not match the classifier configuration".into()).into());
        }
        Ok(model)
    }

    /// Logits `[B, K]` for stacked patches `[B, S, C·P·P]`.
    pub fn logits_var<'t>(&self, bound: &[Var<'t>], patches: Var<'t>) -> Result<Var<'t>> {
        let feats = self.vit.forward_var(bound, patches, None, None)?;
        let pooled = feats.mean_axis(1)?;
        Ok(pooled.matmul(bound[self.head_w.0])?.add(bound[self.head_b.0])?)
    }

    pub fn logits(&self, hists: &[EventHistogram]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.vit.params.bind_frozen(&tape);
        let x = tape.constant(self.vit.batch_input(hists)?);
        Ok((*self.logits_var(&bound, x)?.value()).clone())
    }

    /// Logits for many histograms, evaluated in chunks.
    pub fn predict(&self, hists: &[EventHistogram], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(hists.len() * self.num_classes);
        for c in hists.chunks(chunk.max(1)) {
            data.extend_from_slice(self.logits(c)?.data());
        }
        Ok(Tensor::new(&[hists.len(), self.num_classes], data)?)
    }
}

/// Fraction of rows whose label is among the `k` highest logits; ties are
/// ranked by lowest class id.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let cols = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let ahead = (0..cols).filter(|&j| row[j] > row[l] || (row[j] == row[l] && j < l)).count();
            ahead < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub layer_decay: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub augment: AugmentConfig,
    /// Evaluate on the test source every this many steps (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 16,
            optimizer: AdamConfig::finetune(),
            layer_decay: DEFAULT_LAYER_DECAY,
            warmup_steps: 30,
            min_lr: 1e-6,
            augment: AugmentConfig::desk(),
            eval_every: 0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Budget of `epochs` passes over `samples` examples, with the first
    /// tenth of the steps as warmup.
    pub fn for_epochs(self, epochs: usize, samples: usize) -> Self {
        let steps = epochs * samples.div_ceil(self.batch_size.max(1));
        FinetuneConfig { steps, warmup_steps: steps / 10, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub test_top1: Option<f64>,
}

pub fn finetune_curve_csv(rows: &[FinetuneLogRow]) -> String {
    let mut out = String::from("step,train_loss,lr,test_top1\n");
    for r in rows {
        let acc = r.test_top1.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, r.lr, acc));
    }
    out
}

/// Top-1 of a classifier on prepared inputs.
pub fn evaluate(model: &ClassifierModel, hists: &[EventHistogram], labels: &[usize]) -> Result<f64> {
    Ok(topk_accuracy(&model.predict(hists, 64)?, labels, 1))
}

/// Resumable finetuning state.
#[derive(Debug, Clone)]
pub struct Finetuner {
    pub model: ClassifierModel,
    pub opt: OptimizerState,
    pub step: usize,
}

impl Finetuner {
    pub fn new(model: ClassifierModel, config: &FinetuneConfig) -> Self {
        let options = layer_decay_options(&model, config.layer_decay);
        let opt = OptimizerState::with_options(config.optimizer, &model.vit.params, options);
        Finetuner { model, opt, step: 0 }
    }

    /// One step on an augmented batch; returns `(train loss, lr)`.
    pub fn step(&mut self, train: &HistogramSource, config: &FinetuneConfig) -> Result<(f64, f64)> {
        if train.is_empty() || train.labels.len() != train.len() {
            return Err(DownstreamError::InvalidInput("finetuning needs a non-empty labeled source".into()));
        }
        let vc = self.model.vit.config;
        let spec = InputSpec { layout: vc.layout, size: (vc.height, vc.width) };
        let mut rng = step_rng(config.seed, self.step as u64);
        let idx = train.batch_indices(config.seed, self.step, config.batch_size);
        let hists: Vec<EventHistogram> = idx.iter().map(|&i| train.train_input(i, &spec, &config.augment, &mut rng)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let schedule = LrSchedule::Cosine {
            warmup_steps: config.warmup_steps as u64,
            total_steps: config.steps as u64,
            min_lr: config.min_lr,
        };
        let lr = schedule.lr_at(config.optimizer.lr, self.step as u64);
        let model = &mut self.model;
        let tape = Tape::new();
        let bound = model.vit.params.bind(&tape);
        let x = tape.constant(model.vit.batch_input(&hists)?);
        let loss = model.logits_var(&bound, x)?.cross_entropy(&labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TensorError::InvalidArgument(format!("non-finite finetuning loss at step {}", self.step)).into());
        }
        let grads = tape.backward(loss)?;
        let mut g = model.vit.params.collect_grads(&bound, &grads);
        if let Some(max) = config.optimizer.clip_norm {
            crate::tensor::clip_global_norm(&mut g, max);
        }
        self.opt.step(&mut model.vit.params, &g, lr)?;
        self.step += 1;
        Ok((value, lr))
    }
}

/// Finetunes every parameter with layer-wise learning-rate decay and a
/// cosine schedule. `test` is evaluated at step 0, every `eval_every` steps
/// and at the end.
pub fn finetune(
    model: ClassifierModel,
    train: &HistogramSource,
    test: Option<&HistogramSource>,
    config: &FinetuneConfig,
) -> Result<(ClassifierModel, Vec<FinetuneLogRow>)> {
    let mut trainer = Finetuner::new(model, config);
    let curve = continue_finetune(&mut trainer, train, test, config)?;
    Ok((trainer.model, curve))
}

/// Runs `trainer` up to `config.steps`. A fresh trainer logs a step-0
/// evaluation row first.
pub fn continue_finetune(
    trainer: &mut Finetuner,
    train: &HistogramSource,
    test: Option<&HistogramSource>,
    config: &FinetuneConfig,
) -> Result<Vec<FinetuneLogRow>> {
    let vc = trainer.model.vit.config;
    let spec = InputSpec { layout: vc.layout, size: (vc.height, vc.width) };
    let test_inputs = test.map(|t| (t.eval_inputs(&spec, config.augment.n_max), t.labels.clone()));
    let eval = |m: &ClassifierModel| -> Result<Option<f64>> {
        test_inputs.as_ref().map(|(h, l)| evaluate(m, h, l)).transpose()
    };
    let mut curve = Vec::new();
    if trainer.step == 0 {
        curve.push(FinetuneLogRow { step: 0, train_loss: f64::NAN, lr: 0.0, test_top1: eval(&trainer.model)? });
    }
    while trainer.step < config.steps {
        let (train_loss, lr) = trainer.step(train, config)?;
        let done = trainer.step;
        let at_eval = done == config.steps || (config.eval_every > 0 && done % config.eval_every == 0);
        let test_top1 = if at_eval { eval(&trainer.model)? } else { None };
        curve.push(FinetuneLogRow { step: done, train_loss, lr, test_top1 });
    }
    Ok(curve)
}

/// `decay^(L - ℓ)` per parameter; the task head trains at the base rate.
pub fn layer_decay_options(model: &ClassifierModel, decay: f64) -> Vec<ParamOptions> {
    let mut opts = model.vit.param_options(decay);
    for id in [model.head_w, model.head_b] {
        opts[id.0].lr_scale = 1.0;
    }
    opts
}

/// Mean-pooled backbone features `[n, D]`, computed with frozen weights.
pub fn pooled_features(backbone: &VitModel, hists: &[EventHistogram]) -> Result<Tensor> {
    let d = backbone.config.dim;
    let mut data = Vec::with_capacity(hists.len() * d);
    for chunk in hists.chunks(64) {
        let tape = Tape::new();
        let bound = backbone.params.bind_frozen(&tape);
        let x = tape.constant(backbone.batch_input(chunk)?);
        let f = backbone.forward_var(&bound, x, None, None)?.mean_axis(1)?;
        data.extend_from_slice(f.value().data());
    }
    Ok(Tensor::new(&[hists.len(), d], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub n_max: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 1e-2, weight_decay: 0.0, n_max: crate::histogram::DEFAULT_N_MAX, seed: 0 }
    }
}

/// Trained linear head over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train_top1: f64,
    pub test_top1: f64,
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let data = x.data().iter().enumerate().map(|(i, v)| (v - mean[i % d]) / std[i % d]).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Full-batch softmax regression on fixed features. Features are
/// standardized with training statistics (a parameter-free batch norm).
pub fn fit_linear_head(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (n, d) = (train_x.shape()[0], train_x.shape()[1]);
    if n == 0 || n != train_y.len() {
        return Err(DownstreamError::InvalidInput("probe needs labeled training features".into()));
    }
    let mut mean = vec![0.0; d];
    for row in train_x.data().chunks(d) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    let mut std = vec![0.0; d];
    for row in train_x.data().chunks(d) {
        row.iter().zip(&mean).zip(&mut std).for_each(|((v, m), s)| *s += (v - m) * (v - m) / n as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let xs = standardize(train_x, &mean, &std);
    let xt = standardize(test_x, &mean, &std);
    let mut params = crate::tensor::ParamStore::new();
    let w = params.add("probe.w", Tensor::zeros(&[d, num_classes]));
    let b = params.add("probe.b", Tensor::zeros(&[num_classes]));
    let cfg = AdamConfig { lr: config.lr, weight_decay: config.weight_decay, clip_norm: None, ..AdamConfig::finetune() };
    let mut opt = OptimizerState::new(cfg, &params);
    for _ in 0..config.epochs {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = tape.constant(xs.clone()).matmul(bound[w.0])?.add(bound[b.0])?.cross_entropy(train_y)?;
        let grads = tape.backward(loss)?;
        let g = params.collect_grads(&bound, &grads);
        opt.step(&mut params, &g, config.lr)?;
    }
    let logits = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let out = tape.constant(x.clone()).matmul(tape.constant(params.get(w).clone()))?;
        Ok((*out.add(tape.constant(params.get(b).clone()))?.value()).clone())
    };
    let train_top1 = topk_accuracy(&logits(&xs)?, train_y, 1);
    let test_top1 = if test_y.is_empty() { 0.0 } else { topk_accuracy(&logits(&xt)?, test_y, 1) };
    Ok(ProbeResult { weight: params.get(w).clone(), bias: params.get(b).clone(), mean, std, train_top1, test_top1 })
}

/// Linear probe: the backbone is only read, never updated.
pub fn linear_probe(
    backbone: &VitModel,
    train: &HistogramSource,
    test: &HistogramSource,
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let c = backbone.config;
    let spec = InputSpec { layout: c.layout, size: (c.height, c.width) };
    let tx = pooled_features(backbone, &train.eval_inputs(&spec, config.n_max))?;
    let ex = pooled_features(backbone, &test.eval_inputs(&spec, config.n_max))?;
    fit_linear_head(&tx, &train.labels, &ex, &test.labels, num_classes, config)
}

/// Stratified, mutually exclusive label subsets. Cell `i` holds about
/// `fractions[i]` of every class (largest-remainder rounding so cell sizes
/// match `round(f · n)`); returned values are indices into `labels`.
pub fn split_labels(labels: &[usize], num_classes: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(DownstreamError::InvalidFractions(format!("{fractions:?} must lie in (0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(DownstreamError::InvalidFractions(format!("fractions sum to {total} > 1")));
    }
    let mut rng = rng_from_seed(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(DownstreamError::InvalidInput(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let per_cell: Vec<Vec<usize>> = fractions.iter().map(|&f| apportion(&counts, f)).collect();
    let mut cells = vec![Vec::new(); fractions.len()];
    for (c, members) in by_class.iter().enumerate() {
        let mut at = 0;
        for (cell, take) in per_cell.iter().enumerate() {
            let k = take[c].max(1);
            if at + k > members.len() {
                return Err(DownstreamError::InsufficientSamples(c));
            }
            cells[cell].extend_from_slice(&members[at..at + k]);
            at += k;
        }
    }
    for cell in &mut cells {
        cell.sort_unstable();
    }
    Ok(cells)
}

/// Per-class counts summing to `round(f · Σ counts)`, distributed by largest
/// remainder with ties to the lower class id.
fn apportion(counts: &[usize], f: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let target = (f * n as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| f * c as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(out.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if out[c] < counts[c] {
            out[c] += 1;
            left -= 1;
        }
    }
    out
}

/// One id per line.
pub fn split_manifest(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("{i}\n")).collect()
}

/// Backbone plus a per-patch K-way head; logits are upsampled to pixels by
/// repetition over each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    pub vit: VitModel,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub num_classes: usize,
}

pub fn attach_segmenter(backbone: &VitModel, num_classes: usize) -> SegmenterModel {
    let mut vit = backbone.clone();
    vit.strip_heads();
    let d = vit.config.dim;
    let head_w = vit.params.add("seg_head.w", Tensor::zeros(&[d, num_classes]));
    let head_b = vit.params.add("seg_head.b", Tensor::zeros(&[num_classes]));
    SegmenterModel { vit, head_w, head_b, num_classes }
}

impl SegmenterModel {
    pub fn from_params(config: VitConfig, num_classes: usize, params: crate::tensor::ParamStore) -> Result<Self> {
        let fresh = VitModel::new(VitConfig { pixel_head: false, ..config }, &mut rng_from_seed(0))?;
        let mut model = attach_segmenter(&fresh, num_classes);
        let expected = model.vit.params.len();
        if model.vit.params.load_matching(&params) != expected {
            return Err(TensorError::Checkpoint("checkpoint does not match the segmenter configuration".into()).into());
        }
        Ok(model)
    }

    /// Per-patch logits `[B·S, K]`.
    pub fn patch_logits_var<'t>(&self, bound: &[Var<'t>], patches: Var<'t>) -> Result<Var<'t>> {
        let feats = self.vit.forward_var(bound, patches, None, None)?;
        let s = feats.shape();
        let f = feats.reshape(&[s[0] * s[1], s[2]])?;
        Ok(f.matmul(bound[self.head_w.0])?.add(bound[self.head_b.0])?)
    }

    /// Patch row feeding each pixel, for a batch of `b` images, row-major.
    pub fn pixel_to_patch(&self, b: usize) -> Vec<usize> {
        let c = self.vit.config;
        let (_, cols) = c.grid();
        let s = c.num_patches();
        let mut out = Vec::with_capacity(b * c.height * c.width);
        for bi in 0..b {
            for y in 0..c.height {
                for x in 0..c.width {
                    out.push(bi * s + (y / c.patch) * cols + x / c.patch);
                }
            }
        }
        out
    }

    /// Predicted class map (row-major, `H·W`) for each histogram.
    pub fn predict(&self, hists: &[EventHistogram]) -> Result<Vec<Vec<usize>>> {
        let c = self.vit.config;
        let mut maps = Vec::with_capacity(hists.len());
        for chunk in hists.chunks(32) {
            let tape = Tape::new();
            let bound = self.vit.params.bind_frozen(&tape);
            let x = tape.constant(self.vit.batch_input(chunk)?);
            let logits = self.patch_logits_var(&bound, x)?.value();
            let patch_class: Vec<usize> = logits.data().chunks(self.num_classes).map(argmax).collect();
            for img in self.pixel_to_patch(chunk.len()).chunks(c.height * c.width) {
                maps.push(img.iter().map(|&r| patch_class[r]).collect());
            }
        }
        Ok(maps)
    }
}

/// Nearest-neighbour resampling of a class map.
pub fn resize_class_map(map: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = ((y as f64 + 0.5) * h as f64 / th as f64) as usize;
        for x in 0..tw {
            let sx = ((x as f64 + 0.5) * w as f64 / tw as f64) as usize;
            out.push(map[sy.min(h - 1) * w + sx.min(w - 1)] as usize);
        }
    }
    out
}

/// Trains a segmenter with per-pixel cross-entropy on unaugmented inputs,
/// so pixel labels stay aligned with the histogram.
pub fn train_segmenter(
    mut model: SegmenterModel,
    samples: &[&SegSample],
    config: &FinetuneConfig,
) -> Result<(SegmenterModel, Vec<FinetuneLogRow>)> {
    if samples.is_empty() {
        return Err(DownstreamError::InvalidInput("no segmentation samples".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let c = model.vit.config;
    let spec = InputSpec { layout: c.layout, size: (c.height, c.width) };
    let inputs: Vec<(EventHistogram, Vec<usize>)> = samples
        .iter()
        .map(|s| {
            let h = crate::histogram::preprocess(&s.stream, config.augment.n_max, c.layout, Some(spec.size));
            let map = resize_class_map(&s.class_map, s.stream.height as usize, s.stream.width as usize, c.height, c.width);
            (h, map)
        })
        .collect();
    let mut opt = OptimizerState::with_options(config.optimizer, &model.vit.params, {
        let mut o = model.vit.param_options(config.layer_decay);
        for id in [model.head_w, model.head_b] {
            o[id.0].lr_scale = 1.0;
        }
        o
    });
    let schedule = LrSchedule::Cosine {
        warmup_steps: config.warmup_steps as u64,
        total_steps: config.steps as u64,
        min_lr: config.min_lr,
    };
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..inputs.len())).collect();
        let hists: Vec<EventHistogram> = picks.iter().map(|&i| inputs[i].0.clone()).collect();
        let targets: Vec<usize> = picks.iter().flat_map(|&i| inputs[i].1.iter().copied()).collect();
        let lr = schedule.lr_at(config.optimizer.lr, step as u64);
        let tape = Tape::new();
        let bound = model.vit.params.bind(&tape);
        let x = tape.constant(model.vit.batch_input(&hists)?);
        let patch_logits = model.patch_logits_var(&bound, x)?;
        let loss = patch_logits.index_select(&model.pixel_to_patch(hists.len()))?.cross_entropy(&targets)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        let g = model.vit.params.collect_grads(&bound, &grads);
        opt.step(&mut model.vit.params, &g, lr)?;
        curve.push(FinetuneLogRow { step: step + 1, train_loss: value, lr, test_top1: None });
    }
    Ok((model, curve))
}

/// `K×K` confusion counts, rows = truth, columns = prediction.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub a_acc: f64,
    pub m_acc: f64,
    pub m_iou: f64,
}

/// aAcc = trace / total; mAcc = mean recall over classes present in the
/// truth; mIoU = mean IoU over classes present in truth or prediction.
pub fn metrics_from_confusion(m: &[Vec<u64>]) -> SegMetrics {
    let k = m.len();
    let total: u64 = m.iter().flatten().sum();
    let trace: u64 = (0..k).map(|i| m[i][i]).sum();
    let mut recalls = Vec::new();
    let mut ious = Vec::new();
    for c in 0..k {
        let tp = m[c][c];
        let truth: u64 = m[c].iter().sum();
        let pred: u64 = (0..k).map(|r| m[r][c]).sum();
        if truth > 0 {
            recalls.push(tp as f64 / truth as f64);
        }
        // TP / (TP + FP + FN)
        if truth + pred > 0 {
            ious.push(tp as f64 / (truth + pred - tp) as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    SegMetrics {
        a_acc: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        m_acc: mean(&recalls),
        m_iou: mean(&ious),
    }
}

pub fn seg_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> SegMetrics {
    metrics_from_confusion(&confusion_matrix(pred, truth, num_classes))
}

/// Name → value summary used for JSON output.
pub type MetricSummary = BTreeMap<String, f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_cases() {
        let perfect = Tensor::new(&[2, 3], vec![5.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(topk_accuracy(&perfect, &[0, 2], 1), 1.0);
        let uniform = Tensor::zeros(&[3, 4]);
        assert_eq!(topk_accuracy(&uniform, &[1, 2, 3], 1), 0.0);
        assert_eq!(topk_accuracy(&uniform, &[1, 2, 3], 2), 1.0 / 3.0);
        // rows: argmax 0,1,2,0,1 against labels 0,1,0,0,2 -> 3/5
        let l = Tensor::new(
            &[5, 3],
            vec![3.0, 1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 4.0, 2.0, 1.0, 1.0, 0.0, 3.0, 2.0],
        )
        .unwrap();
        assert!((topk_accuracy(&l, &[0, 1, 0, 0, 2], 1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn hand_confusion_example() {
        let m = vec![vec![1, 1], vec![0, 2]];
        let r = metrics_from_confusion(&m);
        assert!((r.a_acc - 0.75).abs() < 1e-12);
        assert!((r.m_acc - 0.75).abs() < 1e-12);
        assert!((r.m_iou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let perfect = seg_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 4);
        assert_eq!((perfect.a_acc, perfect.m_acc, perfect.m_iou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn split_cells_are_disjoint_and_sized() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let cells = split_labels(&labels, 4, &[0.5, 0.2, 0.1], 7).unwrap();
        assert_eq!(cells.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 20, 10]);
        let mut all: Vec<usize> = cells.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 80);
        for cell in &cells {
            for c in 0..4 {
                assert!(cell.iter().any(|&i| labels[i] == c));
            }
        }
        assert!(matches!(
            split_labels(&labels, 4, &[0.6, 0.5], 0),
            Err(DownstreamError::InvalidFractions(_))
        ));
        let tiny: Vec<usize> = vec![0, 0, 1];
        assert!(matches!(
            split_labels(&tiny, 2, &[0.5, 0.4], 0),
            Err(DownstreamError::InsufficientSamples(1))
        ));
    }

    #[test]
    fn zero_head_gives_ln_k() {
        let cfg = VitConfig {
            height: 8,
            width: 8,
            patch: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_dim: 8,
            vocab: 4,
            ..VitConfig::desk()
        };
        let vit = VitModel::new(cfg, &mut rng_from_seed(0)).unwrap();
        let cls = attach_classifier(&vit, 3);
        let backbone = vit.backbone_len();
        assert_eq!(cls.vit.params.num_elements(), {
            let mut v = vit.clone();
            v.strip_heads();
            v.params.num_elements()
        } + 8 * 3 + 3);
        assert_eq!(&cls.vit.params.values()[..backbone], &vit.params.values()[..backbone]);
        let h = EventHistogram::zeros(cfg.layout, 8, 8);
        let tape = Tape::new();
        let bound = cls.vit.params.bind_frozen(&tape);
        let x = tape.constant(cls.vit.batch_input(&[h.clone(), h]).unwrap());
        let ce = cls.logits_var(&bound, x).unwrap().cross_entropy(&[0, 2]).unwrap();
        assert!((ce.item() - 3f64.ln()).abs() < 1e-12);
    }
}
