//! One function per subcommand. Each returns the JSON summary that is
//! printed and written to `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use mem_core::data::{HistogramSource, InputSpec};
use mem_core::downstream::{
    attach_classifier, evaluate, finetune, finetune_curve_csv, linear_probe, split_labels, topk_accuracy,
    ClassifierModel, FinetuneConfig, FinetuneLogRow, Finetuner, ProbeConfig,
};
use mem_core::dvae::{self, codebook_usage, loss_curve_csv, mean_reconstruction_mse, DvaeModel, DvaeTrainer};
use mem_core::synth::{gen_dataset, gen_seg_dataset, read_dataset, write_dataset, write_seg_dataset, Sample, SynthConfig};
use mem_core::tensor::{OptimizerState, ParamStore};
use mem_core::vit::{
    pretrain, pretrain_curve_csv, reconstruct_masked, sample_mask, Objective, PretrainConfig, Pretrainer, VitConfig,
    VitModel,
};
use mem_core::{derive_seed, rng_from_seed};

use crate::config::{Config, Stage};
use crate::error::CliError;
use crate::output::*;

type Result<T> = std::result::Result<T, CliError>;

/// Fraction cells used by the few-label experiment besides the full set.
pub const FEWLABEL_CELLS: [f64; 3] = [0.5, 0.2, 0.1];

pub fn run(config: &Config, resume: bool) -> Result<Value> {
    let out = config.path("out")?;
    prepare_dir(&out, resume)?;
    if resume {
        check_resumed_config(&out, config)?;
    }
    write_atomic(&out.join(CONFIG_FILE), config.to_json().as_bytes())?;
    let summary = match config.stage {
        Stage::GenData => gen_data(config, &out)?,
        Stage::TrainDvae => train_dvae(config, &out, resume)?,
        Stage::Pretrain => run_pretrain(config, &out, resume)?,
        Stage::Finetune => run_finetune(config, &out, resume)?,
        Stage::Probe => probe(config, &out)?,
        Stage::Eval => eval(config)?,
        Stage::Render => render(config, &out)?,
        Stage::ReproFewlabel => repro_fewlabel(config, &out)?,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_atomic(&out.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(summary)
}

/// A resumed run may only change the step budget.
fn check_resumed_config(out: &Path, config: &Config) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    if !path.exists() {
        return Ok(());
    }
    let old: Value = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| CliError::Io(format!("{} is malformed: {e}", path.display())))?;
    let new: Value = serde_json::from_str(&config.to_json()).expect("config is valid JSON");
    let strip = |v: &Value| {
        let mut m = v.as_object().cloned().unwrap_or_default();
        m.remove("steps");
        m
    };
    if strip(&old) != strip(&new) {
        return Err(CliError::Config(format!(
            "--resume with a configuration different from {} (only steps may change)",
            path.display()
        )));
    }
    Ok(())
}

fn source(samples: &[&Sample]) -> HistogramSource {
    HistogramSource::labeled(samples.iter().map(|s| s.stream.clone()).collect(), samples.iter().map(|s| s.label).collect())
}

struct Data {
    train: HistogramSource,
    test: HistogramSource,
    num_classes: usize,
}

fn load_data(config: &Config) -> Result<Data> {
    let dir = config.path("dataset")?;
    let ds = read_dataset(&dir).map_err(|e| CliError::Io(format!("reading dataset {}: {e}", dir.display())))?;
    let train = source(&ds.train());
    if train.is_empty() {
        return Err(CliError::Runtime(format!("dataset {} has no training samples", dir.display())));
    }
    Ok(Data { train, test: source(&ds.test()), num_classes: ds.num_classes })
}

fn spec_of(vc: &VitConfig) -> InputSpec {
    InputSpec { layout: vc.layout, size: (vc.height, vc.width) }
}

fn synth_config(config: &Config) -> Result<SynthConfig> {
    let size = config.usize("input.size")?;
    let side = u16::try_from(size).map_err(|_| CliError::Config("input.size is too large".into()))?;
    Ok(SynthConfig { width: side, height: side, ..SynthConfig::default() })
}

/// Writes into a scratch directory, then moves each file into `out`.
fn publish_dir(scratch: &Path, out: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(scratch)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for src in entries {
        fs::rename(&src, out.join(src.file_name().unwrap()))?;
    }
    fs::remove_dir(scratch)?;
    Ok(())
}

fn gen_data(config: &Config, out: &Path) -> Result<Value> {
    let seed = config.seed()?;
    let cfg = synth_config(config)?;
    let ds = gen_dataset(config.usize("data.classes")?, config.usize("data.per_class")?, seed, &cfg);
    let scratch = out.join(".partial");
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    write_dataset(&ds, &scratch)?;
    let seg_per_class = config.usize("data.seg_per_class")?;
    if seg_per_class > 0 {
        let seg_dir = out.join("seg");
        if seg_dir.exists() {
            fs::remove_dir_all(&seg_dir)?;
        }
        write_seg_dataset(&gen_seg_dataset(seg_per_class, seed, &cfg), &scratch.join("seg"))?;
    }
    publish_dir(&scratch, out)?;
    Ok(json!({
        "stage": "gen-data",
        "samples": ds.samples.len(),
        "train": ds.train().len(),
        "test": ds.test().len(),
        "classes": ds.num_classes,
        "seg_samples": seg_per_class * mem_core::synth::SHAPE_CLASSES.len(),
    }))
}

/// Loads parameters and optimizer moments saved by [`write_state`].
fn restore(params: &mut ParamStore, opt: &mut OptimizerState, state: &ParamStore) -> Result<usize> {
    if params.load_matching(state) != params.len() {
        return Err(CliError::Io("state checkpoint does not match the configured model".into()));
    }
    opt.import(params, state).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(opt.step as usize)
}

fn without_header(csv: String) -> String {
    csv.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default()
}

fn save_progress(out: &Path, params: &ParamStore, opt: &OptimizerState, curve: &str) -> Result<()> {
    write_state(out, params, &opt.export(params))?;
    write_atomic(&out.join(CURVE_FILE), curve.as_bytes())
}

fn train_dvae(config: &Config, out: &Path, resume: bool) -> Result<Value> {
    let data = load_data(config)?;
    let steps = config.steps_or("dvae.steps")?;
    let tc = config.dvae_train(steps)?;
    let every = config.usize("checkpoint_every")?;
    let mut trainer = DvaeTrainer::new(&tc)?;
    let mut curve = loss_curve_csv(&[]);
    if resume {
        if let Some(state) = read_state(out)? {
            trainer.step = restore(&mut trainer.model.params, &mut trainer.opt, &state)?;
            curve = curve_prefix(out, trainer.step)?;
        }
    }
    while trainer.step < steps {
        let row = trainer.step(&data.train, &tc)?;
        curve.push_str(&without_header(loss_curve_csv(&[row])));
        if every > 0 && trainer.step % every == 0 {
            save_progress(out, &trainer.model.params, &trainer.opt, &curve)?;
        }
    }
    save_progress(out, &trainer.model.params, &trainer.opt, &curve)?;
    write_model(out, &ModelCard::Dvae { config: tc.model }, &trainer.model.params)?;
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    let spec = InputSpec { layout: tc.model.layout, size: (tc.model.height, tc.model.width) };
    let hists = held_out.eval_inputs(&spec, tc.augment.n_max);
    let initial = DvaeModel::new(tc.model, &mut rng_from_seed(tc.seed))?;
    let mse0 = mean_reconstruction_mse(&initial, &hists)?;
    let mse = mean_reconstruction_mse(&trainer.model, &hists)?;
    Ok(json!({
        "stage": "train-dvae",
        "steps": trainer.step,
        "heldout_mse_initial": mse0,
        "heldout_mse": mse,
        "heldout_mse_ratio": mse / mse0,
        "codebook_usage": codebook_usage(&trainer.model, &hists)?,
    }))
}

fn load_dvae(path: &Path) -> Result<DvaeModel> {
    match read_model(path)? {
        (ModelCard::Dvae { config }, params) => Ok(DvaeModel::from_params(config, params)?),
        _ => Err(CliError::Config(format!("{} is not a dVAE checkpoint", path.display()))),
    }
}

/// A pretrained backbone, or `None` when `checkpoint` is unset.
fn load_backbone(config: &Config) -> Result<Option<VitModel>> {
    let Some(path) = config.opt_path("checkpoint")? else {
        return Ok(None);
    };
    match read_model(&path)? {
        (ModelCard::Vit { config }, params) => Ok(Some(VitModel::from_params(config, params)?)),
        _ => Err(CliError::Config(format!("{} is not a pretrained backbone", path.display()))),
    }
}

fn random_backbone(config: &Config) -> Result<VitModel> {
    let vc = config.vit_model(VitConfig::desk().vocab)?;
    Ok(VitModel::new(vc, &mut rng_from_seed(derive_seed(config.seed()?, 3, 0)))?)
}

fn pretrain_config(config: &Config, vocab: usize, steps: usize) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        model: config.vit_model(vocab)?,
        objective: config.objective()?,
        steps,
        batch_size: config.usize("pretrain.batch_size")?,
        optimizer: config.optimizer("pretrain.lr")?,
        warmup_steps: config.usize("pretrain.warmup_steps")?,
        min_lr: config.f64("pretrain.min_lr")?,
        mask_ratio: config.f64("mask_ratio")?,
        augment: config.augment()?,
        seed: config.seed()?,
    })
}

fn check_tokenizer(dvae: &DvaeModel, vc: &VitConfig) -> Result<()> {
    let d = dvae.config;
    if (d.layout, d.height, d.width, d.patch) != (vc.layout, vc.height, vc.width, vc.patch) {
        return Err(CliError::Config(format!(
            "dVAE input ({:?}, {}x{}, patch {}) does not match the ViT input ({:?}, {}x{}, patch {})",
            d.layout, d.height, d.width, d.patch, vc.layout, vc.height, vc.width, vc.patch
        )));
    }
    Ok(())
}

fn run_pretrain(config: &Config, out: &Path, resume: bool) -> Result<Value> {
    let data = load_data(config)?;
    let objective = config.objective()?;
    let dvae = match objective {
        Objective::Mem => Some(load_dvae(&config.path("dvae.checkpoint")?)?),
        _ => None,
    };
    let vocab = dvae.as_ref().map_or(VitConfig::desk().vocab, |d| d.config.vocab);
    let steps = config.steps_or("pretrain.steps")?;
    let pc = pretrain_config(config, vocab, steps)?;
    if let Some(d) = &dvae {
        check_tokenizer(d, &pc.model)?;
    }
    let every = config.usize("checkpoint_every")?;
    let mut trainer = Pretrainer::new(&pc)?;
    let mut curve = pretrain_curve_csv(&[]);
    if resume {
        if let Some(state) = read_state(out)? {
            trainer.step = restore(&mut trainer.model.params, &mut trainer.opt, &state)?;
            curve = curve_prefix(out, trainer.step)?;
        }
    }
    let mut last = Vec::new();
    while trainer.step < steps {
        let row = trainer.step(dvae.as_ref(), &data.train, &pc)?;
        curve.push_str(&without_header(pretrain_curve_csv(&[row])));
        last.push(row);
        if every > 0 && trainer.step % every == 0 {
            save_progress(out, &trainer.model.params, &trainer.opt, &curve)?;
        }
    }
    save_progress(out, &trainer.model.params, &trainer.opt, &curve)?;
    write_model(out, &ModelCard::Vit { config: trainer.model.config }, &trainer.model.params)?;
    let tail = &last[last.len().saturating_sub(10)..];
    let mean = |f: &dyn Fn(&mem_core::vit::PretrainLogRow) -> Option<f64>| -> Value {
        let v: Vec<f64> = tail.iter().filter_map(f).collect();
        if v.is_empty() {
            Value::Null
        } else {
            json!(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(json!({
        "stage": "pretrain",
        "objective": objective.as_str(),
        "steps": trainer.step,
        "final_loss": mean(&|r| Some(r.loss)),
        "final_masked_token_accuracy": mean(&|r| r.masked_token_accuracy),
    }))
}

fn finetune_config(config: &Config, steps: usize, warmup_steps: usize) -> Result<FinetuneConfig> {
    Ok(FinetuneConfig {
        steps,
        batch_size: config.usize("finetune.batch_size")?,
        optimizer: config.optimizer("finetune.lr")?,
        layer_decay: config.f64("layer_decay")?,
        warmup_steps,
        min_lr: config.f64("finetune.min_lr")?,
        augment: config.augment()?,
        eval_every: config.usize("eval_every")?,
        seed: config.seed()?,
    })
}

fn run_finetune(config: &Config, out: &Path, resume: bool) -> Result<Value> {
    let data = load_data(config)?;
    let (backbone, init) = match load_backbone(config)? {
        Some(b) => (b, "pretrained"),
        None => (random_backbone(config)?, "scratch"),
    };
    let fraction = config.f64("label_fraction")?;
    let train = if fraction < 1.0 {
        let cells = split_labels(&data.train.labels, data.num_classes, &[fraction], config.seed()?)?;
        write_atomic(&out.join("labels.txt"), mem_core::downstream::split_manifest(&cells[0]).as_bytes())?;
        data.train.subset(&cells[0])
    } else {
        data.train.clone()
    };
    let steps = config.steps_or("finetune.steps")?;
    let fc = finetune_config(config, steps, config.usize("finetune.warmup_steps")?)?;
    let every = config.usize("checkpoint_every")?;
    let mut trainer = Finetuner::new(attach_classifier(&backbone, data.num_classes), &fc);
    let spec = spec_of(&trainer.model.vit.config);
    let test_hists = data.test.eval_inputs(&spec, fc.augment.n_max);
    let eval = |m: &ClassifierModel| -> Result<Option<f64>> {
        if data.test.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(m, &test_hists, &data.test.labels)?))
        }
    };
    let mut curve = finetune_curve_csv(&[]);
    let mut resumed = false;
    if resume {
        if let Some(state) = read_state(out)? {
            trainer.step = restore(&mut trainer.model.vit.params, &mut trainer.opt, &state)?;
            curve = curve_prefix(out, trainer.step + 1)?;
            resumed = true;
        }
    }
    if !resumed {
        let row = FinetuneLogRow { step: 0, train_loss: f64::NAN, lr: 0.0, test_top1: eval(&trainer.model)? };
        curve.push_str(&without_header(finetune_curve_csv(&[row])));
    }
    while trainer.step < steps {
        let (train_loss, lr) = trainer.step(&train, &fc)?;
        let done = trainer.step;
        let at_eval = done == steps || (fc.eval_every > 0 && done % fc.eval_every == 0);
        let test_top1 = if at_eval { eval(&trainer.model)? } else { None };
        let row = FinetuneLogRow { step: done, train_loss, lr, test_top1 };
        curve.push_str(&without_header(finetune_curve_csv(&[row])));
        if every > 0 && done % every == 0 {
            save_progress(out, &trainer.model.vit.params, &trainer.opt, &curve)?;
        }
    }
    save_progress(out, &trainer.model.vit.params, &trainer.opt, &curve)?;
    let model = &trainer.model;
    let card = ModelCard::Classifier { config: model.vit.config, num_classes: model.num_classes };
    write_model(out, &card, &model.vit.params)?;
    Ok(json!({
        "stage": "finetune",
        "init": init,
        "label_fraction": fraction,
        "train_samples": train.len(),
        "steps": trainer.step,
        "test_top1": eval(model)?,
    }))
}

fn probe(config: &Config, out: &Path) -> Result<Value> {
    let data = load_data(config)?;
    let (backbone, init) = match load_backbone(config)? {
        Some(b) => (b, "pretrained"),
        None => (random_backbone(config)?, "random"),
    };
    let pc = ProbeConfig {
        epochs: config.steps_or("probe.epochs")?,
        lr: config.f64("probe.lr")?,
        weight_decay: config.f64("probe.weight_decay")?,
        n_max: config.n_max()?,
        seed: config.seed()?,
    };
    let r = linear_probe(&backbone, &data.train, &data.test, data.num_classes, &pc)?;
    let mut head = ParamStore::new();
    head.add("probe.w", r.weight.clone());
    head.add("probe.b", r.bias.clone());
    head.add("probe.mean", mem_core::tensor::Tensor::from_vec(r.mean.clone()));
    head.add("probe.std", mem_core::tensor::Tensor::from_vec(r.std.clone()));
    write_atomic(&out.join("probe.memc"), &head.to_bytes())?;
    Ok(json!({
        "stage": "probe",
        "init": init,
        "epochs": pc.epochs,
        "train_top1": r.train_top1,
        "test_top1": r.test_top1,
    }))
}

fn eval(config: &Config) -> Result<Value> {
    let data = load_data(config)?;
    let path = config.path("checkpoint")?;
    let model = match read_model(&path)? {
        (ModelCard::Classifier { config: vc, num_classes }, params) => ClassifierModel::from_params(vc, num_classes, params)?,
        _ => return Err(CliError::Config(format!("{} is not a finetuned classifier", path.display()))),
    };
    if data.test.is_empty() {
        return Err(CliError::Runtime("dataset has no test samples".into()));
    }
    let hists = data.test.eval_inputs(&spec_of(&model.vit.config), config.n_max()?);
    let logits = model.predict(&hists, 64)?;
    let k = model.num_classes.min(5);
    Ok(json!({
        "stage": "eval",
        "test_samples": hists.len(),
        "test_top1": topk_accuracy(&logits, &data.test.labels, 1),
        format!("test_top{k}"): topk_accuracy(&logits, &data.test.labels, k),
    }))
}

fn render(config: &Config, out: &Path) -> Result<Value> {
    let data = load_data(config)?;
    let count = config.usize("render.count")?;
    let pool = if data.test.is_empty() { &data.train } else { &data.test };
    let vit = load_backbone(config)?;
    let dvae = config.opt_path("dvae.checkpoint")?.map(|p| load_dvae(&p)).transpose()?;
    let size = config.usize("input.size")?;
    let spec = match &vit {
        Some(v) => spec_of(&v.config),
        None => InputSpec { layout: config.layout()?, size: (size, size) },
    };
    let mut rng = rng_from_seed(config.seed()?);
    let mut files = Vec::new();
    for i in 0..count.min(pool.len()) {
        let hist = pool.eval_input(i, &spec, config.n_max()?);
        let prefix = format!("{i:03}");
        match (&vit, &dvae) {
            (Some(v), Some(d)) => {
                check_tokenizer(d, &v.config)?;
                let mask = sample_mask(v.config.num_patches(), config.f64("mask_ratio")?, &mut rng);
                reconstruct_masked(d, v, &hist, &mask)?.write_ppm(out, &prefix)?;
                for part in ["masked", "recon", "truth"] {
                    files.push(format!("{prefix}_{part}.ppm"));
                }
            }
            (None, Some(d)) => {
                let recon = dvae::reconstruct(d, &hist)?;
                write_atomic(&out.join(format!("{prefix}_dvae.ppm")), &mem_core::histogram::to_ppm(&recon))?;
                write_atomic(&out.join(format!("{prefix}_truth.ppm")), &mem_core::histogram::to_ppm(&hist))?;
                files.push(format!("{prefix}_dvae.ppm"));
                files.push(format!("{prefix}_truth.ppm"));
            }
            _ => {
                write_atomic(&out.join(format!("{prefix}.ppm")), &mem_core::histogram::to_ppm(&hist))?;
                files.push(format!("{prefix}.ppm"));
            }
        }
    }
    Ok(json!({ "stage": "render", "files": files }))
}

/// One `(fraction, init, top1)` row of the few-label table.
#[derive(Debug, Clone, PartialEq)]
pub struct FewLabelRow {
    pub fraction: f64,
    pub init: &'static str,
    pub top1: f64,
}

pub fn fewlabel_csv(rows: &[FewLabelRow]) -> String {
    let mut out = String::from("fraction,init,top1\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.fraction, r.init, r.top1));
    }
    out
}

fn repro_fewlabel(config: &Config, out: &Path) -> Result<Value> {
    let seed = config.seed()?;
    let ds = gen_dataset(config.usize("data.classes")?, config.usize("data.per_class")?, seed, &synth_config(config)?);
    let (train, test) = (source(&ds.train()), source(&ds.test()));
    let steps = |key: &str| config.steps_or(key);
    let (dvae, _) = dvae::train_dvae(&train, &config.dvae_train(steps("dvae.steps")?)?)?;
    let pc = pretrain_config(config, dvae.config.vocab, steps("pretrain.steps")?)?;
    check_tokenizer(&dvae, &pc.model)?;
    let (pretrained, _) = pretrain(Some(&dvae), &train, &pc)?;
    let scratch = VitModel::new(pc.model, &mut rng_from_seed(derive_seed(seed, 3, 0)))?;
    // Steps and warmup are set per label fraction.
    let fc = finetune_config(config, 0, 0)?;
    let epochs = config.usize("finetune.epochs")?;
    let cells = split_labels(&train.labels, ds.num_classes, &FEWLABEL_CELLS, seed)?;
    let mut subsets = vec![(1.0, train.clone())];
    for (f, ids) in FEWLABEL_CELLS.iter().zip(&cells) {
        subsets.push((*f, train.subset(ids)));
    }
    let mut rows = Vec::new();
    for (fraction, labeled) in &subsets {
        for (init, backbone) in [("pretrained", &pretrained), ("scratch", &scratch)] {
            let fc = fc.clone().for_epochs(epochs, labeled.len());
            let (_, curve) = finetune(attach_classifier(backbone, ds.num_classes), labeled, Some(&test), &fc)?;
            let top1 = curve.last().and_then(|r| r.test_top1).unwrap_or(0.0);
            rows.push(FewLabelRow { fraction: *fraction, init, top1 });
        }
    }
    write_atomic(&out.join("fewlabel.csv"), fewlabel_csv(&rows).as_bytes())?;
    let table: Vec<Value> = rows.iter().map(|r| json!({"fraction": r.fraction, "init": r.init, "top1": r.top1})).collect();
    Ok(json!({ "stage": "repro-fewlabel", "rows": table }))
}
