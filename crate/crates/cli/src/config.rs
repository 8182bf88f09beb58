//! Flat dotted-key JSON configuration.
//!
//! A config file is a single JSON object whose values are scalars, e.g.
//! `{"seed": 3, "optimizer.lr": 0.001, "layout": "c2"}`. Every stage starts
//! from its own defaults; the file and then command-line flags override
//! them. Keys a stage does not know are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use mem_core::augment::AugmentConfig;
use mem_core::dvae::{DvaeConfig, DvaeTrainConfig, TauSchedule};
use mem_core::histogram::ChannelLayout;
use mem_core::tensor::AdamConfig;
use mem_core::vit::{Objective, VitConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainDvae,
    Pretrain,
    Finetune,
    Probe,
    Eval,
    Render,
    ReproFewlabel,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDvae => "train-dvae",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Probe => "probe",
            Stage::Eval => "eval",
            Stage::Render => "render",
            Stage::ReproFewlabel => "repro-fewlabel",
        }
    }
}

/// Effective key/value configuration of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub stage: Stage,
    values: BTreeMap<String, Value>,
}

fn defaults(stage: Stage) -> Vec<(&'static str, Value)> {
    let aug = AugmentConfig::desk();
    let dvae = DvaeTrainConfig::default();
    let common = || -> Vec<(&'static str, Value)> {
        vec![("seed", 0.into()), ("out", Value::Null), ("input.size", 64.into()), ("layout", "c2".into())]
    };
    let data = || -> Vec<(&'static str, Value)> { vec![("data.classes", 4.into()), ("data.per_class", 256.into())] };
    let augment = || -> Vec<(&'static str, Value)> {
        vec![
            ("augment.n_max", aug.n_max.into()),
            ("augment.p_polarity_flip", aug.p_polarity_flip.into()),
            ("augment.p_hflip", aug.p_hflip.into()),
            ("augment.jitter_range", aug.jitter_range.into()),
            ("augment.randaugment_ops", aug.randaugment_ops.into()),
            ("augment.randaugment_magnitude", aug.randaugment_magnitude.into()),
        ]
    };
    let optimizer = |o: AdamConfig| -> Vec<(&'static str, Value)> {
        vec![
            ("optimizer.beta1", o.beta1.into()),
            ("optimizer.beta2", o.beta2.into()),
            ("optimizer.eps", o.eps.into()),
            ("optimizer.weight_decay", o.weight_decay.into()),
            ("optimizer.clip_norm", o.clip_norm.map_or(Value::Null, Value::from)),
        ]
    };
    let dvae_model = || -> Vec<(&'static str, Value)> {
        vec![
            ("dvae.patch", dvae.model.patch.into()),
            ("dvae.hidden", dvae.model.hidden.into()),
            ("dvae.vocab", dvae.model.vocab.into()),
            ("dvae.latent", dvae.model.latent.into()),
        ]
    };
    let dvae_train = || -> Vec<(&'static str, Value)> {
        let t = dvae.tau;
        vec![
            ("dvae.steps", dvae.steps.into()),
            ("dvae.batch_size", dvae.batch_size.into()),
            ("dvae.lr", dvae.optimizer.lr.into()),
            ("dvae.lr_decay", dvae.lr_decay.into()),
            ("dvae.kl_weight", dvae.kl_weight.into()),
            ("dvae.clip_norm", dvae.optimizer.clip_norm.map_or(Value::Null, Value::from)),
            ("tau.start", t.start.into()),
            ("tau.end", t.end.into()),
            ("tau.anneal_frac", t.anneal_frac.into()),
            ("tau.hard_frac", t.hard_frac.into()),
        ]
    };
    let vit_model = || -> Vec<(&'static str, Value)> {
        vec![
            ("model.preset", "desk".into()),
            ("vit.dim", Value::Null),
            ("vit.depth", Value::Null),
            ("vit.heads", Value::Null),
            ("vit.mlp_dim", Value::Null),
        ]
    };
    let pretrain = || -> Vec<(&'static str, Value)> {
        let p = mem_core::vit::PretrainConfig::default();
        vec![
            ("pretrain.steps", p.steps.into()),
            ("pretrain.batch_size", p.batch_size.into()),
            ("pretrain.lr", p.optimizer.lr.into()),
            ("pretrain.warmup_steps", p.warmup_steps.into()),
            ("pretrain.min_lr", p.min_lr.into()),
            ("mask_ratio", p.mask_ratio.into()),
            ("objective", p.objective.as_str().into()),
        ]
    };
    let finetune = || -> Vec<(&'static str, Value)> {
        let f = mem_core::downstream::FinetuneConfig::default();
        vec![
            ("finetune.steps", f.steps.into()),
            ("finetune.batch_size", f.batch_size.into()),
            ("finetune.lr", f.optimizer.lr.into()),
            ("finetune.warmup_steps", f.warmup_steps.into()),
            ("finetune.min_lr", f.min_lr.into()),
            ("layer_decay", f.layer_decay.into()),
            ("eval_every", f.eval_every.into()),
        ]
    };
    let probe = || -> Vec<(&'static str, Value)> {
        let p = mem_core::downstream::ProbeConfig::default();
        vec![("probe.epochs", p.epochs.into()), ("probe.lr", p.lr.into()), ("probe.weight_decay", p.weight_decay.into())]
    };
    let mut out = common();
    match stage {
        Stage::GenData => {
            out.extend(data());
            out.push(("data.seg_per_class", 0.into()));
        }
        Stage::TrainDvae => {
            out.push(("dataset", Value::Null));
            out.extend(augment());
            out.extend(dvae_model());
            out.extend(dvae_train());
            out.push(("steps", Value::Null));
            out.push(("checkpoint_every", 0.into()));
        }
        Stage::Pretrain => {
            out.push(("dataset", Value::Null));
            out.push(("dvae.checkpoint", Value::Null));
            out.extend(augment());
            out.extend(vit_model());
            out.extend(pretrain());
            out.extend(optimizer(AdamConfig::pretrain()));
            out.push(("steps", Value::Null));
            out.push(("checkpoint_every", 0.into()));
        }
        Stage::Finetune => {
            out.push(("dataset", Value::Null));
            out.push(("checkpoint", Value::Null));
            out.push(("label_fraction", 1.0.into()));
            out.extend(augment());
            out.extend(vit_model());
            out.extend(finetune());
            out.extend(optimizer(AdamConfig::finetune()));
            out.push(("steps", Value::Null));
            out.push(("checkpoint_every", 0.into()));
        }
        Stage::Probe => {
            out.push(("dataset", Value::Null));
            out.push(("checkpoint", Value::Null));
            out.push(("augment.n_max", aug.n_max.into()));
            out.extend(vit_model());
            out.extend(probe());
            out.push(("steps", Value::Null));
        }
        Stage::Eval => {
            out.push(("dataset", Value::Null));
            out.push(("checkpoint", Value::Null));
            out.push(("augment.n_max", aug.n_max.into()));
            out.push(("steps", Value::Null));
        }
        Stage::Render => {
            out.push(("dataset", Value::Null));
            out.push(("checkpoint", Value::Null));
            out.push(("dvae.checkpoint", Value::Null));
            out.push(("augment.n_max", aug.n_max.into()));
            out.push(("mask_ratio", mem_core::vit::DEFAULT_MASK_RATIO.into()));
            out.push(("render.count", 4.into()));
            out.push(("steps", Value::Null));
        }
        Stage::ReproFewlabel => {
            out.extend(data());
            out.extend(augment());
            out.extend(dvae_model());
            out.extend(dvae_train());
            out.extend(vit_model());
            out.extend(pretrain());
            out.extend(finetune().into_iter().filter(|(k, _)| !matches!(*k, "finetune.steps" | "finetune.warmup_steps")));
            out.push(("finetune.epochs", mem_core::downstream::FEWLABEL_EPOCHS.into()));
            out.extend(optimizer(AdamConfig::finetune()));
            out.push(("steps", Value::Null));
        }
    }
    out
}

/// Command-line overrides applied after the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Config {
    /// Stage defaults, then `file` (if any), then `overrides`.
    pub fn load(stage: Stage, file: Option<&Path>, overrides: &Overrides) -> Result<Config, CliError> {
        let mut values: BTreeMap<String, Value> = defaults(stage).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
            let Value::Object(map) = parsed else {
                return Err(CliError::Config("config must be a JSON object".into()));
            };
            for (k, v) in map {
                if k == "stage" {
                    if v.as_str() != Some(stage.name()) {
                        return Err(CliError::Config(format!("config is for stage {v}, not {}", stage.name())));
                    }
                    continue;
                }
                if !values.contains_key(&k) {
                    return Err(CliError::Config(format!("unknown key \"{k}\" for stage {}", stage.name())));
                }
                if v.is_object() || v.is_array() {
                    return Err(CliError::Config(format!("key \"{k}\" must hold a scalar")));
                }
                values.insert(k, v);
            }
        }
        if let Some(seed) = overrides.seed {
            values.insert("seed".into(), seed.into());
        }
        if let Some(steps) = overrides.steps {
            values.insert("steps".into(), steps.into());
        }
        if let Some(out) = &overrides.out {
            values.insert("out".into(), out.to_string_lossy().into_owned().into());
        }
        let config = Config { stage, values };
        config.validate()?;
        Ok(config)
    }

    /// The effective configuration as a flat JSON object, `stage` first.
    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        map.insert("stage".into(), self.stage.name().into());
        for (k, v) in &self.values {
            map.insert(k.clone(), v.clone());
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
        text.push('\n');
        text
    }

    fn raw(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("stage {} has no key {key}", self.stage.name()))
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.get(key).is_some_and(|v| !v.is_null())
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.raw(key).as_f64().ok_or_else(|| CliError::Config(format!("\"{key}\" must be a number")))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.raw(key).is_null() {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.raw(key).as_u64().ok_or_else(|| CliError::Config(format!("\"{key}\" must be a non-negative integer")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        Ok(self.u64(key)? as usize)
    }

    pub fn string(&self, key: &str) -> Result<String, CliError> {
        self.raw(key).as_str().map(str::to_owned).ok_or_else(|| CliError::Config(format!("\"{key}\" must be a string")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        if self.raw(key).is_null() {
            return Err(CliError::Config(format!("\"{key}\" is required for stage {}", self.stage.name())));
        }
        self.string(key).map(PathBuf::from)
    }

    pub fn opt_path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        if self.raw(key).is_null() {
            Ok(None)
        } else {
            self.path(key).map(Some)
        }
    }

    /// `steps` when set, else the stage-specific key.
    pub fn steps_or(&self, key: &str) -> Result<usize, CliError> {
        if self.has("steps") {
            self.usize("steps")
        } else {
            self.usize(key)
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.u64("seed")
    }

    pub fn layout(&self) -> Result<ChannelLayout, CliError> {
        match self.string("layout")?.as_str() {
            "c2" => Ok(ChannelLayout::TwoPolarity),
            "c3" => Ok(ChannelLayout::TwoPolarityPlusTimestamp),
            "c8" => Ok(ChannelLayout::FourSlicesTwoPolarity),
            other => Err(CliError::Config(format!("layout must be c2, c3 or c8, not \"{other}\""))),
        }
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        match self.string("objective")?.as_str() {
            "mem" => Ok(Objective::Mem),
            "emae-only-mask" => Ok(Objective::EmaeOnlyMask),
            "emae-entire" => Ok(Objective::EmaeEntire),
            other => Err(CliError::Config(format!(
                "objective must be mem, emae-only-mask or emae-entire, not \"{other}\""
            ))),
        }
    }

    pub fn augment(&self) -> Result<AugmentConfig, CliError> {
        let aug = AugmentConfig {
            n_max: self.usize("augment.n_max")?,
            p_polarity_flip: self.f64("augment.p_polarity_flip")?,
            p_hflip: self.f64("augment.p_hflip")?,
            jitter_range: u16::try_from(self.u64("augment.jitter_range")?)
                .map_err(|_| CliError::Config("augment.jitter_range is too large".into()))?,
            randaugment_ops: self.usize("augment.randaugment_ops")?,
            randaugment_magnitude: self.f64("augment.randaugment_magnitude")?,
            seed: self.seed()?,
        };
        aug.validate().map_err(CliError::Config)?;
        Ok(aug)
    }

    pub fn n_max(&self) -> Result<usize, CliError> {
        self.usize("augment.n_max")
    }

    /// Optimizer fields with the stage's learning-rate key.
    pub fn optimizer(&self, lr_key: &str) -> Result<AdamConfig, CliError> {
        Ok(AdamConfig {
            lr: self.f64(lr_key)?,
            beta1: self.f64("optimizer.beta1")?,
            beta2: self.f64("optimizer.beta2")?,
            eps: self.f64("optimizer.eps")?,
            weight_decay: self.f64("optimizer.weight_decay")?,
            clip_norm: self.opt_f64("optimizer.clip_norm")?,
        })
    }

    pub fn dvae_model(&self) -> Result<DvaeConfig, CliError> {
        let size = self.usize("input.size")?;
        Ok(DvaeConfig {
            layout: self.layout()?,
            height: size,
            width: size,
            patch: self.usize("dvae.patch")?,
            hidden: self.usize("dvae.hidden")?,
            vocab: self.usize("dvae.vocab")?,
            latent: self.usize("dvae.latent")?,
        })
    }

    pub fn dvae_train(&self, steps: usize) -> Result<DvaeTrainConfig, CliError> {
        let mut optimizer = AdamConfig::dvae();
        optimizer.lr = self.f64("dvae.lr")?;
        optimizer.clip_norm = self.opt_f64("dvae.clip_norm")?;
        Ok(DvaeTrainConfig {
            model: self.dvae_model()?,
            steps,
            batch_size: self.usize("dvae.batch_size")?,
            optimizer,
            lr_decay: self.f64("dvae.lr_decay")?,
            kl_weight: self.f64("dvae.kl_weight")?,
            tau: TauSchedule {
                start: self.f64("tau.start")?,
                end: self.f64("tau.end")?,
                anneal_frac: self.f64("tau.anneal_frac")?,
                hard_frac: self.f64("tau.hard_frac")?,
            },
            augment: self.augment()?,
            seed: self.seed()?,
        })
    }

    /// ViT architecture for `vocab` tokens.
    pub fn vit_model(&self, vocab: usize) -> Result<VitConfig, CliError> {
        let base = match self.string("model.preset")?.as_str() {
            "desk" => VitConfig::desk(),
            "base" => VitConfig::base(),
            other => return Err(CliError::Config(format!("model.preset must be desk or base, not \"{other}\""))),
        };
        let size = self.usize("input.size")?;
        // unset vit.* keys fall back to the preset
        let pick = |key: &str, preset: usize| -> Result<usize, CliError> {
            Ok(if self.has(key) { self.usize(key)? } else { preset })
        };
        let cfg = VitConfig {
            layout: self.layout()?,
            height: size,
            width: size,
            dim: pick("vit.dim", base.dim)?,
            depth: pick("vit.depth", base.depth)?,
            heads: pick("vit.heads", base.heads)?,
            mlp_dim: pick("vit.mlp_dim", base.mlp_dim)?,
            vocab,
            ..base
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Range checks on every numeric field the stage carries.
    fn validate(&self) -> Result<(), CliError> {
        let unit = |k: &str, lo_open: bool| -> Result<(), CliError> {
            if !self.has(k) {
                return Ok(());
            }
            let v = self.f64(k)?;
            let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!("\"{k}\" = {v} is out of range")))
            }
        };
        let positive = |k: &str| -> Result<(), CliError> {
            if !self.has(k) {
                return Ok(());
            }
            let v = self.f64(k)?;
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("\"{k}\" must be positive")))
            }
        };
        for (k, v) in &self.values {
            if v.is_number() && !v.as_f64().is_some_and(f64::is_finite) {
                return Err(CliError::Config(format!("\"{k}\" is not finite")));
            }
        }
        for k in ["mask_ratio", "label_fraction"] {
            unit(k, true)?;
        }
        for k in ["tau.anneal_frac", "tau.hard_frac", "optimizer.beta1", "optimizer.beta2", "augment.p_hflip", "augment.p_polarity_flip"] {
            unit(k, false)?;
        }
        for k in [
            "dvae.lr",
            "pretrain.lr",
            "finetune.lr",
            "probe.lr",
            "tau.start",
            "tau.end",
            "layer_decay",
            "dvae.lr_decay",
            "input.size",
            "data.classes",
            "data.per_class",
        ] {
            positive(k)?;
        }
        for k in ["dvae.batch_size", "pretrain.batch_size", "finetune.batch_size"] {
            if self.has(k) && self.u64(k)? == 0 {
                return Err(CliError::Config(format!("\"{k}\" must be at least 1")));
            }
        }
        if self.has("data.classes") && self.u64("data.classes")? > 4 {
            return Err(CliError::Config("data.classes must be between 1 and 4".into()));
        }
        if self.has("layout") {
            self.layout()?;
        }
        if self.has("objective") {
            self.objective()?;
        }
        if self.has("steps") {
            self.u64("steps")?;
        }
        self.seed()?;
        Ok(())
    }
}
