use serde::{Deserialize, Serialize};

use super::{mismatch, ParamStore, Tensor, TensorError};

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the scale that was applied.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        scale
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied to the parameters, never mixed into the moments.
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    /// dVAE defaults: Adam, β = (0.9, 0.999), clip 1e-2.
    pub fn dvae() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1e-2) }
    }

    /// Pretraining defaults: AdamW, β = (0.9, 0.95), wd 0.05, clip 30.
    pub fn pretrain() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, clip_norm: Some(30.0) }
    }

    /// Finetuning defaults: AdamW, β = (0.9, 0.95), wd 0.05.
    pub fn finetune() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, clip_norm: None }
    }
}

/// Per-parameter multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamOptions {
    pub lr_scale: f64,
    pub decay: bool,
}

impl Default for ParamOptions {
    fn default() -> Self {
        ParamOptions { lr_scale: 1.0, decay: true }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    options: Vec<ParamOptions>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self::with_options(config, params, vec![ParamOptions::default(); params.len()])
    }

    pub fn with_options(config: AdamConfig, params: &ParamStore, options: Vec<ParamOptions>) -> Self {
        assert_eq!(options.len(), params.len());
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState { config, step: 0, m: zeros.clone(), v: zeros, options }
    }

    pub fn options(&self) -> &[ParamOptions] {
        &self.options
    }

    /// Moments as a parameter store (`adam.m.<name>`, `adam.v.<name>`) plus
    /// the step count, for checkpointing next to the parameters.
    pub fn export(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        out.add("adam.step", Tensor::scalar(self.step as f64));
        for (i, name) in params.names().iter().enumerate() {
            out.add(format!("adam.m.{name}"), self.m[i].clone());
            out.add(format!("adam.v.{name}"), self.v[i].clone());
        }
        out
    }

    /// Restores moments written by [`OptimizerState::export`].
    pub fn import(&mut self, params: &ParamStore, saved: &ParamStore) -> Result<(), TensorError> {
        let get = |key: String, shape: &[usize]| -> Result<Tensor, TensorError> {
            let t = saved
                .find(&key)
                .map(|id| saved.get(id).clone())
                .ok_or_else(|| TensorError::Checkpoint(format!("optimizer state lacks {key}")))?;
            if t.shape() != shape {
                return Err(TensorError::Checkpoint(format!("optimizer state {key} has the wrong shape")));
            }
            Ok(t)
        };
        let step = get("adam.step".into(), &[])?.item();
        for (i, name) in params.names().iter().enumerate() {
            let shape = params.values()[i].shape();
            self.m[i] = get(format!("adam.m.{name}"), shape)?;
            self.v[i] = get(format!("adam.v.{name}"), shape)?;
        }
        self.step = step as u64;
        Ok(())
    }

    /// One Adam step with bias correction at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.values().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(mismatch("optimizer_step", &[p.shape(), g.shape()]));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let opt = self.options[i];
            let lr_i = lr * opt.lr_scale;
            let decay = if opt.decay { 1.0 - lr_i * c.weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr_i * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then half-cosine decay to `min_lr`
    /// at `total_steps`.
    Cosine { warmup_steps: u64, total_steps: u64, min_lr: f64 },
    /// `base * gamma^(step / steps_per_epoch)`, stepping once per epoch.
    Exponential { gamma: f64, steps_per_epoch: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup_steps, total_steps, min_lr } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            LrSchedule::Exponential { gamma, steps_per_epoch } => {
                let epoch = step / steps_per_epoch.max(1);
                base * gamma.powi(epoch as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(v.to_vec()));
        s
    }

    #[test]
    fn clip_cases() {
        let mut g = vec![Tensor::from_vec(vec![0.3, 0.4])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        let s = clip_global_norm(&mut g, 1.0);
        assert!((s - 0.2).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = store(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::dvae() }, &p);
        opt.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p.values()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut p = store(&[0.0]);
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: None };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, &[Tensor::from_vec(vec![1.0])], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction: Δ = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.values()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = store(&[2.0]);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.1, ..AdamConfig::pretrain() };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert!((p.values()[0].data()[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn step_shape_mismatch() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(AdamConfig::dvae(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn schedules() {
        let cos = LrSchedule::Cosine { warmup_steps: 10, total_steps: 110, min_lr: 0.0 };
        assert!((cos.lr_at(1.0, 0) - 0.1).abs() < 1e-15);
        assert_eq!(cos.lr_at(1.0, 10), 1.0);
        assert!((cos.lr_at(1.0, 60) - 0.5).abs() < 1e-12);
        assert!(cos.lr_at(1.0, 110).abs() < 1e-12);
        let exp = LrSchedule::Exponential { gamma: 0.99, steps_per_epoch: 5 };
        assert_eq!(exp.lr_at(1.0, 4), 1.0);
        assert!((exp.lr_at(1.0, 10) - 0.9801).abs() < 1e-15);
    }
}
