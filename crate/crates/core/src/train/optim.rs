use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::batching::BatchMode;
use crate::encoder::{is_decay_exempt, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub mode: BatchMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 40,
            total_epochs: 100,
            batch_size: 8,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            mode: BatchMode::Cbs,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be >= 1"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let (b1, b2) = self.betas;
        let positive = self.base_lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0;
        if !positive || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(
                "need base_lr > 0, eps > 0, weight_decay >= 0 and betas in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Overrides fields from `key=value` pairs; unknown keys are ignored.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let bad = || Error::config(format!("{k}={v}: invalid value"));
            let f = || v.parse::<f64>().map_err(|_| bad());
            let n = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "base_lr" | "lr" => self.base_lr = f()?,
                "weight_decay" => self.weight_decay = f()?,
                "warmup_epochs" => self.warmup_epochs = n()?,
                "epochs" | "total_epochs" => self.total_epochs = n()?,
                "batch_size" => self.batch_size = n()?,
                "seed" => self.seed = v.parse().map_err(|_| bad())?,
                "beta1" => self.betas.0 = f()?,
                "beta2" => self.betas.1 = f()?,
                "eps" => self.eps = f()?,
                "mode" => self.mode = v.parse()?,
                "augment" => self.augment = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over the warmup, then cosine decay to 0
/// at `total_epochs`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    let total = cfg.total_epochs as f64;
    if epoch >= total {
        return 0.0;
    }
    if epoch < warm {
        return cfg.base_lr * (epoch.max(0.0) / warm);
    }
    let t = (epoch - warm) / (total - warm);
    cfg.base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Learning rate held for the whole of 0-based training epoch `e`: the
/// schedule sampled at the epoch's midpoint, so neither the first nor the
/// last epoch runs at zero.
pub fn epoch_lr(e: usize, cfg: &TrainConfig) -> f64 {
    lr_at(e as f64 + 0.5, cfg)
}

/// First and second moments of every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step:
/// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`, with no decay on biases, norm
/// affines and the CLS token.
pub fn optimizer_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = grads.tensors();
    for (name, t) in &g {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let mut p = params.tensors_mut();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    if p.len() != g.len() || m.len() != g.len() || v.len() != g.len() {
        return Err(Error::shape("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..g.len() {
        let (name, gt) = &g[i];
        let pt = &mut p[i].1;
        let (mt, vt) = (&mut m[i].1, &mut v[i].1);
        if pt.shape() != gt.shape() || mt.shape() != gt.shape() || vt.shape() != gt.shape() {
            return Err(Error::shape(format!("optimizer state shape for {name}")));
        }
        let decay = if is_decay_exempt(name) {
            1.0
        } else {
            1.0 - lr * cfg.weight_decay
        };
        let it = pt
            .data_mut()
            .iter_mut()
            .zip(gt.data())
            .zip(mt.data_mut().iter_mut().zip(vt.data_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            let gv = gv.as_f64();
            let mn = b1 * mv.as_f64() + (1.0 - b1) * gv;
            let vn = b2 * vv.as_f64() + (1.0 - b2) * gv * gv;
            *mv = T::of(mn);
            *vv = T::of(vn);
            let update = (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *pv = T::of(pv.as_f64() * decay - lr * update);
        }
    }
    Ok(())
}
