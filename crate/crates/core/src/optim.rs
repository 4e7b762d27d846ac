//! Adam with bias correction, global-norm gradient clipping, parameter
//! EMA, and the warmup / inverse-square-root learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup to `peak_lr`, then decay proportional to 1/sqrt(step).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// Learning rate for 1-based step number.
    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps.max(1) as f64;
        let s = step.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Scale all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm; otherwise leave them untouched. Idempotent.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let sq: f64 = grads
        .values()
        .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data.iter_mut() {
                *x = g.dtype.quantize(*x * scale);
            }
        }
    }
    norm
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamState {
    pub fn new(schedule: LrSchedule) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One Adam update over the trainable parameters. Frozen parameters
    /// are untouched bitwise; a missing gradient for a trainable
    /// parameter that was part of the step is a hard error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        self.step += 1;
        let lr = self.schedule.lr(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, grad) in grads {
            let p = store.get(name);
            if p.frozen {
                continue;
            }
            let n = p.tensor.numel();
            assert_eq!(grad.numel(), n, "gradient shape mismatch for {name}");
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n] });
            let mut t = store.get(name).tensor.clone();
            let dtype = t.dtype;
            for i in 0..n {
                let g = grad.data[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                t.data[i] = dtype.quantize(t.data[i] - lr * mhat / (vhat.sqrt() + eps));
            }
            store.set_tensor(name, t);
        }
        lr
    }

    /// Assert every trainable name has a gradient; used by training loops
    /// where a missing gradient means a wiring bug.
    pub fn require_grads(store: &ParamStore, grads: &BTreeMap<String, Tensor>, names: &[String]) {
        for name in names {
            if !store.get(name).frozen && !grads.contains_key(name) {
                panic!("missing gradient for trainable parameter {name}");
            }
        }
    }
}

/// Exponential moving average of trainable parameters.
pub struct Ema {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    /// Shadow initialized to the current trainable parameters.
    pub fn new(store: &ParamStore, decay: f64) -> Ema {
        let shadow = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, p)| (n.clone(), p.tensor.clone()))
            .collect();
        Ema { decay, shadow }
    }

    /// shadow = decay * shadow + (1 - decay) * param, elementwise.
    pub fn update(&mut self, store: &ParamStore) {
        for (name, sh) in self.shadow.iter_mut() {
            let p = &store.get(name).tensor;
            assert_eq!(sh.shape, p.shape, "EMA shape mismatch for {name}");
            for (s, &x) in sh.data.iter_mut().zip(&p.data) {
                *s = sh.dtype.quantize(self.decay * *s + (1.0 - self.decay) * x);
            }
        }
    }

    /// Copy shadow values into the store (used when checkpointing).
    pub fn apply(&self, store: &mut ParamStore) {
        for (name, sh) in &self.shadow {
            store.set_tensor(name, sh.clone());
        }
    }

    pub fn shadow(&self, name: &str) -> &Tensor {
        &self.shadow[name]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    fn grads_of(v: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
        v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    #[test]
    fn clip_boundary_and_scaling() {
        let mut g = grads_of(vec![("p", Tensor::new(vec![2], vec![3.0, 4.0], Dtype::F64))]);
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g["p"].data, vec![3.0, 4.0]); // norm exactly 5: unchanged

        let mut g = grads_of(vec![("p", Tensor::new(vec![2], vec![6.0, 8.0], Dtype::F64))]);
        clip_global_norm(&mut g, 5.0);
        assert!((g["p"].data[0] - 3.0).abs() < 1e-12);
        assert!((g["p"].data[1] - 4.0).abs() < 1e-12);

        let mut g = grads_of(vec![("p", Tensor::zeros(vec![3], Dtype::F64))]);
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g["p"].data, vec![0.0; 3]);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut once = grads_of(vec![("p", Tensor::new(vec![2], vec![60.0, 80.0], Dtype::F64))]);
        clip_global_norm(&mut once, 5.0);
        let mut twice = once.clone();
        clip_global_norm(&mut twice, 5.0);
        assert_eq!(once["p"].data, twice["p"].data);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0, Dtype::F64));
        let mut adam = AdamState::new(LrSchedule { peak_lr: 0.1, warmup_steps: 1 });
        let g = grads_of(vec![("p", Tensor::scalar(1.0, Dtype::F64))]);
        adam.step(&mut store, &g);
        // mhat = 1, vhat = 1 -> delta = -lr * 1/(1 + eps)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((store.get("p").tensor.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_zero_state_is_noop() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.7, Dtype::F64));
        let mut adam = AdamState::new(LrSchedule { peak_lr: 0.1, warmup_steps: 1 });
        let g = grads_of(vec![("p", Tensor::scalar(0.0, Dtype::F64))]);
        adam.step(&mut store, &g);
        assert_eq!(store.get("p").tensor.item(), 0.7);
    }

    #[test]
    fn adam_never_touches_frozen_params() {
        let mut store = ParamStore::new();
        store.insert("asr.p", Tensor::scalar(0.5, Dtype::F64));
        store.freeze_prefixes(&["asr."]);
        let before = ParamStore::tensor_hash(&store.get("asr.p").tensor);
        let mut adam = AdamState::new(LrSchedule { peak_lr: 0.1, warmup_steps: 1 });
        let g = grads_of(vec![("asr.p", Tensor::scalar(123.0, Dtype::F64))]);
        adam.step(&mut store, &g);
        assert_eq!(before, ParamStore::tensor_hash(&store.get("asr.p").tensor));
    }

    #[test]
    fn ema_recurrence() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0, Dtype::F64));
        let mut ema = Ema::new(&store, 0.999);
        store.set_tensor("p", Tensor::scalar(1.0, Dtype::F64));
        ema.update(&store);
        assert!((ema.shadow("p").item() - 0.001).abs() < 1e-15);
        ema.update(&store);
        assert!((ema.shadow("p").item() - 0.001999).abs() < 1e-12);
    }

    #[test]
    fn ema_fixed_point() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(2.5, Dtype::F64));
        let mut ema = Ema::new(&store, 0.999);
        ema.update(&store);
        assert_eq!(ema.shadow("p").item(), 2.5);
    }

    #[test]
    fn lr_schedule_warmup_then_decay() {
        let s = LrSchedule { peak_lr: 1.0, warmup_steps: 10 };
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(40) - 0.5).abs() < 1e-12); // sqrt(10/40)
    }
}
