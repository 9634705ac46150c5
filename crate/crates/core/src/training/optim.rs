use crate::training::model::{Model, Params};

/// AdamW with decoupled weight decay on the tensors the model marks as decaying.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Params,
    v: Params,
}

impl AdamW {
    pub fn new(model: &Model, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &Params, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in 0..model.params.len() {
            let decay = if model.decays(p) { self.weight_decay } else { 0.0 };
            let g = grads.tensors[p].data();
            let m = self.m.tensors[p].data_mut();
            let v = self.v.tensors[p].data_mut();
            let w = model.params.tensors[p].data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * w[i]);
            }
        }
    }
}

/// Linear warmup over the first `warmup` fraction of steps, then cosine decay to zero.
pub fn lr_at(base: f64, step: usize, total: usize, warmup: f64) -> f64 {
    let warm = ((warmup * total as f64).ceil() as usize).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let rest = (total - warm).max(1);
    let progress = (step - warm) as f64 / rest as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
