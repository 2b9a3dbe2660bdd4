//! AdamW: Adam with decoupled weight decay. Non-trainable parameters are
//! skipped entirely, so frozen weights stay bitwise unchanged.

use ndarray::ArrayD;

use super::{GradStore, ParamSet};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;

        for i in 0..params.len() {
            let id = super::ParamId(i);
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else {
                continue;
            };
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);

            let mut p = params.value(id).clone();
            {
                let ps = p.as_slice_mut().unwrap();
                let ms = m.as_slice().unwrap();
                let vs = v.as_slice().unwrap();
                for i in 0..ps.len() {
                    // Decoupled decay first, then the Adam update.
                    ps[i] -= lr * wd * ps[i];
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            params.set_value(id, p);
        }
    }
}
