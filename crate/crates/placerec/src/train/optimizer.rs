//! Decoupled-weight-decay adaptive-moment optimizer.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::config::TrainConfig;
use crate::nn::ParamList;

struct Moments {
    step: u64,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

/// AdamW. Parameters without a gradient on a given step are skipped
/// entirely: no moment update and no weight decay, so components that a
/// batch never touched stay bit-identical.
pub struct AdamW {
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f32>,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> AdamW {
        AdamW {
            weight_decay: cfg.weight_decay as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.adam_eps as f32,
            grad_clip: cfg.grad_clip.map(|c| c as f32),
            state: BTreeMap::new(),
        }
    }

    /// Applies one update at learning rate `lr` to every parameter that has
    /// a gradient.
    pub fn step(&mut self, params: &ParamList, lr: f32) {
        let scale = self.clip_scale(params);
        for (name, p) in params {
            let Some(mut g) = p.grad() else { continue };
            if scale != 1.0 {
                g.mapv_inplace(|x| x * scale);
            }
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            entry.step += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            entry.m.zip_mut_with(&g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            entry.v.zip_mut_with(&g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let bc1 = 1.0 - b1.powi(entry.step as i32);
            let bc2 = 1.0 - b2.powi(entry.step as i32);
            let mut value = p.value();
            ndarray::Zip::from(&mut value)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
            p.set_value(value);
        }
    }

    fn clip_scale(&self, params: &ParamList) -> f32 {
        let Some(max_norm) = self.grad_clip else {
            return 1.0;
        };
        let mut sq = 0.0f64;
        for (_, p) in params {
            if let Some(g) = p.grad() {
                sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            }
        }
        let norm = sq.sqrt() as f32;
        if norm > max_norm && norm > 0.0 {
            max_norm / norm
        } else {
            1.0
        }
    }

    /// Serializable state: `{name}.m`, `{name}.v`, `{name}.t` per parameter.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (name, m) in &self.state {
            out.push((format!("{name}.m"), m.m.clone()));
            out.push((format!("{name}.v"), m.v.clone()));
            out.push((
                format!("{name}.t"),
                ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![m.step as f32]).unwrap(),
            ));
        }
        out
    }

    pub fn load_state_tensors(&mut self, tensors: &BTreeMap<String, ArrayD<f32>>) {
        self.state.clear();
        for (key, val) in tensors {
            let Some(name) = key.strip_suffix(".m") else { continue };
            let v = tensors.get(&format!("{name}.v"));
            let t = tensors.get(&format!("{name}.t"));
            if let (Some(v), Some(t)) = (v, t) {
                self.state.insert(
                    name.to_string(),
                    Moments {
                        step: t[[0]] as u64,
                        m: val.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
    }
}

/// Zeroes gradients on every parameter.
pub fn zero_grads(params: &ParamList) {
    for (_, p) in params {
        p.zero_grad();
    }
}

/// Parameter list with every name under `prefix/`.
pub fn namespaced(prefix: &str, params: ParamList) -> ParamList {
    params
        .into_iter()
        .map(|(n, t)| (format!("{prefix}/{n}"), t))
        .collect()
}
