//! Bias-corrected Adam over a [`ParamStore`].

use super::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One Adam step over every parameter with a populated gradient.
///
/// Gradients are cleared after the update. Parameters whose gradient is
/// missing are skipped; the count of skipped parameters is returned so the
/// caller can warn.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> usize {
    let mut skipped = 0;
    for (_, p) in store.iter_mut() {
        let Some(grad) = p.tensor.grad() else {
            skipped += 1;
            continue;
        };
        let grad: Vec<f64> = if cfg.weight_decay != 0.0 {
            grad.iter()
                .zip(p.tensor.data())
                .map(|(g, w)| g + cfg.weight_decay * w)
                .collect()
        } else {
            grad.to_vec()
        };
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let data = p.tensor.data_mut();
        for i in 0..grad.len() {
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * grad[i];
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.tensor.clear_grad();
    }
    skipped
}
