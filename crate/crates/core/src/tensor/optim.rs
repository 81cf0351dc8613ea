//! Adam parameter updates with coupled L2 weight decay.

use crate::tensor::ParamSet;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// One Adam step over every block in the set: weight decay is added to the
/// gradient before the moment update (coupled L2), moments use the
/// bias-corrected form, and gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParamSet, lr: f64, weight_decay: f64) {
    for (_, p) in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let m_corr = 1.0 / (1.0 - BETA1.powi(t));
        let v_corr = 1.0 / (1.0 - BETA2.powi(t));
        let value = p.value.as_mut_slice();
        let grad = p.grad.as_mut_slice();
        let m = p.adam_m.as_mut_slice();
        let v = p.adam_v.as_mut_slice();
        for i in 0..value.len() {
            let g = grad[i] + weight_decay * value[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] * m_corr;
            let v_hat = v[i] * v_corr;
            value[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
        p.grad.fill(0.0);
    }
}
