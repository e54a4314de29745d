use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for every parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub lr_peak: f64,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

/// Biases and LayerNorm affines are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl OptimState {
    pub fn new(params: &ParamStore<f32>, hyper: AdamWConfig, lr_peak: f64) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (n, t) in p.iter() {
                s.insert(n.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            hyper,
            lr_peak,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// Parameters absent from `grads` are left untouched, moments included.
pub fn adamw_step(params: &mut ParamStore<f32>, grads: &ParamStore<f32>, state: &mut OptimState, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() || state.m.get(name)?.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (name, g) in grads.iter() {
        let wd = if decays(name) { h.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let p = params.get_mut(name)?.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
            let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mh = mi / bc1;
            let vh = vi / bc2;
            let th = p[i] as f64;
            p[i] = (th - lr * (mh / (vh.sqrt() + h.eps) + wd * th)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn single_step_closed_form() {
        let mut p = one("w", 1.0);
        let hyper = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut st = OptimState::new(&p, hyper, 0.1);
        adamw_step(&mut p, &one("w", 1.0), &mut st, 0.1).unwrap();
        // m̂ = v̂ = 1, so θ = 1 - 0.1·(1/(1+1e-8) + 0.01).
        assert!((p.get("w").unwrap().data()[0] as f64 - 0.899).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = one("w", 0.7);
        let hyper = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(&p, hyper, 0.1);
        for _ in 0..5 {
            adamw_step(&mut p, &one("w", 0.0), &mut st, 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn biases_and_norms_skip_decay() {
        assert!(!decays("encoder.blocks.0.attn.q.bias"));
        assert!(!decays("head.norm.gamma"));
        assert!(!decays("head.norm.beta"));
        assert!(decays("head.fc.weight"));
        assert!(decays("decoder.mask_token"));
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut p = one("a", 1.0);
        p.insert("b", Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        let mut st = OptimState::new(&p, AdamWConfig::default(), 0.1);
        adamw_step(&mut p, &one("a", 0.5), &mut st, 0.1).unwrap();
        assert_eq!(p.get("b").unwrap().data()[0], 2.0);
        assert_eq!(st.m.get("b").unwrap().data()[0], 0.0);
        assert!(adamw_step(&mut p, &one("a", 0.5).with_prefix("x."), &mut st, 0.1).is_err());
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut p = one("a", 0.3);
        p.insert("c", Tensor::from_vec(vec![1], vec![0.3]).unwrap());
        let mut st = OptimState::new(&p, AdamWConfig::default(), 0.1);
        for k in 0..20 {
            let g = 0.1 * (k as f32 - 7.0);
            let mut gr = one("a", g);
            gr.insert("c", Tensor::from_vec(vec![1], vec![g]).unwrap());
            adamw_step(&mut p, &gr, &mut st, 0.01).unwrap();
            assert_eq!(p.get("a").unwrap().data(), p.get("c").unwrap().data());
        }
    }
}
