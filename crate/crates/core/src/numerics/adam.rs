use std::collections::BTreeMap;

use super::tensor::{Params, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name; the
/// sorted map plus fixed element order makes updates deterministic.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
            v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        OptimizerState {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// One Adam step over every entry in `grads`. A non-finite gradient
    /// aborts before any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient(name.clone()));
            }
            if !self.m.contains_key(name) {
                return Err(NumericsError::UntrackedParameter(name.clone()));
            }
            if params.get(name)?.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    expected: format!("{:?}", params.get(name)?.shape()),
                    got: format!("{:?}", g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let p = params.get_mut(name)?;
            for ((pi, mi), (vi, gi)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }

    /// Flatten step counter and moments into named tensors for checkpoints.
    /// Names carry the `opt.` prefix so they never collide with parameters.
    pub fn to_records(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("opt.step".to_string(), Tensor::scalar(self.step as f64));
        for (name, t) in &self.m {
            out.insert(format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("opt.v.{name}"), t.clone());
        }
        out
    }

    /// Rebuild optimizer state from checkpoint records, zeros for anything
    /// missing.
    pub fn from_records(
        params: &Params,
        cfg: AdamConfig,
        records: &BTreeMap<String, Tensor>,
    ) -> Self {
        let mut st = OptimizerState::new(params, cfg);
        if let Some(s) = records.get("opt.step") {
            st.step = s.data()[0] as u64;
        }
        for (name, slot) in st.m.iter_mut() {
            if let Some(t) = records.get(&format!("opt.m.{name}")) {
                if t.shape() == slot.shape() {
                    *slot = t.clone();
                }
            }
        }
        for (name, slot) in st.v.iter_mut() {
            if let Some(t) = records.get(&format!("opt.v.{name}")) {
                if t.shape() == slot.shape() {
                    *slot = t.clone();
                }
            }
        }
        st
    }
}
