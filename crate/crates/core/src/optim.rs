//! Adam with explicit, checkpointable moment state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// One optimizer per network. A parameter without a gradient is treated as
/// having a zero gradient, so its moments still decay.
pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let vars = params.vars().to_vec();
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, vars, m, v, t: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.zeros_like()?,
            };
            self.m[i] = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            self.v[i] = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            if lr == 0.0 {
                continue;
            }
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let delta = ((m_hat / (v_hat.sqrt()? + eps)?)? * lr)?;
            var.set(&(var.as_tensor() - delta)?)?;
        }
        Ok(())
    }

    /// `(step count, first moments, second moments)` in parameter order.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} / {} moments for {} parameters",
                m.len(),
                v.len(),
                self.vars.len()
            )));
        }
        for ((var, a), b) in self.vars.iter().zip(&m).zip(&v) {
            if a.dims() != var.dims() || b.dims() != var.dims() {
                return Err(Error::shape(a.dims(), var.dims()));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use candle_core::DType;

    fn setup(lr: f64) -> (ParamSet, Adam) {
        let mut b = ParamBuilder::new(4, DType::F64);
        b.conv("c", 2, 2, 3, 1, 1, Init::He { gain: 1.0 }).unwrap();
        let p = b.finish();
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let opt = Adam::new(&p, cfg).unwrap();
        (p, opt)
    }

    fn loss(p: &ParamSet) -> Tensor {
        let w = p.vars()[0].as_tensor();
        (w.sqr().unwrap().sum_all().unwrap() + p.vars()[1].as_tensor().affine(1.0, -0.5).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (p, mut opt) = setup(0.01);
        let before = p.flat_values().unwrap();
        let grads = loss(&p).backward().unwrap();
        opt.step(&grads).unwrap();
        let after = p.flat_values().unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        for (a, b) in before.iter().zip(&after) {
            let g: f64 = if a.abs() > 0.0 { 2.0 * a } else { -1.0 };
            let expect = a - 0.01 * g / (g.abs() + 1e-8);
            assert!((b - expect).abs() < 1e-12, "{a} -> {b}, expected {expect}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (p, mut opt) = setup(0.0);
        let before = p.fingerprint().unwrap();
        for _ in 0..3 {
            let grads = loss(&p).backward().unwrap();
            opt.step(&grads).unwrap();
        }
        assert_eq!(p.fingerprint().unwrap(), before);
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let (p, mut opt) = setup(0.05);
        for _ in 0..400 {
            let grads = loss(&p).backward().unwrap();
            opt.step(&grads).unwrap();
        }
        let l: f64 = loss(&p).to_scalar().unwrap();
        assert!(l < 1e-3, "loss {l}");
    }

    #[test]
    fn missing_gradient_counts_as_zero() {
        let (p, mut opt) = setup(0.01);
        let before = p.fingerprint().unwrap();
        let unrelated = Var::new(1.0f64, &candle_core::Device::Cpu).unwrap();
        let grads = unrelated.as_tensor().sqr().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        assert_eq!(p.fingerprint().unwrap(), before);
    }

    #[test]
    fn restore_rejects_wrong_layout() {
        let (_, mut opt) = setup(0.01);
        assert!(opt.restore(1, vec![], vec![]).is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
    }
}
