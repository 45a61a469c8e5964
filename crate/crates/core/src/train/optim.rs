//! Adam over a [`ParamStore`](crate::nn::ParamStore).

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::OptimConfig;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Var)>,
    pub(crate) state: BTreeMap<String, AdamState>,
    pub(crate) step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: &OptimConfig) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, var) in &params {
            let z = var.as_tensor().zeros_like()?;
            state.insert(
                name.clone(),
                AdamState {
                    m: z.clone(),
                    v: z,
                },
            );
        }
        Ok(Self {
            params,
            state,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`; parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.detach();
            if self.weight_decay > 0.0 {
                g = (g + var.as_tensor().detach().affine(self.weight_decay, 0.0)?)?;
            }
            let st = self.state.get_mut(name).expect("state for every parameter");
            let m = ((&st.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            st.m = m;
            st.v = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() -> Result<()> {
        let var = Var::from_vec(vec![1.0f64, -2.0, 0.5], 3, &Device::Cpu)?;
        let mut adam = Adam::new(vec![("w".into(), var.clone())], &OptimConfig::default())?;
        let loss = (var.as_tensor() * Tensor::new(&[3.0f64, -1.0, 0.0], &Device::Cpu)?)?.sum_all()?;
        adam.step(&loss.backward()?, 0.1)?;
        let v = var.as_tensor().to_vec1::<f64>()?;
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(v[2], 0.5);
        Ok(())
    }

    #[test]
    fn minimizes_a_quadratic() -> Result<()> {
        let var = Var::zeros(2, DType::F64, &Device::Cpu)?;
        let target = Tensor::new(&[3.0f64, -1.0], &Device::Cpu)?;
        let mut adam = Adam::new(vec![("w".into(), var.clone())], &OptimConfig::default())?;
        for _ in 0..2000 {
            let loss = (var.as_tensor() - &target)?.sqr()?.sum_all()?;
            adam.step(&loss.backward()?, 0.05)?;
        }
        let v = var.as_tensor().to_vec1::<f64>()?;
        assert!((v[0] - 3.0).abs() < 1e-3 && (v[1] + 1.0).abs() < 1e-3, "{v:?}");
        Ok(())
    }
}
