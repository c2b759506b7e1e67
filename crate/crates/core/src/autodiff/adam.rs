use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<F = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let m: Vec<Vec<F>> = params
            .iter()
            .map(|(_, p)| vec![F::zero(); p.value.numel()])
            .collect();
        Adam {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then clears the gradients.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        assert_eq!(self.m.len(), params.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_m_b1, one_m_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(eps);

        for ((id, m), v) in params.ids().collect::<Vec<_>>().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let p = params.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                data[i] = data[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
