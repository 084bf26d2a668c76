use super::dense::Tensor;
use super::params::{GradSet, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradSet) -> Result<()> {
        if grads.tensors().len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} gradients for {} parameters ({} moment slots)",
                    grads.tensors().len(),
                    store.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, g) in grads.tensors().iter().enumerate() {
            let p = &store.entries()[i];
            p.value.expect_same_shape("adam_step", g)?;
        }
        self.step += 1;
        for (i, p) in store.entries_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            adam_update(
                p.value.data_mut(),
                grads.tensors()[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter slice at (1-based) step `t`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for (((p, g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
}
