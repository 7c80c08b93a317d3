//! Adam with bias correction. State is keyed by parameter name, so the same
//! optimizer instance can follow parameters across the leaf-replacement
//! updates (each step installs fresh leaf tensors, which also clears grads).

use std::collections::HashMap;

use nzip_tensor::Tensor;

use crate::error::{NzipError, Result};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter the visitor yields. A parameter
    /// with no gradient this step contributes g = 0 (its moments still decay).
    pub fn step(
        &mut self,
        visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut err: Option<NzipError> = None;

        visit(&mut |name, param| {
            if err.is_some() {
                return;
            }
            let n = param.numel();
            let m = ms.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = vs.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                err = Some(NzipError::Contract(format!(
                    "optimizer state for {name} has {} elements, parameter has {n}",
                    m.len()
                )));
                return;
            }
            let grad = param.grad();
            let mut data = param.data().to_vec();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            *param = Tensor::leaf(data, param.shape()).unwrap();
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
