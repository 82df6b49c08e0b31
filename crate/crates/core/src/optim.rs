//! Adam with a fixed learning rate.

use crate::error::{dim_err, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Adam {
    /// Moment buffers shaped like `params`, in the order updates will be passed.
    pub fn new<'a, I: IntoIterator<Item = &'a Mat>>(config: AdamConfig, params: I) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Mat::zeros(p.dim()), Mat::zeros(p.dim())))
            .unzip();
        Self { config, m, v, step: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` of `None` means a zero gradient for `params[i]`.
    pub fn update(&mut self, params: Vec<&mut Mat>, grads: &[Option<Mat>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(dim_err(
                "adam",
                format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.into_iter().enumerate() {
            if p.dim() != self.m[i].dim() {
                return Err(dim_err("adam", format!("slot {i} changed shape")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| c.beta1 * m);
                    v.mapv_inplace(|v| c.beta2 * v);
                }
            }
            if c.lr == 0.0 {
                continue;
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
        Ok(())
    }
}
