//! Adam with per-parameter learning rates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let first_moment: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    /// One bias-corrected update. `params`, `grads` and `lrs` are aligned with
    /// the order the state was created in. A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lrs: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n || lrs.len() != n {
            return Err(Error::Shape(format!(
                "adam state tracks {n} tensors, got {} params / {} grads / {} rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.first_moment[i].shape() {
                return Err(Error::Shape(format!(
                    "adam slot {i}: parameter {:?} vs state {:?}",
                    p.shape(),
                    self.first_moment[i].shape()
                )));
            }
            if let Some(g) = grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("adam slot {i}: gradient shape mismatch")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let g = grads[i].map(Tensor::data);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
