use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{OptimizerKind, TrainConfig};

/// First-order optimizer over a fixed, ordered list of parameters.
pub enum Optimizer<T> {
    Sgd {
        lr: T,
    },
    Adam {
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        step: i32,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr: T::of(lr) }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer::Adam {
            lr: T::of(lr),
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(eps),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::sgd(cfg.lr),
            OptimizerKind::Adam => Self::adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Tensor<T>],
    ) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer", p.shape(), g.shape()));
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = grads.iter().map(|g| vec![T::zero(); g.numel()]).collect();
                    *v = m.clone();
                }
                *step += 1;
                let bc1 = T::one() - beta1.powi(*step);
                let bc2 = T::one() - beta2.powi(*step);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let mj = &mut m[i][j];
                        let vj = &mut v[i][j];
                        *mj = *beta1 * *mj + (T::one() - *beta1) * d;
                        *vj = *beta2 * *vj + (T::one() - *beta2) * d * d;
                        let mhat = *mj / bc1;
                        let vhat = *vj / bc2;
                        *w -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}
