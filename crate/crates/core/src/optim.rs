//! Gradient descent steps over flat parameter lists.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

struct Moments {
    m: Matrix,
    v: Matrix,
}

/// SGD or Adam over a fixed list of parameter matrices. The list order and
/// shapes must stay the same across steps; Adam keys its moment buffers by
/// position.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.moments.is_empty() && self.kind == OptimizerKind::Adam {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Matrix::zeros(p.rows(), p.cols()),
                    v: Matrix::zeros(p.rows(), p.cols()),
                })
                .collect();
        }
        if self.kind == OptimizerKind::Adam && self.moments.len() != params.len() {
            return Err(Error::shape(
                "optimizer step",
                format!(
                    "parameter count changed: {} slots vs {} params",
                    self.moments.len(),
                    params.len()
                ),
            ));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    for k in 0..p.len() {
                        let grad = g.data()[k];
                        let m = self.beta1 * slot.m.data()[k] + (1.0 - self.beta1) * grad;
                        let v = self.beta2 * slot.v.data()[k] + (1.0 - self.beta2) * grad * grad;
                        slot.m.data_mut()[k] = m;
                        slot.v.data_mut()[k] = v;
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        p.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let g = Matrix::row_vector(&[0.5, 0.5]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[0.95, -2.05]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With any nonzero constant gradient the first Adam update is
        // lr * g / (|g| + eps * sqrt(1 - beta2)) which is lr to within eps.
        let mut p = Matrix::row_vector(&[0.0]);
        let g = Matrix::row_vector(&[3.7]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.002);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] + 0.002).abs() < 1e-9);

        let mut p2 = Matrix::row_vector(&[0.0]);
        let g2 = Matrix::row_vector(&[-1e-4]);
        let mut opt2 = Optimizer::new(OptimizerKind::Adam, 0.002);
        opt2.step(&mut [&mut p2], &[&g2]).unwrap();
        assert!((p2.data()[0] - 0.002).abs() < 1e-6);
    }

    #[test]
    fn adam_moments_follow_definition() {
        // Two steps with gradients g1, g2 checked against the closed form.
        let (g1, g2) = (0.3, -0.4);
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p = Matrix::row_vector(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
        opt.step(&mut [&mut p], &[&Matrix::row_vector(&[g1])]).unwrap();
        opt.step(&mut [&mut p], &[&Matrix::row_vector(&[g2])]).unwrap();

        let mut expected = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1f64(b1, t));
            let v_hat = v / (1.0 - b1f64(b2, t));
            expected -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p.data()[0] - expected).abs() < 1e-15);

        fn b1f64(b: f64, t: i32) -> f64 {
            b.powi(t)
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let g = Matrix::zeros(2, 2);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 0.1);
            opt.step(&mut [&mut p], &[&g]).unwrap();
            opt.step(&mut [&mut p], &[&g]).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn step_rejects_mismatched_shapes() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
        let g2 = Matrix::zeros(2, 2);
        assert!(opt.step(&mut [&mut p], &[&g2, &g2]).is_err());
    }
}
