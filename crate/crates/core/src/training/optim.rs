use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First-order optimizer over flat parameter slices.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, slice_lens: &[usize]) -> Self {
        let zeros = || slice_lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn apply<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} slices, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (s, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[s].len() {
                return Err(Error::InvalidArgument(format!("slice {s} length changed")));
            }
            for (e, (w, &gv)) in p.iter_mut().zip(g).enumerate() {
                let g = gv.as_f64();
                let update = match self.kind {
                    OptimizerKind::Sgd => self.lr * g,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[s][e];
                        let v = &mut self.v[s][e];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps)
                    }
                };
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &[2]);
        let mut w = vec![1.0f64, -1.0];
        opt.apply(&mut [&mut w[..]], &[vec![3.0, -0.5]]).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_and_zero_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &[1]);
        let mut w = vec![1.0f32];
        opt.apply(&mut [&mut w[..]], &[vec![2.0]]).unwrap();
        assert_eq!(w, vec![0.0]);
        let mut frozen = Optimizer::new(OptimizerKind::Adam, 0.0, &[1]);
        frozen.apply(&mut [&mut w[..]], &[vec![2.0]]).unwrap();
        assert_eq!(w, vec![0.0]);
        assert!(frozen.apply(&mut [&mut w[..]], &[]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, &[1]);
        let mut w = vec![3.0f64];
        for _ in 0..500 {
            let g = vec![2.0 * w[0]];
            opt.apply(&mut [&mut w[..]], &[g]).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "{}", w[0]);
    }
}
