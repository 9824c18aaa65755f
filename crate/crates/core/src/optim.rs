//! Plain SGD and bias-corrected Adam over [`ModelParams`].

use crate::error::{Error, Result};
use crate::nn::{GradientSet, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const DEFAULT_LR: f64 = 0.001;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd { lr: f64 },
    Adam { lr: f64, state: Box<AdamState> },
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    /// Adam with beta = (0.9, 0.999) and eps = 1e-8; moments start at zero.
    pub fn adam(lr: f64, like: &ModelParams) -> Self {
        Self::Adam {
            lr,
            state: Box::new(AdamState {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: like.zeros_like(),
                v: like.zeros_like(),
            }),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, like: &ModelParams) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, like),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd { .. } => OptimizerKind::Sgd,
            Self::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Updates `params` in place.
    pub fn step(&mut self, params: &mut ModelParams, grad: &GradientSet) -> Result<()> {
        if !params.same_shape(grad) {
            return Err(Error::Shape("gradient does not match model shape".into()));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient passed to the optimizer".into()));
        }
        match self {
            Self::Sgd { lr } => sgd_step(params, grad, *lr),
            Self::Adam { lr, state } => adam_step(params, grad, *lr, state),
        }
        Ok(())
    }
}

fn sgd_step(params: &mut ModelParams, grad: &GradientSet, lr: f64) {
    for (p, g) in params.values_mut().zip(grad.values()) {
        *p -= lr * g;
    }
}

fn adam_step(params: &mut ModelParams, grad: &GradientSet, lr: f64, s: &mut AdamState) {
    s.t += 1;
    let c1 = 1.0 - s.beta1.powi(s.t as i32);
    let c2 = 1.0 - s.beta2.powi(s.t as i32);
    let (b1, b2, eps) = (s.beta1, s.beta2, s.eps);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grad.values())
        .zip(s.m.values_mut())
        .zip(s.v.values_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(&[1, 1]);
        p.layers[0].weights.as_mut_slice()[0] = v;
        p
    }

    fn w(p: &ModelParams) -> f64 {
        p.layers[0].weights.as_slice()[0]
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar(1.0);
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(w(&p), 1.0);
        opt.step(&mut p, &scalar(2.0)).unwrap();
        assert!((w(&p) - 0.8).abs() < 1e-15);

        let mut q = scalar(1.0);
        opt.step(&mut q, &scalar(1.0)).unwrap();
        opt.step(&mut q, &scalar(1.0)).unwrap();
        assert!((w(&q) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = scalar(0.0);
        let mut opt = OptimizerState::adam(0.001, &p);
        opt.step(&mut p, &scalar(3.0)).unwrap();
        let expected = -0.001 * 3.0 / (3.0 + 1e-8);
        assert!((w(&p) - expected).abs() < 1e-18);
        assert!((w(&p) + 0.000999999997).abs() < 1e-12);
    }

    #[test]
    fn adam_sign_update_and_zero_grad() {
        for g in [-5.0, 1e-3, 42.0] {
            let mut p = scalar(1.0);
            let mut opt = OptimizerState::adam(0.01, &p);
            opt.step(&mut p, &scalar(g)).unwrap();
            assert!(((w(&p) - 1.0) + 0.01 * g.signum()).abs() < 1e-7);
        }
        let mut p = scalar(1.0);
        let mut opt = OptimizerState::adam(0.01, &p);
        opt.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(w(&p), 1.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        let mut p = scalar(1.0);
        let mut opt = OptimizerState::sgd(0.1);
        assert!(opt.step(&mut p, &scalar(f64::NAN)).is_err());
        assert!(opt.step(&mut p, &ModelParams::zeros(&[2, 1])).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.0, &p).is_err());
    }
}
