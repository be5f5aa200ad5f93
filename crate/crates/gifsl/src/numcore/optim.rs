use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// A parameter with its gradient and momentum buffer.
///
/// `value`, `grad` and `momentum_buf` always share the same shape.
/// Non-trainable parameters are never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
    pub momentum_buf: Matrix,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        let momentum_buf = grad.clone();
        ParamTensor {
            value,
            grad,
            momentum_buf,
            trainable: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        let mut p = ParamTensor::new(value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        for v in self.grad.as_mut_slice() {
            *v = 0.0;
        }
    }
}

/// SGD-with-momentum settings. `clip_value` clamps each gradient element
/// to `[-clip, +clip]` before the momentum accumulation.
#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_value: Option<f64>,
}

pub const DEFAULT_CLIP: f64 = 100.0;

impl OptimConfig {
    pub fn new(learning_rate: f64) -> Self {
        OptimConfig {
            learning_rate,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_value: Some(DEFAULT_CLIP),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "weight_decay must be non-negative".into(),
            ));
        }
        if let Some(c) = self.clip_value {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::InvalidArgument("clip_value must be positive".into()));
            }
        }
        Ok(())
    }

    /// Same settings with the learning rate multiplied, used for the
    /// reduced-rate backbone parameter group.
    pub fn with_lr_scale(&self, scale: f64) -> Self {
        OptimConfig {
            learning_rate: self.learning_rate * scale,
            ..*self
        }
    }
}

/// One SGD-with-momentum update over a set of parameters.
///
/// `buf <- momentum * buf + (clip(grad) + weight_decay * value)`,
/// `value <- value - lr * buf`. Weight decay is decoupled from the loss.
pub fn sgd_step(params: &mut [&mut ParamTensor], cfg: &OptimConfig) {
    for p in params {
        if !p.trainable {
            continue;
        }
        let n = p.value.as_slice().len();
        for i in 0..n {
            let mut g = p.grad.as_slice()[i];
            if let Some(c) = cfg.clip_value {
                g = g.clamp(-c, c);
            }
            g += cfg.weight_decay * p.value.as_slice()[i];
            let buf = cfg.momentum * p.momentum_buf.as_slice()[i] + g;
            p.momentum_buf.as_mut_slice()[i] = buf;
            p.value.as_mut_slice()[i] -= cfg.learning_rate * buf;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: Vec<f64>) -> ParamTensor {
        ParamTensor::new(Matrix::from_vec(1, vals.len(), vals).unwrap())
    }

    #[test]
    fn vanilla_step_moves_by_gradient() {
        let mut p = param(vec![1.0, -2.0]);
        p.grad = Matrix::from_vec(1, 2, vec![0.5, -0.25]).unwrap();
        let cfg = OptimConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_value: None,
        };
        sgd_step(&mut [&mut p], &cfg);
        assert_eq!(p.value.as_slice(), &[0.5, -1.75]);
    }

    #[test]
    fn frozen_param_is_bitwise_unchanged() {
        let mut p = param(vec![1.25, -7.5]);
        p.trainable = false;
        p.grad = Matrix::from_vec(1, 2, vec![10.0, 10.0]).unwrap();
        let before: Vec<u64> = p.value.as_slice().iter().map(|v| v.to_bits()).collect();
        sgd_step(&mut [&mut p], &OptimConfig::new(0.1));
        let after: Vec<u64> = p.value.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn clip_caps_gradient_elements() {
        let mut p = param(vec![0.0]);
        p.grad = Matrix::from_vec(1, 1, vec![250.0]).unwrap();
        let cfg = OptimConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_value: Some(100.0),
        };
        sgd_step(&mut [&mut p], &cfg);
        assert_eq!(p.value.as_slice(), &[-100.0]);
    }

    #[test]
    fn clip_applies_before_momentum_accumulation() {
        let mut p = param(vec![0.0]);
        p.grad = Matrix::from_vec(1, 1, vec![250.0]).unwrap();
        let cfg = OptimConfig {
            learning_rate: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
            clip_value: Some(100.0),
        };
        sgd_step(&mut [&mut p], &cfg);
        // buffer holds the clipped gradient, not the raw one
        assert_eq!(p.momentum_buf.as_slice(), &[100.0]);
        p.zero_grad();
        sgd_step(&mut [&mut p], &cfg);
        assert_eq!(p.momentum_buf.as_slice(), &[50.0]);
        assert_eq!(p.value.as_slice(), &[-150.0]);
    }

    #[test]
    fn empty_list_is_noop() {
        sgd_step(&mut [], &OptimConfig::new(0.1));
    }
}
