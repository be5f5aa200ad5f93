use crate::error::Result;
use crate::numcore::{Matrix, ParamTensor};

/// Per-feature batch normalization with learnable scale/shift and running
/// statistics. When `frozen` is set the stored running statistics are used
/// for every forward pass and neither the statistics nor gamma/beta change.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub frozen: bool,
    pub stat_momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    /// Normalized input, needed for the gamma gradient.
    pub x_hat: Matrix,
    /// 1 x d inverse standard deviation actually used in the forward pass.
    pub inv_std: Matrix,
    /// Whether batch statistics (as opposed to running ones) were used.
    pub batch_stats: bool,
}

impl NormLayer {
    pub fn new(dim: usize) -> Self {
        NormLayer {
            gamma: ParamTensor::new(Matrix::from_fn(1, dim, |_, _| 1.0)),
            beta: ParamTensor::new(Matrix::zeros(1, dim)),
            running_mean: Matrix::zeros(1, dim),
            running_var: Matrix::from_fn(1, dim, |_, _| 1.0),
            frozen: false,
            stat_momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.gamma.trainable = false;
        self.beta.trainable = false;
    }

    /// Forward pass. `train` selects batch statistics and updates the
    /// running ones; a frozen layer always uses the stored statistics.
    pub fn forward(&mut self, x: &Matrix, train: bool) -> Result<(Matrix, NormCache)> {
        let d = self.dim();
        let n = x.rows() as f64;
        let use_batch = train && !self.frozen && x.rows() > 1;
        let (mean, var) = if use_batch {
            let mut mean = Matrix::zeros(1, d);
            let mut var = Matrix::zeros(1, d);
            for i in 0..x.rows() {
                for j in 0..d {
                    mean.set(0, j, mean.get(0, j) + x.get(i, j));
                }
            }
            for j in 0..d {
                mean.set(0, j, mean.get(0, j) / n);
            }
            for i in 0..x.rows() {
                for j in 0..d {
                    let c = x.get(i, j) - mean.get(0, j);
                    var.set(0, j, var.get(0, j) + c * c);
                }
            }
            for j in 0..d {
                var.set(0, j, var.get(0, j) / n);
            }
            let m = self.stat_momentum;
            for j in 0..d {
                self.running_mean.set(
                    0,
                    j,
                    (1.0 - m) * self.running_mean.get(0, j) + m * mean.get(0, j),
                );
                self.running_var.set(
                    0,
                    j,
                    (1.0 - m) * self.running_var.get(0, j) + m * var.get(0, j),
                );
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std = Matrix::from_fn(1, d, |_, j| 1.0 / (var.get(0, j) + self.eps).sqrt());
        let x_hat = Matrix::from_fn(x.rows(), d, |i, j| {
            (x.get(i, j) - mean.get(0, j)) * inv_std.get(0, j)
        });
        let y = Matrix::from_fn(x.rows(), d, |i, j| {
            self.gamma.value.get(0, j) * x_hat.get(i, j) + self.beta.value.get(0, j)
        });
        Ok((
            y,
            NormCache {
                x_hat,
                inv_std,
                batch_stats: use_batch,
            },
        ))
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &NormCache, d_out: &Matrix) -> Result<Matrix> {
        let d = self.dim();
        let n = d_out.rows() as f64;
        for i in 0..d_out.rows() {
            for j in 0..d {
                let g = d_out.get(i, j);
                self.gamma
                    .grad
                    .set(0, j, self.gamma.grad.get(0, j) + g * cache.x_hat.get(i, j));
                self.beta.grad.set(0, j, self.beta.grad.get(0, j) + g);
            }
        }
        let mut dx = Matrix::zeros(d_out.rows(), d);
        if cache.batch_stats {
            // Batch-statistics backward: the mean and variance depend on x.
            let mut sum_dxhat = vec![0.0; d];
            let mut sum_dxhat_xhat = vec![0.0; d];
            for i in 0..d_out.rows() {
                for j in 0..d {
                    let dxhat = d_out.get(i, j) * self.gamma.value.get(0, j);
                    sum_dxhat[j] += dxhat;
                    sum_dxhat_xhat[j] += dxhat * cache.x_hat.get(i, j);
                }
            }
            for i in 0..d_out.rows() {
                for j in 0..d {
                    let dxhat = d_out.get(i, j) * self.gamma.value.get(0, j);
                    let v = (n * dxhat - sum_dxhat[j] - cache.x_hat.get(i, j) * sum_dxhat_xhat[j])
                        * cache.inv_std.get(0, j)
                        / n;
                    dx.set(i, j, v);
                }
            }
        } else {
            for i in 0..d_out.rows() {
                for j in 0..d {
                    dx.set(
                        i,
                        j,
                        d_out.get(i, j) * self.gamma.value.get(0, j) * cache.inv_std.get(0, j),
                    );
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_default_stats_is_identity() {
        let mut norm = NormLayer::new(3);
        norm.eps = 0.0;
        norm.freeze();
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let (y, _) = norm.forward(&x, true).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn frozen_layer_keeps_stats_bitwise() {
        let mut norm = NormLayer::new(2);
        norm.freeze();
        let before = norm.running_mean.clone();
        let x = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        norm.forward(&x, true).unwrap();
        assert_eq!(norm.running_mean, before);
    }

    #[test]
    fn training_updates_running_stats() {
        let mut norm = NormLayer::new(1);
        let x = Matrix::from_vec(4, 1, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        norm.forward(&x, true).unwrap();
        // running_mean = 0.9 * 0 + 0.1 * 2
        assert!((norm.running_mean.get(0, 0) - 0.2).abs() < 1e-12);
    }
}
