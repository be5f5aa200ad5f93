use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::norm::{NormCache, NormLayer};
use crate::numcore::{Matrix, ParamTensor};

/// Two-layer MLP over feature vectors: linear, optional normalization,
/// rectifier, linear.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub w1: ParamTensor,
    pub b1: Option<ParamTensor>,
    pub norm: Option<NormLayer>,
    pub w2: ParamTensor,
    pub b2: Option<ParamTensor>,
}

/// Activation record from one forward pass, sufficient for an exact backward.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    x: Matrix,
    norm_cache: Option<NormCache>,
    /// Input to the rectifier (post-norm).
    pre_act: Matrix,
    /// Input to the second linear layer (post-rectifier).
    hidden: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_emb: usize,
    pub use_bias: bool,
    pub use_norm: bool,
}

impl BackboneConfig {
    pub fn new(d_in: usize) -> Self {
        BackboneConfig {
            d_in,
            d_hidden: 64,
            d_emb: 64,
            use_bias: true,
            use_norm: true,
        }
    }
}

fn init_weight(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let std = (2.0 / rows as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        Backbone {
            w1: ParamTensor::new(init_weight(cfg.d_in, cfg.d_hidden, rng)),
            b1: cfg
                .use_bias
                .then(|| ParamTensor::new(Matrix::zeros(1, cfg.d_hidden))),
            norm: cfg.use_norm.then(|| NormLayer::new(cfg.d_hidden)),
            w2: ParamTensor::new(init_weight(cfg.d_hidden, cfg.d_emb, rng)),
            b2: cfg
                .use_bias
                .then(|| ParamTensor::new(Matrix::zeros(1, cfg.d_emb))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.w2.value.cols()
    }

    pub fn forward(&mut self, x: &Matrix, train: bool) -> Result<(Matrix, ForwardTape)> {
        if x.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "backbone forward",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.d_in(),
                right_cols: self.w1.value.cols(),
            });
        }
        let mut z1 = x.matmul(&self.w1.value)?;
        if let Some(b1) = &self.b1 {
            for i in 0..z1.rows() {
                let row = z1.row_mut(i);
                for (v, b) in row.iter_mut().zip(b1.value.row(0)) {
                    *v += b;
                }
            }
        }
        let (pre_act, norm_cache) = match &mut self.norm {
            Some(norm) => {
                let (y, cache) = norm.forward(&z1, train)?;
                (y, Some(cache))
            }
            None => (z1, None),
        };
        let hidden = pre_act.map(|v| v.max(0.0));
        let mut emb = hidden.matmul(&self.w2.value)?;
        if let Some(b2) = &self.b2 {
            for i in 0..emb.rows() {
                let row = emb.row_mut(i);
                for (v, b) in row.iter_mut().zip(b2.value.row(0)) {
                    *v += b;
                }
            }
        }
        Ok((
            emb,
            ForwardTape {
                x: x.clone(),
                norm_cache,
                pre_act,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, tape: &ForwardTape, d_emb: &Matrix) -> Result<Matrix> {
        self.w2
            .grad
            .add_scaled(&tape.hidden.transpose_matmul(d_emb)?, 1.0)?;
        if let Some(b2) = &mut self.b2 {
            b2.grad.add_scaled(&d_emb.col_sum(), 1.0)?;
        }
        let d_hidden = d_emb.matmul_transpose_b(&self.w2.value)?;
        let d_pre_act = Matrix::from_fn(d_hidden.rows(), d_hidden.cols(), |i, j| {
            if tape.pre_act.get(i, j) > 0.0 {
                d_hidden.get(i, j)
            } else {
                0.0
            }
        });
        let d_z1 = match (&mut self.norm, &tape.norm_cache) {
            (Some(norm), Some(cache)) => norm.backward(cache, &d_pre_act)?,
            (None, None) => d_pre_act,
            _ => unreachable!("tape and norm layer out of sync"),
        };
        self.w1
            .grad
            .add_scaled(&tape.x.transpose_matmul(&d_z1)?, 1.0)?;
        if let Some(b1) = &mut self.b1 {
            b1.grad.add_scaled(&d_z1.col_sum(), 1.0)?;
        }
        d_z1.matmul_transpose_b(&self.w1.value)
    }

    /// Learnable tensors by name, in a fixed order.
    pub fn named_values(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = vec![("w1", &self.w1.value)];
        if let Some(b1) = &self.b1 {
            out.push(("b1", &b1.value));
        }
        if let Some(norm) = &self.norm {
            out.push(("gamma", &norm.gamma.value));
            out.push(("beta", &norm.beta.value));
        }
        out.push(("w2", &self.w2.value));
        if let Some(b2) = &self.b2 {
            out.push(("b2", &b2.value));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = vec![&mut self.w1];
        if let Some(b1) = &mut self.b1 {
            out.push(b1);
        }
        if let Some(norm) = &mut self.norm {
            out.push(&mut norm.gamma);
            out.push(&mut norm.beta);
        }
        out.push(&mut self.w2);
        if let Some(b2) = &mut self.b2 {
            out.push(b2);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn freeze_norm(&mut self) {
        if let Some(norm) = &mut self.norm {
            norm.freeze();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_rel_err, GRADCHECK_H, GRADCHECK_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_bias_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            d_in: 4,
            d_hidden: 4,
            d_emb: 4,
            use_bias: false,
            use_norm: false,
        };
        let mut bb = Backbone::new(&cfg, &mut rng);
        let x = Matrix::zeros(2, 4);
        let (emb, _) = bb.forward(&x, false).unwrap();
        assert!(emb.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bb = Backbone::new(&BackboneConfig::new(4), &mut rng);
        assert!(bb.forward(&Matrix::zeros(2, 5), false).is_err());
    }

    /// Full-stack gradient check: loss = sum of squared embeddings,
    /// differentiated w.r.t. w1 on a 4-sample batch.
    #[test]
    fn backward_matches_finite_differences() {
        for use_norm in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let cfg = BackboneConfig {
                d_in: 3,
                d_hidden: 5,
                d_emb: 4,
                use_bias: true,
                use_norm,
            };
            let bb = Backbone::new(&cfg, &mut rng);
            let x = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0f64));

            let loss_of = |bb: &Backbone, w1: &Matrix| {
                let mut probe = bb.clone();
                probe.w1.value = w1.clone();
                let (emb, _) = probe.forward(&x, true).unwrap();
                0.5 * emb.frobenius_sq()
            };

            let mut work = bb.clone();
            let (emb, tape) = work.forward(&x, true).unwrap();
            work.zero_grad();
            work.backward(&tape, &emb).unwrap();

            let numeric = finite_diff_grad(|w| loss_of(&bb, w), &bb.w1.value, GRADCHECK_H).unwrap();
            let err = max_rel_err(&work.w1.grad, &numeric);
            assert!(err < GRADCHECK_TOL, "use_norm={use_norm}: rel err {err}");
        }
    }
}
