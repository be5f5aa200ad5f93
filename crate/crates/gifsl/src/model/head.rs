use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{dot, Matrix, ParamTensor};

/// Classifier head variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    NoBias,
    Bias,
    Cosine,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_bias" => Ok(HeadMode::NoBias),
            "bias" => Ok(HeadMode::Bias),
            "cosine" => Ok(HeadMode::Cosine),
            other => Err(Error::Config(format!("unknown head mode {other:?}"))),
        }
    }
}

/// Linear classification layer over embeddings. Default mode is a linear
/// layer without bias; cosine mode emits temperature-scaled cosine
/// similarities between the embedding and each weight row.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub mode: HeadMode,
    /// num_classes x d_emb.
    pub weights: ParamTensor,
    pub bias: Option<ParamTensor>,
    pub temperature: f64,
}

/// Per-sample norms needed for the cosine backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    emb: Matrix,
    emb_norms: Vec<f64>,
    weight_norms: Vec<f64>,
}

pub const DEFAULT_COSINE_TEMPERATURE: f64 = 10.0;

impl ClassifierHead {
    pub fn new(mode: HeadMode, num_classes: usize, d_emb: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_emb as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        ClassifierHead {
            mode,
            weights: ParamTensor::new(Matrix::from_fn(num_classes, d_emb, |_, _| {
                normal.sample(rng)
            })),
            bias: (mode == HeadMode::Bias).then(|| ParamTensor::new(Matrix::zeros(1, num_classes))),
            temperature: DEFAULT_COSINE_TEMPERATURE,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.value.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.weights.value.cols()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weights.trainable = trainable;
        if let Some(b) = &mut self.bias {
            b.trainable = trainable;
        }
    }

    pub fn forward(&self, emb: &Matrix) -> Result<(Matrix, HeadCache)> {
        if emb.cols() != self.d_emb() {
            return Err(Error::ShapeMismatch {
                op: "head_logits",
                left_rows: emb.rows(),
                left_cols: emb.cols(),
                right_rows: self.num_classes(),
                right_cols: self.d_emb(),
            });
        }
        let mut cache = HeadCache {
            emb: emb.clone(),
            emb_norms: Vec::new(),
            weight_norms: Vec::new(),
        };
        let logits = match self.mode {
            HeadMode::NoBias | HeadMode::Bias => {
                let mut logits = emb.matmul_transpose_b(&self.weights.value)?;
                if let Some(b) = &self.bias {
                    for i in 0..logits.rows() {
                        for (v, bv) in logits.row_mut(i).iter_mut().zip(b.value.row(0)) {
                            *v += bv;
                        }
                    }
                }
                logits
            }
            HeadMode::Cosine => {
                cache.emb_norms = (0..emb.rows())
                    .map(|i| dot(emb.row(i), emb.row(i)).sqrt())
                    .collect();
                if cache.emb_norms.contains(&0.0) {
                    return Err(Error::InvalidArgument(
                        "zero-norm embedding in cosine head".into(),
                    ));
                }
                cache.weight_norms = (0..self.num_classes())
                    .map(|c| {
                        dot(self.weights.value.row(c), self.weights.value.row(c))
                            .sqrt()
                            .max(1e-12)
                    })
                    .collect();
                Matrix::from_fn(emb.rows(), self.num_classes(), |i, c| {
                    self.temperature * dot(emb.row(i), self.weights.value.row(c))
                        / (cache.emb_norms[i] * cache.weight_norms[c])
                })
            }
        };
        Ok((logits, cache))
    }

    /// Accumulates weight/bias gradients and returns the embedding gradient.
    pub fn backward(&mut self, cache: &HeadCache, d_logits: &Matrix) -> Result<Matrix> {
        match self.mode {
            HeadMode::NoBias | HeadMode::Bias => {
                self.weights
                    .grad
                    .add_scaled(&d_logits.transpose_matmul(&cache.emb)?, 1.0)?;
                if let Some(b) = &mut self.bias {
                    b.grad.add_scaled(&d_logits.col_sum(), 1.0)?;
                }
                d_logits.matmul(&self.weights.value)
            }
            HeadMode::Cosine => {
                let n = cache.emb.rows();
                let d = self.d_emb();
                let mut d_emb = Matrix::zeros(n, d);
                for i in 0..n {
                    let e = cache.emb.row(i);
                    let en = cache.emb_norms[i];
                    for c in 0..self.num_classes() {
                        let g = d_logits.get(i, c);
                        if g == 0.0 {
                            continue;
                        }
                        let w = self.weights.value.row(c);
                        let wn = cache.weight_norms[c];
                        let cos = dot(e, w) / (en * wn);
                        let scale = self.temperature * g;
                        for j in 0..d {
                            let u = e[j] / en;
                            let v = w[j] / wn;
                            d_emb.set(i, j, d_emb.get(i, j) + scale / en * (v - cos * u));
                            self.weights.grad.set(
                                c,
                                j,
                                self.weights.grad.get(c, j) + scale / wn * (u - cos * v),
                            );
                        }
                    }
                }
                Ok(d_emb)
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![&mut self.weights];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
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
    fn identity_rows_pass_through_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = ClassifierHead::new(HeadMode::NoBias, 3, 3, &mut rng);
        head.weights.value = Matrix::identity(3);
        let emb = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 2.0, 0.0]).unwrap();
        let (logits, _) = head.forward(&emb).unwrap();
        assert_eq!(logits, emb);
    }

    #[test]
    fn cosine_parallel_embedding_hits_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = ClassifierHead::new(HeadMode::Cosine, 2, 3, &mut rng);
        head.weights.value = Matrix::from_vec(2, 3, vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let emb = Matrix::from_vec(1, 3, vec![5.0, 0.0, 0.0]).unwrap();
        let (logits, _) = head.forward(&emb).unwrap();
        assert!((logits.get(0, 0) - head.temperature).abs() < 1e-12);
        assert!(logits.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ClassifierHead::new(HeadMode::Cosine, 2, 3, &mut rng);
        assert!(head.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn logits_match_per_class_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ClassifierHead::new(HeadMode::Bias, 4, 6, &mut rng);
        let emb = Matrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0f64));
        let (logits, _) = head.forward(&emb).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mut s = 0.0;
                for j in 0..6 {
                    s += emb.get(i, j) * head.weights.value.get(c, j);
                }
                s += head.bias.as_ref().unwrap().value.get(0, c);
                assert!((logits.get(i, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for mode in [HeadMode::NoBias, HeadMode::Bias, HeadMode::Cosine] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let head = ClassifierHead::new(mode, 4, 5, &mut rng);
            let emb = Matrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0f64));
            // scalar probe: weighted sum of logits with fixed coefficients
            let coeffs = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0f64));
            let loss_w = |w: &Matrix| {
                let mut probe = head.clone();
                probe.weights.value = w.clone();
                let (logits, _) = probe.forward(&emb).unwrap();
                logits.hadamard(&coeffs).unwrap().as_slice().iter().sum()
            };
            let loss_e = |e: &Matrix| {
                let (logits, _) = head.forward(e).unwrap();
                logits.hadamard(&coeffs).unwrap().as_slice().iter().sum()
            };
            let mut work = head.clone();
            let (_, cache) = work.forward(&emb).unwrap();
            work.zero_grad();
            let d_emb = work.backward(&cache, &coeffs).unwrap();

            let num_w = finite_diff_grad(loss_w, &head.weights.value, GRADCHECK_H).unwrap();
            let num_e = finite_diff_grad(loss_e, &emb, GRADCHECK_H).unwrap();
            assert!(
                max_rel_err(&work.weights.grad, &num_w) < GRADCHECK_TOL,
                "{mode:?} weights"
            );
            assert!(max_rel_err(&d_emb, &num_e) < GRADCHECK_TOL, "{mode:?} emb");
        }
    }

    #[test]
    fn no_bias_argmax_invariant_under_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ClassifierHead::new(HeadMode::NoBias, 5, 4, &mut rng);
        let emb = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0f64));
        let (l1, _) = head.forward(&emb).unwrap();
        let (l2, _) = head.forward(&emb.scale(3.7)).unwrap();
        assert_eq!(l1.argmax_rows(), l2.argmax_rows());
    }
}
