use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::backbone::{Backbone, BackboneConfig, ForwardTape};
use crate::model::head::{ClassifierHead, HeadCache, HeadMode};
use crate::numcore::Matrix;

/// Frozen deep copy of the backbone's learnable tensors, taken at a phase
/// boundary and never updated by the optimizer afterwards.
#[derive(Debug, Clone)]
pub struct BackboneSnapshot {
    pub tensors: Vec<(&'static str, Matrix)>,
}

/// The whole model: backbone, base classifier head, and zero or more novel
/// head blocks (one per incremental task; exactly one in the generalized
/// setting).
#[derive(Debug, Clone)]
pub struct ModelState {
    pub backbone: Backbone,
    pub base_head: ClassifierHead,
    pub novel_heads: Vec<ClassifierHead>,
    pub snapshot_prev: Option<BackboneSnapshot>,
}

impl ModelState {
    pub fn new(
        backbone_cfg: &BackboneConfig,
        head_mode: HeadMode,
        num_base_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let backbone = Backbone::new(backbone_cfg, rng);
        let base_head = ClassifierHead::new(head_mode, num_base_classes, backbone_cfg.d_emb, rng);
        ModelState {
            backbone,
            base_head,
            novel_heads: Vec::new(),
            snapshot_prev: None,
        }
    }

    pub fn num_base_classes(&self) -> usize {
        self.base_head.num_classes()
    }

    pub fn num_novel_classes(&self) -> usize {
        self.novel_heads.iter().map(|h| h.num_classes()).sum()
    }

    pub fn num_joint_classes(&self) -> usize {
        self.num_base_classes() + self.num_novel_classes()
    }

    /// Adds a novel head block for a new task.
    pub fn add_novel_head(&mut self, num_classes: usize, rng: &mut impl Rng) {
        let head =
            ClassifierHead::new(self.base_head.mode, num_classes, self.backbone.d_emb(), rng);
        self.novel_heads.push(head);
    }

    pub fn forward_features(&mut self, x: &Matrix, train: bool) -> Result<(Matrix, ForwardTape)> {
        self.backbone.forward(x, train)
    }

    /// Logits over the joint space: base columns first, then each novel
    /// block in task order.
    pub fn joint_logits(&self, emb: &Matrix) -> Result<Matrix> {
        if self.novel_heads.is_empty() {
            return Err(Error::NovelHeadAbsent);
        }
        let (mut logits, _) = self.base_head.forward(emb)?;
        for head in &self.novel_heads {
            let (block, _) = head.forward(emb)?;
            logits = logits.hcat(&block)?;
        }
        Ok(logits)
    }

    pub fn novel_logits(&self, emb: &Matrix) -> Result<(Matrix, Vec<HeadCache>)> {
        if self.novel_heads.is_empty() {
            return Err(Error::NovelHeadAbsent);
        }
        let mut caches = Vec::new();
        let mut logits: Option<Matrix> = None;
        for head in &self.novel_heads {
            let (block, cache) = head.forward(emb)?;
            caches.push(cache);
            logits = Some(match logits {
                Some(l) => l.hcat(&block)?,
                None => block,
            });
        }
        Ok((logits.unwrap(), caches))
    }

    /// Stores a deep copy of the current backbone parameters as the
    /// previous-phase reference.
    pub fn snapshot(&mut self) {
        let tensors = self
            .backbone
            .named_values()
            .into_iter()
            .map(|(name, m)| (name, m.clone()))
            .collect();
        self.snapshot_prev = Some(BackboneSnapshot { tensors });
    }

    pub fn snapshot_ref(&self) -> Result<&BackboneSnapshot> {
        self.snapshot_prev.as_ref().ok_or(Error::SnapshotAbsent)
    }

    /// Squared L2 displacement of the current backbone from the snapshot.
    pub fn backbone_displacement_sq(&self) -> Result<f64> {
        let snap = self.snapshot_ref()?;
        let mut total = 0.0;
        for ((_, cur), (_, prev)) in self.backbone.named_values().iter().zip(&snap.tensors) {
            total += cur.sub(prev)?.frobenius_sq();
        }
        Ok(total)
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.base_head.zero_grad();
        for h in &mut self.novel_heads {
            h.zero_grad();
        }
    }
}

fn hash_matrix(h: &mut DefaultHasher, m: &Matrix) {
    m.rows().hash(h);
    m.cols().hash(h);
    for v in m.as_slice() {
        v.to_bits().hash(h);
    }
}

/// Bitwise fingerprint of a set of matrices, used by freeze checks.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> u64 {
    let mut h = DefaultHasher::new();
    for m in tensors {
        hash_matrix(&mut h, m);
    }
    h.finish()
}

impl ModelState {
    pub fn base_head_fingerprint(&self) -> u64 {
        let mut tensors = vec![&self.base_head.weights.value];
        if let Some(b) = &self.base_head.bias {
            tensors.push(&b.value);
        }
        fingerprint(tensors)
    }

    pub fn norm_fingerprint(&self) -> u64 {
        match &self.backbone.norm {
            Some(norm) => fingerprint([
                &norm.gamma.value,
                &norm.beta.value,
                &norm.running_mean,
                &norm.running_var,
            ]),
            None => 0,
        }
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        fingerprint(self.backbone.named_values().into_iter().map(|(_, m)| m))
    }

    pub fn full_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.backbone_fingerprint().hash(&mut h);
        self.norm_fingerprint().hash(&mut h);
        self.base_head_fingerprint().hash(&mut h);
        for head in &self.novel_heads {
            hash_matrix(&mut h, &head.weights.value);
        }
        h.finish()
    }

    pub fn snapshot_fingerprint(&self) -> u64 {
        match &self.snapshot_prev {
            Some(s) => fingerprint(s.tensors.iter().map(|(_, m)| m)),
            None => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(rng: &mut ChaCha8Rng) -> ModelState {
        let cfg = BackboneConfig {
            d_in: 4,
            d_hidden: 6,
            d_emb: 5,
            use_bias: true,
            use_norm: true,
        };
        ModelState::new(&cfg, HeadMode::NoBias, 3, rng)
    }

    #[test]
    fn joint_logits_require_novel_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = small_model(&mut rng);
        let emb = Matrix::zeros(1, 5);
        assert!(matches!(
            model.joint_logits(&emb),
            Err(Error::NovelHeadAbsent)
        ));
    }

    #[test]
    fn joint_argmax_crosses_into_novel_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = small_model(&mut rng);
        model.add_novel_head(1, &mut rng);
        // base logits [2, 1, 0], novel logit [3] -> joint argmax = first novel slot
        model.base_head.weights.value = Matrix::from_vec(
            3,
            5,
            vec![
                2.0, 0.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        model.novel_heads[0].weights.value =
            Matrix::from_vec(1, 5, vec![3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let emb = Matrix::from_vec(1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let logits = model.joint_logits(&emb).unwrap();
        assert_eq!(logits.argmax_rows(), vec![3]);
    }

    #[test]
    fn joint_logits_match_independent_head_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = small_model(&mut rng);
        model.add_novel_head(2, &mut rng);
        let emb = Matrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64).sin());
        let joint = model.joint_logits(&emb).unwrap();
        let (base, _) = model.base_head.forward(&emb).unwrap();
        let (novel, _) = model.novel_heads[0].forward(&emb).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert_eq!(joint.get(i, c), base.get(i, c));
            }
            for c in 0..2 {
                assert_eq!(joint.get(i, 3 + c), novel.get(i, c));
            }
        }
    }

    #[test]
    fn snapshot_zero_displacement_then_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = small_model(&mut rng);
        model.snapshot();
        assert_eq!(model.backbone_displacement_sq().unwrap(), 0.0);
        let v = model.backbone.w1.value.get(0, 0);
        model.backbone.w1.value.set(0, 0, v + 0.5);
        assert!((model.backbone_displacement_sq().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn snapshot_is_stable_under_optimizer_steps() {
        use crate::numcore::{sgd_step, OptimConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = small_model(&mut rng);
        model.snapshot();
        let before = model.snapshot_fingerprint();
        let cfg = OptimConfig::new(0.05);
        for _ in 0..100 {
            for p in model.backbone.params_mut() {
                for g in p.grad.as_mut_slice() {
                    *g = 0.01;
                }
            }
            sgd_step(&mut model.backbone.params_mut(), &cfg);
        }
        assert_eq!(model.snapshot_fingerprint(), before);
        assert!(model.backbone_displacement_sq().unwrap() > 0.0);
    }
}
