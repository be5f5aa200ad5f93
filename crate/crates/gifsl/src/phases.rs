//! The three training phases — base pretraining, calibrated novel-class
//! learning, balanced-replay fine-tuning — plus the scheduler variants
//! used for comparison (skipped second phase, controlled batch ratio,
//! interleaved novel/replay epochs).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::ModelState;
use crate::numcore::{sgd_step, Matrix, OptimConfig};

/// Feature rows paired with integer labels in some explicit label space
/// (base-only, novel-block-local, or joint), chosen by the caller.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows vs {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(LabeledSet { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(LabeledSet {
            x: self.x.vcat(&other.x)?,
            y,
        })
    }

    /// Labels shifted by a constant offset (e.g. novel-local to joint).
    pub fn offset_labels(&self, offset: usize) -> LabeledSet {
        LabeledSet {
            x: self.x.clone(),
            y: self.y.iter().map(|&l| l + offset).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.y.iter().copied().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Base exemplars drawn once and reused for every replay epoch.
    Lim,
    /// Base exemplars redrawn before each epoch.
    Unlim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// No backbone regularization.
    None,
    /// Squared-L2 pull toward the previous phase's snapshot, weight `lambda`.
    WeightConstraint,
    /// KL distillation of base-class logits from the phase-start model.
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    None,
    /// Track the epoch maximizing harmonic mean on a validation episode.
    HmOnVal,
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr_head: f64,
    pub backbone_lr_multiplier: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub replay_mode: ReplayMode,
    /// Base replay samples drawn per base class; `None` means "use K",
    /// resolved by the caller from the episode's shot count.
    pub base_replay_per_class: Option<usize>,
    pub freeze_base_head: bool,
    pub freeze_norm: bool,
    /// Whether the second-phase loss normalizes over base logits too.
    pub use_base_normalization: bool,
    pub regularizer: Regularizer,
    pub kd_temperature: f64,
    pub early_stop_metric: EarlyStopMetric,
}

impl PhaseConfig {
    /// Base pretraining: plain cross-entropy, full learning rate everywhere.
    pub fn phase1_default() -> Self {
        PhaseConfig {
            epochs: 100,
            lr_head: 1e-2,
            backbone_lr_multiplier: 1.0,
            lambda: 0.0,
            batch_size: 32,
            weight_decay: 0.0,
            replay_mode: ReplayMode::Lim,
            base_replay_per_class: None,
            freeze_base_head: false,
            freeze_norm: false,
            use_base_normalization: false,
            regularizer: Regularizer::None,
            kd_temperature: losses::DEFAULT_KD_TEMPERATURE,
            early_stop_metric: EarlyStopMetric::None,
        }
    }

    /// Novel-class learning: base-normalized CE plus the weight constraint,
    /// frozen base head and normalization statistics, reduced backbone rate.
    pub fn phase2_default() -> Self {
        PhaseConfig {
            epochs: 150,
            lr_head: 1e-2,
            backbone_lr_multiplier: 0.1,
            lambda: 500.0,
            batch_size: 32,
            weight_decay: 0.0,
            replay_mode: ReplayMode::Lim,
            base_replay_per_class: None,
            freeze_base_head: true,
            freeze_norm: true,
            use_base_normalization: true,
            regularizer: Regularizer::WeightConstraint,
            kd_temperature: losses::DEFAULT_KD_TEMPERATURE,
            early_stop_metric: EarlyStopMetric::None,
        }
    }

    /// Balanced-replay fine-tuning over the joint space.
    pub fn phase3_default() -> Self {
        PhaseConfig {
            epochs: 40,
            lr_head: 1e-3,
            backbone_lr_multiplier: 0.1,
            lambda: 0.0,
            batch_size: 32,
            weight_decay: 0.0,
            replay_mode: ReplayMode::Lim,
            base_replay_per_class: None,
            freeze_base_head: false,
            freeze_norm: true,
            use_base_normalization: false,
            regularizer: Regularizer::None,
            kd_temperature: losses::DEFAULT_KD_TEMPERATURE,
            early_stop_metric: EarlyStopMetric::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr_head.is_finite() || self.lr_head <= 0.0 {
            return Err(Error::Config("lr_head must be positive".into()));
        }
        if self.backbone_lr_multiplier < 0.0 {
            return Err(Error::Config("backbone_lr_multiplier must be >= 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn head_optim(&self) -> OptimConfig {
        let mut cfg = OptimConfig::new(self.lr_head);
        cfg.weight_decay = self.weight_decay;
        cfg
    }

    fn backbone_optim(&self) -> OptimConfig {
        self.head_optim().with_lr_scale(self.backbone_lr_multiplier)
    }
}

/// Called after each epoch with (epoch index, mean epoch loss, model).
/// Used for curve logging and for callers implementing epoch selection.
pub type EpochObserver<'a> = &'a mut dyn FnMut(usize, f64, &ModelState);

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn notify(observer: &mut Option<EpochObserver<'_>>, epoch: usize, loss: f64, model: &ModelState) {
    if let Some(obs) = observer {
        obs(epoch, loss, model);
    }
}

/// Adds `lambda * d(l2_wc)` for the backbone-vs-snapshot constraint to the
/// accumulated backbone gradients.
fn add_weight_constraint_grads(model: &mut ModelState, lambda: f64) -> Result<f64> {
    let snap = model.snapshot_ref()?;
    let current: Vec<Matrix> = model
        .backbone
        .named_values()
        .into_iter()
        .map(|(_, m)| m.clone())
        .collect();
    let cur_refs: Vec<&Matrix> = current.iter().collect();
    let snap_refs: Vec<&Matrix> = snap.tensors.iter().map(|(_, m)| m).collect();
    let (value, grads) = losses::l2_wc(&cur_refs, &snap_refs)?;
    for (p, g) in model.backbone.params_mut().into_iter().zip(grads) {
        p.grad.add_scaled(&g, lambda)?;
    }
    Ok(lambda * value)
}

fn step(model: &mut ModelState, cfg: &PhaseConfig) {
    sgd_step(&mut model.backbone.params_mut(), &cfg.backbone_optim());
    let head_cfg = cfg.head_optim();
    sgd_step(&mut model.base_head.params_mut(), &head_cfg);
    for head in &mut model.novel_heads {
        sgd_step(&mut head.params_mut(), &head_cfg);
    }
}

fn slice_cols(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(m.rows(), len, |i, j| m.get(i, start + j))
}

/// One epoch of base pretraining with softmax cross-entropy.
fn phase1_epoch(
    model: &mut ModelState,
    data: &LabeledSet,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in shuffled_batches(data.len(), cfg.batch_size, rng) {
        let set = data.select(&batch);
        model.zero_grad();
        let (emb, tape) = model.backbone.forward(&set.x, true)?;
        let (logits, cache) = model.base_head.forward(&emb)?;
        let (loss, d_logits) = losses::softmax_ce(&logits, &set.y)?;
        let d_emb = model.base_head.backward(&cache, &d_logits)?;
        model.backbone.backward(&tape, &d_emb)?;
        step(model, cfg);
        total += loss * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains the base head and backbone on base classes, then freezes the
/// normalization statistics and stores the backbone snapshot that later
/// phases constrain against.
pub fn run_phase1(
    model: &mut ModelState,
    base_train: &LabeledSet,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<()> {
    cfg.validate()?;
    if base_train.is_empty() {
        return Err(Error::Dataset(
            "phase 1 requires a nonempty base set".into(),
        ));
    }
    for epoch in 0..cfg.epochs {
        let loss = phase1_epoch(model, base_train, cfg, rng)?;
        notify(&mut observer, epoch, loss, model);
    }
    model.backbone.freeze_norm();
    model.snapshot();
    Ok(())
}

/// One epoch of novel-class learning. `novel` carries labels local to the
/// most recent novel head block; the softmax denominator additionally
/// covers the base head and any earlier novel blocks.
fn phase2_epoch(
    model: &mut ModelState,
    novel: &LabeledSet,
    cfg: &PhaseConfig,
    teacher: Option<&mut ModelState>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut teacher = teacher;
    let mut total = 0.0;
    for batch in shuffled_batches(novel.len(), cfg.batch_size, rng) {
        let set = novel.select(&batch);
        model.zero_grad();
        let (emb, tape) = model.backbone.forward(&set.x, true)?;

        let last = model.novel_heads.len() - 1;
        let (new_logits, new_cache) = model.novel_heads[last].forward(&emb)?;
        let (base_logits, base_cache) = model.base_head.forward(&emb)?;
        let mut frozen_caches = Vec::new();
        let mut denom_logits = base_logits;
        for head in &model.novel_heads[..last] {
            let (block, cache) = head.forward(&emb)?;
            denom_logits = denom_logits.hcat(&block)?;
            frozen_caches.push(cache);
        }

        let (mut loss, d_new, d_denom) = if cfg.use_base_normalization {
            let (l, d_new, d_denom) =
                losses::base_normalized_ce(&new_logits, &denom_logits, &set.y)?;
            (l, d_new, Some(d_denom))
        } else {
            let (l, d_new) = losses::softmax_ce(&new_logits, &set.y)?;
            (l, d_new, None)
        };

        let mut d_base = d_denom
            .as_ref()
            .map(|d| slice_cols(d, 0, model.num_base_classes()));
        if let (Regularizer::Distill, Some(t)) = (cfg.regularizer, teacher.as_deref_mut()) {
            let (t_emb, _) = t.backbone.forward(&set.x, false)?;
            let (t_logits, _) = t.base_head.forward(&t_emb)?;
            let (cur_logits, _) = model.base_head.forward(&emb)?;
            let (kd, kd_grad) = losses::kd_kl(&cur_logits, &t_logits, cfg.kd_temperature)?;
            loss += kd;
            d_base = Some(match d_base {
                Some(d) => d.add(&kd_grad)?,
                None => kd_grad,
            });
        }

        let mut d_emb = model.novel_heads[last].backward(&new_cache, &d_new)?;
        if let Some(d_base) = &d_base {
            d_emb.add_scaled(&model.base_head.backward(&base_cache, d_base)?, 1.0)?;
        }
        if let Some(d_denom) = &d_denom {
            let mut col = model.num_base_classes();
            for (k, cache) in frozen_caches.iter().enumerate() {
                let width = model.novel_heads[k].num_classes();
                let d_block = slice_cols(d_denom, col, width);
                d_emb.add_scaled(&model.novel_heads[k].backward(cache, &d_block)?, 1.0)?;
                col += width;
            }
        }
        model.backbone.backward(&tape, &d_emb)?;

        if cfg.regularizer == Regularizer::WeightConstraint && cfg.lambda > 0.0 {
            loss += add_weight_constraint_grads(model, cfg.lambda)?;
        }
        step(model, cfg);
        total += loss * batch.len() as f64;
    }
    Ok(total / novel.len() as f64)
}

fn prepare_phase2(model: &mut ModelState, cfg: &PhaseConfig) {
    model.base_head.set_trainable(!cfg.freeze_base_head);
    let last = model.novel_heads.len() - 1;
    for (k, head) in model.novel_heads.iter_mut().enumerate() {
        head.set_trainable(k == last);
    }
    if let Some(norm) = &mut model.backbone.norm {
        if cfg.freeze_norm {
            norm.freeze();
        } else {
            norm.frozen = false;
            norm.gamma.trainable = true;
            norm.beta.trainable = true;
        }
    }
}

/// Adds a novel head for `novel`'s classes and trains it (and, gently, the
/// backbone) with the calibrated loss, then snapshots the backbone for the
/// replay phase.
pub fn run_phase2(
    model: &mut ModelState,
    novel_train: &LabeledSet,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<()> {
    cfg.validate()?;
    model.snapshot_ref()?;
    let n_classes = novel_train.num_classes();
    if n_classes == 0 {
        return Err(Error::InvalidArgument(
            "phase 2 requires at least one novel class".into(),
        ));
    }
    model.add_novel_head(n_classes, rng);
    prepare_phase2(model, cfg);
    let mut teacher = match cfg.regularizer {
        Regularizer::Distill => Some(model.clone()),
        _ => None,
    };
    for epoch in 0..cfg.epochs {
        let loss = phase2_epoch(model, novel_train, cfg, teacher.as_mut(), rng)?;
        notify(&mut observer, epoch, loss, model);
    }
    model.snapshot();
    Ok(())
}

/// Class-balanced replay set: every sample of `novel` plus `per_class`
/// draws from each base class (without replacement when a class has enough
/// samples). Both inputs carry joint-space labels.
#[derive(Debug, Clone)]
pub struct ReplaySet {
    pub data: LabeledSet,
    /// Row indices into the base set that were drawn, for audit/testing.
    pub base_rows: Vec<usize>,
}

pub fn build_replay_set(
    base: &LabeledSet,
    novel: &LabeledSet,
    per_class: usize,
    rng: &mut impl Rng,
) -> Result<ReplaySet> {
    if base.is_empty() {
        return Err(Error::Dataset("replay requires a nonempty base set".into()));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument(
            "base_replay_per_class must be >= 1".into(),
        ));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in base.y.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut base_rows = Vec::new();
    for rows in by_class.values() {
        if rows.len() >= per_class {
            let picks = rand::seq::index::sample(rng, rows.len(), per_class);
            base_rows.extend(picks.iter().map(|i| rows[i]));
        } else {
            for _ in 0..per_class {
                base_rows.push(rows[rng.gen_range(0..rows.len())]);
            }
        }
    }
    let data = base.select(&base_rows).concat(novel)?;
    Ok(ReplaySet { data, base_rows })
}

/// One epoch of joint-space training on an already-built set with
/// joint-space labels.
fn joint_epoch(
    model: &mut ModelState,
    data: &LabeledSet,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in shuffled_batches(data.len(), cfg.batch_size, rng) {
        let set = data.select(&batch);
        total += joint_batch(model, &set, cfg)? * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn joint_batch(model: &mut ModelState, set: &LabeledSet, cfg: &PhaseConfig) -> Result<f64> {
    model.zero_grad();
    let (emb, tape) = model.backbone.forward(&set.x, true)?;
    let (base_logits, base_cache) = model.base_head.forward(&emb)?;
    let mut caches = Vec::new();
    let mut logits = base_logits;
    for head in &model.novel_heads {
        let (block, cache) = head.forward(&emb)?;
        logits = logits.hcat(&block)?;
        caches.push(cache);
    }
    let (mut loss, d_logits) = losses::softmax_ce(&logits, &set.y)?;
    let d_base = slice_cols(&d_logits, 0, model.num_base_classes());
    let mut d_emb = model.base_head.backward(&base_cache, &d_base)?;
    let mut col = model.num_base_classes();
    for (k, cache) in caches.iter().enumerate() {
        let width = model.novel_heads[k].num_classes();
        let d_block = slice_cols(&d_logits, col, width);
        d_emb.add_scaled(&model.novel_heads[k].backward(cache, &d_block)?, 1.0)?;
        col += width;
    }
    model.backbone.backward(&tape, &d_emb)?;
    if cfg.regularizer == Regularizer::WeightConstraint && cfg.lambda > 0.0 {
        loss += add_weight_constraint_grads(model, cfg.lambda)?;
    }
    step(model, cfg);
    Ok(loss)
}

fn prepare_joint(model: &mut ModelState, cfg: &PhaseConfig) {
    model.base_head.set_trainable(true);
    for head in &mut model.novel_heads {
        head.set_trainable(true);
    }
    if let Some(norm) = &mut model.backbone.norm {
        if cfg.freeze_norm {
            norm.freeze();
        } else {
            norm.frozen = false;
            norm.gamma.trainable = true;
            norm.beta.trainable = true;
        }
    }
}

/// Fine-tunes the whole model on a class-balanced replay mix in the joint
/// space. `base`/`novel` carry joint-space labels; `per_class` is the base
/// exemplar count per class (callers resolve the "default K" rule).
pub fn run_phase3(
    model: &mut ModelState,
    base: &LabeledSet,
    novel: &LabeledSet,
    per_class: usize,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<()> {
    cfg.validate()?;
    if model.novel_heads.is_empty() {
        return Err(Error::NovelHeadAbsent);
    }
    prepare_joint(model, cfg);
    let fixed = match cfg.replay_mode {
        ReplayMode::Lim => Some(build_replay_set(base, novel, per_class, rng)?),
        ReplayMode::Unlim => None,
    };
    for epoch in 0..cfg.epochs {
        let replay;
        let data = match &fixed {
            Some(r) => &r.data,
            None => {
                replay = build_replay_set(base, novel, per_class, rng)?;
                &replay.data
            }
        };
        let loss = joint_epoch(model, data, cfg, rng)?;
        notify(&mut observer, epoch, loss, model);
    }
    Ok(())
}

/// Alternates `period` epochs of novel-only calibrated training with one
/// balanced replay epoch, until `cfg2.epochs` total epochs are consumed.
/// `novel_local` is labeled in the new block's space, `novel_joint` and
/// `base_joint` in the joint space.
#[allow(clippy::too_many_arguments)]
pub fn run_interleaved(
    model: &mut ModelState,
    base_joint: &LabeledSet,
    novel_local: &LabeledSet,
    novel_joint: &LabeledSet,
    period: usize,
    per_class: usize,
    cfg2: &PhaseConfig,
    cfg3: &PhaseConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg2.validate()?;
    cfg3.validate()?;
    if period == 0 {
        return Err(Error::InvalidArgument("period must be >= 1".into()));
    }
    model.snapshot_ref()?;
    model.add_novel_head(novel_local.num_classes(), rng);
    let mut teacher = match cfg2.regularizer {
        Regularizer::Distill => Some(model.clone()),
        _ => None,
    };
    let mut used = 0;
    while used < cfg2.epochs {
        prepare_phase2(model, cfg2);
        let novel_epochs = period.min(cfg2.epochs - used);
        for _ in 0..novel_epochs {
            phase2_epoch(model, novel_local, cfg2, teacher.as_mut(), rng)?;
        }
        used += novel_epochs;
        if used < cfg2.epochs {
            prepare_joint(model, cfg3);
            let replay = build_replay_set(base_joint, novel_joint, per_class, rng)?;
            joint_epoch(model, &replay.data, cfg3, rng)?;
            used += 1;
        }
    }
    model.snapshot();
    Ok(())
}

/// Joint training without a calibration phase: every batch holds exactly
/// `novel_per_batch` novel samples and `base_per_batch` base samples (the
/// latter drawn with replacement from the exemplar pool).
pub fn run_batch_ratio(
    model: &mut ModelState,
    base_pool: &LabeledSet,
    novel_joint: &LabeledSet,
    novel_per_batch: usize,
    base_per_batch: usize,
    cfg: &PhaseConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    if novel_per_batch == 0 || base_per_batch == 0 {
        return Err(Error::InvalidArgument(
            "batch-ratio counts must be >= 1".into(),
        ));
    }
    if model.novel_heads.is_empty() {
        let n_novel = novel_joint
            .num_classes()
            .saturating_sub(model.num_base_classes());
        if n_novel == 0 {
            return Err(Error::InvalidArgument(
                "no novel classes in joint labels".into(),
            ));
        }
        model.add_novel_head(n_novel, rng);
    }
    prepare_joint(model, cfg);
    for _ in 0..cfg.epochs {
        for novel_batch in shuffled_batches(novel_joint.len(), novel_per_batch, rng) {
            let base_rows: Vec<usize> = (0..base_per_batch)
                .map(|_| rng.gen_range(0..base_pool.len()))
                .collect();
            let set = novel_joint
                .select(&novel_batch)
                .concat(&base_pool.select(&base_rows))?;
            joint_batch(model, &set, cfg)?;
        }
    }
    Ok(())
}
